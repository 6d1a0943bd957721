"""A tiny per-patch segmenter with hand-derived backpropagation.

Each feature-grid cell is one two-layer tanh MLP applied to the image patch
centered on it (reflective padding at borders), followed by a shared linear
classifier. Keeping the network this small makes every gradient exactly
checkable against finite differences.
"""

import copy
import json
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import load_tensor, save_tensor

__all__ = [
    "Segmenter",
    "FrozenSegmenter",
    "init_segmenter",
    "forward",
    "forward_batch",
    "backward",
    "expand_classifier",
    "freeze",
    "sgd_step",
    "save_checkpoint",
    "load_checkpoint",
]

PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wc", "bc")


@dataclass
class Segmenter:
    patch_size: int
    hidden_dim: int
    feature_dim: int
    channels: int
    class_count: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wc: np.ndarray
    bc: np.ndarray

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}


@dataclass
class FrozenSegmenter(Segmenter):
    """Deep copy with read-only parameter arrays; never mutated."""


def init_segmenter(seed, class_count, patch_size=5, hidden_dim=32, feature_dim=16,
                   channels=3):
    if patch_size % 2 == 0:
        raise ValueError("patch_size must be odd")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DE)))
    p = patch_size * patch_size * channels
    weights = {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(p), (p, hidden_dim)),
        "b1": np.zeros(hidden_dim),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), (hidden_dim, feature_dim)),
        "b2": np.zeros(feature_dim),
        "Wc": rng.normal(0.0, 1.0 / np.sqrt(feature_dim), (feature_dim, class_count)),
        "bc": np.zeros(class_count),
    }
    return Segmenter(patch_size=patch_size, hidden_dim=hidden_dim,
                     feature_dim=feature_dim, channels=channels,
                     class_count=class_count, **weights)


def _patch_matrix(model, image, stride):
    """(h*w, patch²*channels) rows of reflect-padded patches at stride centers."""
    image = np.asarray(image, dtype=np.float64)
    height, width, channels = image.shape
    if channels != model.channels:
        raise ValueError(f"expected {model.channels} channels, got {channels}")
    if height % stride or width % stride:
        raise ValueError(f"stride {stride} does not divide image {height}x{width}")
    half = model.patch_size // 2
    padded = np.pad(image, ((half, half), (half, half), (0, 0)), mode="reflect")
    windows = sliding_window_view(padded, (model.patch_size, model.patch_size), axis=(0, 1))
    # cell (i, j) is anchored at pixel (i*stride, j*stride), matching the
    # nearest-neighbor label downsampling convention
    rows = np.arange(0, height, stride)
    cols = np.arange(0, width, stride)
    patches = windows[np.ix_(rows, cols)]  # (h, w, C, ph, pw)
    h, w = len(rows), len(cols)
    return patches.reshape(h * w, -1), h, w


def _forward_parts(model, image, stride):
    x, h, w = _patch_matrix(model, image, stride)
    hidden = np.tanh(x @ model.W1 + model.b1)
    features = np.tanh(hidden @ model.W2 + model.b2)
    # per-column products keep old-class logits bit-identical when the
    # classifier is widened (a single GEMM may change accumulation order)
    logits = np.stack(
        [features @ model.Wc[:, j] + model.bc[j] for j in range(model.class_count)],
        axis=1,
    )
    return x, hidden, features, logits, h, w


def forward(model, image, stride):
    """Feature grid (h, w, D) and logits (h, w, T) at stride resolution."""
    _, _, features, logits, h, w = _forward_parts(model, image, stride)
    return (features.reshape(h, w, model.feature_dim),
            logits.reshape(h, w, model.class_count))


def forward_batch(model, images, stride):
    feats, logits = zip(*(forward(model, img, stride) for img in images))
    return np.stack(feats), np.stack(logits)


def backward(model, image, grad_features, grad_logits, stride):
    """Parameter gradients for one image given dL/dfeatures and dL/dlogits.

    Either upstream gradient may be None (treated as zero).
    """
    x, hidden, features, _, h, w = _forward_parts(model, image, stride)
    cells = h * w
    g_feat = (np.zeros((cells, model.feature_dim)) if grad_features is None
              else np.asarray(grad_features, dtype=np.float64).reshape(cells, model.feature_dim))
    g_logit = (np.zeros((cells, model.class_count)) if grad_logits is None
               else np.asarray(grad_logits, dtype=np.float64).reshape(cells, model.class_count))

    grads = {}
    grads["Wc"] = features.T @ g_logit
    grads["bc"] = g_logit.sum(axis=0)
    g_feat_total = g_feat + g_logit @ model.Wc.T
    d_pre2 = g_feat_total * (1.0 - features * features)
    grads["W2"] = hidden.T @ d_pre2
    grads["b2"] = d_pre2.sum(axis=0)
    d_hidden = d_pre2 @ model.W2.T
    d_pre1 = d_hidden * (1.0 - hidden * hidden)
    grads["W1"] = x.T @ d_pre1
    grads["b1"] = d_pre1.sum(axis=0)
    return grads


def expand_classifier(model, new_count):
    """Append zero-initialized classifier outputs for ``new_count`` classes.

    Old-class logits are bit-identical on any input afterwards.
    """
    if new_count < 0:
        raise ValueError("new_count must be non-negative")
    if new_count == 0:
        return copy.deepcopy(model)
    out = copy.deepcopy(model)
    out.Wc = np.hstack([out.Wc, np.zeros((out.feature_dim, new_count))])
    out.bc = np.concatenate([out.bc, np.zeros(new_count)])
    out.class_count += new_count
    return out


def freeze(model):
    frozen = FrozenSegmenter(
        patch_size=model.patch_size, hidden_dim=model.hidden_dim,
        feature_dim=model.feature_dim, channels=model.channels,
        class_count=model.class_count,
        **{name: model.params()[name].copy() for name in PARAM_NAMES},
    )
    for name in PARAM_NAMES:
        getattr(frozen, name).setflags(write=False)
    return frozen


def sgd_step(model, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """Momentum SGD: v <- momentum*v + grad + weight_decay*param, then
    param <- param - lr*v. Returns (updated model, velocity state)."""
    if velocity is None:
        velocity = {name: np.zeros_like(model.params()[name]) for name in PARAM_NAMES}
    out = copy.deepcopy(model)
    new_velocity = {}
    for name in PARAM_NAMES:
        param = getattr(out, name)
        v = momentum * velocity[name] + grads[name] + weight_decay * param
        setattr(out, name, param - lr * v)
        new_velocity[name] = v
    return out, new_velocity


def save_checkpoint(model, dirpath):
    """Checkpoint directory: manifest.json plus one tensor file per parameter."""
    os.makedirs(dirpath, exist_ok=True)
    manifest = {
        "patch_size": model.patch_size,
        "hidden_dim": model.hidden_dim,
        "feature_dim": model.feature_dim,
        "channels": model.channels,
        "class_count": model.class_count,
        "tensors": list(PARAM_NAMES),
    }
    with open(os.path.join(dirpath, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    for name in PARAM_NAMES:
        save_tensor(os.path.join(dirpath, f"{name}.bin"), model.params()[name])


def load_checkpoint(dirpath):
    with open(os.path.join(dirpath, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    weights = {name: load_tensor(os.path.join(dirpath, f"{name}.bin"))
               for name in manifest["tensors"]}
    return Segmenter(
        patch_size=manifest["patch_size"], hidden_dim=manifest["hidden_dim"],
        feature_dim=manifest["feature_dim"], channels=manifest["channels"],
        class_count=manifest["class_count"], **weights,
    )
