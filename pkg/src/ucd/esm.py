"""Extended semantic maps and same-class probabilities.

The frozen old model only knows the classes of earlier steps, so at step k
the ground truth (which only labels the new classes) is superimposed on the
old model's per-pixel argmax predictions. The merged map supervises all
classes at once; the matching extended probability tensor keeps the old
model's full distribution wherever the ground truth says background, which
is what the uncertainty weighting consumes.

Semantic maps are integer arrays (h, w) at feature resolution; batches are
stacked along a leading axis. Extended probabilities are (h, w, T) float64.
"""

import numpy as np

from .tensor import argmax_last_axis

__all__ = [
    "pseudo_labels",
    "build_esm",
    "extend_probabilities",
    "same_class_probability",
    "esm_for_batch",
    "esm_to_text",
]

_NORM_TOL = 1e-6


def _check_normalized(probs, name):
    sums = probs.sum(axis=-1)
    err = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
    if err > _NORM_TOL:
        raise ValueError(f"{name} rows must sum to 1 (max deviation {err:.3g})")


def pseudo_labels(old_probs):
    """Per-pixel argmax of the old model's class probabilities.

    Ties go to the lowest class index.
    """
    probs = np.asarray(old_probs, dtype=np.float64)
    _check_normalized(probs, "old_probs")
    return argmax_last_axis(probs).astype(np.int64)


def build_esm(gt, pseudo):
    """Superimpose non-background ground truth on top of the pseudo-labels."""
    gt = np.asarray(gt)
    pseudo = np.asarray(pseudo)
    if gt.shape != pseudo.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {pseudo.shape}")
    return np.where(gt != 0, gt, pseudo).astype(np.int64)


def extend_probabilities(old_probs, gt, new_class_count):
    """Extend the old model's distribution over the enlarged class space.

    Background-GT pixels copy the old distribution padded with zeros for the
    new classes; non-background pixels become exact one-hot vectors at the
    ground-truth class.
    """
    probs = np.asarray(old_probs, dtype=np.float64)
    gt = np.asarray(gt)
    if probs.shape[:-1] != gt.shape:
        raise ValueError(f"gt grid {gt.shape} does not match probs {probs.shape[:-1]}")
    _check_normalized(probs, "old_probs")
    t_old = probs.shape[-1]
    t_new = t_old + new_class_count
    if int(gt.max(initial=0)) >= t_new:
        raise ValueError(f"ground-truth class {int(gt.max())} out of range for {t_new} classes")
    out = np.zeros(gt.shape + (t_new,), dtype=np.float64)
    bg = gt == 0
    out[bg, :t_old] = probs[bg]
    fg = ~bg
    out[fg, gt[fg]] = 1.0
    return out


def same_class_probability(pa, pg):
    """Probability that two pixels share a class: the dot product of their
    extended probability vectors."""
    pa = np.asarray(pa, dtype=np.float64).ravel()
    pg = np.asarray(pg, dtype=np.float64).ravel()
    if pa.shape != pg.shape:
        raise ValueError(f"length mismatch {pa.shape[0]} vs {pg.shape[0]}")
    return float(np.dot(pa, pg))


def esm_for_batch(old_probs, gt, new_class_count):
    """Merge pseudo-labels with ground truth for a whole batch.

    old_probs: (n, h, w, T_old) post-softmax old-model probabilities.
    gt: (n, h, w) ground truth at feature resolution (current classes only).
    Returns (esm (n, h, w) int64, extended (n, h, w, T_old + new) float64).
    """
    old_probs = np.asarray(old_probs, dtype=np.float64)
    gt = np.asarray(gt)
    esm = build_esm(gt, pseudo_labels(old_probs))
    extended = extend_probabilities(old_probs, gt, new_class_count)
    return esm, extended


def esm_to_text(esm_map):
    """Debug dump of a single map: one grid row per line."""
    rows = [" ".join(str(int(v)) for v in row) for row in np.asarray(esm_map)]
    return "\n".join(rows) + "\n"
