"""Contrast index sets and the chunked masked similarity kernel.

Anchors are the non-background pixels of the extended semantic map; old
contrast pixels are those whose merged label is an earlier step's class.
Features for both lists are compared all-at-once in a similarity matrix of
shape (anchors, anchors + old), computed by unit-normalizing every vector
once and then running row-block products. Chunking (and the UCD_THREADS
thread cap) changes only wall-clock time, never the result.

The row-block product itself is the hot loop. A compiled Cython kernel is
used when the extension built; otherwise a pure-numpy fallback is selected
at import. Override with UCD_KERNEL=python|compiled.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernel_py

try:
    from . import _simkernel
except ImportError:
    _simkernel = None

HAVE_COMPILED = _simkernel is not None

__all__ = [
    "PixelIndex",
    "ContrastSets",
    "HAVE_COMPILED",
    "default_backend",
    "mine_anchors",
    "mine_old_indices",
    "build_contrast_sets",
    "contrast_pair_count",
    "gather_features",
    "similarity_matrix",
    "batch_similarity",
]

DEFAULT_CHUNK_ROWS = 256


@dataclass(frozen=True, order=True)
class PixelIndex:
    image: int
    row: int
    col: int


def default_backend():
    forced = os.environ.get("UCD_KERNEL", "").strip().lower()
    if forced == "python":
        return "python"
    if forced == "compiled":
        if not HAVE_COMPILED:
            raise RuntimeError("UCD_KERNEL=compiled but the extension is not built")
        return "compiled"
    return "compiled" if HAVE_COMPILED else "python"


def _thread_count():
    try:
        return max(1, int(os.environ.get("UCD_THREADS", "1")))
    except ValueError:
        return 1


def _indices_from_mask(mask):
    return [PixelIndex(int(n), int(r), int(c)) for n, r, c in np.argwhere(mask)]


def mine_anchors(esm):
    """All non-background pixels, in (image, row, col) order."""
    return _indices_from_mask(np.asarray(esm) != 0)


def mine_old_indices(esm, new_class_ids):
    """Pixels whose merged label is neither background nor a current class."""
    esm = np.asarray(esm)
    mask = (esm != 0) & ~np.isin(esm, np.asarray(list(new_class_ids), dtype=esm.dtype))
    return _indices_from_mask(mask)


def contrast_pair_count(n_anchors, n_old):
    """Anchor/contrast pairs after self-exclusion: |R| * (|R| + |S| - 1)."""
    return n_anchors * max(0, n_anchors + n_old - 1)


@dataclass
class ContrastSets:
    """Index sets plus per-anchor membership masks over the contrast list.

    The contrast list is [new-model features at anchors] ++ [old-model
    features at old_indices]; an anchor's own column is excluded from both
    masks, so positives, negatives and {self} tile each row exactly.
    """

    anchors: list
    old_indices: list
    anchor_labels: np.ndarray    # (R,)
    contrast_labels: np.ndarray  # (R + S,)
    positive_mask: np.ndarray    # (R, R + S) bool
    negative_mask: np.ndarray    # (R, R + S) bool
    new_class_ids: tuple = field(default_factory=tuple)

    @property
    def n_anchors(self):
        return len(self.anchors)

    @property
    def n_old(self):
        return len(self.old_indices)

    @property
    def n_contrast(self):
        return len(self.anchors) + len(self.old_indices)

    @property
    def pair_count(self):
        return contrast_pair_count(self.n_anchors, self.n_old)


def build_contrast_sets(esm, new_class_ids, include_old_model_old_classes=True):
    """Mine anchors and old-model indices and derive positive/negative masks.

    ``include_old_model_old_classes=False`` drops the old-model contrast
    features entirely (the pair-count ablation switch); everything else
    keeps the full semantics.
    """
    esm = np.asarray(esm)
    anchors = mine_anchors(esm)
    old_indices = (
        mine_old_indices(esm, new_class_ids) if include_old_model_old_classes else []
    )
    anchor_labels = np.array([esm[p.image, p.row, p.col] for p in anchors], dtype=np.int64)
    old_labels = np.array([esm[p.image, p.row, p.col] for p in old_indices], dtype=np.int64)
    contrast_labels = np.concatenate([anchor_labels, old_labels]) if anchors else np.zeros(0, np.int64)

    n_r = len(anchors)
    same = anchor_labels[:, None] == contrast_labels[None, :]
    positive = same.copy()
    negative = ~same
    diag = np.arange(n_r)
    positive[diag, diag] = False
    negative[diag, diag] = False
    return ContrastSets(
        anchors=anchors,
        old_indices=old_indices,
        anchor_labels=anchor_labels,
        contrast_labels=contrast_labels,
        positive_mask=positive,
        negative_mask=negative,
        new_class_ids=tuple(new_class_ids),
    )


def gather_features(feats, indices):
    """Gather (len(indices), D) feature rows from a (n, h, w, D) batch."""
    feats = np.asarray(feats, dtype=np.float64)
    if not indices:
        return np.zeros((0, feats.shape[-1]))
    n = np.array([p.image for p in indices])
    r = np.array([p.row for p in indices])
    c = np.array([p.col for p in indices])
    return feats[n, r, c]


def _normalize_rows(mat, index_list, what):
    norms = np.linalg.norm(mat, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        i = int(bad[0])
        where = index_list[i] if index_list is not None and i < len(index_list) else f"position {i}"
        raise ValueError(f"zero-norm {what} feature at {where}")
    return mat / norms[:, None], norms


def similarity_matrix(anchor_feats, old_feats, chunk_rows=DEFAULT_CHUNK_ROWS,
                      anchor_index=None, old_index=None, backend=None):
    """Cosine similarities between anchors and the full contrast list.

    Rows are the anchors; columns are [anchors ++ old]. Every vector is
    normalized once, then row blocks of ``chunk_rows`` are filled by the
    selected kernel. Entries are clamped into [-1, 1].
    """
    if chunk_rows < 1:
        raise ValueError("chunk_rows must be >= 1")
    anchor_feats = np.ascontiguousarray(anchor_feats, dtype=np.float64)
    old_feats = np.ascontiguousarray(old_feats, dtype=np.float64)
    if old_feats.size and anchor_feats.size and old_feats.shape[1] != anchor_feats.shape[1]:
        raise ValueError("anchor and old feature dimensions differ")

    n_r = anchor_feats.shape[0]
    if n_r == 0:
        return np.zeros((0, old_feats.shape[0]))
    u_anchor, _ = _normalize_rows(anchor_feats, anchor_index, "anchor")
    if old_feats.shape[0]:
        u_old, _ = _normalize_rows(old_feats, old_index, "old-model")
        contrast = np.ascontiguousarray(np.vstack([u_anchor, u_old]))
    else:
        contrast = np.ascontiguousarray(u_anchor)

    backend = backend or default_backend()
    if backend == "compiled":
        if not HAVE_COMPILED:
            raise RuntimeError("compiled kernel requested but unavailable")
        kernel = _simkernel.unit_rows_product
    elif backend == "python":
        kernel = _kernel_py.unit_rows_product
    else:
        raise ValueError(f"unknown backend {backend!r}")

    out = np.empty((n_r, contrast.shape[0]))
    spans = [(s, min(s + chunk_rows, n_r)) for s in range(0, n_r, chunk_rows)]
    threads = _thread_count()
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda sp: kernel(u_anchor, contrast, out, sp[0], sp[1]), spans))
    else:
        for start, stop in spans:
            kernel(u_anchor, contrast, out, start, stop)
    np.clip(out, -1.0, 1.0, out=out)
    return out


def batch_similarity(new_feats, old_feats, sets, chunk_rows=DEFAULT_CHUNK_ROWS, backend=None):
    """Similarity matrix for mined sets over batch feature grids."""
    anchor_rows = gather_features(new_feats, sets.anchors)
    old_rows = gather_features(old_feats, sets.old_indices)
    return similarity_matrix(anchor_rows, old_rows, chunk_rows,
                             anchor_index=sets.anchors, old_index=sets.old_indices,
                             backend=backend)
