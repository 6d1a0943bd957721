"""Loss functions with analytic gradients, plus the finite-difference oracle.

The contrastive family (log-contrast, contrastive distillation, and its
uncertainty-weighted variant) is evaluated through the batched similarity
matrix. Gradients with respect to the new model's features account for
both roles a feature plays: as the anchor of its own row and as a contrast
column in every other anchor's row. Old-model features are constants.

All returned values are quantities to MINIMIZE. Cross-entropy style losses
accept any leading shape before the class axis and average over it, so the
same function serves single images and stacked batches.
"""

from dataclasses import dataclass, field

import numpy as np

from .mining import DEFAULT_CHUNK_ROWS, gather_features, similarity_matrix
from .tensor import argmax_last_axis, cosine_similarity, log_sum_exp, softmax

__all__ = [
    "LossResult",
    "LossWeights",
    "CompositeLoss",
    "log_contrast",
    "negative_weights",
    "contrastive_distillation",
    "ucd_loss",
    "mib_unbiased_ce",
    "mib_unbiased_kd",
    "pod_loss",
    "plop_pseudo_ce",
    "mib_ucd_total",
    "plop_ucd_total",
    "finite_difference_gradient",
    "max_rel_error",
]


@dataclass
class LossResult:
    value: float
    grad: object = None  # ndarray matching the differentiated input, or a list of them
    per_anchor_terms: list = None
    warning: str = None


@dataclass
class LossWeights:
    """Loss-combination weights; defaults are the shipped configuration."""

    lambda_ucd: float = 0.01
    lambda_kd: float = 10.0
    lambda_pod: float = 0.01
    tau: float = 0.07

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for name in ("lambda_ucd", "lambda_kd", "lambda_pod"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class CompositeLoss:
    value: float
    grad_logits: np.ndarray = None
    grad_features: np.ndarray = None
    parts: dict = field(default_factory=dict)


def log_contrast(anchor, positive, negatives, tau):
    """Similarity of the anchor-positive pair against the anchor's negatives.

    Computed as delta(a, pos)/tau - log sum exp over delta(a, neg)/tau.
    """
    if len(negatives) == 0:
        raise ValueError("log_contrast needs at least one negative")
    pos_term = cosine_similarity(anchor, positive) / tau
    return pos_term - log_sum_exp([cosine_similarity(anchor, v) / tau for v in negatives])


def negative_weights(neg_similarities, tau):
    """Softmax weights the denominator assigns the negatives at temperature tau."""
    s = np.asarray(neg_similarities, dtype=np.float64) / tau
    e = np.exp(s - s.max())
    return e / e.sum()


def _contrast_core(new_feats, old_feats, sets, tau, sigma, chunk_rows, backend=None):
    """Shared evaluation of the contrastive distillation objective.

    sigma is an (R, contrast) weight matrix for positive pairs (None means
    all ones). Anchors lacking either positives or negatives are dropped
    from the average and from the normalizer.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    new_feats = np.asarray(new_feats, dtype=np.float64)
    grad = np.zeros_like(new_feats)
    n_r, n_m = sets.n_anchors, sets.n_contrast
    if n_r == 0:
        return LossResult(0.0, grad, [], warning="no anchors in batch")

    anchor_rows = gather_features(new_feats, sets.anchors)
    old_rows = gather_features(old_feats, sets.old_indices)
    sim = similarity_matrix(anchor_rows, old_rows, chunk_rows,
                            anchor_index=sets.anchors, old_index=sets.old_indices,
                            backend=backend)
    norm_a = np.linalg.norm(anchor_rows, axis=1)
    units_a = anchor_rows / norm_a[:, None]
    contrast_rows = np.vstack([anchor_rows, old_rows]) if len(old_rows) else anchor_rows
    norm_c = np.linalg.norm(contrast_rows, axis=1)
    units_c = contrast_rows / norm_c[:, None]

    pos, neg = sets.positive_mask, sets.negative_mask
    g_sizes = pos.sum(axis=1)
    h_sizes = neg.sum(axis=1)
    valid = (g_sizes > 0) & (h_sizes > 0)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return LossResult(0.0, grad, [],
                          warning="every anchor lacks positives or negatives")

    weights = np.ones((n_r, n_m)) if sigma is None else np.clip(sigma, 0.0, 1.0)
    scaled = sim / tau

    # log-sum-exp and softmax over each anchor's negatives, max-subtracted
    neg_scores = np.where(neg, scaled, -np.inf)
    row_max = np.max(neg_scores, axis=1)
    safe_max = np.where(np.isfinite(row_max), row_max, 0.0)
    exps = np.where(neg, np.exp(neg_scores - safe_max[:, None]), 0.0)
    z = exps.sum(axis=1)
    z_safe = np.where(h_sizes > 0, z, 1.0)
    lse = safe_max + np.log(z_safe)
    soft = exps / z_safe[:, None]

    sigma_sum = (weights * pos).sum(axis=1)
    pos_sum = (weights * pos * scaled).sum(axis=1)
    inv_g = np.where(valid, 1.0 / np.maximum(g_sizes, 1), 0.0)
    terms = -inv_g * (pos_sum - sigma_sum * lse)
    value = float(terms.sum() / n_valid)
    per_anchor = [(int(a), float(terms[a])) for a in np.flatnonzero(valid)]

    # coefficients dL/d(sim): positives get -sigma/g, negatives get
    # +sigma_sum * softmax/g, all over (n_valid * tau)
    coeff = np.where(pos, -weights, 0.0) + np.where(neg, sigma_sum[:, None] * soft, 0.0)
    coeff *= (inv_g / (n_valid * tau))[:, None]

    cs = coeff * sim
    grad_rows = (coeff @ units_c - cs.sum(axis=1)[:, None] * units_a) / norm_a[:, None]
    grad_cols = (coeff[:, :n_r].T @ units_a
                 - cs[:, :n_r].sum(axis=0)[:, None] * units_c[:n_r]) / norm_c[:n_r, None]
    total = grad_rows + grad_cols
    for i, p in enumerate(sets.anchors):
        grad[p.image, p.row, p.col] += total[i]
    return LossResult(value, grad, per_anchor)


def contrastive_distillation(new_feats, old_feats, sets, tau,
                             chunk_rows=DEFAULT_CHUNK_ROWS, backend=None):
    """Batch contrastive distillation over mined positive/negative sets."""
    return _contrast_core(new_feats, old_feats, sets, tau, None, chunk_rows, backend)


def ucd_loss(new_feats, old_feats, sets, extended_probs, tau,
             chunk_rows=DEFAULT_CHUNK_ROWS, backend=None):
    """Uncertainty-weighted contrastive distillation.

    Each positive pair is scaled by the probability the two pixels share a
    class (dot product of their extended probability vectors); those
    probabilities depend only on the frozen model and the ground truth, so
    they are constants for the gradient.
    """
    probs = np.asarray(extended_probs, dtype=np.float64)
    p_anchor = gather_features(probs, sets.anchors)
    p_old = gather_features(probs, sets.old_indices)
    p_contrast = np.vstack([p_anchor, p_old]) if len(p_old) else p_anchor
    sigma = p_anchor @ p_contrast.T if sets.n_anchors else np.zeros((0, 0))
    return _contrast_core(new_feats, old_feats, sets, tau, sigma, chunk_rows, backend)


def _flatten_pixels(logits, gt):
    logits = np.asarray(logits, dtype=np.float64)
    gt = np.asarray(gt)
    if logits.shape[:-1] != gt.shape:
        raise ValueError(f"logit grid {logits.shape[:-1]} does not match labels {gt.shape}")
    n_classes = logits.shape[-1]
    if gt.size and (int(gt.min()) < 0 or int(gt.max()) >= n_classes):
        raise ValueError("label out of range for logit width")
    return logits.reshape(-1, n_classes), gt.reshape(-1)


def mib_unbiased_ce(new_logits, gt, old_class_count):
    """Cross-entropy that folds old-class probability mass into background.

    For background-labeled pixels the target probability is the sum of the
    probabilities of background and every class known before this step
    (``old_class_count`` includes the background entry, so passing 1 gives
    plain cross-entropy).
    """
    flat_logits, flat_gt = _flatten_pixels(new_logits, gt)
    n_pix, n_classes = flat_logits.shape
    if not 1 <= old_class_count <= n_classes:
        raise ValueError("old_class_count out of range")
    probs = softmax(flat_logits, axis=1)
    bg = flat_gt == 0
    fold_mass = probs[:, :old_class_count].sum(axis=1)
    target = np.where(bg, fold_mass, probs[np.arange(n_pix), flat_gt])
    value = float(-np.log(target).mean())

    grad = probs.copy()
    fg = ~bg
    grad[fg, flat_gt[fg]] -= 1.0
    if bg.any():
        scale = probs[bg] / fold_mass[bg, None]
        grad[bg, :old_class_count] = probs[bg, :old_class_count] - scale[:, :old_class_count]
        grad[bg, old_class_count:] = probs[bg, old_class_count:]
    grad /= n_pix
    return LossResult(value, grad.reshape(np.shape(new_logits)))


def mib_unbiased_kd(new_logits, old_probs):
    """Distill the old model's distribution, folding new-class mass into
    the background entry of the new model's distribution."""
    logits = np.asarray(new_logits, dtype=np.float64)
    old = np.asarray(old_probs, dtype=np.float64)
    if logits.shape[:-1] != old.shape[:-1]:
        raise ValueError("logit and old-probability grids do not match")
    t_new, t_old = logits.shape[-1], old.shape[-1]
    if t_old > t_new:
        raise ValueError("old distribution wider than the new logits")
    sums = old.sum(axis=-1)
    if sums.size and float(np.max(np.abs(sums - 1.0))) > 1e-6:
        raise ValueError("old_probs rows must sum to 1")

    flat_logits = logits.reshape(-1, t_new)
    flat_old = old.reshape(-1, t_old)
    n_pix = flat_logits.shape[0]
    probs = softmax(flat_logits, axis=1)
    folded_bg = probs[:, 0] + probs[:, t_old:].sum(axis=1)
    log_hat = np.empty_like(flat_old)
    log_hat[:, 0] = np.log(folded_bg)
    log_hat[:, 1:] = np.log(probs[:, 1:t_old])
    value = float(-(flat_old * log_hat).sum(axis=1).mean())

    in_fold = np.zeros(t_new, dtype=bool)
    in_fold[0] = True
    in_fold[t_old:] = True
    grad = probs.copy()
    grad -= flat_old[:, 0:1] * probs * in_fold[None, :] / folded_bg[:, None]
    grad[:, 1:t_old] -= flat_old[:, 1:]
    grad /= n_pix
    return LossResult(value, grad.reshape(logits.shape))


def _pod_layer(new, old, scales):
    """Squared distance between multi-scale pooled embeddings of one layer,
    plus its gradient with respect to the new features."""
    h, w, _ = new.shape
    grad = np.zeros_like(new)
    sq = 0.0
    for s in scales:
        if h % s or w % s:
            raise ValueError(f"scale {s} does not divide feature grid {h}x{w}")
        hs, ws = h // s, w // s
        for bi in range(s):
            for bj in range(s):
                rn = new[bi * hs:(bi + 1) * hs, bj * ws:(bj + 1) * ws]
                ro = old[bi * hs:(bi + 1) * hs, bj * ws:(bj + 1) * ws]
                d_w = rn.sum(axis=0) - ro.sum(axis=0)  # pooled along height
                d_h = rn.sum(axis=1) - ro.sum(axis=1)  # pooled along width
                sq += float((d_w * d_w).sum() + (d_h * d_h).sum())
                grad[bi * hs:(bi + 1) * hs, bj * ws:(bj + 1) * ws] += (
                    2.0 * d_w[None, :, :] + 2.0 * d_h[:, None, :]
                )
    return sq, grad


def pod_loss(new_layers, old_layers, scales=(1, 2)):
    """Mean over layers of the squared pooled-embedding distance.

    Layers may be (h, w, D) single images or (n, h, w, D) batches; batches
    are averaged over images.
    """
    if len(new_layers) != len(old_layers):
        raise ValueError("layer lists differ in length")
    if not new_layers:
        raise ValueError("pod_loss needs at least one layer")
    n_layers = len(new_layers)
    total = 0.0
    grads = []
    for new, old in zip(new_layers, old_layers):
        new = np.asarray(new, dtype=np.float64)
        old = np.asarray(old, dtype=np.float64)
        if new.shape != old.shape:
            raise ValueError(f"layer shape mismatch {new.shape} vs {old.shape}")
        if new.ndim == 3:
            sq, grad = _pod_layer(new, old, scales)
            total += sq / n_layers
            grads.append(grad / n_layers)
        elif new.ndim == 4:
            n = new.shape[0]
            grad = np.zeros_like(new)
            sq = 0.0
            for i in range(n):
                sq_i, grad_i = _pod_layer(new[i], old[i], scales)
                sq += sq_i / n
                grad[i] = grad_i / n
            total += sq / n_layers
            grads.append(grad / n_layers)
        else:
            raise ValueError("pod layers must be rank 3 or 4")
    return LossResult(float(total), grads)


def plop_pseudo_ce(new_logits, gt, old_probs, thresholds=0.0):
    """Cross-entropy against thresholded pseudo-labels.

    Background pixels take the old model's argmax when its confidence
    reaches that class's threshold; the rest of the background pixels are
    excluded. The whole sum is scaled by the acceptance ratio (1 when there
    are no background candidates at all).
    """
    flat_logits, flat_gt = _flatten_pixels(new_logits, gt)
    old = np.asarray(old_probs, dtype=np.float64)
    t_old = old.shape[-1]
    flat_old = old.reshape(-1, t_old)
    if flat_old.shape[0] != flat_logits.shape[0]:
        raise ValueError("old probability grid does not match the logits")
    thr = np.asarray(thresholds, dtype=np.float64)
    if thr.ndim == 0:
        thr = np.full(t_old, float(thr))
    elif thr.shape != (t_old,):
        raise ValueError(f"need one threshold per old class, got {thr.shape}")

    n_pix, _ = flat_logits.shape
    probs = softmax(flat_logits, axis=1)
    old_conf = flat_old.max(axis=1)
    old_arg = argmax_last_axis(flat_old)
    candidates = flat_gt == 0
    accepted = candidates & (old_conf >= thr[old_arg])
    n_cand = int(candidates.sum())
    ratio = float(accepted.sum()) / n_cand if n_cand else 1.0

    included = ~candidates | accepted
    target = np.where(candidates, old_arg, flat_gt)
    log_p = np.log(probs[np.arange(n_pix), target])
    value = float(-(ratio / n_pix) * log_p[included].sum())

    grad = np.zeros_like(probs)
    idx = np.flatnonzero(included)
    grad[idx] = probs[idx]
    grad[idx, target[idx]] -= 1.0
    grad *= ratio / n_pix
    return LossResult(value, grad.reshape(np.shape(new_logits)))


def mib_ucd_total(seg, kd, ucd, weights):
    """seg + lambda_kd * kd + lambda_ucd * ucd; omitted terms contribute
    nothing and leave the remaining arithmetic untouched."""
    value = seg.value
    grad_logits = None if seg.grad is None else seg.grad.copy()
    grad_features = None
    parts = {"seg": seg.value}
    if kd is not None:
        value += weights.lambda_kd * kd.value
        parts["kd"] = kd.value
        if kd.grad is not None:
            grad_logits = grad_logits + weights.lambda_kd * kd.grad
    if ucd is not None:
        value += weights.lambda_ucd * ucd.value
        parts["ucd"] = ucd.value
        if ucd.grad is not None:
            grad_features = weights.lambda_ucd * ucd.grad
    return CompositeLoss(float(value), grad_logits, grad_features, parts)


def plop_ucd_total(pseudo, pod, ucd, weights):
    """pseudo + lambda_pod * pod + lambda_ucd * ucd.

    The contrastive term acts on the same feature tensor as the last pooled
    layer, which is where this model distills from.
    """
    value = pseudo.value
    grad_logits = None if pseudo.grad is None else pseudo.grad.copy()
    grad_features = None
    parts = {"pseudo": pseudo.value}
    if pod is not None:
        value += weights.lambda_pod * pod.value
        parts["pod"] = pod.value
        if pod.grad is not None:
            grad_features = weights.lambda_pod * pod.grad[-1]
    if ucd is not None:
        value += weights.lambda_ucd * ucd.value
        parts["ucd"] = ucd.value
        if ucd.grad is not None:
            add = weights.lambda_ucd * ucd.grad
            grad_features = add if grad_features is None else grad_features + add
    return CompositeLoss(float(value), grad_logits, grad_features, parts)


def finite_difference_gradient(loss_fn, x, h):
    """Central differences of a scalar black-box function, coordinate-wise."""
    if h <= 0:
        raise ValueError("step size must be positive")
    work = np.array(x, dtype=np.float64)
    grad = np.zeros_like(work)
    flat = work.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(loss_fn(work))
        flat[i] = orig - h
        f_minus = float(loss_fn(work))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_rel_error(analytic, reference, floor=1e-6):
    """Worst per-coordinate relative disagreement between two gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(r)), floor)
    return float(np.max(np.abs(a - r) / denom))
