"""Finite-difference certification of every analytic gradient.

Instances are random but seeded; the checker treats each loss as a black
box of its differentiated input and compares against central differences.
"""

import numpy as np

from .esm import esm_for_batch
from .losses import (
    contrastive_distillation,
    finite_difference_gradient,
    max_rel_error,
    mib_unbiased_ce,
    mib_unbiased_kd,
    plop_pseudo_ce,
    pod_loss,
    ucd_loss,
)
from .mining import build_contrast_sets
from .tensor import softmax

__all__ = ["random_contrast_instance", "gradcheck", "LOSS_NAMES"]

LOSS_NAMES = ("ucd", "cd", "mib_ce", "mib_kd", "pod", "plop_pseudo")


def random_contrast_instance(rng, n_images=2, h=3, w=3, dim=5, n_classes=3,
                             new_class_ids=(3,)):
    """A small batch with mined contrast sets and extended probabilities.

    Regenerates until at least one anchor has both positives and negatives,
    so the objective is non-degenerate.
    """
    t_old = 1 + n_classes - len(new_class_ids)
    while True:
        gt = rng.integers(0, n_classes + 1, size=(n_images, h, w))
        old_logits = rng.normal(0.0, 2.0, size=(n_images, h, w, t_old))
        old_probs = softmax(old_logits, axis=-1)
        esm_map, extended = esm_for_batch(old_probs, gt, len(new_class_ids))
        sets = build_contrast_sets(esm_map, new_class_ids)
        pos_ok = sets.positive_mask.any(axis=1)
        neg_ok = sets.negative_mask.any(axis=1)
        if np.any(pos_ok & neg_ok):
            break
    new_feats = rng.normal(0.0, 1.0, size=(n_images, h, w, dim))
    old_feats = rng.normal(0.0, 1.0, size=(n_images, h, w, dim))
    return new_feats, old_feats, sets, extended


def _check_ucd(rng, tau, h_step):
    new_feats, old_feats, sets, extended = random_contrast_instance(rng)
    res = ucd_loss(new_feats, old_feats, sets, extended, tau)
    fd = finite_difference_gradient(
        lambda x: ucd_loss(x, old_feats, sets, extended, tau).value, new_feats, h_step)
    return max_rel_error(res.grad, fd)


def _check_cd(rng, tau, h_step):
    new_feats, old_feats, sets, _ = random_contrast_instance(rng)
    res = contrastive_distillation(new_feats, old_feats, sets, tau)
    fd = finite_difference_gradient(
        lambda x: contrastive_distillation(x, old_feats, sets, tau).value,
        new_feats, h_step)
    return max_rel_error(res.grad, fd)


def _check_mib_ce(rng, tau, h_step):
    t_new, old_count = 5, 3
    gt = rng.integers(0, t_new, size=(3, 3))
    logits = rng.normal(0.0, 1.5, size=(3, 3, t_new))
    res = mib_unbiased_ce(logits, gt, old_count)
    fd = finite_difference_gradient(
        lambda x: mib_unbiased_ce(x, gt, old_count).value, logits, h_step)
    return max_rel_error(res.grad, fd)


def _check_mib_kd(rng, tau, h_step):
    t_new, t_old = 5, 3
    logits = rng.normal(0.0, 1.5, size=(3, 3, t_new))
    old_probs = softmax(rng.normal(0.0, 1.5, size=(3, 3, t_old)), axis=-1)
    res = mib_unbiased_kd(logits, old_probs)
    fd = finite_difference_gradient(
        lambda x: mib_unbiased_kd(x, old_probs).value, logits, h_step)
    return max_rel_error(res.grad, fd)


def _check_pod(rng, tau, h_step):
    shapes = [(4, 4, 3), (2, 2, 2)]
    new_layers = [rng.normal(size=s) for s in shapes]
    old_layers = [rng.normal(size=s) for s in shapes]
    res = pod_loss(new_layers, old_layers, scales=(1, 2))
    errs = []
    for li in range(len(shapes)):
        def value_of(x, li=li):
            swapped = list(new_layers)
            swapped[li] = x
            return pod_loss(swapped, old_layers, scales=(1, 2)).value
        fd = finite_difference_gradient(value_of, new_layers[li], h_step)
        errs.append(max_rel_error(res.grad[li], fd))
    return max(errs)


def _check_plop_pseudo(rng, tau, h_step):
    t_new, t_old = 5, 3
    gt = rng.integers(0, t_new, size=(3, 3))
    logits = rng.normal(0.0, 1.5, size=(3, 3, t_new))
    old_probs = softmax(rng.normal(0.0, 1.5, size=(3, 3, t_old)), axis=-1)
    thr = np.full(t_old, 0.4)
    res = plop_pseudo_ce(logits, gt, old_probs, thr)
    fd = finite_difference_gradient(
        lambda x: plop_pseudo_ce(x, gt, old_probs, thr).value, logits, h_step)
    return max_rel_error(res.grad, fd)


_CHECKS = {
    "ucd": _check_ucd,
    "cd": _check_cd,
    "mib_ce": _check_mib_ce,
    "mib_kd": _check_mib_kd,
    "pod": _check_pod,
    "plop_pseudo": _check_plop_pseudo,
}


def gradcheck(seed=0, instances=20, tau=0.07, h_step=1e-5):
    """Worst relative FD disagreement per loss over ``instances`` random
    instances each."""
    results = {}
    for i, name in enumerate(LOSS_NAMES):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        worst = 0.0
        for _ in range(instances):
            worst = max(worst, _CHECKS[name](rng, tau, h_step))
        results[name] = worst
    return results
