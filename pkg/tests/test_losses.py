import math

import numpy as np
import pytest

from ucd.esm import esm_for_batch
from ucd.gradcheck import random_contrast_instance
from ucd.losses import (
    LossWeights,
    contrastive_distillation,
    finite_difference_gradient,
    log_contrast,
    max_rel_error,
    mib_ucd_total,
    mib_unbiased_ce,
    mib_unbiased_kd,
    negative_weights,
    plop_pseudo_ce,
    plop_ucd_total,
    pod_loss,
    ucd_loss,
)
from ucd.mining import build_contrast_sets
from ucd.tensor import softmax

from oracles import (
    contrast_loss_naive,
    mib_ce_naive,
    mib_kd_naive,
    plop_pseudo_naive,
    pod_loss_naive,
)


def _gather_lists(sets, feats, old_feats, probs=None):
    """Index batches into the flat per-pixel lists the naive oracle expects."""
    a_feats = [feats[p.image, p.row, p.col] for p in sets.anchors]
    o_feats = [old_feats[p.image, p.row, p.col] for p in sets.old_indices]
    a_labels = list(sets.anchor_labels)
    o_labels = list(sets.contrast_labels[sets.n_anchors:])
    if probs is None:
        return a_feats, o_feats, a_labels, o_labels, None, None
    a_probs = [probs[p.image, p.row, p.col] for p in sets.anchors]
    o_probs = [probs[p.image, p.row, p.col] for p in sets.old_indices]
    return a_feats, o_feats, a_labels, o_labels, a_probs, o_probs


# ---------------------------------------------------------------------------
# log-contrast

def test_log_contrast_single_negative():
    val = log_contrast((1.0, 0.0), (1.0, 0.0), [(0.0, 1.0)], tau=1.0)
    assert val == pytest.approx(1.0, abs=1e-12)


def test_log_contrast_two_negatives():
    val = log_contrast((1.0, 0.0), (1.0, 0.0), [(0.0, 1.0), (0.0, -1.0)], tau=1.0)
    assert val == pytest.approx(1.0 - math.log(2.0), abs=1e-12)


def test_log_contrast_frozen_oracle():
    # value frozen from an independent direct-formula script
    anchor = (1.0, 2.0, -1.0, 0.5)
    positive = (0.5, 1.5, 0.0, 1.0)
    negatives = [(1.0, -1.0, 1.0, 0.0), (-2.0, 0.0, 0.5, 1.0)]
    val = log_contrast(anchor, positive, negatives, tau=0.07)
    assert val == pytest.approx(17.02334153401969, rel=1e-12)


def test_log_contrast_requires_negatives():
    with pytest.raises(ValueError):
        log_contrast((1.0, 0.0), (1.0, 0.0), [], tau=1.0)


def test_negative_weights_peak_with_falling_temperature():
    sims = [0.9, 0.1, -0.4]
    peaks = [negative_weights(sims, tau).max() for tau in (1.0, 0.1, 0.07)]
    assert peaks[0] < peaks[1] < peaks[2]


# ---------------------------------------------------------------------------
# contrastive distillation

def test_cd_symmetric_two_anchor_case():
    # two identical same-class features against one orthogonal negative
    feats = np.zeros((1, 1, 3, 3))
    feats[0, 0, 0] = [1.0, 0.0, 0.0]
    feats[0, 0, 1] = [1.0, 0.0, 0.0]
    feats[0, 0, 2] = [0.0, 1.0, 0.0]
    esm = np.array([[[1, 1, 2]]])
    sets = build_contrast_sets(esm, (1, 2))
    res = contrastive_distillation(feats, feats, sets, tau=1.0)
    # anchors 0 and 1 each score L_lc = 1; anchor 2 has no positives
    assert res.value == pytest.approx(-1.0, abs=1e-12)
    assert [a for a, _ in res.per_anchor_terms] == [0, 1]


def test_cd_empty_contrast_warns_not_raises():
    feats = np.ones((1, 1, 2, 2))
    esm = np.array([[[1, 1]]])  # one class, no old pixels -> no negatives
    sets = build_contrast_sets(esm, (1,))
    res = contrastive_distillation(feats, feats, sets, tau=1.0)
    assert res.value == 0.0
    assert res.warning is not None
    assert not res.grad.any()


def test_cd_matches_triple_loop_oracle():
    rng = np.random.default_rng(10)
    for _ in range(10):
        new_feats, old_feats, sets, _ = random_contrast_instance(rng)
        res = contrastive_distillation(new_feats, old_feats, sets, tau=0.07)
        a_f, o_f, a_l, o_l, _, _ = _gather_lists(sets, new_feats, old_feats)
        expected = contrast_loss_naive(a_f, o_f, a_l, o_l, tau=0.07)
        assert res.value == pytest.approx(expected, abs=1e-10)


def test_ucd_matches_triple_loop_oracle():
    rng = np.random.default_rng(11)
    for _ in range(10):
        new_feats, old_feats, sets, extended = random_contrast_instance(rng)
        res = ucd_loss(new_feats, old_feats, sets, extended, tau=0.07)
        a_f, o_f, a_l, o_l, a_p, o_p = _gather_lists(sets, new_feats, old_feats, extended)
        expected = contrast_loss_naive(a_f, o_f, a_l, o_l, 0.07, a_p, o_p)
        assert res.value == pytest.approx(expected, abs=1e-10)


def test_ucd_reduces_to_cd_for_one_hot_consistent_probs():
    rng = np.random.default_rng(12)
    gt = rng.integers(1, 4, size=(2, 3, 3))  # no background: P-bar is one-hot
    old_probs = np.ones(gt.shape + (1,))
    esm, extended = esm_for_batch(old_probs, gt, 3)
    sets = build_contrast_sets(esm, (3,))
    feats = rng.normal(size=(2, 3, 3, 5))
    old_feats = rng.normal(size=(2, 3, 3, 5))
    cd = contrastive_distillation(feats, old_feats, sets, tau=0.07)
    ucd = ucd_loss(feats, old_feats, sets, extended, tau=0.07)
    assert ucd.value == cd.value  # exact reduction, not approximate
    np.testing.assert_array_equal(ucd.grad, cd.grad)


def test_ucd_orthogonal_probabilities_contribute_zero():
    # same merged class but disjoint probability support: sigma = 0 kills the pull
    feats = np.zeros((1, 1, 3, 4))
    feats[0, 0, 0] = [1.0, 0.2, 0.0, 0.0]
    feats[0, 0, 1] = [0.9, -0.1, 0.0, 0.0]
    feats[0, 0, 2] = [0.0, 0.0, 1.0, 0.0]
    esm = np.array([[[1, 1, 2]]])
    sets = build_contrast_sets(esm, (1, 2))
    extended = np.zeros((1, 1, 3, 3))
    extended[0, 0, 0] = [1.0, 0.0, 0.0]   # anchor 0
    extended[0, 0, 1] = [0.0, 1.0, 0.0]   # its positive: orthogonal
    extended[0, 0, 2] = [0.0, 0.0, 1.0]
    res = ucd_loss(feats, feats, sets, extended, tau=0.5)
    assert res.value == 0.0


def test_ucd_gradient_four_anchor_fixture():
    rng = np.random.default_rng(13)
    while True:
        new_feats, old_feats, sets, extended = random_contrast_instance(
            rng, n_images=1, h=2, w=2, dim=4, n_classes=2, new_class_ids=(2,))
        if sets.n_anchors >= 3:
            break
    res = ucd_loss(new_feats, old_feats, sets, extended, tau=0.07)
    fd = finite_difference_gradient(
        lambda x: ucd_loss(x, old_feats, sets, extended, tau=0.07).value,
        new_feats, 1e-5)
    assert max_rel_error(res.grad, fd) < 1e-5


def test_contrast_scale_invariance():
    rng = np.random.default_rng(14)
    new_feats, old_feats, sets, extended = random_contrast_instance(rng)
    base_cd = contrastive_distillation(new_feats, old_feats, sets, 0.07).value
    base_ucd = ucd_loss(new_feats, old_feats, sets, extended, 0.07).value
    scaled = new_feats.copy()
    p = sets.anchors[0]
    scaled[p.image, p.row, p.col] *= 3.7
    assert contrastive_distillation(scaled, old_feats, sets, 0.07).value == \
        pytest.approx(base_cd, abs=1e-10)
    assert ucd_loss(scaled, old_feats, sets, extended, 0.07).value == \
        pytest.approx(base_ucd, abs=1e-10)


def test_contrast_rejects_bad_tau():
    rng = np.random.default_rng(15)
    new_feats, old_feats, sets, _ = random_contrast_instance(rng)
    with pytest.raises(ValueError):
        contrastive_distillation(new_feats, old_feats, sets, tau=0.0)


# ---------------------------------------------------------------------------
# MiB losses

def test_mib_ce_equals_standard_ce_without_background():
    rng = np.random.default_rng(16)
    logits = rng.normal(size=(3, 3, 4))
    gt = rng.integers(1, 4, size=(3, 3))
    res = mib_unbiased_ce(logits, gt, old_class_count=2)
    log_probs = np.log(softmax(logits, axis=-1))
    expected = -np.mean([log_probs[i, j, gt[i, j]] for i in range(3) for j in range(3)])
    assert res.value == pytest.approx(expected, abs=1e-12)


def test_mib_ce_folds_old_mass_for_background():
    # uniform logits over 4 classes, 2 old classes + background + 1 new
    logits = np.zeros((1, 1, 4))
    gt = np.zeros((1, 1), dtype=int)
    res = mib_unbiased_ce(logits, gt, old_class_count=3)
    assert res.value == pytest.approx(-math.log(0.75), abs=1e-12)


def test_mib_ce_matches_naive_oracle():
    rng = np.random.default_rng(17)
    for _ in range(10):
        logits = rng.normal(0, 2, size=(3, 3, 5))
        gt = rng.integers(0, 5, size=(3, 3))
        res = mib_unbiased_ce(logits, gt, 3)
        assert res.value == pytest.approx(mib_ce_naive(logits, gt, 3), abs=1e-10)


def test_mib_ce_gradient():
    rng = np.random.default_rng(18)
    logits = rng.normal(size=(3, 3, 5))
    gt = rng.integers(0, 5, size=(3, 3))
    res = mib_unbiased_ce(logits, gt, 3)
    fd = finite_difference_gradient(lambda x: mib_unbiased_ce(x, gt, 3).value,
                                    logits, 1e-5)
    assert max_rel_error(res.grad, fd) < 1e-5


def test_mib_ce_rejects_out_of_range_class():
    with pytest.raises(ValueError):
        mib_unbiased_ce(np.zeros((1, 1, 3)), np.array([[7]]), 2)


def test_mib_kd_loss_is_old_entropy_when_reproduced():
    # new logits reproduce the old distribution with no mass on new classes
    old = np.array([[[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]],
                    [[1 / 3, 1 / 3, 1 / 3], [0.05, 0.9, 0.05]]])
    logits = np.full((2, 2, 5), -1e3)
    logits[..., :3] = np.log(old)
    res = mib_unbiased_kd(logits, old)
    # frozen mean-entropy fixture from an independent script
    assert res.value == pytest.approx(0.8551521797592265, abs=1e-12)


def test_mib_kd_folded_limit():
    # old model certain of background; new model spreads mass over bg + new
    old = np.array([[[1.0, 0.0, 0.0]]])
    logits = np.array([[[50.0, -50.0, -50.0, 50.0, 50.0]]])
    res = mib_unbiased_kd(logits, old)
    assert res.value == pytest.approx(0.0, abs=1e-12)


def test_mib_kd_no_new_classes_is_standard_distillation():
    rng = np.random.default_rng(19)
    logits = rng.normal(size=(2, 2, 3))
    old = softmax(rng.normal(size=(2, 2, 3)), axis=-1)
    res = mib_unbiased_kd(logits, old)
    log_p = np.log(softmax(logits, axis=-1))
    expected = float(-(old * log_p).sum(axis=-1).mean())
    assert res.value == pytest.approx(expected, abs=1e-12)


def test_mib_kd_matches_naive_oracle():
    rng = np.random.default_rng(20)
    for _ in range(10):
        logits = rng.normal(0, 2, size=(2, 3, 5))
        old = softmax(rng.normal(size=(2, 3, 3)), axis=-1)
        res = mib_unbiased_kd(logits, old)
        assert res.value == pytest.approx(mib_kd_naive(logits, old), abs=1e-10)


def test_mib_kd_gradient():
    rng = np.random.default_rng(21)
    logits = rng.normal(size=(2, 3, 5))
    old = softmax(rng.normal(size=(2, 3, 3)), axis=-1)
    res = mib_unbiased_kd(logits, old)
    fd = finite_difference_gradient(lambda x: mib_unbiased_kd(x, old).value,
                                    logits, 1e-5)
    assert max_rel_error(res.grad, fd) < 1e-5


def test_mib_kd_rejects_unnormalized():
    with pytest.raises(ValueError):
        mib_unbiased_kd(np.zeros((1, 1, 3)), np.array([[[0.9, 0.9]]]))


# ---------------------------------------------------------------------------
# POD

def test_pod_identical_layers_zero():
    rng = np.random.default_rng(22)
    layers = [rng.normal(size=(4, 4, 3))]
    res = pod_loss(layers, [l.copy() for l in layers])
    assert res.value == 0.0
    assert not res.grad[0].any()


def test_pod_single_cell_case():
    # single 1x1x1 layer: width+height pooling duplicates the cell
    res = pod_loss([np.full((1, 1, 1), 3.0)], [np.full((1, 1, 1), 1.0)], scales=(1,))
    assert res.value == pytest.approx(8.0, abs=1e-12)
    assert res.grad[0][0, 0, 0] == pytest.approx(8.0, abs=1e-12)


def test_pod_matches_naive_oracle():
    rng = np.random.default_rng(23)
    new_layers = [rng.normal(size=(4, 4, 3)), rng.normal(size=(2, 2, 2))]
    old_layers = [rng.normal(size=(4, 4, 3)), rng.normal(size=(2, 2, 2))]
    res = pod_loss(new_layers, old_layers, scales=(1, 2))
    expected = pod_loss_naive(new_layers, old_layers, (1, 2))
    assert res.value == pytest.approx(expected, abs=1e-10)


def test_pod_gradient_two_layers():
    rng = np.random.default_rng(24)
    new_layers = [rng.normal(size=(4, 4, 2)), rng.normal(size=(2, 2, 3))]
    old_layers = [rng.normal(size=(4, 4, 2)), rng.normal(size=(2, 2, 3))]
    res = pod_loss(new_layers, old_layers, scales=(1, 2))
    for li in range(2):
        def value_of(x, li=li):
            swapped = list(new_layers)
            swapped[li] = x
            return pod_loss(swapped, old_layers, scales=(1, 2)).value
        fd = finite_difference_gradient(value_of, new_layers[li], 1e-5)
        assert max_rel_error(res.grad[li], fd) < 1e-5


def test_pod_zero_iff_embeddings_equal():
    # different features with identical row and column sums: loss must be zero
    new = np.zeros((2, 2, 1))
    new[0, 0, 0], new[1, 1, 0] = 1.0, 1.0
    old = np.zeros((2, 2, 1))
    old[0, 1, 0], old[1, 0, 0] = 1.0, 1.0
    res = pod_loss([new], [old], scales=(1,))
    assert res.value == pytest.approx(0.0, abs=1e-15)
    # and strictly positive when the embeddings differ
    res2 = pod_loss([new], [np.zeros((2, 2, 1))], scales=(1,))
    assert res2.value > 0.0


def test_pod_shape_mismatch():
    with pytest.raises(ValueError):
        pod_loss([np.zeros((2, 2, 1))], [np.zeros((2, 3, 1))])
    with pytest.raises(ValueError):
        pod_loss([np.zeros((3, 3, 1))], [np.zeros((3, 3, 1))], scales=(2,))


# ---------------------------------------------------------------------------
# PLOP pseudo cross-entropy

def test_plop_zero_thresholds_accept_everything():
    rng = np.random.default_rng(25)
    logits = rng.normal(size=(3, 3, 5))
    gt = rng.integers(0, 5, size=(3, 3))
    old = softmax(rng.normal(size=(3, 3, 3)), axis=-1)
    res = plop_pseudo_ce(logits, gt, old, 0.0)
    # ratio 1: plain CE against the merged pseudo-targets
    targets = np.where(gt == 0, old.argmax(axis=-1), gt)
    log_p = np.log(softmax(logits, axis=-1))
    expected = -np.mean([log_p[i, j, targets[i, j]] for i in range(3) for j in range(3)])
    assert res.value == pytest.approx(expected, abs=1e-12)


def test_plop_unreachable_thresholds():
    rng = np.random.default_rng(26)
    logits = rng.normal(size=(2, 2, 4))
    old = softmax(rng.normal(size=(2, 2, 2)), axis=-1)
    gt_all_bg = np.zeros((2, 2), dtype=int)
    res = plop_pseudo_ce(logits, gt_all_bg, old, 1.0 + 1e-9)
    assert res.value == 0.0
    assert not res.grad.any()


def test_plop_mixed_fixture_matches_rule_oracle():
    rng = np.random.default_rng(27)
    for _ in range(10):
        logits = rng.normal(size=(3, 3, 5))
        gt = rng.integers(0, 5, size=(3, 3))
        old = softmax(rng.normal(0, 2, size=(3, 3, 3)), axis=-1)
        res = plop_pseudo_ce(logits, gt, old, 0.5)
        expected = plop_pseudo_naive(logits, gt, old, 0.5)
        assert res.value == pytest.approx(expected, abs=1e-10)


def test_plop_gradient():
    rng = np.random.default_rng(28)
    logits = rng.normal(size=(3, 3, 5))
    gt = rng.integers(0, 5, size=(3, 3))
    old = softmax(rng.normal(size=(3, 3, 3)), axis=-1)
    res = plop_pseudo_ce(logits, gt, old, 0.4)
    fd = finite_difference_gradient(
        lambda x: plop_pseudo_ce(x, gt, old, 0.4).value, logits, 1e-5)
    assert max_rel_error(res.grad, fd) < 1e-5


# ---------------------------------------------------------------------------
# composites

def _composite_fixture(seed=29):
    rng = np.random.default_rng(seed)
    new_feats, old_feats, sets, extended = random_contrast_instance(rng)
    n, h, w, _ = new_feats.shape
    t_new, t_old = 5, 3
    logits = rng.normal(size=(n, h, w, t_new))
    gt = rng.integers(0, t_new, size=(n, h, w))
    old_probs = softmax(rng.normal(size=(n, h, w, t_old)), axis=-1)
    seg = mib_unbiased_ce(logits, gt, t_old)
    kd = mib_unbiased_kd(logits, old_probs)
    ucd = ucd_loss(new_feats, old_feats, sets, extended, 0.07)
    return seg, kd, ucd


def test_mib_total_zero_weights_is_seg_alone():
    seg, kd, ucd = _composite_fixture()
    weights = LossWeights(lambda_ucd=0.0, lambda_kd=0.0, lambda_pod=0.0)
    total = mib_ucd_total(seg, kd, ucd, weights)
    assert total.value == pytest.approx(seg.value, abs=1e-15)


def test_mib_total_paper_defaults_linearity():
    seg, kd, ucd = _composite_fixture()
    weights = LossWeights()
    total = mib_ucd_total(seg, kd, ucd, weights)
    expected = seg.value + 10.0 * kd.value + 0.01 * ucd.value
    assert total.value == pytest.approx(expected, abs=1e-12)
    np.testing.assert_allclose(total.grad_logits, seg.grad + 10.0 * kd.grad, atol=1e-15)
    np.testing.assert_allclose(total.grad_features, 0.01 * ucd.grad, atol=1e-15)


def test_mib_total_doubling_lambda_doubles_contribution():
    seg, kd, ucd = _composite_fixture()
    base = mib_ucd_total(seg, kd, None, LossWeights()).value
    one = mib_ucd_total(seg, kd, ucd, LossWeights(lambda_ucd=0.01)).value
    two = mib_ucd_total(seg, kd, ucd, LossWeights(lambda_ucd=0.02)).value
    assert two - base == pytest.approx(2.0 * (one - base), rel=1e-9)


def test_plop_total_composition():
    rng = np.random.default_rng(30)
    new_feats, old_feats, sets, extended = random_contrast_instance(rng)
    n, h, w, _ = new_feats.shape
    logits = rng.normal(size=(n, h, w, 4))
    gt = rng.integers(0, 4, size=(n, h, w))
    old_probs = softmax(rng.normal(size=(n, h, w, 3)), axis=-1)
    pseudo = plop_pseudo_ce(logits, gt, old_probs, 0.0)
    pod = pod_loss([new_feats], [old_feats], scales=(1,))
    ucd = ucd_loss(new_feats, old_feats, sets, extended, 0.07)
    weights = LossWeights()
    total = plop_ucd_total(pseudo, pod, ucd, weights)
    expected = pseudo.value + 0.01 * pod.value + 0.01 * ucd.value
    assert total.value == pytest.approx(expected, abs=1e-12)
    np.testing.assert_allclose(
        total.grad_features, 0.01 * pod.grad[0] + 0.01 * ucd.grad, atol=1e-15)


def test_loss_weights_defaults_and_validation():
    weights = LossWeights()
    assert (weights.tau, weights.lambda_ucd, weights.lambda_pod, weights.lambda_kd) == \
        (0.07, 0.01, 0.01, 10.0)
    with pytest.raises(ValueError):
        LossWeights(tau=0.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_kd=-1.0)


# ---------------------------------------------------------------------------
# finite differences

def test_fd_gradient_of_sum_is_ones():
    x = np.arange(6, dtype=float).reshape(2, 3)
    fd = finite_difference_gradient(lambda t: float(t.sum()), x, 1e-5)
    np.testing.assert_allclose(fd, np.ones((2, 3)), atol=1e-9)


def test_fd_gradient_of_half_square_norm_is_x():
    rng = np.random.default_rng(31)
    x = rng.normal(size=(3, 2))
    fd = finite_difference_gradient(lambda t: 0.5 * float((t * t).sum()), x, 1e-5)
    np.testing.assert_allclose(fd, x, atol=1e-9)


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda t: 0.0, np.zeros(2), 0.0)
