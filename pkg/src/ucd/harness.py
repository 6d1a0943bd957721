"""Experiment orchestration: incremental training, mIoU evaluation, metrics.

A run executes the configured schedule step by step: train on the step's
images, then evaluate on the held-out set (drawn from seed+1) and on the
full training set, restricting labels to the classes seen so far. Metrics
go to ``metrics.jsonl`` and ``summary.csv``; wall-clock timings go to a
separate ``timing.jsonl`` so the metrics files are byte-reproducible.
"""

import json
import os
import time
from dataclasses import replace

import numpy as np

from .config import ExperimentConfig
from .esm import esm_for_batch
from .losses import (
    LossWeights,
    contrastive_distillation,
    mib_ucd_total,
    mib_unbiased_ce,
    mib_unbiased_kd,
    plop_pseudo_ce,
    plop_ucd_total,
    pod_loss,
    ucd_loss,
)
from .mining import build_contrast_sets
from .model import (
    PARAM_NAMES,
    backward,
    expand_classifier,
    forward,
    forward_batch,
    freeze,
    init_segmenter,
    save_checkpoint,
    sgd_step,
)
from .tasks import (
    TaskSpec,
    downsample_labels,
    generate_shapes_dataset,
    relabel_for_step,
    split_schedule,
)
from .tensor import softmax

__all__ = [
    "accumulate_confusion",
    "per_class_iou",
    "miou",
    "evaluate",
    "train_step_k",
    "run_experiment",
    "compare_report",
]

PLAIN_CE_METHODS = ("ft", "joint", "cd_only", "ucd_only")


# ---------------------------------------------------------------------------
# metrics

def accumulate_confusion(pred, gt, class_ids, counts=None):
    """Per-class (tp, fp, fn) counts, accumulated into ``counts``."""
    if counts is None:
        counts = {c: [0, 0, 0] for c in class_ids}
    for c in class_ids:
        p = pred == c
        g = gt == c
        counts[c][0] += int(np.sum(p & g))
        counts[c][1] += int(np.sum(p & ~g))
        counts[c][2] += int(np.sum(~p & g))
    return counts


def iou_from_counts(counts):
    """IoU per class; classes with an empty union are dropped."""
    out = {}
    for c, (tp, fp, fn) in counts.items():
        union = tp + fp + fn
        if union:
            out[c] = tp / union
    return out


def per_class_iou(pred, gt, class_ids):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return iou_from_counts(accumulate_confusion(pred, gt, class_ids))


def miou(pred, gt, class_count, ignore_background=True):
    """Mean IoU over classes present in prediction or ground truth."""
    start = 1 if ignore_background else 0
    per_class = per_class_iou(pred, gt, list(range(start, class_count)))
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


def _group_mean(per_class, ids):
    vals = [per_class[c] for c in ids if c in per_class]
    return float(np.mean(vals)) if vals else None


def evaluate(model, images, schedule, step_index, stride, ignore_background=True):
    """mIoU of nearest-neighbor-upsampled predictions against full labels,
    restricted to the classes seen through ``step_index``."""
    seen = schedule.classes_through(step_index)
    old = schedule.classes_through(step_index - 1)
    new = tuple(c for c in seen if c not in old)
    eval_ids = list(seen) if ignore_background else [0] + list(seen)
    counts = {c: [0, 0, 0] for c in eval_ids}
    for img in images:
        _, logits = forward(model, img.pixels, stride)
        upsampled = np.repeat(np.repeat(logits, stride, axis=0), stride, axis=1)
        pred = np.argmax(upsampled, axis=-1)
        gt = np.where(np.isin(img.labels, np.asarray(seen)), img.labels, 0)
        accumulate_confusion(pred, gt, eval_ids, counts)
    per_class = iou_from_counts(counts)
    return {
        "per_class_iou": {str(c): per_class[c] for c in sorted(per_class)},
        "miou_old": _group_mean(per_class, old),
        "miou_new": _group_mean(per_class, new),
        "miou_all": _group_mean(per_class, seen),
    }


# ---------------------------------------------------------------------------
# training

def _plop_thresholds(config, t_old):
    thr = np.full(t_old, config.plop_threshold)
    for cls, val in config.class_threshold_overrides().items():
        if 0 <= cls < t_old:
            thr[cls] = val
    return thr


def _batch_loss(config, weights, method, model, pixels, gt_feat, old_feats,
                old_probs, task, t_old):
    """Composite loss and gradients for one batch.

    Returns (composite, pair_count). ``old_feats`` is None during the first
    step; distillation terms are only active when an old model exists, and
    terms whose weight is zero are skipped outright so a zero-weight run
    executes exactly the base method's arithmetic.
    """
    frozen = old_feats is not None
    feats, logits = forward_batch(model, pixels, config.stride)
    esm_map, extended = esm_for_batch(old_probs, gt_feat, task.new_class_count)
    sets = build_contrast_sets(esm_map, task.class_ids,
                               config.include_old_model_old_classes)

    contrast = None
    if frozen and weights.lambda_ucd != 0.0:
        if method in ("mib_ucd", "plop_ucd", "ucd_only"):
            contrast = ucd_loss(feats, old_feats, sets, extended, weights.tau,
                                chunk_rows=config.chunk_rows)
        elif method == "cd_only":
            contrast = contrastive_distillation(feats, old_feats, sets, weights.tau,
                                                chunk_rows=config.chunk_rows)

    if method in ("plop", "plop_ucd"):
        pseudo = plop_pseudo_ce(logits, gt_feat, old_probs,
                                _plop_thresholds(config, old_probs.shape[-1]))
        pod = None
        if frozen and weights.lambda_pod != 0.0:
            pod = pod_loss([feats], [old_feats], config.pod_scale_list())
        composite = plop_ucd_total(pseudo, pod, contrast, weights)
    else:
        old_count = 1 if method in PLAIN_CE_METHODS else t_old
        seg = mib_unbiased_ce(logits, gt_feat, old_count)
        kd = None
        if method in ("mib", "mib_ucd") and frozen and weights.lambda_kd != 0.0:
            kd = mib_unbiased_kd(logits, old_probs)
        composite = mib_ucd_total(seg, kd, contrast, weights)
    return composite, sets.pair_count


def train_step_k(config, model_prev, images, task, step_index, lr):
    """Train one incremental step and return (model, telemetry).

    The previous model is frozen before training; the classifier is expanded
    with zero-initialized outputs for the step's new classes.
    """
    if not images:
        raise ValueError(
            f"step {task.step_index} has no training images; with a disjoint "
            "split on a small dataset, try more images or the overlapped mode")
    weights = LossWeights(lambda_ucd=config.lambda_ucd, lambda_kd=config.lambda_kd,
                          lambda_pod=config.lambda_pod, tau=config.tau)
    if model_prev is None:
        frozen = None
        t_old = 1
        model = init_segmenter(config.seed, class_count=1 + task.new_class_count,
                               patch_size=config.patch_size, hidden_dim=config.hidden_dim,
                               feature_dim=config.feature_dim, channels=config.channels)
    else:
        frozen = freeze(model_prev)
        t_old = model_prev.class_count
        model = expand_classifier(model_prev, task.new_class_count)

    gt_feat_all = np.stack([
        downsample_labels(relabel_for_step(img.labels, task), config.stride)
        for img in images
    ])
    pixels_all = [img.pixels for img in images]
    # the frozen model never changes within a step, so its features and
    # probabilities are computed once and sliced per batch
    if frozen is not None:
        old_feats_all, old_logits_all = forward_batch(frozen, pixels_all, config.stride)
        old_probs_all = softmax(old_logits_all, axis=-1)
    else:
        old_feats_all = None
        old_probs_all = np.ones(gt_feat_all.shape + (1,))

    velocity = None
    curve = {"total": []}
    pair_counts = []
    epoch_seconds = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence(
            (config.seed, task.step_index, epoch, 0xBA7C)))
        order = rng.permutation(len(images))
        epoch_totals = []
        epoch_parts = {}
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            pixels = [pixels_all[i] for i in batch]
            gt_feat = gt_feat_all[batch]
            old_feats = None if old_feats_all is None else old_feats_all[batch]
            composite, pairs = _batch_loss(config, weights, config.method, model,
                                           pixels, gt_feat, old_feats,
                                           old_probs_all[batch], task, t_old)
            pair_counts.append(pairs)
            epoch_totals.append(composite.value)
            for name, val in composite.parts.items():
                epoch_parts.setdefault(name, []).append(val)

            grads = {name: np.zeros_like(model.params()[name]) for name in PARAM_NAMES}
            for i in range(len(pixels)):
                g_feat = None if composite.grad_features is None else composite.grad_features[i]
                g_logit = None if composite.grad_logits is None else composite.grad_logits[i]
                img_grads = backward(model, pixels[i], g_feat, g_logit, config.stride)
                for name in PARAM_NAMES:
                    grads[name] += img_grads[name]
            model, velocity = sgd_step(model, grads, lr, config.momentum,
                                       config.weight_decay, velocity)
        curve["total"].append(float(np.mean(epoch_totals)))
        for name, vals in epoch_parts.items():
            curve.setdefault(name, []).append(float(np.mean(vals)))
        epoch_seconds.append(time.perf_counter() - t0)

    telemetry = {"loss_curve": curve, "pair_counts": pair_counts,
                 "epoch_seconds": epoch_seconds}
    return model, telemetry


# ---------------------------------------------------------------------------
# full runs

def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _csv_cell(value):
    return "nan" if value is None else format(value, ".6f")


def run_experiment(config):
    """Execute the full schedule and write metrics files.

    Returns the paths of the files written. Identical configs produce
    byte-identical ``metrics.jsonl`` and ``summary.csv``.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    schedule = config.schedule()
    train_images = generate_shapes_dataset(config.seed, config.n_images, config.height,
                                           config.width, config.n_classes,
                                           config.channels, config.noise_std)
    test_images = generate_shapes_dataset(config.seed + 1, config.n_test_images,
                                          config.height, config.width, config.n_classes,
                                          config.channels, config.noise_std)
    n_steps = len(schedule.tasks)

    records = []
    timings = []
    model = None
    if config.method == "joint":
        # Upper reference: one pass over everything, with the same total
        # epoch budget an incremental run would get.
        joint_task = TaskSpec(step_index=1, class_ids=schedule.all_class_ids)
        joint_cfg = replace(config, epochs=config.epochs * n_steps)
        model, telemetry = train_step_k(joint_cfg, None, train_images, joint_task, 1,
                                        config.lr)
        _append_step_records(records, timings, config, schedule, n_steps, model,
                             train_images, test_images, telemetry)
    else:
        per_step = split_schedule(train_images, schedule, config.seed)
        for task, indices in zip(schedule.tasks, per_step):
            step_images = [train_images[i] for i in indices]
            lr = config.lr if task.step_index == 1 else config.lr_later
            model, telemetry = train_step_k(config, model, step_images, task,
                                            task.step_index, lr)
            _append_step_records(records, timings, config, schedule, task.step_index,
                                 model, train_images, test_images, telemetry)
            if config.save_checkpoints:
                save_checkpoint(model, os.path.join(config.out_dir,
                                                    f"model_step{task.step_index}"))

    metrics_path = os.path.join(config.out_dir, "metrics.jsonl")
    timing_path = os.path.join(config.out_dir, "timing.jsonl")
    summary_path = os.path.join(config.out_dir, "summary.csv")
    _write_jsonl(metrics_path, records)
    _write_jsonl(timing_path, timings)
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("method,step,split,miou_old,miou_new,miou_all\n")
        for rec in records:
            fh.write(",".join([
                rec["method"], str(rec["step"]), rec["split"],
                _csv_cell(rec["miou_old"]), _csv_cell(rec["miou_new"]),
                _csv_cell(rec["miou_all"]),
            ]) + "\n")
    return {"metrics": metrics_path, "summary": summary_path, "timing": timing_path}


def _append_step_records(records, timings, config, schedule, step_index, model,
                         train_images, test_images, telemetry):
    base = {"method": config.method, "seed": config.seed, "step": step_index}
    train_metrics = evaluate(model, train_images, schedule, step_index, config.stride)
    test_metrics = evaluate(model, test_images, schedule, step_index, config.stride)
    records.append({**base, "split": "train", **train_metrics,
                    "loss_curve": telemetry["loss_curve"],
                    "pair_counts": telemetry["pair_counts"]})
    records.append({**base, "split": "test", **test_metrics})
    timings.append({**base, "epoch_seconds": telemetry["epoch_seconds"]})


# ---------------------------------------------------------------------------
# reporting

def _load_records(path):
    if path.endswith(".csv"):
        records = []
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            for line in fh:
                cells = line.strip().split(",")
                rec = dict(zip(header, cells))
                for key in ("miou_old", "miou_new", "miou_all"):
                    rec[key] = None if rec[key] == "nan" else float(rec[key])
                rec["step"] = int(rec["step"])
                records.append(rec)
        return records
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def compare_report(paths, mean_steps=False):
    """Aligned old/new/all mIoU table (test split) across metrics files.

    With ``mean_steps`` the groups are averaged over every step's final
    evaluation instead of reporting the last step only.
    """
    rows = []
    for path in paths:
        recs = [r for r in _load_records(path) if r["split"] == "test"]
        if not recs:
            continue
        if mean_steps:
            agg = {}
            for key in ("miou_old", "miou_new", "miou_all"):
                vals = [r[key] for r in recs if r[key] is not None]
                agg[key] = float(np.mean(vals)) if vals else None
            step = "mean"
        else:
            final = max(recs, key=lambda r: r["step"])
            agg = {key: final[key] for key in ("miou_old", "miou_new", "miou_all")}
            step = str(final["step"])
        rows.append((recs[0]["method"], step, agg))

    lines = [f"{'method':<10} {'step':>5} {'miou_old':>9} {'miou_new':>9} {'miou_all':>9}"]
    for method, step, agg in rows:
        cells = [f"{agg[k]:9.4f}" if agg[k] is not None else f"{'nan':>9}"
                 for k in ("miou_old", "miou_new", "miou_all")]
        lines.append(f"{method:<10} {step:>5} " + " ".join(cells))
    return "\n".join(lines)
