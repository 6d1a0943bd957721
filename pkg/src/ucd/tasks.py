"""Synthetic segmentation data, task schedules, and split semantics.

Images are small grids of colored rectangles and discs on a background.
Class identity is encoded in the channel means, so a tiny per-patch model
can actually learn the task. Label 0 is always the background.
"""

import os
import re
from dataclasses import dataclass

import numpy as np

from .tensor import load_tensor, save_tensor

__all__ = [
    "LabeledImage",
    "TaskSpec",
    "IncrementalSchedule",
    "schedule_from_counts",
    "generate_shapes_dataset",
    "split_schedule",
    "relabel_for_step",
    "downsample_labels",
    "save_dataset",
    "load_dataset",
]

DEFAULT_NOISE_STD = 0.05


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (H, W) int64, 0 = background


@dataclass(frozen=True)
class TaskSpec:
    step_index: int
    class_ids: tuple

    def __post_init__(self):
        if 0 in self.class_ids:
            raise ValueError("background (0) may not appear in a task's class list")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("duplicate class ids within a task")

    @property
    def new_class_count(self):
        return len(self.class_ids)


@dataclass(frozen=True)
class IncrementalSchedule:
    tasks: tuple
    mode: str  # "disjoint" or "overlapped"

    def __post_init__(self):
        if self.mode not in ("disjoint", "overlapped"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        seen = set()
        for task in self.tasks:
            overlap = seen & set(task.class_ids)
            if overlap:
                raise ValueError(f"classes {sorted(overlap)} appear in more than one step")
            seen |= set(task.class_ids)

    @property
    def all_class_ids(self):
        return tuple(c for task in self.tasks for c in task.class_ids)

    def classes_through(self, step_index):
        """All foreground classes introduced up to and including ``step_index``."""
        return tuple(
            c for task in self.tasks if task.step_index <= step_index for c in task.class_ids
        )


def schedule_from_counts(counts, mode):
    """Build a schedule assigning classes 1..K to steps with the given sizes."""
    tasks = []
    next_class = 1
    for k, count in enumerate(counts, start=1):
        if count < 1:
            raise ValueError("every step must introduce at least one class")
        tasks.append(TaskSpec(step_index=k, class_ids=tuple(range(next_class, next_class + count))))
        next_class += count
    return IncrementalSchedule(tasks=tuple(tasks), mode=mode)


def class_palette(n_labels, channels=3):
    """Fixed well-separated colors for labels 0..n_labels-1 (0 = background)."""
    ang = 2.0 * np.pi * np.arange(n_labels) / n_labels
    cols = np.stack(
        [np.sin(ang + 2.0 * np.pi * c / channels) for c in range(channels)], axis=1
    )
    return 0.5 + 0.35 * cols


def _paint_image(rng, height, width, n_classes, channels, noise_std, palette):
    labels = np.zeros((height, width), dtype=np.int64)
    n_shapes = int(rng.integers(1, 5))
    yy, xx = np.mgrid[0:height, 0:width]
    # shapes span a quarter to three quarters of the grid so they survive
    # coarse feature strides
    lo = max(3, min(height, width) // 4)
    hi = max(lo + 1, 3 * min(height, width) // 4)
    for _ in range(n_shapes):
        cls = int(rng.integers(1, n_classes + 1))
        if int(rng.integers(0, 2)) == 0:
            sh = int(rng.integers(lo, hi + 1))
            sw = int(rng.integers(lo, hi + 1))
            h0 = int(rng.integers(0, height - sh + 1))
            w0 = int(rng.integers(0, width - sw + 1))
            labels[h0:h0 + sh, w0:w0 + sw] = cls
        else:
            r = int(rng.integers(max(2, lo // 2), max(3, hi // 2) + 1))
            cy = int(rng.integers(r, height - r))
            cx = int(rng.integers(r, width - r))
            labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
    pixels = palette[labels] + rng.normal(0.0, noise_std, size=(height, width, channels))
    np.clip(pixels, 0.0, 1.0, out=pixels)
    return LabeledImage(pixels=pixels, labels=labels)


def generate_shapes_dataset(seed, n_images, height, width, n_classes,
                            channels=3, noise_std=DEFAULT_NOISE_STD):
    """Deterministic synthetic dataset of shape images.

    Every image derives its own random stream from (seed, image_index), so
    the output is reproducible bit-for-bit and images could be generated in
    any order.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 foreground classes")
    if height < 8 or width < 8:
        raise ValueError("image dimensions must be at least 8")
    palette = class_palette(n_classes + 1, channels)
    images = []
    for i in range(n_images):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        images.append(_paint_image(rng, height, width, n_classes, channels, noise_std, palette))
    return images


def split_schedule(data, schedule, seed):
    """Assign dataset indices to per-step training sets.

    disjoint: an image is eligible for step k if it contains at least one
    pixel of that step's classes; images eligible for several steps go to
    the earliest one, so the result is a partition.
    overlapped: every eligible image is included, so images may repeat.

    Returns a list (one entry per step) of image-index lists, shuffled
    deterministically per step from ``seed``.
    """
    known = {0} | set(schedule.all_class_ids)
    for img in data:
        unknown = set(np.unique(img.labels)) - known
        if unknown:
            raise ValueError(f"dataset contains classes {sorted(unknown)} not in the schedule")

    per_step = [[] for _ in schedule.tasks]
    for idx, img in enumerate(data):
        present = set(np.unique(img.labels))
        for t, task in enumerate(schedule.tasks):
            if present & set(task.class_ids):
                per_step[t].append(idx)
                if schedule.mode == "disjoint":
                    break  # earliest eligible step wins
    for t, task in enumerate(schedule.tasks):
        rng = np.random.default_rng(np.random.SeedSequence((seed, task.step_index, 0x5)))
        order = rng.permutation(len(per_step[t]))
        per_step[t] = [per_step[t][i] for i in order]
    return per_step


def relabel_for_step(labels, task):
    """Keep only the step's classes; everything else becomes background."""
    keep = np.isin(labels, np.asarray(task.class_ids, dtype=labels.dtype))
    return np.where(keep, labels, 0)


def downsample_labels(labels, stride):
    """Nearest-neighbor downsampling: out[i, j] = labels[i*stride, j*stride]."""
    h, w = labels.shape
    if h % stride or w % stride:
        raise ValueError(f"stride {stride} does not divide label grid {h}x{w}")
    return labels[::stride, ::stride]


# Dataset directory format: one binary tensor file per image for pixels and
# labels (labels stored as float64; values are small integers so the round
# trip is exact), plus a plain-text manifest listing ids, shapes, and the
# schedule when one is attached.

def save_dataset(dirpath, images, schedule=None):
    os.makedirs(dirpath, exist_ok=True)
    lines = []
    for i, img in enumerate(images):
        h, w, c = img.pixels.shape
        save_tensor(os.path.join(dirpath, f"img_{i:04d}_pixels.bin"), img.pixels)
        save_tensor(os.path.join(dirpath, f"img_{i:04d}_labels.bin"),
                    img.labels.astype(np.float64))
        lines.append(f"image {i:04d} height {h} width {w} channels {c}")
    if schedule is not None:
        lines.append(f"schedule mode {schedule.mode}")
        for task in schedule.tasks:
            ids = ",".join(str(c) for c in task.class_ids)
            lines.append(f"schedule step {task.step_index} classes {ids}")
    with open(os.path.join(dirpath, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(dirpath):
    with open(os.path.join(dirpath, "manifest.txt"), encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    images = []
    mode = None
    tasks = []
    for line in lines:
        if line.startswith("image "):
            ident = re.match(r"image (\d+) ", line).group(1)
            pixels = load_tensor(os.path.join(dirpath, f"img_{ident}_pixels.bin"))
            labels = load_tensor(os.path.join(dirpath, f"img_{ident}_labels.bin"))
            images.append(LabeledImage(pixels=pixels, labels=labels.astype(np.int64)))
        elif line.startswith("schedule mode "):
            mode = line.split()[-1]
        elif line.startswith("schedule step "):
            m = re.match(r"schedule step (\d+) classes (.+)", line)
            ids = tuple(int(x) for x in m.group(2).split(","))
            tasks.append(TaskSpec(step_index=int(m.group(1)), class_ids=ids))
    schedule = IncrementalSchedule(tasks=tuple(tasks), mode=mode) if mode else None
    return images, schedule
