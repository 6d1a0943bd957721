"""Experiment configuration: flat key=value files with strict key checking."""

from dataclasses import dataclass, fields

from .tasks import schedule_from_counts

__all__ = ["ExperimentConfig", "parse_config_file", "parse_config_text", "METHODS"]

METHODS = ("ft", "joint", "mib", "plop", "mib_ucd", "plop_ucd", "cd_only", "ucd_only")


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_images: int = 64
    n_test_images: int = 64
    height: int = 16
    width: int = 16
    n_classes: int = 6
    noise_std: float = 0.1
    channels: int = 3
    steps: str = "5-1"          # foreground classes introduced per step
    mode: str = "overlapped"
    method: str = "mib_ucd"
    tau: float = 0.07
    lambda_ucd: float = 0.01
    lambda_kd: float = 10.0
    lambda_pod: float = 0.01
    hidden_dim: int = 16
    feature_dim: int = 8
    patch_size: int = 5
    stride: int = 4
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-2
    lr_later: float = 2e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    out_dir: str = "runs/out"
    chunk_rows: int = 256
    include_old_model_old_classes: bool = True
    pod_scales: str = "1,2"
    plop_threshold: float = 0.0
    plop_class_thresholds: str = ""   # e.g. "1:0.5,3:0.9"
    save_checkpoints: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for name in ("lambda_ucd", "lambda_kd", "lambda_pod"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.height % self.stride or self.width % self.stride:
            raise ValueError("stride must divide the image dimensions")
        counts = self.step_counts()
        if sum(counts) != self.n_classes:
            raise ValueError(
                f"steps {self.steps!r} cover {sum(counts)} classes but n_classes={self.n_classes}"
            )

    def step_counts(self):
        try:
            counts = tuple(int(x) for x in self.steps.split("-"))
        except ValueError as exc:
            raise ValueError(f"malformed steps {self.steps!r}") from exc
        if not counts or any(c < 1 for c in counts):
            raise ValueError(f"malformed steps {self.steps!r}")
        return counts

    def schedule(self):
        return schedule_from_counts(self.step_counts(), self.mode)

    def pod_scale_list(self):
        return tuple(int(x) for x in self.pod_scales.split(",") if x.strip())

    def class_threshold_overrides(self):
        out = {}
        text = self.plop_class_thresholds.strip()
        if not text:
            return out
        for item in text.split(","):
            cls, _, val = item.partition(":")
            out[int(cls)] = float(val)
        return out


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config_text(text):
    """Parse flat key=value lines; unknown keys are an error."""
    by_name = {f.name: f for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in by_name:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        ftype = by_name[key].type
        if ftype is bool or ftype == "bool":
            values[key] = _parse_bool(value)
        elif ftype is int or ftype == "int":
            values[key] = int(value)
        elif ftype is float or ftype == "float":
            values[key] = float(value)
        else:
            values[key] = value
    return ExperimentConfig(**values)


def parse_config_file(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())
