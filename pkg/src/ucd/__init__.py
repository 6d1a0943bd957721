"""Uncertainty-aware contrastive distillation for incremental semantic
segmentation, scaled down to synthetic shape images so every loss, index
set, and gradient can be verified exactly.

Subpackage map: :mod:`ucd.tensor` numeric primitives, :mod:`ucd.tasks`
synthetic data and schedules, :mod:`ucd.esm` extended semantic maps,
:mod:`ucd.mining` contrast sets and the similarity kernel,
:mod:`ucd.losses` loss functions with analytic gradients, :mod:`ucd.model`
the per-patch segmenter, :mod:`ucd.harness` experiment orchestration, and
:mod:`ucd.cli` the command line.
"""

from .mining import HAVE_COMPILED

__all__ = ["HAVE_COMPILED"]
__version__ = "0.1.0"
