"""Multimodal few-shot meta-learning with task-conditioned kernel modulation.

The package is organized as a small numpy-backed library:

- ``kml.tensor``: dense tensors with reverse-mode autodiff (second order).
- ``kml.tasks``: synthetic multimodal N-way K-shot episode sampling.
- ``kml.network``: base network, task encoder, generator parameter containers.
- ``kml.modulation``: feature-wise modulation, its kernel-space form, and
  low-rank kernel modulation with parameter accounting.
- ``kml.metalearn``: prototype and gradient-based meta-learners and the
  episodic training loop.
- ``kml.transference``: task-to-task knowledge-transfer measurement.
- ``kml.harness``: configuration, checkpoints, reports, and the CLI.
"""

from . import tensor, tasks, network, modulation, metalearn, transference, harness
from .errors import (
    CapacityError,
    ConfigurationError,
    ContractViolation,
    DivergenceError,
    GraphConfigError,
)

__all__ = [
    "tensor",
    "tasks",
    "network",
    "modulation",
    "metalearn",
    "transference",
    "harness",
    "CapacityError",
    "ConfigurationError",
    "ContractViolation",
    "DivergenceError",
    "GraphConfigError",
]

__version__ = "0.1.0"
