"""Task-to-task knowledge transfer measured by loss ratios.

For a source task i and target task j at parameters theta_t, take one SGD
step of rate alpha on the source's query loss (after its own adaptation),
then compare the target's query loss after vs before:

    lr = L_j(theta after step on i) / L_j(theta_t)

Values below one are constructive transfer, above one destructive. Records
are mutually independent: every source steps from the same unmodified
snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ContractViolation
from .metalearn import MetaLearnerConfig, ModelParams, TrainState, episode_loss
from .tasks import TaskInstance
from .tensor import Tensor, grad, grad2

POSITIVE = "positive"
NEGATIVE = "negative"
NEUTRAL = "neutral"


@dataclass(frozen=True)
class NeutralBand:
    """Half-width of the loss-ratio interval around 1 labeled neutral."""

    epsilon: float = 0.01

    def __post_init__(self):
        if self.epsilon < 0:
            raise ContractViolation("epsilon must be non-negative")


@dataclass(frozen=True)
class TransferenceRecord:
    iteration: int
    source_task_id: int
    target_task_id: int
    source_mode: int
    target_mode: int
    loss_before: float
    loss_after: float
    lr: float
    label: str
    degenerate: bool = False


def task_query_loss(params: ModelParams, task: TaskInstance, cfg: MetaLearnerConfig) -> float:
    """The learner's query loss on one task (adaptation included), as a value."""
    loss, _ = episode_loss(params, task, cfg, training=False)
    return loss.item()


def step_wrt_task(params: ModelParams, task: TaskInstance, alpha: float,
                  cfg: MetaLearnerConfig) -> ModelParams:
    """Parameters after one SGD step on the task's query loss.

    All trainable parameters (base plus modulation networks) are stepped
    jointly; the input snapshot is unmutated and alpha = 0 returns it as is.
    """
    if alpha < 0:
        raise ContractViolation("alpha must be non-negative")
    if alpha == 0.0:
        return params
    loss, _ = episode_loss(params, task, cfg, training=True)
    wrt = params.trainable()
    if cfg.kind == "maml":
        gs = grad2(loss, wrt, first_order=cfg.first_order)
    else:
        gs = grad(loss, wrt)
    new = [Tensor(p.data - alpha * g.data, requires_grad=True, dtype=p.dtype)
           for p, g in zip(wrt, gs)]
    return params.with_tensors(new)


def classify(record: TransferenceRecord, band: NeutralBand) -> str:
    """Partition (0, inf) into positive / neutral / negative around lr = 1."""
    if record.degenerate:
        return NEUTRAL
    return _classify_value(record.lr, band)


def _classify_value(lr: float, band: NeutralBand) -> str:
    if abs(lr - 1.0) <= band.epsilon:
        return NEUTRAL
    return POSITIVE if lr < 1.0 else NEGATIVE


def loss_ratio(params: ModelParams, source: TaskInstance, target: TaskInstance,
               alpha: float, cfg: MetaLearnerConfig,
               band: NeutralBand = NeutralBand(), iteration: int = 0) -> TransferenceRecord:
    """One before/after loss-ratio evaluation (self-transference allowed)."""
    before = task_query_loss(params, target, cfg)
    stepped = step_wrt_task(params, source, alpha, cfg)
    after = task_query_loss(stepped, target, cfg)
    if before == 0.0:
        return TransferenceRecord(
            iteration=iteration, source_task_id=source.task_id, target_task_id=target.task_id,
            source_mode=source.mode_id, target_mode=target.mode_id,
            loss_before=before, loss_after=after, lr=float("nan"),
            label=NEUTRAL, degenerate=True,
        )
    lr = after / before
    return TransferenceRecord(
        iteration=iteration, source_task_id=source.task_id, target_task_id=target.task_id,
        source_mode=source.mode_id, target_mode=target.mode_id,
        loss_before=before, loss_after=after, lr=lr,
        label=_classify_value(lr, band),
    )


def measure_transference(state: TrainState, sources: Sequence[TaskInstance],
                         target: TaskInstance, alpha: float,
                         band: NeutralBand = NeutralBand()) -> list[TransferenceRecord]:
    """One record per source, all from the same unmodified snapshot."""
    if not sources:
        raise ContractViolation("need at least one source task")
    with threadpool_limits(limits=1):
        return [
            loss_ratio(state.params, s, target, alpha, state.cfg, band, iteration=state.iteration)
            for s in sources
        ]


@dataclass(frozen=True)
class HistogramSummary:
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    underflow: int
    overflow: int
    pct_positive: float
    pct_negative: float
    pct_neutral: float
    mean_lr: float
    records: int
    degenerate: int
    epsilon: float


def summarize(records: Sequence[TransferenceRecord], bins: int = 40,
              band: NeutralBand = NeutralBand(),
              lr_range: tuple[float, float] = (0.0, 2.0)) -> HistogramSummary:
    """Loss-ratio histogram with fixed bin edges and label percentages.

    Degenerate records are excluded; percentages are over the remainder and
    sum to 100.
    """
    if not records:
        raise ContractViolation("need at least one record")
    live = [r for r in records if not r.degenerate]
    if not live:
        raise ContractViolation("all records are degenerate")
    lrs = np.array([r.lr for r in live])
    labels = [_classify_value(r.lr, band) for r in live]
    n = len(live)
    edges = np.linspace(lr_range[0], lr_range[1], bins + 1)
    counts, _ = np.histogram(lrs, bins=edges)
    return HistogramSummary(
        edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
        underflow=int(np.sum(lrs < edges[0])),
        overflow=int(np.sum(lrs > edges[-1])),
        pct_positive=100.0 * labels.count(POSITIVE) / n,
        pct_negative=100.0 * labels.count(NEGATIVE) / n,
        pct_neutral=100.0 * labels.count(NEUTRAL) / n,
        mean_lr=float(np.mean(lrs)),
        records=len(records),
        degenerate=len(records) - n,
        epsilon=band.epsilon,
    )


def average_transference(snapshots: Sequence[tuple[int, ModelParams]],
                         sources: Sequence[TaskInstance],
                         targets: Sequence[TaskInstance],
                         alpha: float, cfg: MetaLearnerConfig,
                         band: NeutralBand = NeutralBand()) -> list[tuple[int, float]]:
    """Mean loss ratio over sources, then over targets, per snapshot."""
    if not snapshots:
        raise ContractViolation("need at least one snapshot")
    curve = []
    with threadpool_limits(limits=1):
        for iteration, params in snapshots:
            per_target = []
            for tgt in targets:
                ratios = [
                    loss_ratio(params, s, tgt, alpha, cfg, band, iteration=iteration).lr
                    for s in sources
                ]
                ratios = [r for r in ratios if np.isfinite(r)]
                per_target.append(float(np.mean(ratios)))
            curve.append((iteration, float(np.mean(per_target))))
    return curve
