"""Prototype- and gradient-based meta-learners with episodic training.

The training loop follows one pattern for every configuration: per task,
encode the support set, generate and apply modulation to obtain task
parameters, compute the query loss (directly for the prototype learner,
after differentiable inner SGD steps for the gradient-based one), then
update base, encoder, and generator parameters with the summed batch loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigurationError, ContractViolation, DivergenceError
from .modulation import film_as_params, film_generate, kml_generate, kml_modulate
from .network import (
    Architecture,
    BaseParams,
    EncoderParams,
    GeneratorParams,
    encode_task,
    forward_base,
    forward_features,
    init_base,
    init_encoder,
    init_generator,
    make_architecture,
)
from .tasks import TaskInstance, input_shape, sample_episode
from .tensor import (
    Tensor,
    accuracy,
    grad,
    grad2,
    no_grad,
    reshape,
    sgd_step,
    softmax_cross_entropy,
)

# validation episodes draw from the test split in an index namespace far away
# from training and evaluation indices
VALIDATION_INDEX_BASE = 1 << 40

LEARNER_KINDS = ("protonet", "maml")
MODULATION_KINDS = ("none", "film", "kml")


@dataclass(frozen=True)
class MetaLearnerConfig:
    """Hyperparameters of one meta-learning run.

    Defaults follow the standard small-scale recipe: inner rate 0.05, outer
    rate 0.001, meta batch size 10, five inner updates for the
    gradient-based learner (none for the prototype learner), 15 query
    examples per class.
    """

    kind: str = "protonet"
    inner_lr: float = 0.05
    outer_lr: float = 0.001
    inner_steps: int | None = None
    meta_batch_size: int = 10
    first_order: bool = False
    modulation: str = "none"
    rank: int = 1
    shared_layers: frozenset[int] = frozenset()
    iterations: int = 1000
    seed: int = 0
    n_way: int = 5
    k_shot: int = 1
    m_query: int = 15
    embedding_dim: int = 128
    arch: str = "desk-conv"
    generator_structure: str = "simplified"
    optimizer: str = "sgd"
    lr_halve_every: int = 0
    generator_init: str = "uniform"
    generator_scale: float = 0.05
    log_interval: int = 1
    eval_interval: int = 0
    eval_episodes: int = 100

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ConfigurationError(f"unknown learner {self.kind!r}")
        if self.modulation not in MODULATION_KINDS:
            raise ConfigurationError(f"unknown modulation {self.modulation!r}")
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.inner_steps is None:
            object.__setattr__(self, "inner_steps", 5 if self.kind == "maml" else 0)
        if self.kind == "maml" and self.inner_steps < 1:
            raise ConfigurationError("the gradient-based learner needs inner_steps >= 1")
        if self.kind == "protonet" and self.inner_steps != 0:
            raise ConfigurationError("the prototype learner takes no inner updates")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.generator_structure not in ("simplified", "single_mlp"):
            raise ConfigurationError(f"unknown generator structure {self.generator_structure!r}")
        object.__setattr__(self, "shared_layers", frozenset(int(i) for i in self.shared_layers))

    @property
    def uses_modulation(self) -> bool:
        return self.modulation != "none"


@dataclass(frozen=True)
class ModelParams:
    """All trainable parameter containers of one run."""

    base: BaseParams
    encoder: EncoderParams | None = None
    generator: GeneratorParams | None = None

    def named(self) -> list[tuple[str, Tensor]]:
        out = self.base.named()
        if self.encoder is not None:
            out += self.encoder.named()
        if self.generator is not None:
            out += self.generator.named()
        return out

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def with_tensors(self, flat: Sequence[Tensor]) -> "ModelParams":
        flat = list(flat)
        n_base = len(self.base.tensors())
        base = self.base.with_tensors(flat[:n_base])
        i = n_base
        encoder = None
        if self.encoder is not None:
            n_enc = len(self.encoder.tensors())
            encoder = self.encoder.with_tensors(flat[i : i + n_enc])
            i += n_enc
        generator = None
        if self.generator is not None:
            n_gen = len(self.generator.tensors())
            generator = self.generator.with_tensors(flat[i : i + n_gen])
            i += n_gen
        if i != len(flat):
            raise ContractViolation(f"expected {i} tensors, got {len(flat)}")
        return ModelParams(base, encoder, generator)


@dataclass(frozen=True)
class OptState:
    """Adam moment estimates, keyed like the named parameters."""

    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int


@dataclass(frozen=True)
class TrainState:
    """One point of the training trajectory; transitions are pure."""

    cfg: MetaLearnerConfig
    params: ModelParams
    opt: OptState | None
    iteration: int = 0
    episode_counter: int = 0
    val_counter: int = 0

    def rng_state(self) -> tuple[int, int, int, int]:
        return (self.cfg.seed, self.episode_counter, self.val_counter, 0)


@dataclass(frozen=True)
class StepMetrics:
    loss: float
    accuracy: float


@dataclass(frozen=True)
class ModeAccuracy:
    mean: float
    half_width95: float
    episodes: int


@dataclass(frozen=True)
class EvalReport:
    overall: ModeAccuracy
    per_mode: dict[int, ModeAccuracy]


@dataclass(frozen=True)
class MetaTrainResult:
    state: TrainState
    history: list[dict]
    snapshots: dict[int, ModelParams] = field(default_factory=dict)


def init_train_state(cfg: MetaLearnerConfig, dist) -> TrainState:
    arch = make_architecture(cfg.arch, input_shape(dist))
    head_dim = cfg.n_way if cfg.kind == "maml" else None
    base = init_base(arch, cfg.seed, head_dim=head_dim)
    encoder = generator = None
    if cfg.uses_modulation:
        encoder = init_encoder(arch, cfg.embedding_dim, cfg.seed)
        gen_kind = "film" if cfg.modulation == "film" else (
            "kml" if cfg.generator_structure == "simplified" else "kml_mlp"
        )
        generator = init_generator(arch.layers, cfg.embedding_dim, gen_kind,
                                   rank=cfg.rank, init=cfg.generator_init,
                                   scale=cfg.generator_scale, seed=cfg.seed)
    params = ModelParams(base, encoder, generator)
    opt = None
    if cfg.optimizer == "adam":
        named = params.named()
        opt = OptState(
            m=tuple(np.zeros(t.shape) for _, t in named),
            v=tuple(np.zeros(t.shape) for _, t in named),
            t=0,
        )
    return TrainState(cfg=cfg, params=params, opt=opt)


def task_parameters(params: ModelParams, task: TaskInstance,
                    cfg: MetaLearnerConfig) -> tuple[BaseParams, Tensor | None]:
    """Encode the task and modulate the base network (identity when off)."""
    if not cfg.uses_modulation:
        return params.base, None
    if params.encoder is None or params.generator is None:
        raise ConfigurationError("modulation requested but encoder/generator are missing")
    v = encode_task(task.support_batch()[0], params.encoder)
    if cfg.modulation == "film":
        fp = film_generate(v, params.generator)
        return film_as_params(params.base, fp, cfg.shared_layers), v
    kp = kml_generate(v, params.generator)
    return kml_modulate(params.base, kp, cfg.shared_layers), v


def protonet_episode(task: TaskInstance, theta: BaseParams) -> tuple[Tensor, float]:
    """Nearest-prototype episode loss and query accuracy.

    Prototypes are class means of embedded support samples; the class
    distribution is the softmax of negative squared Euclidean distances.
    """
    sx, sy = task.support_batch()
    qx, qy = task.query_batch()
    s_emb = forward_features(sx, theta)                      # (NK, F)
    q_emb = forward_features(qx, theta)                      # (NM, F)
    n = task.n_way
    g = np.zeros((n, len(sy)), dtype=s_emb.dtype.type)
    for cls in range(n):
        idx = np.flatnonzero(sy == cls)
        g[cls, idx] = 1.0 / len(idx)
    protos = Tensor._wrap(g) @ s_emb                         # (N, F)
    f = s_emb.shape[1]
    diff = reshape(q_emb, (len(qy), 1, f)) - reshape(protos, (1, n, f))
    logits = -(diff * diff).sum(axis=2)
    return softmax_cross_entropy(logits, qy), accuracy(logits, qy)


def maml_adapt(task: TaskInstance, theta: BaseParams, inner_lr: float,
               steps: int, first_order: bool = False) -> BaseParams:
    """Differentiable inner SGD steps on the support-set loss."""
    if steps < 1:
        raise ContractViolation("adaptation needs steps >= 1")
    sx, sy = task.support_batch()
    cur = theta
    for _ in range(steps):
        loss = softmax_cross_entropy(forward_base(sx, cur), sy)
        ws = cur.tensors()
        gs = grad(loss, ws, create_graph=not first_order)
        cur = cur.with_tensors(sgd_step(ws, gs, inner_lr))
    return cur


def episode_loss(params: ModelParams, task: TaskInstance, cfg: MetaLearnerConfig,
                 training: bool = True) -> tuple[Tensor, float]:
    """Query loss and accuracy for one task under the configured learner.

    With ``training=False`` no graph is kept (inner steps still run for the
    gradient-based learner, but first order); values are identical.
    """
    if cfg.kind == "protonet" and not training:
        with no_grad():
            theta, _ = task_parameters(params, task, cfg)
            return protonet_episode(task, theta)
    theta, _ = task_parameters(params, task, cfg)
    if cfg.kind == "protonet":
        return protonet_episode(task, theta)
    first_order = cfg.first_order or not training
    adapted = maml_adapt(task, theta, cfg.inner_lr, cfg.inner_steps, first_order=first_order)
    qx, qy = task.query_batch()
    logits = forward_base(qx, adapted)
    return softmax_cross_entropy(logits, qy), accuracy(logits, qy)


def outer_lr_at(cfg: MetaLearnerConfig, iteration: int) -> float:
    """Constant schedule, optionally halving every ``lr_halve_every`` iterations."""
    if cfg.lr_halve_every > 0:
        return cfg.outer_lr * 0.5 ** (iteration // cfg.lr_halve_every)
    return cfg.outer_lr


def _apply_update(params: ModelParams, grads: list[Tensor], lr: float,
                  cfg: MetaLearnerConfig, opt: OptState | None):
    tensors = params.trainable()
    if cfg.optimizer == "sgd":
        new = [Tensor(p.data - lr * g.data, requires_grad=True, dtype=p.dtype)
               for p, g in zip(tensors, grads)]
        return params.with_tensors(new), opt
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = opt.t + 1
    ms, vs, new = [], [], []
    for p, g, m, v in zip(tensors, grads, opt.m, opt.v):
        garr = g.data
        m2 = b1 * m + (1 - b1) * garr
        v2 = b2 * v + (1 - b2) * garr * garr
        mhat = m2 / (1 - b1 ** t)
        vhat = v2 / (1 - b2 ** t)
        ms.append(m2)
        vs.append(v2)
        new.append(Tensor(p.data - lr * mhat / (np.sqrt(vhat) + eps),
                          requires_grad=True, dtype=p.dtype))
    return params.with_tensors(new), OptState(m=tuple(ms), v=tuple(vs), t=t)


def meta_train_step(state: TrainState, batch: Sequence[TaskInstance],
                    cfg: MetaLearnerConfig | None = None) -> tuple[TrainState, StepMetrics]:
    """One outer update from a batch of tasks; the input state is unmutated.

    The caller is expected to have drawn the batch at episode indices
    [episode_counter, episode_counter + len(batch)); the counter advances by
    the batch size.
    """
    cfg = cfg or state.cfg
    total = None
    losses, accs = [], []
    for task in batch:
        loss, acc = episode_loss(state.params, task, cfg)
        losses.append(loss.item())
        accs.append(acc)
        total = loss if total is None else total + loss
    if total is None:
        raise ContractViolation("empty task batch")
    if not np.isfinite(total.item()):
        raise DivergenceError(f"non-finite loss at iteration {state.iteration}")
    wrt = state.params.trainable()
    if cfg.kind == "maml":
        gs = grad2(total, wrt, first_order=cfg.first_order)
    else:
        gs = grad(total, wrt)
    lr = outer_lr_at(cfg, state.iteration)
    new_params, new_opt = _apply_update(state.params, gs, lr, cfg, state.opt)
    new_state = replace(state, params=new_params, opt=new_opt,
                        iteration=state.iteration + 1,
                        episode_counter=state.episode_counter + len(batch))
    return new_state, StepMetrics(loss=float(np.mean(losses)), accuracy=float(np.mean(accs)))


def _validation_accuracy(state: TrainState, dist, episodes: int) -> tuple[float, int]:
    cfg = state.cfg
    accs = []
    for j in range(episodes):
        task = sample_episode(dist, cfg.n_way, cfg.k_shot, cfg.m_query, "test",
                              cfg.seed, index=VALIDATION_INDEX_BASE + state.val_counter + j)
        _, acc = episode_loss(state.params, task, cfg, training=False)
        accs.append(acc)
    return float(np.mean(accs)), episodes


def meta_train(cfg: MetaLearnerConfig, dist, *, snapshot_iters: Sequence[int] = (),
               iteration_hook=None) -> MetaTrainResult:
    """Run the episodic loop for the configured iteration budget.

    ``snapshot_iters`` captures parameter snapshots after the named
    iterations (0 means the initialization); ``iteration_hook(state)`` runs
    after every step, for checkpointing.
    """
    with threadpool_limits(limits=1):
        return _meta_train_loop(cfg, dist, snapshot_iters, iteration_hook)


def _meta_train_loop(cfg, dist, snapshot_iters, iteration_hook) -> MetaTrainResult:
    state = init_train_state(cfg, dist)
    wanted = set(int(i) for i in snapshot_iters)
    snapshots: dict[int, ModelParams] = {}
    if 0 in wanted:
        snapshots[0] = state.params
    history: list[dict] = []
    for it in range(cfg.iterations):
        batch = [
            sample_episode(dist, cfg.n_way, cfg.k_shot, cfg.m_query, "train",
                           cfg.seed, index=state.episode_counter + i)
            for i in range(cfg.meta_batch_size)
        ]
        state, metrics = meta_train_step(state, batch, cfg)
        val_acc = float("nan")
        if cfg.eval_interval and (it + 1) % cfg.eval_interval == 0:
            val_acc, used = _validation_accuracy(state, dist, cfg.eval_episodes)
            state = replace(state, val_counter=state.val_counter + used)
        if (it + 1) % cfg.log_interval == 0:
            history.append({
                "iteration": state.iteration,
                "loss": metrics.loss,
                "accuracy": metrics.accuracy,
                "val_accuracy": val_acc,
                "outer_lr": outer_lr_at(cfg, it),
            })
        if state.iteration in wanted:
            snapshots[state.iteration] = state.params
        if iteration_hook is not None:
            iteration_hook(state)
    return MetaTrainResult(state=state, history=history, snapshots=snapshots)


def meta_evaluate(state: TrainState, dist, episodes: int, seed: int) -> EvalReport:
    """Meta-test accuracy, overall and per mode, with 95% half-widths."""
    if episodes < 2:
        raise ContractViolation("evaluation needs at least 2 episodes")
    cfg = state.cfg
    accs: list[float] = []
    modes: list[int] = []
    with threadpool_limits(limits=1):
        for i in range(episodes):
            task = sample_episode(dist, cfg.n_way, cfg.k_shot, cfg.m_query, "test",
                                  seed, index=i)
            _, acc = episode_loss(state.params, task, cfg, training=False)
            accs.append(acc)
            modes.append(task.mode_id)
    arr = np.asarray(accs)
    marr = np.asarray(modes)

    def summary(values: np.ndarray) -> ModeAccuracy:
        n = len(values)
        half = 0.0
        if n > 1:
            half = 1.96 * float(np.std(values, ddof=1)) / float(np.sqrt(n))
        return ModeAccuracy(mean=float(np.mean(values)), half_width95=half, episodes=n)

    per_mode = {int(m): summary(arr[marr == m]) for m in sorted(set(modes))}
    return EvalReport(overall=summary(arr), per_mode=per_mode)


def export_embeddings(state: TrainState, dist, episodes: int, seed: int) -> list[tuple[int, np.ndarray]]:
    """One (mode id, task embedding) row per sampled meta-test episode."""
    if state.params.encoder is None:
        raise ConfigurationError("no task encoder in this configuration")
    cfg = state.cfg
    rows = []
    with no_grad():
        for i in range(episodes):
            task = sample_episode(dist, cfg.n_way, cfg.k_shot, cfg.m_query, "test",
                                  seed, index=i)
            v = encode_task(task.support_batch()[0], state.params.encoder)
            rows.append((task.mode_id, np.array(v.data)))
    return rows
