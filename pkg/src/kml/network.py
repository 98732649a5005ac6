"""Base network, task encoder, and generator parameter containers.

Layer kernels are stored output-major: conv kernels as (out, in, k, k) and
dense weights as (out, in), so per-output-channel modulation treats both
uniformly. Parameter containers are immutable snapshots; a "modulated"
network is just a fresh ``BaseParams`` whose tensors hang off the graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .tasks import philox_stream
from .tensor import Tensor, conv2d, dense, relu, reshape, transpose, default_dtype

_INIT_TAG = 4
_COMPONENT = {"base": 0, "encoder": 1, "generator": 2}

TaskEmbedding = Tensor


@dataclass(frozen=True)
class LayerShape:
    """Static description of one trunk layer."""

    kind: str  # "conv" | "dense"
    in_ch: int
    out_ch: int
    ksize: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in ("conv", "dense"):
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and self.ksize != 1:
            raise ConfigurationError("dense layers have ksize 1")

    @property
    def kernel_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.out_ch, self.in_ch, self.ksize, self.ksize)
        return (self.out_ch, self.in_ch)

    @property
    def bias_shape(self) -> tuple[int, ...]:
        return (self.out_ch,)

    @property
    def modulation_width(self) -> int:
        """Flattened per-output-channel kernel extent, N_i * N_k^2."""
        return self.in_ch * self.ksize * self.ksize


@dataclass(frozen=True)
class Architecture:
    name: str
    input_shape: tuple[int, ...]
    layers: tuple[LayerShape, ...]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].out_ch

    @property
    def is_conv(self) -> bool:
        return self.layers[0].kind == "conv"


DESK_CONV_CHANNELS = (8, 16, 32)
DESK_DENSE_WIDTHS = (64, 64, 32)
PAPER_4CONV_CHANNELS = (32, 64, 128, 256)

ARCH_NAMES = ("desk-conv", "desk-dense", "paper-4conv")


def make_architecture(name: str, input_shape: tuple[int, ...] | None = None) -> Architecture:
    """Build a named architecture for the given input shape.

    desk-conv and desk-dense are the small default stacks; paper-4conv is
    the reference 32/64/128/256 conv stack (k=3, stride 2) over 3x84x84
    inputs, kept mainly for parameter accounting.
    """
    if name == "paper-4conv":
        input_shape = input_shape or (3, 84, 84)
        return _conv_arch(name, input_shape, PAPER_4CONV_CHANNELS)
    if input_shape is None:
        raise ConfigurationError(f"architecture {name!r} needs an input shape")
    if name == "desk-conv":
        return _conv_arch(name, input_shape, DESK_CONV_CHANNELS)
    if name == "desk-dense":
        if len(input_shape) != 1:
            raise ConfigurationError("desk-dense expects a flat input shape")
        layers = []
        d = input_shape[0]
        for w in DESK_DENSE_WIDTHS:
            layers.append(LayerShape("dense", d, w))
            d = w
        return Architecture(name, tuple(input_shape), tuple(layers))
    raise ConfigurationError(f"unknown architecture {name!r}; choose from {ARCH_NAMES}")


def _conv_arch(name, input_shape, channels) -> Architecture:
    if len(input_shape) != 3:
        raise ConfigurationError(f"{name} expects a (channels, H, W) input shape")
    layers = []
    c = input_shape[0]
    for out in channels:
        layers.append(LayerShape("conv", c, out, ksize=3, stride=2, padding=1))
        c = out
    return Architecture(name, tuple(input_shape), tuple(layers))


@dataclass(frozen=True)
class BaseParams:
    """Per-layer kernels and biases of the base network, plus optional head."""

    arch: Architecture
    layers: tuple[tuple[Tensor, Tensor], ...]
    head: tuple[Tensor, Tensor] | None = None

    def __post_init__(self):
        if len(self.layers) != len(self.arch.layers):
            raise ContractViolation("layer count does not match architecture")
        for ls, (w, b) in zip(self.arch.layers, self.layers):
            if w.shape != ls.kernel_shape or b.shape != ls.bias_shape:
                raise ContractViolation(
                    f"layer tensors {w.shape}/{b.shape} do not match shapes "
                    f"{ls.kernel_shape}/{ls.bias_shape}"
                )

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in self.layers:
            out += [w, b]
        if self.head is not None:
            out += list(self.head)
        return out

    def named(self, prefix: str = "base") -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.layers):
            out += [(f"{prefix}.{i}.w", w), (f"{prefix}.{i}.b", b)]
        if self.head is not None:
            out += [(f"{prefix}.head.w", self.head[0]), (f"{prefix}.head.b", self.head[1])]
        return out

    def with_tensors(self, flat: Sequence[Tensor]) -> "BaseParams":
        """Rebuild with replacement tensors in ``tensors()`` order."""
        expect = 2 * len(self.layers) + (2 if self.head is not None else 0)
        if len(flat) != expect:
            raise ContractViolation(f"expected {expect} tensors, got {len(flat)}")
        layers = tuple((flat[2 * i], flat[2 * i + 1]) for i in range(len(self.layers)))
        head = (flat[-2], flat[-1]) if self.head is not None else None
        return BaseParams(self.arch, layers, head)


def init_base(arch: Architecture, seed: int, head_dim: int | None = None) -> BaseParams:
    """He-normal kernels, zero biases; deterministic given the seed."""
    rng = philox_stream(seed, _INIT_TAG, _COMPONENT["base"])
    dt = default_dtype()
    layers = []
    for ls in arch.layers:
        fan_in = ls.modulation_width
        w = rng.standard_normal(ls.kernel_shape) * np.sqrt(2.0 / fan_in)
        layers.append((Tensor(w.astype(dt), requires_grad=True),
                       Tensor(np.zeros(ls.bias_shape, dtype=dt), requires_grad=True)))
    head = None
    if head_dim is not None:
        f = arch.feature_dim
        hw = rng.standard_normal((f, head_dim)) * np.sqrt(1.0 / f)
        head = (Tensor(hw.astype(dt), requires_grad=True),
                Tensor(np.zeros(head_dim, dtype=dt), requires_grad=True))
    return BaseParams(arch, tuple(layers), head)


def forward_features(x: Tensor, params: BaseParams) -> Tensor:
    """Trunk forward pass to pooled feature vectors, shape (batch, F)."""
    arch = params.arch
    if arch.is_conv:
        if x.shape[1:] != arch.input_shape:
            raise ContractViolation(f"input {x.shape[1:]} does not match {arch.input_shape}")
        h = x
        for ls, (w, b) in zip(arch.layers, params.layers):
            h = relu(conv2d(h, w, b, stride=ls.stride, padding=ls.padding))
        return h.mean(axis=(2, 3))
    flat = x if x.ndim == 2 else reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
    if flat.shape[1] != arch.input_shape[0]:
        raise ContractViolation(f"input width {flat.shape[1]} does not match {arch.input_shape}")
    h = flat
    for _, (w, b) in zip(arch.layers, params.layers):
        h = relu(dense(h, transpose(w), b))
    return h


def forward_base(x: Tensor, params: BaseParams) -> Tensor:
    """Features (no head) or classification logits (with head)."""
    feats = forward_features(x, params)
    if params.head is None:
        return feats
    return dense(feats, params.head[0], params.head[1])


@dataclass(frozen=True)
class EncoderParams:
    """Task encoder: a trunk shaped like the base network plus a projection."""

    trunk: BaseParams
    proj_w: Tensor  # (F, embedding_dim)
    proj_b: Tensor  # (embedding_dim,)

    @property
    def embedding_dim(self) -> int:
        return self.proj_w.shape[1]

    def tensors(self) -> list[Tensor]:
        return self.trunk.tensors() + [self.proj_w, self.proj_b]

    def named(self, prefix: str = "enc") -> list[tuple[str, Tensor]]:
        return self.trunk.named(prefix=f"{prefix}.trunk") + [
            (f"{prefix}.proj.w", self.proj_w),
            (f"{prefix}.proj.b", self.proj_b),
        ]

    def with_tensors(self, flat: Sequence[Tensor]) -> "EncoderParams":
        return EncoderParams(self.trunk.with_tensors(flat[:-2]), flat[-2], flat[-1])


def init_encoder(arch: Architecture, embedding_dim: int, seed: int) -> EncoderParams:
    """Same trunk shape as the base network, never shared parameters."""
    rng = philox_stream(seed, _INIT_TAG, _COMPONENT["encoder"])
    dt = default_dtype()
    layers = []
    for ls in arch.layers:
        w = rng.standard_normal(ls.kernel_shape) * np.sqrt(2.0 / ls.modulation_width)
        layers.append((Tensor(w.astype(dt), requires_grad=True),
                       Tensor(np.zeros(ls.bias_shape, dtype=dt), requires_grad=True)))
    trunk = BaseParams(arch, tuple(layers))
    f = arch.feature_dim
    pw = rng.standard_normal((f, embedding_dim)) * np.sqrt(2.0 / f)
    return EncoderParams(
        trunk,
        Tensor(pw.astype(dt), requires_grad=True),
        Tensor(np.zeros(embedding_dim, dtype=dt), requires_grad=True),
    )


def encode_task(support, encoder: EncoderParams) -> TaskEmbedding:
    """Embed a support set into a fixed-width task vector.

    Per-sample features are mean-pooled over the support set, then passed
    through a final linear+relu. The mean makes the embedding invariant to
    support order and to duplicating every sample.
    """
    if isinstance(support, Tensor):
        batch = support
    else:
        pairs = list(support)
        if not pairs:
            raise ContractViolation("encode_task needs a non-empty support set")
        batch = Tensor._wrap(np.stack([t.data for t, _ in pairs]))
    if batch.shape[0] == 0:
        raise ContractViolation("encode_task needs a non-empty support set")
    feats = forward_features(batch, encoder.trunk)          # (B, F)
    pooled = feats.mean(axis=0, keepdims=True)              # (1, F)
    v = relu(dense(pooled, encoder.proj_w, encoder.proj_b)) # (1, d)
    return reshape(v, (encoder.embedding_dim,))


@dataclass(frozen=True)
class GeneratorParams:
    """Per-layer modulation generators, all bias-free linear maps of v.

    kinds:
      film:    per layer (P_eta, P_gamma), each (d, N_o)
      kml:     per layer rank-r pairs u_s: (d, N_o), v_s: (d, N_i*N_k^2),
               plus a bias-offset map (d, N_o)
      kml_mlp: per layer one full map (d, N_o*N_i*N_k^2) plus (d, N_o)
    """

    kind: str
    rank: int
    embedding_dim: int
    layer_shapes: tuple[LayerShape, ...]
    film: tuple[tuple[Tensor, Tensor], ...] = ()
    kml_u: tuple[tuple[Tensor, ...], ...] = ()
    kml_v: tuple[tuple[Tensor, ...], ...] = ()
    kml_b: tuple[Tensor, ...] = ()
    mlp_m: tuple[Tensor, ...] = ()
    mlp_b: tuple[Tensor, ...] = ()

    def tensors(self) -> list[Tensor]:
        out = []
        for pe, pg in self.film:
            out += [pe, pg]
        for us, vs, b in zip(self.kml_u, self.kml_v, self.kml_b):
            out += list(us) + list(vs) + [b]
        for m, b in zip(self.mlp_m, self.mlp_b):
            out += [m, b]
        return out

    def named(self, prefix: str = "gen") -> list[tuple[str, Tensor]]:
        out = []
        for i, (pe, pg) in enumerate(self.film):
            out += [(f"{prefix}.{i}.eta", pe), (f"{prefix}.{i}.gamma", pg)]
        for i, (us, vs, b) in enumerate(zip(self.kml_u, self.kml_v, self.kml_b)):
            for s, u in enumerate(us):
                out.append((f"{prefix}.{i}.u{s}", u))
            for s, v in enumerate(vs):
                out.append((f"{prefix}.{i}.v{s}", v))
            out.append((f"{prefix}.{i}.db", b))
        for i, (m, b) in enumerate(zip(self.mlp_m, self.mlp_b)):
            out += [(f"{prefix}.{i}.m", m), (f"{prefix}.{i}.db", b)]
        return out

    def with_tensors(self, flat: Sequence[Tensor]) -> "GeneratorParams":
        it = iter(flat)
        if self.kind == "film":
            film = tuple((next(it), next(it)) for _ in self.film)
            return GeneratorParams(self.kind, self.rank, self.embedding_dim,
                                   self.layer_shapes, film=film)
        if self.kind == "kml":
            u, v, b = [], [], []
            for us in self.kml_u:
                u.append(tuple(next(it) for _ in us))
                v.append(tuple(next(it) for _ in us))
                b.append(next(it))
            return GeneratorParams(self.kind, self.rank, self.embedding_dim, self.layer_shapes,
                                   kml_u=tuple(u), kml_v=tuple(v), kml_b=tuple(b))
        m, b = [], []
        for _ in self.mlp_m:
            m.append(next(it))
            b.append(next(it))
        return GeneratorParams(self.kind, self.rank, self.embedding_dim, self.layer_shapes,
                               mlp_m=tuple(m), mlp_b=tuple(b))


GENERATOR_KINDS = ("film", "kml", "kml_mlp")


def init_generator(layers: Sequence[LayerShape], embedding_dim: int, kind: str,
                   rank: int = 1, init: str = "zero", scale: float = 0.05,
                   seed: int = 0) -> GeneratorParams:
    """Instantiate generator maps for every trunk layer.

    ``init='zero'`` outputs exactly zero modulation (and, for the bias-free
    maps, makes kernel modulation reduce to the unmodulated network).
    """
    if kind not in GENERATOR_KINDS:
        raise ConfigurationError(f"unknown generator kind {kind!r}")
    if rank < 1:
        raise ConfigurationError("rank must be >= 1")
    if init not in ("zero", "uniform"):
        raise ConfigurationError(f"unknown generator init {init!r}")
    rng = philox_stream(seed, _INIT_TAG, _COMPONENT["generator"])
    dt = default_dtype()

    def draw(shape):
        if init == "zero":
            arr = np.zeros(shape, dtype=dt)
        else:
            arr = rng.uniform(-scale, scale, size=shape).astype(dt)
        return Tensor(arr, requires_grad=True)

    layers = tuple(layers)
    d = embedding_dim
    if kind == "film":
        film = tuple((draw((d, ls.out_ch)), draw((d, ls.out_ch))) for ls in layers)
        return GeneratorParams(kind, 1, d, layers, film=film)
    if kind == "kml":
        u, v, b = [], [], []
        for ls in layers:
            u.append(tuple(draw((d, ls.out_ch)) for _ in range(rank)))
            v.append(tuple(draw((d, ls.modulation_width)) for _ in range(rank)))
            b.append(draw((d, ls.out_ch)))
        return GeneratorParams(kind, rank, d, layers,
                               kml_u=tuple(u), kml_v=tuple(v), kml_b=tuple(b))
    m = tuple(draw((d, ls.out_ch * ls.modulation_width)) for ls in layers)
    b = tuple(draw((d, ls.out_ch)) for ls in layers)
    return GeneratorParams(kind, 1, d, layers, mlp_m=m, mlp_b=b)
