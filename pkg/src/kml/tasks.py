"""Synthetic multimodal N-way K-shot episode sampling.

Every random draw comes from a counter-based numpy Philox generator keyed
through ``SeedSequence`` by integer tuples, so episodes are reproducible
across runs and platforms. Streams are namespaced:

- episode draws:   (seed, EPISODE_TAG, split, episode index)
- category content: (mode seed, CATEGORY_TAG, split, category index)

Category content depends only on the mode seed and split, never on the
episode index, so the per-split category pools are fixed for a run and the
meta-train and meta-test pools never coincide.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import CapacityError, ConfigurationError, ContractViolation
from .tensor import Tensor, default_dtype

SPLITS = {"train": 0, "test": 1}

_EPISODE_TAG = 1
_CATEGORY_TAG = 2
_MODE_TAG = 3

_MASK64 = (1 << 64) - 1


def philox_stream(*parts: int) -> np.random.Generator:
    """A Philox generator keyed by the given integers."""
    key = [int(p) & _MASK64 for p in parts]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _mode_seed(seed: int, mode_id: int) -> int:
    return int(np.random.SeedSequence([seed & _MASK64, _MODE_TAG, mode_id]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ModeSpec:
    """One input-label domain inside the multimodal task distribution.

    ``categories`` is the per-split category pool size; meta-train and
    meta-test pools are disjoint by construction. Image kinds (glyph,
    texture) emit (channels, size, size); flat kinds (blob, ring) emit
    (dim,).
    """

    kind: str
    weight: float
    categories: int
    noise: float = 0.0
    channels: int = 1
    size: int = 16
    dim: int = 16

    KINDS = ("glyph", "blob", "ring", "texture", "dataset")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigurationError(f"unknown mode kind {self.kind!r}")
        if self.kind == "glyph" and self.channels != 1:
            raise ConfigurationError("glyph mode emits 1-channel tensors")
        if self.kind == "ring" and self.dim < 2:
            raise ConfigurationError("ring mode needs dim >= 2")
        if self.categories < 1:
            raise ConfigurationError("category pool must be positive")
        if self.weight <= 0:
            raise ConfigurationError("mixing weight must be positive")
        if self.noise < 0:
            raise ConfigurationError("noise level must be non-negative")

    def input_shape(self) -> tuple[int, ...]:
        if self.kind in ("glyph", "texture", "dataset"):
            return (self.channels, self.size, self.size)
        return (self.dim,)


# frequency lattice for texture categories, ordered by radius; indices are
# offset per split so the two pools use different frequencies
_FREQ_PAIRS = sorted(
    ((i, j) for i in range(9) for j in range(9) if (i, j) != (0, 0)),
    key=lambda p: (p[0] ** 2 + p[1] ** 2, p),
)


@lru_cache(maxsize=8192)
def _glyph_base(seed: int, split_id: int, category: int, size: int) -> np.ndarray:
    """Render the category's stroke pattern (cached; content is pure in the key)."""
    crng = philox_stream(seed, _CATEGORY_TAG, split_id, category)
    img = np.zeros((size, size))
    for _ in range(int(crng.integers(2, 5))):
        r = int(crng.integers(0, size))
        c = int(crng.integers(0, size))
        dr = dc = 0
        for step in range(int(crng.integers(size, 2 * size))):
            img[r, c] = 1.0
            if step % 3 == 0 or (dr == 0 and dc == 0):
                dr = int(crng.integers(-1, 2))
                dc = int(crng.integers(-1, 2))
            r = min(max(r + dr, 0), size - 1)
            c = min(max(c + dc, 0), size - 1)
    img.setflags(write=False)
    return img


@lru_cache(maxsize=65536)
def _blob_centroid(seed: int, split_id: int, category: int, dim: int) -> np.ndarray:
    centroid = philox_stream(seed, _CATEGORY_TAG, split_id, category).standard_normal(dim)
    centroid.setflags(write=False)
    return centroid


class ModeGenerator:
    """Per-category sample synthesis for one mode.

    Pure given (seed, split, category, sample stream); safe to rebuild and
    share because it holds no mutable state.
    """

    def __init__(self, spec: ModeSpec, seed: int):
        if spec.kind == "dataset":
            raise ConfigurationError("dataset modes are built with DatasetMode, not make_mode")
        self.spec = spec
        self.seed = int(seed)

    def _category_rng(self, split: str, category: int) -> np.random.Generator:
        return philox_stream(self.seed, _CATEGORY_TAG, SPLITS[split], category)

    def _global_category(self, split: str, category: int) -> int:
        return SPLITS[split] * self.spec.categories + category

    def sample(self, split: str, category: int, rng: np.random.Generator) -> np.ndarray:
        if not 0 <= category < self.spec.categories:
            raise CapacityError(f"category {category} outside pool of {self.spec.categories}")
        kind = self.spec.kind
        if kind == "glyph":
            return self._glyph(split, category, rng)
        if kind == "blob":
            return self._blob(split, category, rng)
        if kind == "ring":
            return self._ring(split, category, rng)
        return self._texture(split, category, rng)

    def _glyph(self, split, category, rng):
        spec = self.spec
        img = _glyph_base(self.seed, SPLITS[split], category, spec.size).astype(default_dtype())
        if spec.noise > 0:
            shift = rng.integers(-1, 2, size=2)
            img = np.roll(img, tuple(shift), axis=(0, 1))
            img = img + spec.noise * rng.standard_normal(img.shape)
        return img[None, :, :]

    def _blob(self, split, category, rng):
        spec = self.spec
        centroid = _blob_centroid(self.seed, SPLITS[split], category, spec.dim)
        return (centroid + spec.noise * rng.standard_normal(spec.dim)).astype(default_dtype())

    def _ring(self, split, category, rng):
        spec = self.spec
        radius = 0.6 + 0.45 * self._global_category(split, category)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        x = np.zeros(spec.dim, dtype=default_dtype())
        x[0] = radius * np.cos(angle)
        x[1] = radius * np.sin(angle)
        return x + spec.noise * rng.standard_normal(spec.dim)

    def _texture(self, split, category, rng):
        spec = self.spec
        gc = self._global_category(split, category)
        if gc >= len(_FREQ_PAIRS):
            raise CapacityError(f"texture supports at most {len(_FREQ_PAIRS) // 2} categories per split")
        fx, fy = _FREQ_PAIRS[gc]
        rows = np.arange(spec.size)[:, None] / spec.size
        cols = np.arange(spec.size)[None, :] / spec.size
        phase = rng.uniform(0.0, 2.0 * np.pi)
        pattern = np.sin(2.0 * np.pi * (fx * rows + fy * cols) + phase)
        img = np.repeat(pattern[None, :, :], spec.channels, axis=0).astype(default_dtype())
        if spec.noise > 0:
            img = img + spec.noise * rng.standard_normal(img.shape)
        return img


def make_mode(spec: ModeSpec, seed: int) -> ModeGenerator:
    """Build the sample synthesizer for one mode."""
    return ModeGenerator(spec, seed)


class DatasetMode(ModeGenerator):
    """A mode backed by a fixed labeled image array (optional ingestion path).

    Labels are partitioned into disjoint train/test category pools: the first
    ``categories`` distinct labels form the train pool, the next ``categories``
    the test pool.
    """

    def __init__(self, images: np.ndarray, labels: np.ndarray, weight: float, categories: int):
        images = np.asarray(images, dtype=default_dtype())
        labels = np.asarray(labels)
        if images.ndim == 3:
            images = images[:, None, :, :]
        if images.ndim != 4 or images.shape[2] != images.shape[3]:
            raise ConfigurationError("dataset images must be (N, H, W) or (N, C, H, W) with square frames")
        pool = sorted(set(int(v) for v in labels))
        if len(pool) < 2 * categories:
            raise CapacityError(f"need {2 * categories} distinct labels, found {len(pool)}")
        self.spec = ModeSpec(kind="dataset", weight=weight, categories=categories,
                             channels=images.shape[1], size=images.shape[2])
        self.seed = 0
        self._by_label = {lab: images[labels == lab] for lab in pool}
        self._pools = {"train": pool[:categories], "test": pool[categories : 2 * categories]}

    def sample(self, split: str, category: int, rng: np.random.Generator) -> np.ndarray:
        if not 0 <= category < self.spec.categories:
            raise CapacityError(f"category {category} outside pool of {self.spec.categories}")
        imgs = self._by_label[self._pools[split][category]]
        return imgs[int(rng.integers(0, len(imgs)))]


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image file and its label file (u8 payloads, big-endian dims)."""
    def read(path, expect_ndim):
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
            raise ConfigurationError(f"{path}: not an IDX file")
        if raw[2] != 0x08:
            raise ConfigurationError(f"{path}: only u8 payloads are supported")
        ndim = raw[3]
        if ndim != expect_ndim:
            raise ConfigurationError(f"{path}: expected {expect_ndim} dims, found {ndim}")
        dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4)
        data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
        if data.size != int(np.prod(dims)):
            raise ConfigurationError(f"{path}: payload size does not match dims")
        return data.reshape(tuple(int(d) for d in dims))

    images = read(images_path, 3).astype(np.float64) / 255.0
    labels = read(labels_path, 1).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ConfigurationError("image and label counts differ")
    return images, labels


@dataclass(frozen=True)
class TaskInstance:
    """One N-way K-shot episode: a mode id plus support and query sets."""

    mode_id: int
    n_way: int
    k_shot: int
    m_query: int
    support: tuple[tuple[Tensor, int], ...]
    query: tuple[tuple[Tensor, int], ...]
    task_id: int = 0

    def support_batch(self) -> tuple[Tensor, np.ndarray]:
        return self._batch(self.support)

    def query_batch(self) -> tuple[Tensor, np.ndarray]:
        return self._batch(self.query)

    @staticmethod
    def _batch(pairs) -> tuple[Tensor, np.ndarray]:
        xs = np.stack([t.data for t, _ in pairs])
        ys = np.array([y for _, y in pairs], dtype=np.int64)
        return Tensor._wrap(xs), ys


def _resolve(dist: Sequence, seed: int) -> list[ModeGenerator]:
    gens = []
    for i, m in enumerate(dist):
        if isinstance(m, ModeGenerator):
            gens.append(m)
        elif isinstance(m, ModeSpec):
            gens.append(make_mode(m, _mode_seed(seed, i)))
        else:
            raise ConfigurationError(f"distribution entry {i} is neither ModeSpec nor ModeGenerator")
    return gens


def check_distribution(dist: Sequence) -> None:
    """Validate mixing weights and input-shape agreement."""
    if not dist:
        raise ConfigurationError("empty mode distribution")
    specs = [m.spec if isinstance(m, ModeGenerator) else m for m in dist]
    total = sum(s.weight for s in specs)
    if abs(total - 1.0) > 1e-9:
        raise ConfigurationError(f"mixing weights sum to {total}, expected 1")
    shapes = {s.input_shape() for s in specs}
    if len(shapes) != 1:
        raise ConfigurationError(f"modes disagree on input shape: {sorted(shapes)}")


def input_shape(dist: Sequence) -> tuple[int, ...]:
    check_distribution(dist)
    first = dist[0].spec if isinstance(dist[0], ModeGenerator) else dist[0]
    return first.input_shape()


def sample_episode(dist: Sequence, n_way: int, k_shot: int, m_query: int,
                   split: str, seed: int, index: int = 0,
                   force_mode: int | None = None) -> TaskInstance:
    """Draw one episode from the multimodal distribution.

    The mode is chosen by mixing weight (or forced), categories are
    subsampled without replacement from that mode's split pool, and
    identical (dist, arguments, seed, index) always produce the identical
    episode.
    """
    if split not in SPLITS:
        raise ContractViolation(f"split must be one of {sorted(SPLITS)}, got {split!r}")
    if min(n_way, k_shot, m_query) < 1:
        raise ContractViolation("n_way, k_shot and m_query must be positive")
    check_distribution(dist)
    gens = _resolve(dist, seed)
    rng = philox_stream(seed, _EPISODE_TAG, SPLITS[split], index)
    if force_mode is None:
        u = rng.random()
        acc = 0.0
        mode_id = len(gens) - 1
        for i, g in enumerate(gens):
            acc += g.spec.weight
            if u < acc:
                mode_id = i
                break
    else:
        if not 0 <= force_mode < len(gens):
            raise ConfigurationError(f"force_mode {force_mode} outside distribution")
        mode_id = force_mode
    gen = gens[mode_id]
    if gen.spec.categories < n_way:
        raise CapacityError(
            f"mode {mode_id} has {gen.spec.categories} categories per split, episode needs {n_way}"
        )
    cats = rng.choice(gen.spec.categories, size=n_way, replace=False)
    support, query = [], []
    for label, cat in enumerate(int(c) for c in cats):
        for _ in range(k_shot):
            support.append((Tensor(gen.sample(split, cat, rng)), label))
        for _ in range(m_query):
            query.append((Tensor(gen.sample(split, cat, rng)), label))
    return TaskInstance(
        mode_id=mode_id, n_way=n_way, k_shot=k_shot, m_query=m_query,
        support=tuple(support), query=tuple(query), task_id=index,
    )
