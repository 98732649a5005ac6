"""Versioned binary checkpoints.

Layout (little-endian after the magic):

    magic   b"KMLCKPT1"
    u32     tensor count
    per tensor:
        u16   name length, then UTF-8 name
        u8    rank, then rank x u32 extents
        u8    precision (0 = 32-bit, 1 = 64-bit)
        raw   IEEE-754 values, row-major
    u64     iteration
    u64[4]  RNG state (seed, train episode counter, validation counter, 0)

Tensors are saved at native precision unless the run opts into down-casting
to 32-bit; save -> load -> save is byte-identical either way.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from ..errors import ConfigurationError, ContractViolation
from ..metalearn import MetaLearnerConfig, OptState, TrainState, init_train_state
from ..tensor import Tensor

MAGIC = b"KMLCKPT1"

_PRECISION_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_PRECISION = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path, named, iteration: int, rng_state, downcast: bool = False) -> None:
    """Write named arrays plus counters; input arrays are not modified."""
    rng_state = tuple(int(v) for v in rng_state)
    if len(rng_state) != 4:
        raise ContractViolation("rng_state must be 4 integers")
    chunks = [MAGIC, struct.pack("<I", len(named))]
    for name, arr in named:
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_TO_PRECISION:
            raise ContractViolation(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        if downcast:
            arr = arr.astype(np.float32)
        code = _DTYPE_TO_PRECISION[arr.dtype]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(struct.pack("<B", code))
        chunks.append(np.ascontiguousarray(arr, dtype=_PRECISION_TO_DTYPE[code]).tobytes())
    chunks.append(struct.pack("<Q", iteration))
    chunks.append(struct.pack("<4Q", *rng_state))
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path):
    """Read back (ordered name->array map, iteration, rng_state)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise OSError(f"{path}: not a checkpoint file")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise OSError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    (count,) = take("<I")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = take("<H")
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = take("<B")
        shape = take(f"<{rank}I") if rank else ()
        (code,) = take("<B")
        if code not in _PRECISION_TO_DTYPE:
            raise OSError(f"{path}: unknown precision byte {code}")
        dtype = _PRECISION_TO_DTYPE[code]
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * dtype.itemsize
        if off + nbytes > len(raw):
            raise OSError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape)
        off += nbytes
        tensors[name] = arr
    (iteration,) = take("<Q")
    rng_state = take("<4Q")
    if off != len(raw):
        raise OSError(f"{path}: trailing bytes after checkpoint payload")
    return tensors, int(iteration), tuple(int(v) for v in rng_state)


def state_named_arrays(state: TrainState) -> list[tuple[str, np.ndarray]]:
    """All state tensors in checkpoint order, optimizer moments included."""
    named = [(name, np.asarray(t.data)) for name, t in state.params.named()]
    if state.opt is not None:
        for i, m in enumerate(state.opt.m):
            named.append((f"opt.m.{i}", m))
        for i, v in enumerate(state.opt.v):
            named.append((f"opt.v.{i}", v))
        named.append(("opt.t", np.asarray(float(state.opt.t))))
    return named


def save_state(path, state: TrainState, downcast: bool = False) -> None:
    save_checkpoint(path, state_named_arrays(state), state.iteration,
                    state.rng_state(), downcast=downcast)


def load_state(path, cfg: MetaLearnerConfig, dist) -> TrainState:
    """Rebuild a training state from a checkpoint and its configuration."""
    tensors, iteration, rng_state = load_checkpoint(path)
    if rng_state[0] != cfg.seed:
        raise ConfigurationError(
            f"checkpoint was written with seed {rng_state[0]}, config says {cfg.seed}"
        )
    template = init_train_state(cfg, dist)
    new = []
    for name, t in template.params.named():
        if name not in tensors:
            raise ConfigurationError(f"checkpoint is missing tensor {name!r}")
        arr = tensors.pop(name)
        if arr.shape != t.shape:
            raise ConfigurationError(f"tensor {name!r} has shape {arr.shape}, expected {t.shape}")
        new.append(Tensor(arr, requires_grad=True, dtype=t.dtype))
    params = template.params.with_tensors(new)
    opt = None
    if template.opt is not None:
        n = len(template.opt.m)
        try:
            ms = tuple(np.array(tensors.pop(f"opt.m.{i}"), dtype=np.float64) for i in range(n))
            vs = tuple(np.array(tensors.pop(f"opt.v.{i}"), dtype=np.float64) for i in range(n))
            t_arr = tensors.pop("opt.t")
        except KeyError as exc:
            raise ConfigurationError(f"checkpoint is missing optimizer state: {exc}") from exc
        opt = OptState(m=ms, v=vs, t=int(float(t_arr)))
    if tensors:
        raise ConfigurationError(f"checkpoint holds unexpected tensors: {sorted(tensors)[:3]}")
    return TrainState(cfg=cfg, params=params, opt=opt, iteration=iteration,
                      episode_counter=rng_state[1], val_counter=rng_state[2])
