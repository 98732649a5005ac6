"""Flat key=value run configuration.

One UTF-8 line per setting, ``#`` starts a comment line, no nesting. Mode
blocks use numbered dotted keys (``mode.0.kind = glyph``); transference and
report settings live under ``transfer.`` and ``report.``. Unknown keys are
rejected, and every run writes its fully resolved configuration next to its
outputs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..errors import ConfigurationError
from ..metalearn import MetaLearnerConfig
from ..tasks import ModeSpec


def _parse_bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes"):
        return True
    if v.lower() in ("false", "0", "no"):
        return False
    raise ConfigurationError(f"expected a boolean, got {v!r}")


def _parse_int_set(v: str) -> frozenset[int]:
    v = v.strip()
    if not v:
        return frozenset()
    return frozenset(int(p) for p in v.split(","))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, frozenset):
        return ",".join(str(i) for i in sorted(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (parser, default); _REQUIRED marks keys that must be present
_REQUIRED = object()

_CORE = {
    "seed": (int, 0),
    "precision": (str, "f64"),
    "learner": (str, _REQUIRED),
    "modulation": (str, "none"),
    "rank": (int, 1),
    "inner_lr": (float, 0.05),
    "outer_lr": (float, 0.001),
    "inner_steps": (int, None),
    "meta_batch_size": (int, 10),
    "first_order": (_parse_bool, False),
    "iterations": (int, _REQUIRED),
    "n_way": (int, 5),
    "k_shot": (int, 1),
    "m_query": (int, 15),
    "embedding_dim": (int, 128),
    "arch": (str, "desk-conv"),
    "generator_structure": (str, "simplified"),
    "shared_layers": (_parse_int_set, frozenset()),
    "optimizer": (str, "sgd"),
    "lr_halve_every": (int, 0),
    "generator_init": (str, "uniform"),
    "generator_scale": (float, 0.05),
    "log_interval": (int, 1),
    "eval_interval": (int, 0),
    "eval_episodes": (int, 100),
    "out_dir": (str, _REQUIRED),
    "checkpoint_interval": (int, 0),
    "checkpoint_downcast": (_parse_bool, False),
}

_MODE = {
    "kind": (str, _REQUIRED),
    "weight": (float, _REQUIRED),
    "categories": (int, 16),
    "noise": (float, 0.0),
    "channels": (int, 1),
    "size": (int, 16),
    "dim": (int, 16),
}

_TRANSFER = {
    "sources": (int, 300),
    "targets": (int, 1),
    "alpha": (float, 0.05),
    "epsilon": (float, 0.01),
    "bins": (int, 40),
    "lr_max": (float, 2.0),
    "seed": (int, 1000),
    "source_mode": (int, -1),
    "target_mode": (int, -1),
}

_REPORT = {
    "episodes": (int, 500),
    "seed": (int, 2000),
    "embeddings": (int, 64),
}

_MODE_KEY = re.compile(r"^mode\.(\d+)\.([a-z_]+)$")


@dataclass(frozen=True)
class TransferSettings:
    sources: int = 300
    targets: int = 1
    alpha: float = 0.05
    epsilon: float = 0.01
    bins: int = 40
    lr_max: float = 2.0
    seed: int = 1000
    source_mode: int = -1
    target_mode: int = -1


@dataclass(frozen=True)
class ReportSettings:
    episodes: int = 500
    seed: int = 2000
    embeddings: int = 64


@dataclass(frozen=True)
class RunConfig:
    learner: MetaLearnerConfig
    modes: tuple[ModeSpec, ...]
    out_dir: str
    precision: str
    checkpoint_interval: int
    checkpoint_downcast: bool
    transfer: TransferSettings
    report: ReportSettings

    def resolved_text(self) -> str:
        """Canonical serialization: every key explicit, fixed order."""
        c = self.learner
        core = {
            "seed": c.seed, "precision": self.precision, "learner": c.kind,
            "modulation": c.modulation, "rank": c.rank, "inner_lr": c.inner_lr,
            "outer_lr": c.outer_lr, "inner_steps": c.inner_steps,
            "meta_batch_size": c.meta_batch_size, "first_order": c.first_order,
            "iterations": c.iterations, "n_way": c.n_way, "k_shot": c.k_shot,
            "m_query": c.m_query, "embedding_dim": c.embedding_dim, "arch": c.arch,
            "generator_structure": c.generator_structure,
            "shared_layers": c.shared_layers, "optimizer": c.optimizer,
            "lr_halve_every": c.lr_halve_every, "generator_init": c.generator_init,
            "generator_scale": c.generator_scale, "log_interval": c.log_interval,
            "eval_interval": c.eval_interval, "eval_episodes": c.eval_episodes,
            "out_dir": self.out_dir, "checkpoint_interval": self.checkpoint_interval,
            "checkpoint_downcast": self.checkpoint_downcast,
        }
        lines = ["# resolved configuration"]
        lines += [f"{k} = {_fmt(v)}" for k, v in core.items()]
        for i, m in enumerate(self.modes):
            for field in _MODE:
                lines.append(f"mode.{i}.{field} = {_fmt(getattr(m, field))}")
        for field in _TRANSFER:
            lines.append(f"transfer.{field} = {_fmt(getattr(self.transfer, field))}")
        for field in _REPORT:
            lines.append(f"report.{field} = {_fmt(getattr(self.report, field))}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> RunConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {stripped!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        value = value.strip()
        if key in raw:
            raise ConfigurationError(f"duplicate config key: {key}")
        raw[key] = value

    core: dict[str, object] = {}
    mode_raw: dict[int, dict[str, str]] = {}
    transfer_raw: dict[str, str] = {}
    report_raw: dict[str, str] = {}
    for key, value in raw.items():
        if key in _CORE:
            core[key] = value
            continue
        m = _MODE_KEY.match(key)
        if m:
            idx, field = int(m.group(1)), m.group(2)
            if field not in _MODE:
                raise ConfigurationError(f"unknown config key: {key}")
            mode_raw.setdefault(idx, {})[field] = value
            continue
        if key.startswith("transfer."):
            field = key[len("transfer."):]
            if field not in _TRANSFER:
                raise ConfigurationError(f"unknown config key: {key}")
            transfer_raw[field] = value
            continue
        if key.startswith("report."):
            field = key[len("report."):]
            if field not in _REPORT:
                raise ConfigurationError(f"unknown config key: {key}")
            report_raw[field] = value
            continue
        raise ConfigurationError(f"unknown config key: {key}")

    def build(registry, values, where):
        out = {}
        for field, (parser, default) in registry.items():
            if field in values:
                try:
                    out[field] = parser(values[field])
                except ConfigurationError:
                    raise
                except (TypeError, ValueError) as exc:
                    raise ConfigurationError(f"bad value for {where}{field}: {exc}") from exc
            elif default is _REQUIRED:
                raise ConfigurationError(f"missing required key: {where}{field}")
            else:
                out[field] = default
        return out

    core_vals = build(_CORE, core, "")
    if not mode_raw:
        raise ConfigurationError("missing required key: mode.0.kind")
    if sorted(mode_raw) != list(range(len(mode_raw))):
        raise ConfigurationError(f"mode indices must be contiguous from 0, got {sorted(mode_raw)}")
    modes = tuple(
        ModeSpec(**build(_MODE, mode_raw[i], f"mode.{i}.")) for i in range(len(mode_raw))
    )
    transfer = TransferSettings(**build(_TRANSFER, transfer_raw, "transfer."))
    report = ReportSettings(**build(_REPORT, report_raw, "report."))

    if core_vals["precision"] not in ("f32", "f64"):
        raise ConfigurationError(f"precision must be f32 or f64, got {core_vals['precision']!r}")
    learner = MetaLearnerConfig(
        kind=core_vals["learner"],
        inner_lr=core_vals["inner_lr"],
        outer_lr=core_vals["outer_lr"],
        inner_steps=core_vals["inner_steps"],
        meta_batch_size=core_vals["meta_batch_size"],
        first_order=core_vals["first_order"],
        modulation=core_vals["modulation"],
        rank=core_vals["rank"],
        shared_layers=core_vals["shared_layers"],
        iterations=core_vals["iterations"],
        seed=core_vals["seed"],
        n_way=core_vals["n_way"],
        k_shot=core_vals["k_shot"],
        m_query=core_vals["m_query"],
        embedding_dim=core_vals["embedding_dim"],
        arch=core_vals["arch"],
        generator_structure=core_vals["generator_structure"],
        optimizer=core_vals["optimizer"],
        lr_halve_every=core_vals["lr_halve_every"],
        generator_init=core_vals["generator_init"],
        generator_scale=core_vals["generator_scale"],
        log_interval=core_vals["log_interval"],
        eval_interval=core_vals["eval_interval"],
        eval_episodes=core_vals["eval_episodes"],
    )
    return RunConfig(
        learner=learner,
        modes=modes,
        out_dir=core_vals["out_dir"],
        precision=core_vals["precision"],
        checkpoint_interval=core_vals["checkpoint_interval"],
        checkpoint_downcast=core_vals["checkpoint_downcast"],
        transfer=transfer,
        report=report,
    )


def parse_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())
