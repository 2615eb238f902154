"""Run configuration: one JSON document (comments allowed) for everything.

Missing keys take their defaults, unknown keys are rejected, and every
error names the offending field path (``tuner.stage1_bo.knn_k``).
:func:`dumps` is canonical, so ``dumps(loads(dumps(c))) == dumps(c)``.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .closedloop import TIMING_MODES, Simulator, StepTimeModel, TrapezoidSpec
from .dynamics import PlantParams, TruncatedNormalSpec
from .tuner import ALGORITHMS, TunerSettings


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path or "<root>"
        super().__init__(f"{self.path}: {message}")


@dataclass(frozen=True)
class GridSettings:
    resolution: tuple[int, int] = (30, 30)
    dims: tuple[int, int] = (0, 1)

    def __post_init__(self):
        if min(self.resolution) < 1:
            raise ValueError("grid resolution must be at least 1x1")
        if len(set(self.dims)) != 2 or min(self.dims) < 0:
            raise ValueError("grid dims must be two distinct non-negative indices")


@dataclass(frozen=True)
class RunConfig:
    plant: PlantParams = PlantParams()
    ts: float = 0.002
    noise_std: float = 0.001 ** 0.5
    trajectory: TrapezoidSpec = TrapezoidSpec()
    context: TruncatedNormalSpec = TruncatedNormalSpec()
    time_model: StepTimeModel = StepTimeModel()
    tuner: TunerSettings = TunerSettings()
    grid: GridSettings = GridSettings()
    timing: str = "synthetic"
    seed: int = 0
    algorithms: tuple[str, ...] = ALGORITHMS
    seeds: tuple[int, ...] = tuple(range(10))
    out: str = "runs"

    def __post_init__(self):
        if not self.ts > 0:
            raise ConfigError("ts", "sample time must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std", "must be non-negative")
        if self.timing not in TIMING_MODES:
            raise ConfigError("timing", f"must be one of {TIMING_MODES}, got {self.timing!r}")
        for a in self.algorithms:
            if a not in ALGORITHMS:
                raise ConfigError("algorithms", f"unknown algorithm {a!r}")
        if not self.algorithms:
            raise ConfigError("algorithms", "need at least one algorithm")
        if not self.seeds:
            raise ConfigError("seeds", "need at least one seed")
        n = self.trajectory.n_steps
        if n < 1:
            raise ConfigError("trajectory.n_steps", "must be at least 1")
        if max(self.grid.dims) >= (2 if self.tuner.case == "benchmark" else 4):
            raise ConfigError("grid.dims", "index exceeds the search-space dimension")

    def simulator(self) -> Simulator:
        return Simulator(self.plant, self.ts, self.trajectory.build(self.ts), self.noise_std, self.time_model)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# Conversion


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_dict(v) for v in obj]
    return obj


def _join(path: str, key) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else str(key)


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        errors = []
        for arg in typing.get_args(tp):
            try:
                return _convert(arg, value, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(path, f"value {value!r} matches none of {tp}")
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, _join(path, i)) for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} items, got {len(value)}")
        return tuple(_convert(a, v, _join(path, i)) for i, (a, v) in enumerate(zip(args, value)))
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {tp}")


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from a (possibly partial) mapping."""
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(_join(path, unknown[0]), "unknown field")
    kwargs = {k: _convert(hints[k], v, _join(path, k)) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(_join(path, exc.path) if exc.path != "<root>" else path, str(exc).split(": ", 1)[-1]) from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def strip_comments(text: str) -> str:
    """Remove ``//`` line and ``/* */`` block comments outside JSON strings."""
    out = []
    i, n = 0, len(text)
    in_str = False
    while i < n:
        ch = text[i]
        if in_str:
            out.append(ch)
            if ch == "\\" and i + 1 < n:
                out.append(text[i + 1])
                i += 1
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
            out.append(ch)
        elif text.startswith("//", i):
            j = text.find("\n", i)
            i = n if j < 0 else j
            continue
        elif text.startswith("/*", i):
            j = text.find("*/", i + 2)
            if j < 0:
                raise ConfigError("", "unterminated block comment")
            out.append(" ")
            i = j + 2
            continue
        else:
            out.append(ch)
        i += 1
    return "".join(out)


def loads(text: str) -> RunConfig:
    try:
        data = json.loads(strip_comments(text))
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from None
    return from_dict(RunConfig, data)


def dumps(config: RunConfig) -> str:
    return json.dumps(to_dict(config), indent=2, sort_keys=True) + "\n"


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError("", f"config file not found: {p}")
    return loads(p.read_text())
