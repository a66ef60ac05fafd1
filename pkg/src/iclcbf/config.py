"""Flat ``section.key = value`` run configuration.

Example::

    scenario = single_integrator
    seed = 7
    icl.iterations = 5
    loss.alpha = 10.0
    icl.filter_alpha = 0.2
    quadrotor.m = 1.0
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .icl import CbfLossWeights, IclConfig
from .scenarios import ConfigurationError, QuadrotorParams

MODES = ("demo", "train-icl", "train-lcbf", "eval", "sweep", "export-grid")
OUTPUT_ROOT_ENV = "ICLCBF_OUTPUT_ROOT"

DEFAULT_DEMOS = {"single_integrator": 150, "inverted_pendulum": 150, "dubins_car": 100, "quadrotor": 60}


@dataclass
class RunConfig:
    scenario: str = "single_integrator"
    mode: str = "demo"
    seed: int = 0
    delta: Optional[float] = None
    demos: Optional[int] = None
    episodes: int = 100
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    deltas: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)
    no_filter: bool = False
    workers: int = 1
    out: str = "runs"
    demo_path: Optional[str] = None
    checkpoint: Optional[str] = None
    resolution: int = 100
    icl: IclConfig = field(default_factory=IclConfig)
    loss: CbfLossWeights = field(default_factory=CbfLossWeights)
    quadrotor: QuadrotorParams = field(default_factory=QuadrotorParams)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; valid: {', '.join(MODES)}")

    @property
    def demo_count(self) -> int:
        return self.demos if self.demos is not None else DEFAULT_DEMOS.get(self.scenario, 100)

    def stage_seed(self, stage: str, *extra: int) -> int:
        """Independent 32-bit seed for a named stage of the pipeline."""
        ss = np.random.SeedSequence([int(self.seed), zlib.crc32(stage.encode()), *map(int, extra)])
        return int(ss.generate_state(1)[0])

    def output_dir(self) -> Path:
        out = Path(self.out)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


_TOP = ("scenario", "mode", "seed", "delta", "demos", "episodes", "seeds", "deltas", "no_filter",
        "workers", "out", "demo_path", "checkpoint", "resolution")
_SECTIONS = {"icl": IclConfig, "loss": CbfLossWeights, "quadrotor": QuadrotorParams}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {s!r}")


def _coerce(raw: str, current, key: str):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    if isinstance(current, bool):
        return _parse_bool(raw)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        items = [x for x in raw.split(",") if x.strip()]
        elem = type(current[0]) if current else float
        return tuple(elem(x) for x in items)
    if key in ("delta", "alpha", "filter_alpha"):
        return float(raw)
    if key in ("demos", "rollouts_barrier", "rollouts_constraint", "branch_horizon"):
        return int(raw)
    return raw


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig()
    top: dict = {}
    sections: dict[str, dict] = {k: {} for k in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in _SECTIONS:
                raise ConfigurationError(f"line {lineno}: unknown section {sec!r}")
            cur = getattr(getattr(cfg, sec), name, _MISSING)
            if cur is _MISSING:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
            sections[sec][name] = _coerce(value, cur, name)
        else:
            if key not in _TOP:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
            top[key] = _coerce(value, getattr(cfg, key), key)
    out = replace(cfg, **top)
    for sec, vals in sections.items():
        if vals:
            out = replace(out, **{sec: replace(getattr(out, sec), **vals)})
    return out


_MISSING = object()


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"{k} = {_fmt(getattr(cfg, k))}" for k in _TOP]
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            lines.append(f"{sec}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file {p} does not exist")
    return parse_config(p.read_text())
