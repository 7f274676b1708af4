"""Builders for the benchmark games and the name registry used by the CLI."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Callable

from ..model import FiniteMFG
from .beach_bar import BeachBarParams, build_beach_bar
from .lq import (
    LQParams,
    build_lq,
    build_lq_cn,
    lq_control_gain,
    lq_exact_policy,
    lq_riccati_eta,
    lq_riccati_ode,
)
from .maze import MazeParams, build_maze2d

__all__ = [
    "BeachBarParams",
    "LQParams",
    "MazeParams",
    "ENVIRONMENTS",
    "EnvSpec",
    "build_beach_bar",
    "build_env",
    "build_lq",
    "build_lq_cn",
    "build_maze2d",
    "env_params",
    "lq_control_gain",
    "lq_exact_policy",
    "lq_riccati_eta",
    "lq_riccati_ode",
]


@dataclass(frozen=True)
class EnvSpec:
    name: str
    description: str
    params_cls: type
    defaults: dict
    builder: Callable[..., FiniteMFG]
    mode: str  # "finite" or "discounted"

    def params(self, overrides: dict | None = None):
        overrides = dict(overrides or {})
        known = {f.name for f in fields(self.params_cls)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ValueError(f"unknown parameter(s) for {self.name}: {', '.join(unknown)}")
        merged = {**self.defaults, **overrides}
        for key in ("goal", "source"):
            if key in merged and isinstance(merged[key], list):
                merged[key] = tuple(merged[key])
        return self.params_cls(**merged)

    def default_params(self) -> dict:
        return asdict(self.params_cls(**self.defaults))


ENVIRONMENTS: dict[str, EnvSpec] = {
    spec.name: spec
    for spec in (
        EnvSpec("lq", "linear-quadratic crowd on a 1-D grid, finite horizon", LQParams, {}, build_lq, "finite"),
        EnvSpec(
            "lq_cn",
            "linear-quadratic crowd with a binary common noise (full scenario tree)",
            LQParams,
            {"rho": 0.5, "horizon": 8},
            build_lq_cn,
            "finite",
        ),
        EnvSpec("beach_bar", "beach bar on a torus, finite horizon", BeachBarParams, {}, build_beach_bar, "finite"),
        EnvSpec(
            "beach_bar_cn1",
            "beach bar that may close at one step (common noise)",
            BeachBarParams,
            {"horizon": 30, "noise": "closure_at", "p_close": 0.5},
            build_beach_bar,
            "finite",
        ),
        EnvSpec(
            "beach_bar_cn2",
            "beach bar that may close at any of the first N/2 steps (common noise)",
            BeachBarParams,
            {"horizon": 30, "noise": "closure_window", "p_close": 0.5},
            build_beach_bar,
            "finite",
        ),
        EnvSpec(
            "beach_bar_gamma",
            "beach bar with discounted reward",
            BeachBarParams,
            {"horizon": None, "discount": 0.9},
            build_beach_bar,
            "discounted",
        ),
        EnvSpec("maze2d", "crowd moving to the centre of a 2-D maze", MazeParams, {}, build_maze2d, "finite"),
    )
}


def build_env(name: str, overrides: dict | None = None) -> FiniteMFG:
    try:
        spec = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {', '.join(ENVIRONMENTS)}") from None
    model = spec.builder(spec.params(overrides))
    return _renamed(model, name)


def env_params(name: str, overrides: dict | None = None) -> object:
    return ENVIRONMENTS[name].params(overrides)


def _renamed(model: FiniteMFG, name: str) -> FiniteMFG:
    object.__setattr__(model, "name", name)
    return model
