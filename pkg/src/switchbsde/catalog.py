"""Built-in benchmark problems.

Every catalog entry is a named builder plus a flat parameter dict, so a run
is fully reproducible from a config file: the CLI selects a problem by name
and overrides scalar parameters, never shipping code. Regime-dependent
parameters are lists indexed by regime (1-based regime ``i`` reads entry
``i-1``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .problem import (
    CoefficientSet,
    IntensityMeasure,
    ProblemSpec,
    SwitchingCosts,
    make_switching_problem,
)

Array = np.ndarray

__all__ = ["CatalogEntry", "list_catalog", "catalog_defaults", "build_problem"]


def _const_drift(levels: Sequence[float]):
    levels = [float(v) for v in levels]

    def drift(i: int, x: Array) -> Array:
        return np.full_like(np.asarray(x, dtype=float), levels[i - 1])

    return drift


def _const_vol(levels: Sequence[float]):
    levels = [float(v) for v in levels]

    def vol(i: int, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        n, d = x.shape
        out = np.zeros((n, d, d))
        idx = np.arange(d)
        out[:, idx, idx] = levels[i - 1]
        return out

    return vol


def _const_reward(levels: Sequence[float]):
    levels = [float(v) for v in levels]

    def reward(i: int, x: Array) -> Array:
        return np.full(np.asarray(x).shape[0], levels[i - 1])

    return reward


def _linear_terminal(i: int, x: Array) -> Array:
    return np.asarray(x, dtype=float)[:, 0]


def _square_terminal(i: int, x: Array) -> Array:
    return np.asarray(x, dtype=float)[:, 0] ** 2


def _build_single_regime(params: Mapping) -> ProblemSpec:
    terminal = _linear_terminal if params["terminal"] == "linear" else _square_terminal
    zero_values_driver = _const_reward(params.get("rewards", [0.0]))

    def driver(i: int, x: Array, values: Array, zproxy: Array) -> Array:
        return zero_values_driver(i, x)

    def constraint(i: int, j: int, x: Array, y_cur: Array, y_tgt: Array, z: Array) -> Array:
        # single regime: only the vacuous self constraint, identically zero
        return np.asarray(y_cur) - np.asarray(y_tgt)

    coeffs = CoefficientSet(
        drift=_const_drift(params["drift"]),
        vol=_const_vol(params["sigma"]),
        driver=driver,
        constraint=constraint,
        terminal=terminal,
    )
    gb = params.get("growth_bound")
    return ProblemSpec(
        m=1,
        d=1,
        horizon=float(params["T"]),
        intensity=IntensityMeasure(params["intensity"]),
        coefficients=coeffs,
        initial_regime=int(params["i0"]),
        initial_state=np.asarray(params["x0"], dtype=float),
        growth_bound=tuple(gb) if gb is not None else None,
        switching_costs=SwitchingCosts(np.zeros((1, 1))),
        name=params["name"],
    )


def _build_switching(params: Mapping) -> ProblemSpec:
    m = len(params["sigma"])
    gb = params.get("growth_bound")
    return make_switching_problem(
        m=m,
        d=1,
        costs=np.asarray(params["costs"], dtype=float),
        drift=_const_drift(params["drift"]),
        vol=_const_vol(params["sigma"]),
        running_reward=_const_reward(params["rewards"]),
        terminal=_linear_terminal,
        intensity=IntensityMeasure(params["intensity"]),
        horizon=float(params["T"]),
        initial_regime=int(params["i0"]),
        initial_state=np.asarray(params["x0"], dtype=float),
        growth_bound=tuple(gb) if gb is not None else None,
        name=params["name"],
    )


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    description: str
    defaults: dict
    builder: Callable[[Mapping], ProblemSpec]


_CATALOG: dict[str, CatalogEntry] = {}


def _register(entry: CatalogEntry) -> None:
    if entry.name in _CATALOG:
        raise ValueError(f"duplicate catalog name {entry.name!r}")
    _CATALOG[entry.name] = entry


_register(
    CatalogEntry(
        name="bm1",
        description="single regime, zero drift, unit vol, identity payoff (martingale benchmark)",
        defaults={
            "name": "bm1",
            "T": 1.0,
            "x0": [0.7],
            "i0": 1,
            "drift": [0.0],
            "sigma": [1.0],
            "rewards": [0.0],
            "intensity": [0.5],
            "terminal": "linear",
            "growth_bound": [1.0, 1.0],
        },
        builder=_build_single_regime,
    )
)

_register(
    CatalogEntry(
        name="bm1-quad",
        description="single regime, zero drift, unit vol, squared payoff (variance benchmark)",
        defaults={
            "name": "bm1-quad",
            "T": 1.0,
            "x0": [0.0],
            "i0": 1,
            "drift": [0.0],
            "sigma": [1.0],
            "rewards": [0.0],
            "intensity": [0.5],
            "terminal": "square",
            "growth_bound": None,
        },
        builder=_build_single_regime,
    )
)

_register(
    CatalogEntry(
        name="switch2-linear",
        description="two-regime switching, constant regime rewards, linear payoff, distinct vols",
        defaults={
            "name": "switch2-linear",
            "T": 0.5,
            "x0": [0.0],
            "i0": 2,
            "drift": [0.0, 0.0],
            "sigma": [0.2, 0.3],
            "rewards": [0.5, -0.5],
            "costs": [[0.0, 0.1], [0.1, 0.0]],
            "intensity": [1.5, 1.5],
            "growth_bound": [0.3, 1.0],
        },
        builder=_build_switching,
    )
)

_register(
    CatalogEntry(
        name="switch3",
        description="three-regime switching, constant regime rewards, linear payoff",
        defaults={
            "name": "switch3",
            "T": 1.0,
            "x0": [0.0],
            "i0": 1,
            "drift": [0.0, 0.0, 0.0],
            "sigma": [0.2, 0.25, 0.3],
            "rewards": [1.0, 0.55, 0.1],
            "costs": [
                [0.0, 0.12, 0.2],
                [0.12, 0.0, 0.15],
                [0.2, 0.15, 0.0],
            ],
            "intensity": [1.0, 0.8, 0.6],
            "growth_bound": [1.1, 1.0],
        },
        builder=_build_switching,
    )
)


def list_catalog() -> list[tuple[str, str]]:
    """Names and one-line descriptions of the shipped benchmark problems."""
    return [(e.name, e.description) for e in _CATALOG.values()]


def catalog_defaults(name: str) -> dict:
    """A copy of the default parameter dict for one catalog entry."""
    if name not in _CATALOG:
        raise ValueError(f"unknown catalog problem {name!r}")
    import copy

    return copy.deepcopy(_CATALOG[name].defaults)


def build_problem(name: str, overrides: Mapping | None = None) -> ProblemSpec:
    """Instantiate a catalog problem, optionally overriding its parameters.

    Unknown override keys are rejected so config typos fail loudly.
    """
    params = catalog_defaults(name)
    if overrides:
        for key, value in overrides.items():
            if key not in params or key == "name":
                raise ValueError(f"unknown parameter override {key!r} for problem {name!r}")
            params[key] = value
    return _CATALOG[name].builder(params)
