"""Backward induction for the penalized system on simulated or enumerated paths.

Stepping backward from the terminal payoff, each step estimates

* the gradient proxy ``Z_k = E_k[Y_{k+1} (W_{k+1} - W_k)] / h`` componentwise,
* the jump offsets ``U_k(j) = E_k[Y_{k+1} mu~_k(j)] / (lambda_j h)`` per mark,
  where ``mu~_k(j)`` is the compensated mark-j count over the step,
* the value ``Y_k = E_k[Y_{k+1} + int f^n ds]`` with the penalized driver
  integrated exactly over the step's regime segmentation (state frozen at
  ``X_k``, regime varying with the path).

Conditional expectations ``E_k`` are either least-squares projections on a
basis at ``(I_k, X_k)`` (Monte Carlo mode, :class:`PathBundle` input) or
exact transition averages (enumerated mode, :class:`LatticeChain` input).
The backward code path is identical in both modes. At ``k = 0`` all paths
share the initial state, so the estimate degenerates to the plain sample
mean by construction.

After prediction the jump offsets are re-based: the own-regime component is
subtracted from every component, which zeroes it exactly and makes the
offsets consistent estimates of the cross-regime value differences.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .forward import PathBundle
from .lattice import LatticeChain
from .problem import ProblemSpec
from .regression import BasisSpec, build_design, ols_fit

Array = np.ndarray

__all__ = [
    "SchemeConfig",
    "SolveResult",
    "ConvergenceReport",
    "DivergenceError",
    "estimate_z",
    "estimate_u",
    "driver_integral",
    "step_y",
    "solve_backward",
    "penalization_ladder",
    "skorohod_residual",
]


class DivergenceError(RuntimeError):
    """Numerical abort: estimates left the plausible range."""


@dataclass(frozen=True)
class SchemeConfig:
    """Resolution knobs of one backward solve."""

    h: float
    n: int = 0
    paths: int = 10_000
    basis: BasisSpec = field(default_factory=BasisSpec)
    ridge: Optional[float] = None
    clip_to_growth_bound: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 0:
            raise ValueError("penalization level must be nonnegative")
        if self.paths < 1:
            raise ValueError("path count must be >= 1")
        if not self.h > 0:
            raise ValueError("time step must be positive")

    def echo(self) -> dict:
        return {
            "h": self.h,
            "n": self.n,
            "paths": self.paths,
            "basis": {
                "kind": self.basis.kind,
                "degree": self.basis.degree,
                "stratify_by_regime": self.basis.stratify_by_regime,
            },
            "ridge": self.ridge,
            "clip_to_growth_bound": self.clip_to_growth_bound,
            "seed": self.seed,
        }


@dataclass
class FitRecord:
    """Diagnostics of one per-step regression fit."""

    step: int
    family: str
    stratum: int
    sample_count: int
    gram_condition: float
    residual_mse: float
    rank_deficient: bool


# ---------------------------------------------------------------------------
# ensembles: a uniform per-step view over Monte Carlo paths and chain nodes


class MonteCarloEnsemble:
    """Per-step view of a :class:`PathBundle` with OLS conditional expectations."""

    exact = False

    def __init__(self, spec: ProblemSpec, bundle: PathBundle, basis: BasisSpec, ridge: Optional[float]):
        if bundle.m != spec.m or bundle.d != spec.d:
            raise ValueError("bundle was generated from a different problem shape")
        if abs(bundle.T - spec.horizon) > 1e-9:
            raise ValueError("bundle horizon does not match the problem")
        self.spec = spec
        self.bundle = bundle
        self.basis = basis
        self.ridge = ridge
        self.h = bundle.h
        self.n_steps = bundle.K
        self._design_cache: tuple[int, dict] | None = None
        self._arange = np.arange(bundle.N)

    def n_units(self, k: int) -> int:
        return self.bundle.N

    def states(self, k: int):
        return self.bundle.i_reg[:, k].astype(int), self.bundle.x_reg[:, k, :]

    def unit_weights(self, k: int) -> Array:
        return np.full(self.bundle.N, 1.0 / self.bundle.N)

    def edge_arrays(self, k: int):
        """tail, head, prob, dW, counts for step k (one edge per path)."""
        b = self.bundle
        return self._arange, self._arange, None, b.dw_reg[:, k, :], b.counts_reg[:, k, :].astype(float)

    def segments(self, k: int):
        """(edge index, duration, regime) for the step's sub-intervals."""
        return self.bundle.step_segments()[k]

    def edge_to_unit(self, k: int, values: Array) -> Array:
        return values

    def _design(self, k: int) -> dict:
        if self._design_cache is None or self._design_cache[0] != k:
            regimes, xs = self.states(k)
            self._design_cache = (k, build_design(self.basis, regimes, xs, standardize=True))
        return self._design_cache[1]

    def condexp(self, k: int, targets: Array, family: str) -> tuple[Array, list[FitRecord]]:
        targets = np.atleast_2d(targets.T).T  # (N, c)
        if not np.all(np.isfinite(targets)):
            raise DivergenceError(f"non-finite regression target for {family} at step {k}")
        n, c = targets.shape
        out = np.empty_like(targets)
        records: list[FitRecord] = []
        if k == 0:
            # all paths share the initial state: E_0 is the plain mean
            out[:] = targets.mean(axis=0)[None, :]
            return out, records
        blocks = self._design(k)
        for stratum, block in sorted(blocks.items()):
            ridge = self.ridge
            if ridge is None:
                mat = block.matrix
                ridge = 1e-10 * (float(np.einsum("ij,ij->", mat, mat)) / mat.shape[0]) / mat.shape[1]
            for col in range(c):
                fit = ols_fit(block.matrix, targets[block.rows, col], ridge)
                out[block.rows, col] = block.matrix @ fit.coefficients
                label = family if c == 1 else f"{family}{col + 1}"
                records.append(
                    FitRecord(
                        step=k,
                        family=label,
                        stratum=stratum,
                        sample_count=fit.sample_count,
                        gram_condition=fit.gram_condition,
                        residual_mse=fit.residual_mse,
                        rank_deficient=fit.rank_deficient,
                    )
                )
        return out, records

    def absent_strata(self, k: int) -> list[int]:
        present = set(np.unique(self.bundle.i_reg[:, k]).astype(int))
        return [i for i in range(1, self.spec.m + 1) if i not in present]


class LatticeEnsemble:
    """Per-step view of a :class:`LatticeChain` with exact conditional expectations."""

    exact = True

    def __init__(self, spec: ProblemSpec, chain: LatticeChain):
        if chain.m != spec.m or chain.d != spec.d:
            raise ValueError("chain was built from a different problem shape")
        if abs(chain.T - spec.horizon) > 1e-9:
            raise ValueError("chain horizon does not match the problem")
        self.spec = spec
        self.chain = chain
        self.h = chain.h
        self.n_steps = chain.K

    def n_units(self, k: int) -> int:
        return self.chain.nodes[k].regime.size

    def states(self, k: int):
        ns = self.chain.nodes[k]
        return ns.regime.astype(int), ns.x

    def unit_weights(self, k: int) -> Array:
        return self.chain.nodes[k].mass

    def edge_arrays(self, k: int):
        es = self.chain.edges[k]
        return es.tail, es.head, es.prob, es.dw, es.counts.astype(float)

    def segments(self, k: int):
        es = self.chain.edges[k]
        n_edges = es.tail.size
        regimes = self.chain.nodes[k].regime[es.tail].astype(int)
        return np.arange(n_edges), np.full(n_edges, self.h), regimes

    def edge_to_unit(self, k: int, values: Array) -> Array:
        return self._reduce(k, values)

    def _reduce(self, k: int, per_edge: Array) -> Array:
        es = self.chain.edges[k]
        per_edge = np.atleast_2d(per_edge.T).T
        out = np.zeros((self.n_units(k), per_edge.shape[1]))
        np.add.at(out, es.tail, es.prob[:, None] * per_edge)
        return out[:, 0] if out.shape[1] == 1 else out

    def condexp(self, k: int, targets: Array, family: str) -> tuple[Array, list[FitRecord]]:
        if not np.all(np.isfinite(targets)):
            raise DivergenceError(f"non-finite target for {family} at step {k}")
        return self._reduce(k, targets), []

    def absent_strata(self, k: int) -> list[int]:
        return []


Ensemble = Union[MonteCarloEnsemble, LatticeEnsemble]


def make_ensemble(spec: ProblemSpec, config: SchemeConfig, bundle) -> Ensemble:
    if isinstance(bundle, PathBundle):
        if abs(bundle.h - config.h) > 1e-9 * max(1.0, config.h):
            raise ValueError("bundle step does not match the configured step")
        return MonteCarloEnsemble(spec, bundle, config.basis, config.ridge)
    if isinstance(bundle, LatticeChain):
        return LatticeEnsemble(spec, bundle)
    raise TypeError(f"cannot build an ensemble from {type(bundle).__name__}")


# ---------------------------------------------------------------------------
# per-step operations


def estimate_z(ens: Ensemble, k: int, y_next: Array) -> tuple[Array, list[FitRecord]]:
    """Gradient-proxy estimate at step k from next-step values.

    Regresses ``Y_{k+1} * dW / h`` componentwise; ``dW`` is the aggregate
    increment over the whole step.
    """
    if k >= ens.n_steps:
        raise ValueError("step index out of range")
    _, head, _, dw, _ = ens.edge_arrays(k)
    targets = y_next[head][:, None] * dw / ens.h
    values, records = ens.condexp(k, targets, "z")
    return np.atleast_2d(values.T).T, records


def estimate_u(ens: Ensemble, k: int, y_next: Array) -> tuple[Array, Array, list[FitRecord]]:
    """Jump-offset estimates at step k, re-based at the current regime.

    Returns ``(u, u_raw, fit records)`` where ``u_raw`` is the direct
    compensated-count regression and ``u`` subtracts each unit's own-regime
    component (making it exactly zero there).
    """
    spec = ens.spec
    lam = spec.intensity.weights
    if np.any(lam <= 0):
        raise ValueError("nonpositive intensity weight")
    _, head, _, _, counts = ens.edge_arrays(k)
    compensated = counts - lam[None, :] * ens.h
    targets = y_next[head][:, None] * compensated / (lam[None, :] * ens.h)
    u_raw, records = ens.condexp(k, targets, "u")
    u_raw = np.atleast_2d(u_raw.T).T
    regimes, _ = ens.states(k)
    own = u_raw[np.arange(u_raw.shape[0]), regimes - 1]
    u = u_raw - own[:, None]
    return u, u_raw, records


def _driver_terms(
    spec: ProblemSpec, n_pen: int, ens: Ensemble, k: int, y_next: Array, z: Array, u: Array
) -> tuple[Array, Array, Array]:
    """Per-edge driver integral, penalty mass and time-averaged violation.

    The integral runs over the step's sub-intervals: on a sub-interval in
    regime ``r`` the integrand is the penalized driver at state ``X_k``
    (frozen), value vector rebuilt from ``(Y_{k+1}, U_k)`` with ``r`` as the
    base regime, and the step's ``Z_k``, minus the jump compensator
    ``sum_j lambda_j (yvec_j - yvec_r)``. The compensator belongs to the
    scheme, not to the problem's driver: the backward equation removes the
    jump integral of the value process, whose conditional mean per unit
    time is exactly that sum.
    """
    tail, head, _, _, _ = ens.edge_arrays(k)
    _, xs = ens.states(k)
    lam = spec.intensity.weights
    seg_edge, seg_dt, seg_regime = ens.segments(k)

    y_seg = y_next[head][seg_edge]
    x_seg = xs[tail][seg_edge]
    z_seg = z[tail][seg_edge]
    u_seg = u[tail][seg_edge]

    f_val = np.empty(seg_edge.size)
    pen_val = np.zeros(seg_edge.size)
    for r in np.unique(seg_regime):
        rows = np.flatnonzero(seg_regime == r)
        yvec = y_seg[rows][:, None] + u_seg[rows]
        yvec[:, r - 1] = y_seg[rows]
        compensator = yvec @ lam - lam.sum() * yvec[:, r - 1]
        f_val[rows] = spec.driver(int(r), x_seg[rows], yvec, z_seg[rows]) - compensator
        if spec.m > 1 or n_pen > 0:
            pen = np.zeros(rows.size)
            for j in range(1, spec.m + 1):
                hval = spec.constraint(int(r), j, x_seg[rows], yvec[:, r - 1], yvec[:, j - 1], z_seg[rows])
                pen += lam[j - 1] * np.maximum(-np.asarray(hval, dtype=float), 0.0)
            pen_val[rows] = pen

    n_edges = tail.size
    integral = np.zeros(n_edges)
    np.add.at(integral, seg_edge, seg_dt * (f_val + n_pen * pen_val))
    penalty_mass = np.zeros(n_edges)
    np.add.at(penalty_mass, seg_edge, seg_dt * n_pen * pen_val)
    violation = np.zeros(n_edges)
    np.add.at(violation, seg_edge, seg_dt * pen_val / ens.h)
    return integral, penalty_mass, violation


def driver_integral(
    spec: ProblemSpec,
    n: int,
    bundle: PathBundle,
    path: int,
    k: int,
    y_next: float,
    z_k: Array,
    u_k: Array,
) -> float:
    """Exact integral of the scheme's integrand over path ``path``'s step ``k``.

    The integrand (penalized driver minus the jump compensator) is constant
    on each sub-interval of the concatenated grid, so the sum of
    ``duration * integrand`` terms is the exact integral.
    """
    durations, regimes = bundle.path_segments(path, k)
    x = bundle.x_reg[path, k][None, :]
    z2 = np.atleast_2d(np.asarray(z_k, dtype=float))
    u_k = np.asarray(u_k, dtype=float)
    lam = spec.intensity.weights
    total = 0.0
    for dt_l, r in zip(durations, regimes):
        yvec = (y_next + u_k)[None, :].copy()
        yvec[0, r - 1] = y_next
        f = float(np.asarray(spec.driver(int(r), x, yvec, z2))[0])
        compensator = float(yvec[0] @ lam - lam.sum() * yvec[0, r - 1])
        pen = 0.0
        for j in range(1, spec.m + 1):
            hval = spec.constraint(int(r), j, x, yvec[:, r - 1], yvec[:, j - 1], z2)
            pen += lam[j - 1] * max(-float(np.asarray(hval)[0]), 0.0)
        total += dt_l * (f - compensator + n * pen)
    return float(total)


def step_y(
    ens: Ensemble,
    k: int,
    y_next: Array,
    z_k: Array,
    u_k: Array,
    spec: ProblemSpec,
    n: int,
) -> tuple[Array, Array, Array, list[FitRecord]]:
    """Value estimate at step k: project ``Y_{k+1} + int f^n`` on the basis.

    Returns ``(y, penalty_mass, violation, fit records)`` with the penalty
    mass and the time-averaged constraint violation reduced per unit.
    """
    _, head, _, _, _ = ens.edge_arrays(k)
    integral, penalty_edge, violation_edge = _driver_terms(spec, n, ens, k, y_next, z_k, u_k)
    targets = y_next[head] + integral
    y, records = ens.condexp(k, targets, "y")
    y = np.asarray(y).reshape(-1)
    return y, ens.edge_to_unit(k, penalty_edge), ens.edge_to_unit(k, violation_edge), records


# ---------------------------------------------------------------------------
# the full backward pass


@dataclass
class SolveResult:
    """Output of one backward solve."""

    y0: float
    scheme: SchemeConfig
    mode: str
    ys: list[Array]
    zs: list[Array]
    us: list[Array]
    penalty_mass: list[Array]
    violation_mean: Array
    violation_max: Array
    fit_records: list[FitRecord]
    absent_strata_steps: dict[int, list[int]] = field(default_factory=dict)
    clipped_fraction: float = 0.0

    def diagnostics_dict(self) -> dict:
        return {
            "violation_mean": [float(v) for v in self.violation_mean],
            "violation_max": [float(v) for v in self.violation_max],
            "mean_violation": float(np.mean(self.violation_mean)) if len(self.violation_mean) else 0.0,
            "clipped_fraction": self.clipped_fraction,
            "absent_strata_steps": {str(k): v for k, v in self.absent_strata_steps.items()},
        }

    def compact(self) -> None:
        """Drop per-step arrays, keeping scalars and diagnostics."""
        self.ys = []
        self.zs = []
        self.us = []
        self.penalty_mass = []


def solve_backward(spec: ProblemSpec, config: SchemeConfig, bundle) -> SolveResult:
    """Run the backward scheme on a path bundle or an enumerated chain."""
    spec.intensity.require_positive()
    ens = make_ensemble(spec, config, bundle)
    K = ens.n_steps

    if isinstance(ens, MonteCarloEnsemble):
        per_stratum = config.paths / max(spec.m, 1)
        if per_stratum < config.basis.size(spec.d):
            warnings.warn("fewer paths per stratum than basis functions", stacklevel=2)

    regimes_T, x_T = ens.states(K)
    y = np.empty(regimes_T.size)
    for i in np.unique(regimes_T):
        rows = np.flatnonzero(regimes_T == i)
        y[rows] = spec.terminal(int(i), x_T[rows])

    ys: list[Array] = [None] * (K + 1)
    zs: list[Array] = [None] * K
    us: list[Array] = [None] * K
    pmass: list[Array] = [None] * K
    viol_mean = np.zeros(K)
    viol_max = np.zeros(K)
    records: list[FitRecord] = []
    absent: dict[int, list[int]] = {}
    clipped = 0
    total_units = 0
    ys[K] = y

    for k in range(K - 1, -1, -1):
        z, rec_z = estimate_z(ens, k, y)
        u, _, rec_u = estimate_u(ens, k, y)
        y_new, pm, vl, rec_y = step_y(ens, k, y, z, u, spec, config.n)

        if config.clip_to_growth_bound and spec.growth_bound is not None:
            _, xs = ens.states(k)
            bound = spec.growth_radius(xs)
            clipped += int(np.count_nonzero(np.abs(y_new) > bound))
            y_new = np.clip(y_new, -bound, bound)
        if spec.growth_bound is not None:
            _, xs = ens.states(k)
            if np.any(np.abs(y_new) > 10.0 * spec.growth_radius(xs)):
                raise DivergenceError(f"value estimate exceeded 10x the growth bound at step {k}")

        w = ens.unit_weights(k)
        viol_mean[k] = float(w @ vl)
        viol_max[k] = float(vl.max()) if vl.size else 0.0
        missing = ens.absent_strata(k)
        if missing:
            absent[k] = missing
        records.extend(rec_z + rec_u + rec_y)
        ys[k], zs[k], us[k], pmass[k] = y_new, z, u, pm
        total_units += y_new.size
        y = y_new

    y0 = float(ens.unit_weights(0) @ ys[0])
    return SolveResult(
        y0=y0,
        scheme=config,
        mode="exact" if ens.exact else "mc",
        ys=ys,
        zs=zs,
        us=us,
        penalty_mass=pmass,
        violation_mean=viol_mean,
        violation_max=viol_max,
        fit_records=records,
        absent_strata_steps=absent,
        clipped_fraction=clipped / max(total_units, 1),
    )


def skorohod_residual(result: SolveResult, spec: ProblemSpec, bundle) -> float:
    """Discrete minimality diagnostic: sum of min-constraint times penalty mass.

    Accumulates ``min_j h_{i,j}(X_k, Y_{k+1}, Y_{k+1} + U_k(j), Z_k)`` against
    the realized penalty increments, averaged under the path measure. The
    constraint arguments mirror the penalty's own evaluation points, so the
    residual tends to zero exactly when mass stops accruing off the
    constraint boundary. Meaningful when the constraint ignores ``z``.
    """
    if not result.ys:
        raise ValueError("result was compacted; per-step arrays are gone")
    ens = make_ensemble(spec, result.scheme, bundle)
    total = 0.0
    for k in range(ens.n_steps):
        pm = result.penalty_mass[k]
        if not np.any(pm):
            continue
        tail, head, prob, _, _ = ens.edge_arrays(k)
        regimes, xs = ens.states(k)
        y_head = result.ys[k + 1][head]
        u_tail = result.us[k][tail]
        z_tail = result.zs[k][tail]
        x_tail = xs[tail]
        r_tail = regimes[tail]
        minh = np.full(tail.size, np.inf)
        for r in np.unique(r_tail):
            rows = np.flatnonzero(r_tail == r)
            cur = np.full(rows.size, np.inf)
            for j in range(1, spec.m + 1):
                hval = spec.constraint(
                    int(r), j, x_tail[rows], y_head[rows], y_head[rows] + u_tail[rows, j - 1], z_tail[rows]
                )
                cur = np.minimum(cur, np.asarray(hval, dtype=float))
            minh[rows] = cur
        w = ens.unit_weights(k)[tail]
        edge_prob = prob if prob is not None else np.ones(tail.size)
        total += float(np.sum(w * edge_prob * minh * pm[tail]))
    return total


@dataclass
class ConvergenceReport:
    """Penalization ladder: value and violation as the level grows."""

    n_schedule: list[int]
    y0: list[float]
    mean_violation: list[float]
    y0_nondecreasing: list[bool]
    violation_nonincreasing: list[bool]
    skorohod: list[float]

    @property
    def monotone(self) -> bool:
        return all(self.y0_nondecreasing)

    def to_dict(self) -> dict:
        return {
            "n_schedule": list(self.n_schedule),
            "y0": self.y0,
            "mean_violation": self.mean_violation,
            "y0_nondecreasing": self.y0_nondecreasing,
            "violation_nonincreasing": self.violation_nonincreasing,
            "skorohod_residual": self.skorohod,
            "monotone": self.monotone,
        }


def penalization_ladder(
    spec: ProblemSpec,
    config: SchemeConfig,
    n_schedule: list[int],
    bundle=None,
) -> ConvergenceReport:
    """Run the backward solve along an increasing penalization schedule.

    All levels share the same paths (or chain): with no bundle given, one is
    simulated from the config's seed and reused, so differences along the
    ladder are purely due to the penalty level.
    """
    if not n_schedule:
        raise ValueError("n_schedule must have at least one entry")
    if any(b <= a for a, b in zip(n_schedule, n_schedule[1:])):
        raise ValueError("n_schedule must be strictly increasing")
    if bundle is None:
        from .forward import simulate_paths

        bundle = simulate_paths(spec, config.paths, config.h, config.seed)
    y0s: list[float] = []
    viols: list[float] = []
    skos: list[float] = []
    for n in n_schedule:
        result = solve_backward(spec, replace(config, n=int(n)), bundle)
        y0s.append(result.y0)
        viols.append(float(np.mean(result.violation_mean)) if result.violation_mean.size else 0.0)
        skos.append(skorohod_residual(result, spec, bundle))
        result.compact()
    return ConvergenceReport(
        n_schedule=[int(n) for n in n_schedule],
        y0=y0s,
        mean_violation=viols,
        y0_nondecreasing=[b >= a for a, b in zip(y0s, y0s[1:])],
        violation_nonincreasing=[b <= a for a, b in zip(viols, viols[1:])],
        skorohod=skos,
    )
