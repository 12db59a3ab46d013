"""Ground-truth engines: exact chain dynamic programming and finite differences.

``lattice_dp_solve`` evaluates the backward scheme on an enumerated chain by
direct per-node dynamic programming. It is an independent second
implementation of the recursion in :mod:`switchbsde.backward` (exact mode):
the two share only the chain object, so agreement validates both.

``fd_solve`` solves the coupled obstacle system for switching-form problems
on a one-dimensional grid with a theta-scheme per regime. Projection mode
applies the switching obstacle ``v_i >= max_j (v_j - c_ij)`` pointwise after
each linear step; penalized mode adds the penalty implicitly through a
per-node scalar solve, which keeps the values monotone in the penalty level
for any step size and converges to the projection update as the level grows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .backward import DivergenceError
from .lattice import LatticeChain, LatticeSpec, build_lattice_chain
from .problem import ProblemSpec

Array = np.ndarray

__all__ = [
    "LatticeSpec",
    "LatticeChain",
    "build_lattice_chain",
    "LatticeSolution",
    "lattice_dp_solve",
    "GridSolution",
    "facelift_terminal",
    "default_grid",
    "fd_solve",
    "oracle_compare",
    "CompareReport",
]


# ---------------------------------------------------------------------------
# exact dynamic programming on the chain


@dataclass
class LatticeSolution:
    """Per-node values of the scheme computed by direct enumeration.

    ``values[k]`` are the node values at step k; ``u[k]`` the re-based jump
    offsets, ``u_raw[k]`` the direct compensated-count expectations,
    ``proxies[k][:, j-1]`` the Brownian-only continuation of regime j's
    next-step values (the step-(k+1) value of regime j seen from the node),
    and ``z[k]`` the gradient proxies.
    """

    chain: LatticeChain
    y0: float
    values: list[Array]
    z: list[Array]
    u: list[Array]
    u_raw: list[Array]
    proxies: list[Array]

    def to_dict(self) -> dict:
        """JSON-ready dump: per step, the node states and their values."""
        steps = []
        for k, ns in enumerate(self.chain.nodes):
            entry = {
                "step": k,
                "regime": ns.regime.astype(int).tolist(),
                "x": ns.x[:, 0].tolist(),
                "mass": ns.mass.tolist(),
                "value": self.values[k].tolist(),
            }
            if k < self.chain.K:
                entry["z"] = self.z[k][:, 0].tolist()
                entry["u"] = self.u[k].tolist()
            steps.append(entry)
        return {"y0": self.y0, "h": self.chain.h, "steps": steps}


def lattice_dp_solve(spec: ProblemSpec, lattice: LatticeSpec | LatticeChain, n: int = 0) -> LatticeSolution:
    """Evaluate the penalized backward recursion exactly on the chain."""
    chain = lattice if isinstance(lattice, LatticeChain) else build_lattice_chain(spec, lattice)
    lam = spec.intensity.weights
    spec.intensity.require_positive()
    h = chain.h
    K = chain.K

    terminal_nodes = chain.nodes[K]
    v = np.empty(terminal_nodes.regime.size)
    for i in np.unique(terminal_nodes.regime):
        rows = np.flatnonzero(terminal_nodes.regime == i)
        v[rows] = spec.terminal(int(i), terminal_nodes.x[rows])

    values: list[Array] = [None] * (K + 1)
    zs: list[Array] = [None] * K
    us: list[Array] = [None] * K
    us_raw: list[Array] = [None] * K
    proxies: list[Array] = [None] * K
    values[K] = v

    for k in range(K - 1, -1, -1):
        nodes = chain.nodes[k]
        es = chain.edges[k]
        n_units = nodes.regime.size
        v_head = v[es.head]

        def reduce(weights: Array) -> Array:
            out = np.zeros(n_units)
            np.add.at(out, es.tail, weights)
            return out

        z = np.stack([reduce(es.prob * v_head * es.dw[:, c]) / h for c in range(chain.d)], axis=1)

        u_raw = np.empty((n_units, chain.m))
        proxy = np.empty((n_units, chain.m))
        for j in range(1, chain.m + 1):
            comp = es.counts[:, j - 1] - lam[j - 1] * h
            u_raw[:, j - 1] = reduce(es.prob * v_head * comp) / (lam[j - 1] * h)
            mark_edges = es.counts[:, j - 1] > 0
            proxy[:, j - 1] = reduce(np.where(mark_edges, es.prob * v_head / (lam[j - 1] * h), 0.0))
        own = u_raw[np.arange(n_units), nodes.regime - 1]
        u = u_raw - own[:, None]

        # one sub-interval per step (atoms sit at step ends): the integrand is
        # evaluated at the tail regime with the edge's next-step value, and
        # the jump compensator sum_j lambda_j (yvec_j - yvec_r) is removed
        f_edge = np.empty(es.tail.size)
        tail_regime = nodes.regime[es.tail]
        for r in np.unique(tail_regime):
            rows = np.flatnonzero(tail_regime == r)
            yvec = v_head[rows][:, None] + u[es.tail[rows]]
            yvec[:, r - 1] = v_head[rows]
            x_rows = nodes.x[es.tail[rows]]
            z_rows = z[es.tail[rows]]
            compensator = yvec @ lam - lam.sum() * yvec[:, r - 1]
            fv = np.asarray(spec.driver(int(r), x_rows, yvec, z_rows), dtype=float) - compensator
            if n > 0:
                pen = np.zeros(rows.size)
                for j in range(1, chain.m + 1):
                    hval = spec.constraint(int(r), j, x_rows, yvec[:, r - 1], yvec[:, j - 1], z_rows)
                    pen += lam[j - 1] * np.maximum(-np.asarray(hval, dtype=float), 0.0)
                fv = fv + n * pen
            f_edge[rows] = fv

        v = reduce(es.prob * (v_head + h * f_edge))
        values[k], zs[k], us[k], us_raw[k], proxies[k] = v, z, u, u_raw, proxy

    return LatticeSolution(chain=chain, y0=float(values[0][0]), values=values, z=zs, u=us, u_raw=us_raw, proxies=proxies)


# ---------------------------------------------------------------------------
# finite differences for switching-form problems (d = 1)


@dataclass
class GridSolution:
    """Value arrays on a fixed space-time grid, one sheet per regime."""

    times: Array            # (n_t + 1,)
    xs: Array               # (M + 1,)
    values: Array           # (m, n_t + 1, M + 1)
    mode: str
    facelift: bool
    penalization: Optional[int] = None

    def value_at(self, t: float, i: int, x: float) -> float:
        """Linear interpolation in x at a grid time; refuses extrapolation."""
        kt = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[kt] - t) > 1e-9 * max(1.0, self.times[-1]):
            raise ValueError(f"time {t} is not on the oracle grid")
        if not (self.xs[0] - 1e-12 <= x <= self.xs[-1] + 1e-12):
            raise ValueError(f"state {x} outside the oracle grid; extrapolation refused")
        return float(np.interp(x, self.xs, self.values[i - 1, kt]))


def facelift_terminal(g: Array, costs: Array) -> Array:
    """Smallest terminal data dominating g and compatible with switching.

    ``g`` has shape (m, n_x); one sweep of ``max(g_i, max_j g_j - c_ij)``
    suffices (and is idempotent) under the strict triangle condition.
    """
    g = np.asarray(g, dtype=float)
    m = g.shape[0]
    lifted = g.copy()
    for i in range(m):
        for j in range(m):
            if j != i:
                lifted[i] = np.maximum(lifted[i], g[j] - costs[i, j])
    return lifted


def default_grid(spec: ProblemSpec, M: int = 400) -> tuple[int, float, float]:
    """Grid covering about four standard deviations around the start point.

    Wide enough that the mass escaping the domain is negligible at the
    start point, narrow enough to keep the node spacing useful.
    """
    probe = spec.initial_state[None, :]
    sig = max(float(np.asarray(spec.vol(i, probe))[0, 0, 0]) for i in range(1, spec.m + 1))
    bmax = max(abs(float(np.asarray(spec.drift(i, probe))[0, 0])) for i in range(1, spec.m + 1))
    radius = 4.0 * max(sig, 1e-3) * np.sqrt(spec.horizon) + bmax * spec.horizon
    x0 = float(spec.initial_state[0])
    return M, x0 - radius, x0 + radius


def _implicit_penalty_update(vhat: Array, costs: Array, lam: Array, n: int, dt: float) -> Array:
    """Solve ``v_i = vhat_i + dt n sum_j lam_j max((vhat_j - c_ij) - v_i, 0)``.

    The left side is increasing and the right side non-increasing in
    ``v_i``, so the root is unique; it is found per node by scanning active
    sets in decreasing obstacle order. Monotone in ``vhat``, the obstacles
    and ``n``, and tends to ``max(vhat_i, max_j vhat_j - c_ij)`` as n grows.
    """
    m, nx = vhat.shape
    a = dt * float(n)
    out = np.empty_like(vhat)
    for i in range(m):
        obstacles = vhat - costs[i][:, None]  # (m, nx); row i is vhat_i itself
        order = np.argsort(-obstacles, axis=0)
        o_sorted = np.take_along_axis(obstacles, order, axis=0)
        lam_sorted = lam[order]
        v = np.empty(nx)
        solved = np.zeros(nx, dtype=bool)
        lam_cum = np.zeros(nx)
        weighted_cum = np.zeros(nx)
        cand = vhat[i]  # q = 0 active obstacles
        ok = cand >= o_sorted[0]
        v[ok] = cand[ok]
        solved |= ok
        for q in range(1, m + 1):
            lam_cum = lam_cum + lam_sorted[q - 1]
            weighted_cum = weighted_cum + lam_sorted[q - 1] * o_sorted[q - 1]
            cand = (vhat[i] + a * weighted_cum) / (1.0 + a * lam_cum)
            eps = 1e-12 * (1.0 + np.abs(cand))
            ok = ~solved & (cand <= o_sorted[q - 1] + eps)
            if q < m:
                ok &= cand >= o_sorted[q] - eps
            v[ok] = cand[ok]
            solved |= ok
        v[~solved] = cand[~solved]  # float edge between segments; root is unique
        out[i] = v
    return out


def fd_solve(
    spec: ProblemSpec,
    grid: tuple[int, float, float],
    dt: float,
    mode: str = "projection",
    penalization: Optional[int] = None,
    facelift: bool = True,
    theta: float = 0.5,
) -> GridSolution:
    """Theta-scheme solve of the coupled switching system on a 1-d grid.

    ``grid = (M, x_min, x_max)``. Boundary rows evaluate the generator with
    one-sided stencils (no artificial Dirichlet data). ``mode`` is
    ``"projection"`` or ``"penalized"`` (the latter needs ``penalization``).
    The time grid steps backward from the (optionally face-lifted) terminal
    data.
    """
    if spec.d != 1:
        raise ValueError("finite-difference oracle supports d = 1 only")
    if spec.switching_costs is None:
        raise ValueError("finite-difference oracle needs a switching-form problem")
    if mode not in ("projection", "penalized"):
        raise ValueError(f"unknown fd mode {mode!r}")
    if mode == "penalized" and (penalization is None or penalization < 0):
        raise ValueError("penalized mode needs a nonnegative penalization level")
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")

    M, x_min, x_max = grid
    if M < 4 or not x_min < x_max:
        raise ValueError("grid must have at least 5 nodes and x_min < x_max")
    T = spec.horizon
    n_t = int(round(T / dt))
    if n_t < 1 or abs(n_t * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"time step {dt} does not divide horizon {T}")
    dt = T / n_t
    xs = np.linspace(x_min, x_max, M + 1)
    dx = xs[1] - xs[0]
    m = spec.m
    lam = spec.intensity.weights
    costs = spec.switching_costs.costs

    x2d = xs[:, None]
    drift = np.stack([np.asarray(spec.drift(i, x2d), dtype=float)[:, 0] for i in range(1, m + 1)])
    diff2 = np.stack([np.asarray(spec.vol(i, x2d), dtype=float)[:, 0, 0] ** 2 for i in range(1, m + 1)])
    zeros_vals = np.zeros((M + 1, m))
    zeros_z = np.zeros((M + 1, 1))
    source = np.stack(
        [np.asarray(spec.driver(i, x2d, zeros_vals, zeros_z), dtype=float) for i in range(1, m + 1)]
    )

    # theta >= 1/2 is unconditionally stable; below that the explicit part
    # dominates and the classical parabolic bound applies
    if theta < 0.5:
        cfl = (1.0 - 2.0 * theta) * dt * float(np.max(diff2 / dx**2 + np.abs(drift) / dx))
        if cfl > 1.0 + 1e-9:
            raise ValueError(
                f"explicit part unstable: (1-2 theta) dt (sigma^2/dx^2 + |b|/dx) = {cfl:.3f} > 1"
            )

    # central-difference generator per regime (interior rows)
    lower = diff2 / (2 * dx**2) - drift / (2 * dx)
    diag = -diff2 / dx**2
    upper = diff2 / (2 * dx**2) + drift / (2 * dx)

    # Boundary rows apply the generator with one-sided stencils: the shifted
    # 3-point second difference and 3-point first difference are both exact
    # on quadratics, so no artificial boundary layer forms. They touch a
    # node beyond a tridiagonal band, hence the pentadiagonal assembly.
    bweight = np.zeros((m, 2, 3))  # generator rows at the two ends
    for i in range(m):
        bweight[i, 0] = diff2[i, 0] / (2 * dx**2) * np.array([1.0, -2.0, 1.0]) + drift[i, 0] / (
            2 * dx
        ) * np.array([-3.0, 4.0, -1.0])
        bweight[i, 1] = diff2[i, M] / (2 * dx**2) * np.array([1.0, -2.0, 1.0]) + drift[i, M] / (
            2 * dx
        ) * np.array([1.0, -4.0, 3.0])

    def build_banded(i: int) -> Array:
        aband = np.zeros((5, M + 1))  # rows: +2, +1, 0, -1, -2 diagonals
        aband[1, 2:] = -theta * dt * upper[i, 1:-1]
        aband[2, 1:-1] = 1.0 - theta * dt * diag[i, 1:-1]
        aband[3, :-2] = -theta * dt * lower[i, 1:-1]
        lo, hi = bweight[i]
        aband[2, 0] = 1.0 - theta * dt * lo[0]
        aband[1, 1] = -theta * dt * lo[1]
        aband[0, 2] = -theta * dt * lo[2]
        aband[2, M] = 1.0 - theta * dt * hi[2]
        aband[3, M - 1] = -theta * dt * hi[1]
        aband[4, M - 2] = -theta * dt * hi[0]
        return aband

    bands = [build_banded(i) for i in range(m)]

    def explicit_rhs(i: int, v: Array) -> Array:
        rhs = np.empty(M + 1)
        interior = (
            lower[i, 1:-1] * v[:-2] + diag[i, 1:-1] * v[1:-1] + upper[i, 1:-1] * v[2:]
        )
        rhs[1:-1] = v[1:-1] + (1.0 - theta) * dt * interior + dt * source[i, 1:-1]
        lo, hi = bweight[i]
        rhs[0] = v[0] + (1.0 - theta) * dt * (lo @ v[:3]) + dt * source[i, 0]
        rhs[M] = v[M] + (1.0 - theta) * dt * (hi @ v[M - 2 :]) + dt * source[i, M]
        return rhs

    g = np.stack([np.asarray(spec.terminal(i, x2d), dtype=float) for i in range(1, m + 1)])
    if facelift and m > 1:
        g = facelift_terminal(g, costs)

    values = np.empty((m, n_t + 1, M + 1))
    values[:, n_t] = g
    v = g.copy()
    bound = None
    if spec.growth_bound is not None:
        c0, c1 = spec.growth_bound
        bound = 10.0 * (c0 + c1 * np.abs(xs))

    for step in range(n_t - 1, -1, -1):
        vhat = np.empty_like(v)
        for i in range(m):
            vhat[i] = solve_banded((2, 2), bands[i], explicit_rhs(i, v[i]))
        if m == 1:
            v = vhat
        elif mode == "projection":
            v = vhat.copy()
            for _ in range(m):
                obstacle = np.full_like(v, -np.inf)
                for i in range(m):
                    for j in range(m):
                        if j != i:
                            obstacle[i] = np.maximum(obstacle[i], v[j] - costs[i, j])
                updated = np.maximum(v, obstacle)
                if np.array_equal(updated, v):
                    break
                v = updated
        else:
            v = _implicit_penalty_update(vhat, costs, lam, penalization, dt)
        if bound is not None and np.any(np.abs(v) > bound):
            raise DivergenceError(f"finite-difference values exceeded 10x the growth bound at t-step {step}")
        if not np.all(np.isfinite(v)):
            raise DivergenceError(f"finite-difference values became non-finite at t-step {step}")
        values[:, step] = v

    times = np.linspace(0.0, T, n_t + 1)
    return GridSolution(
        times=times,
        xs=xs,
        values=values,
        mode=mode,
        facelift=bool(facelift and m > 1),
        penalization=penalization if mode == "penalized" else None,
    )


# ---------------------------------------------------------------------------
# cross-engine comparison


@dataclass
class CompareReport:
    value: float
    oracle_value: float
    abs_gap: float
    rel_gap: float
    at: tuple[float, int, float]

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "oracle_value": self.oracle_value,
            "abs_gap": self.abs_gap,
            "rel_gap": self.rel_gap,
            "at": {"t": self.at[0], "regime": self.at[1], "x": self.at[2]},
        }


def oracle_compare(result, gridsol: GridSolution, at: tuple[float, int, float]) -> CompareReport:
    """Gap between a solver value and the grid oracle at one point.

    ``result`` is a :class:`SolveResult` (its ``y0`` is used) or a plain
    number. The oracle value is interpolated linearly in x; points off the
    grid are refused.
    """
    t, regime, x = at
    value = float(result.y0) if hasattr(result, "y0") else float(result)
    oracle_value = gridsol.value_at(t, int(regime), float(x))
    abs_gap = abs(value - oracle_value)
    denom = max(abs(oracle_value), 1e-12)
    return CompareReport(
        value=value,
        oracle_value=oracle_value,
        abs_gap=abs_gap,
        rel_gap=abs_gap / denom,
        at=(float(t), int(regime), float(x)),
    )
