"""Forward simulation of the regime process and the Euler state scheme.

The regime process is driven by a homogeneous marked Poisson stream: atoms
arrive at total rate ``Lambda = sum_j lambda_j``, each carrying an i.i.d.
mark ``j`` with probability ``lambda_j / Lambda``, and the regime jumps to
the mark at every atom. Atoms whose mark equals the current regime are
retained: they do not move the regime but they are counted by the
compensated jump measure.

The state follows an Euler recursion on the per-path concatenation of the
regular time grid with the path's atom times, so drift and volatility always
use the regime holding on each sub-interval and the integral of the driver
can be segmented exactly.

Reproducibility contract: path ``p`` of a run with seed ``s`` draws from the
dedicated substream ``default_rng(SeedSequence((s, p)))`` and consumes, in
order: the Poisson atom count, the atom times, the atom marks, then ``d``
standard normals per concatenated sub-interval. Results are therefore
independent of scheduling and of the worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .problem import IntensityMeasure, ProblemSpec

Array = np.ndarray

__all__ = [
    "MarkedPoissonPath",
    "RegimeStepFunction",
    "TimeGrid",
    "PathBundle",
    "sample_jump_marks",
    "simulate_regime_path",
    "simulate_paths",
    "compensated_increment",
    "bundle_from_paths",
]


@dataclass(frozen=True)
class MarkedPoissonPath:
    """Atoms ``(time, mark)`` of one marked Poisson path on (0, T]."""

    times: Array
    marks: Array

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        k = np.asarray(self.marks, dtype=int)
        if t.shape != k.shape or t.ndim != 1:
            raise ValueError("times and marks must be 1-d arrays of equal length")
        if t.size and (np.any(np.diff(t) <= 0) or t[0] <= 0):
            raise ValueError("atom times must be strictly increasing and positive")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "marks", k)

    def count_in(self, t_a: float, t_b: float, mark: int) -> int:
        """Number of atoms with the given mark in (t_a, t_b]."""
        inside = (self.times > t_a) & (self.times <= t_b)
        return int(np.count_nonzero(inside & (self.marks == mark)))


def sample_jump_marks(intensity: IntensityMeasure, T: float, stream: np.random.Generator) -> MarkedPoissonPath:
    """Draw one marked Poisson path on (0, T].

    Atom count is Poisson(total * T); times are sorted uniforms; marks are
    i.i.d. with probabilities ``lambda_j / total``. A zero total intensity
    yields an empty path.
    """
    if not T > 0:
        raise ValueError("horizon must be positive")
    total = intensity.total
    if total == 0.0:
        return MarkedPoissonPath(times=np.empty(0), marks=np.empty(0, dtype=int))
    count = int(stream.poisson(total * T))
    times = np.sort(stream.random(count)) * T
    marks = stream.choice(intensity.m, size=count, p=intensity.mark_probabilities()) + 1
    keep = times > 0.0  # measure-zero guard: atoms live on (0, T]
    return MarkedPoissonPath(times=times[keep], marks=marks[keep])


@dataclass(frozen=True)
class RegimeStepFunction:
    """Right-continuous piecewise-constant regime path started at ``i0``."""

    i0: int
    atoms: MarkedPoissonPath

    def value_at(self, t: float | Array):
        """Regime holding at time(s) t (right-continuous)."""
        t = np.asarray(t, dtype=float)
        values = np.concatenate(([self.i0], self.atoms.marks)).astype(int)
        idx = np.searchsorted(self.atoms.times, t, side="right")
        out = values[idx]
        return int(out) if out.ndim == 0 else out


def simulate_regime_path(i0: int, marks: MarkedPoissonPath) -> RegimeStepFunction:
    """Regime path jumping to each atom's mark; self-marks change nothing."""
    return RegimeStepFunction(i0=int(i0), atoms=marks)


@dataclass(frozen=True)
class TimeGrid:
    """Regular grid plus one path's concatenation with its atom times."""

    regular: Array
    concatenated: Array

    def __post_init__(self) -> None:
        reg = np.asarray(self.regular, dtype=float)
        cat = np.asarray(self.concatenated, dtype=float)
        if np.any(np.diff(cat) <= 0):
            raise ValueError("concatenated grid must be strictly increasing")
        if not np.all(np.isin(reg, cat)):
            raise ValueError("concatenated grid must contain every regular time")
        object.__setattr__(self, "regular", reg)
        object.__setattr__(self, "concatenated", cat)


def _regular_grid(T: float, h: float) -> Array:
    K = _step_count(T, h)
    return np.linspace(0.0, T, K + 1)


def _step_count(T: float, h: float) -> int:
    if not (h > 0 and T > 0):
        raise ValueError("T and h must be positive")
    K = int(round(T / h))
    if K < 1 or abs(K * h - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"step {h} does not divide horizon {T}")
    return K


def make_time_grid(T: float, h: float, atom_times: Array) -> TimeGrid:
    regular = _regular_grid(T, h)
    concatenated = np.unique(np.concatenate([regular, np.asarray(atom_times, dtype=float)]))
    return TimeGrid(regular=regular, concatenated=concatenated)


def compensated_increment(
    marks: MarkedPoissonPath, t_a: float, t_b: float, j: int, intensity: IntensityMeasure
) -> float:
    """Compensated count of mark-j atoms on (t_a, t_b].

    Self-mark atoms count like any other; the compensator subtracts
    ``lambda_j * (t_b - t_a)`` regardless of whether atoms arrived.
    """
    if not t_a < t_b:
        raise ValueError("need t_a < t_b")
    return marks.count_in(t_a, t_b, j) - intensity.weight(j) * (t_b - t_a)


@dataclass
class PathBundle:
    """N simulated trajectories on per-path concatenated grids.

    Concatenated-grid arrays are padded to the longest path; padding
    sub-intervals have ``dt = 0`` and zero Brownian increment, so they are
    inert in every downstream reduction. ``regime[p, l]`` holds on
    ``[times[p, l], times[p, l+1])`` (right-continuous).

    Regular-grid views (``x_reg``, ``i_reg``, ``dw_reg``, ``counts_reg``)
    are derived once at build time: ``dw_reg[p, k]`` is the aggregate
    Brownian increment over ``(t_k, t_{k+1}]`` and ``counts_reg[p, k, j-1]``
    the number of mark-j atoms there.
    """

    h: float
    K: int
    N: int
    d: int
    m: int
    T: float
    seed: int
    i0: int
    x0: Array
    # padded concatenated-grid data
    times: Array      # (N, L+1)
    regime: Array     # (N, L+1) int16
    x: Array          # (N, L+1, d)
    dw: Array         # (N, L, d)
    dt: Array         # (N, L)
    step_of: Array    # (N, L) int32, regular interval of each sub-interval
    n_nodes: Array    # (N,) real node count per path
    reg_pos: Array    # (N, K+1) position of each regular time in the path grid
    # regular-grid views
    x_reg: Array      # (N, K+1, d)
    i_reg: Array      # (N, K+1) int16
    dw_reg: Array     # (N, K, d)
    counts_reg: Array  # (N, K, m) int16
    # flat atom storage
    atom_offsets: Array  # (N+1,)
    atom_times: Array
    atom_marks: Array

    _segments_cache: Optional[list] = None

    @property
    def regular(self) -> Array:
        return np.linspace(0.0, self.T, self.K + 1)

    def marked_path(self, p: int) -> MarkedPoissonPath:
        sl = slice(self.atom_offsets[p], self.atom_offsets[p + 1])
        return MarkedPoissonPath(times=self.atom_times[sl], marks=self.atom_marks[sl])

    def time_grid(self, p: int) -> TimeGrid:
        return TimeGrid(regular=self.regular, concatenated=self.times[p, : self.n_nodes[p]])

    def path_segments(self, p: int, k: int) -> tuple[Array, Array]:
        """(durations, regimes) of path p's sub-intervals inside step k."""
        cols = np.flatnonzero((self.step_of[p] == k) & (self.dt[p] > 0))
        return self.dt[p, cols], self.regime[p, cols].astype(int)

    def step_segments(self) -> list[tuple[Array, Array, Array]]:
        """Per regular step: (path index, duration, regime) of every real
        sub-interval, ordered by path. Cached after the first call."""
        if self._segments_cache is None:
            rows, cols = np.nonzero(self.dt > 0)
            steps = self.step_of[rows, cols]
            order = np.lexsort((rows, steps))
            rows, cols, steps = rows[order], cols[order], steps[order]
            bounds = np.searchsorted(steps, np.arange(self.K + 1))
            cache = []
            for k in range(self.K):
                sl = slice(bounds[k], bounds[k + 1])
                cache.append((rows[sl], self.dt[rows[sl], cols[sl]], self.regime[rows[sl], cols[sl]].astype(int)))
            self._segments_cache = cache
        return self._segments_cache


def _euler_step(spec: ProblemSpec, i: int, x: Array, dt: Array, dw: Array) -> Array:
    """One Euler update for rows currently in regime i."""
    drift = np.asarray(spec.drift(i, x), dtype=float)
    vol = np.asarray(spec.vol(i, x), dtype=float)
    return x + drift * dt[:, None] + np.einsum("nij,nj->ni", vol, dw)


def _draw_path(spec: ProblemSpec, T: float, h: float, seed: int, p: int, regular: Array):
    """Atoms, concatenated grid and Brownian increments for one path."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), int(p))))
    atoms = sample_jump_marks(spec.intensity, T, rng)
    grid = np.unique(np.concatenate([regular, atoms.times]))
    n_sub = grid.size - 1
    normals = rng.standard_normal((n_sub, spec.d))
    dt = np.diff(grid)
    dw = normals * np.sqrt(dt)[:, None]
    # regime on each sub-interval [s_l, s_{l+1}): right-continuous step path
    reg_values = np.concatenate(([spec.initial_regime], atoms.marks)).astype(np.int16)
    regime_nodes = reg_values[np.searchsorted(atoms.times, grid, side="right")]
    reg_pos = np.searchsorted(grid, regular)
    return atoms, grid, dt, dw, regime_nodes, reg_pos


def _simulate_block(spec: ProblemSpec, N: int, h: float, seed: int, p_lo: int, p_hi: int):
    """Draw raw path data for paths [p_lo, p_hi); Euler runs on the merged arrays."""
    T = spec.horizon
    regular = _regular_grid(T, h)
    out = []
    for p in range(p_lo, p_hi):
        out.append(_draw_path(spec, T, h, seed, p, regular))
    return out


def _catalog_block_worker(args):
    name, overrides, N, h, seed, p_lo, p_hi = args
    from .catalog import build_problem

    spec = build_problem(name, overrides)
    return _simulate_block(spec, N, h, seed, p_lo, p_hi)


def simulate_paths(
    spec: ProblemSpec,
    N: int,
    h: float,
    seed: int,
    *,
    workers: int = 1,
    problem_ref: Optional[tuple[str, dict]] = None,
) -> PathBundle:
    """Simulate ``N`` paths of the regime process and the Euler state.

    ``h`` must divide the horizon. ``workers > 1`` splits path generation
    over processes; because every path has its own substream the result is
    bit-identical for any worker count. Multiprocess mode needs
    ``problem_ref = (catalog_name, overrides)`` so workers can rebuild the
    problem (coefficient closures do not cross process boundaries).
    """
    if N < 1:
        raise ValueError("path count must be >= 1")
    T = spec.horizon
    K = _step_count(T, h)
    regular = _regular_grid(T, h)

    if workers > 1 and problem_ref is not None and N >= 2 * workers:
        chunk = (N + workers - 1) // workers
        ranges = [(lo, min(lo + chunk, N)) for lo in range(0, N, chunk)]
        name, overrides = problem_ref
        args = [(name, overrides, N, h, seed, lo, hi) for lo, hi in ranges]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(_catalog_block_worker, args))
        raw = [path for block in blocks for path in block]
    else:
        raw = _simulate_block(spec, N, h, seed, 0, N)

    return _assemble_bundle(spec, raw, N=N, h=h, K=K, seed=seed, regular=regular)


def _assemble_bundle(spec: ProblemSpec, raw: list, *, N: int, h: float, K: int, seed: int, regular: Array) -> PathBundle:
    d, m, T = spec.d, spec.m, spec.horizon
    n_nodes = np.array([grid.size for (_, grid, *_rest) in raw], dtype=np.int32)
    L = int(n_nodes.max()) - 1

    times = np.full((N, L + 1), T)
    regime = np.zeros((N, L + 1), dtype=np.int16)
    dw = np.zeros((N, L, d))
    dt = np.zeros((N, L))
    step_of = np.zeros((N, L), dtype=np.int32)
    reg_pos = np.zeros((N, K + 1), dtype=np.int32)
    atom_offsets = np.zeros(N + 1, dtype=np.int64)

    atom_time_parts, atom_mark_parts = [], []
    for p, (atoms, grid, dt_p, dw_p, regime_nodes, reg_pos_p) in enumerate(raw):
        n = grid.size
        times[p, :n] = grid
        regime[p, : n] = regime_nodes
        regime[p, n:] = regime_nodes[-1]
        dw[p, : n - 1] = dw_p
        dt[p, : n - 1] = dt_p
        reg_pos[p] = reg_pos_p
        # sub-interval [s_l, s_{l+1}) belongs to regular step floor-wise
        step_of[p, : n - 1] = np.searchsorted(regular, grid[:-1], side="right") - 1
        atom_offsets[p + 1] = atom_offsets[p] + atoms.times.size
        atom_time_parts.append(atoms.times)
        atom_mark_parts.append(atoms.marks)

    atom_times = np.concatenate(atom_time_parts) if atom_time_parts else np.empty(0)
    atom_marks = (
        np.concatenate(atom_mark_parts).astype(np.int16) if atom_mark_parts else np.empty(0, dtype=np.int16)
    )

    # vectorized Euler sweep over padded columns, grouped by regime
    x = np.empty((N, L + 1, d))
    x[:, 0, :] = spec.initial_state
    for l in range(L):
        cur = x[:, l, :]
        nxt = cur.copy()
        active = dt[:, l] > 0
        if np.any(active):
            col_regimes = regime[:, l]
            for i in np.unique(col_regimes[active]):
                rows = np.flatnonzero(active & (col_regimes == i))
                nxt[rows] = _euler_step(spec, int(i), cur[rows], dt[rows, l], dw[rows, l])
        x[:, l + 1, :] = nxt

    take = reg_pos[:, :, None]
    x_reg = np.take_along_axis(x, np.broadcast_to(take, (N, K + 1, d)), axis=1)
    i_reg = np.take_along_axis(regime, reg_pos, axis=1)

    dw_reg = np.zeros((N, K, d))
    rows, cols = np.nonzero(dt > 0)
    np.add.at(dw_reg, (rows, step_of[rows, cols]), dw[rows, cols])

    counts_reg = np.zeros((N, K, m), dtype=np.int16)
    if atom_times.size:
        atom_path = np.repeat(np.arange(N), np.diff(atom_offsets))
        atom_step = np.searchsorted(regular, atom_times, side="left") - 1
        np.add.at(counts_reg, (atom_path, atom_step, atom_marks.astype(int) - 1), 1)

    return PathBundle(
        h=T / K,
        K=K,
        N=N,
        d=d,
        m=m,
        T=T,
        seed=int(seed),
        i0=spec.initial_regime,
        x0=spec.initial_state,
        times=times,
        regime=regime,
        x=x,
        dw=dw,
        dt=dt,
        step_of=step_of,
        n_nodes=n_nodes,
        reg_pos=reg_pos,
        x_reg=x_reg,
        i_reg=i_reg,
        dw_reg=dw_reg,
        counts_reg=counts_reg,
        atom_offsets=atom_offsets,
        atom_times=atom_times,
        atom_marks=atom_marks,
    )


def bundle_from_paths(
    spec: ProblemSpec,
    h: float,
    atoms_per_path: Sequence[Sequence[tuple[float, int]]],
    dw_per_path: Optional[Sequence[Array]] = None,
) -> PathBundle:
    """Deterministic bundle from explicit atoms and Brownian increments.

    Intended for tests: ``atoms_per_path[p]`` lists ``(time, mark)`` atoms
    and ``dw_per_path[p]`` gives one increment row per concatenated
    sub-interval (zeros when omitted). The Euler recursion and all derived
    views are built exactly as in :func:`simulate_paths`.
    """
    T = spec.horizon
    K = _step_count(T, h)
    regular = _regular_grid(T, h)
    raw = []
    for p, atom_list in enumerate(atoms_per_path):
        atom_list = sorted(atom_list)
        atoms = MarkedPoissonPath(
            times=np.asarray([a[0] for a in atom_list], dtype=float),
            marks=np.asarray([a[1] for a in atom_list], dtype=int),
        )
        if atoms.times.size and atoms.times[-1] > T:
            raise ValueError(f"path {p} has an atom beyond the horizon")
        grid = np.unique(np.concatenate([regular, atoms.times]))
        n_sub = grid.size - 1
        dt_p = np.diff(grid)
        if dw_per_path is None:
            dw_p = np.zeros((n_sub, spec.d))
        else:
            dw_p = np.asarray(dw_per_path[p], dtype=float).reshape(n_sub, spec.d)
        reg_values = np.concatenate(([spec.initial_regime], atoms.marks)).astype(np.int16)
        regime_nodes = reg_values[np.searchsorted(atoms.times, grid, side="right")]
        reg_pos_p = np.searchsorted(grid, regular)
        raw.append((atoms, grid, dt_p, dw_p, regime_nodes, reg_pos_p))
    return _assemble_bundle(spec, raw, N=len(raw), h=h, K=K, seed=-1, regular=regular)


def dump_paths_csv(bundle: PathBundle, path) -> None:
    """Write (path, s, regime, x_1..x_d) rows for every real grid node."""
    with open(path, "w", encoding="utf-8") as fh:
        cols = ",".join(f"x_{j+1}" for j in range(bundle.d))
        fh.write(f"path,s,regime,{cols}\n")
        for p in range(bundle.N):
            n = bundle.n_nodes[p]
            for l in range(n):
                xs = ",".join(repr(float(v)) for v in bundle.x[p, l])
                fh.write(f"{p},{float(bundle.times[p, l])!r},{int(bundle.regime[p, l])},{xs}\n")
