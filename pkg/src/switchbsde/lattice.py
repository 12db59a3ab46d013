"""Finite-state chain surrogate for the forward simulation.

The chain replaces each Brownian increment by a symmetric two-point draw
``+-sqrt(h)`` (matching mean and variance per step) and the marked jump
stream by at most one atom per step, arriving at the step's right endpoint
with ``P(mark j) = lambda_j * h``. That law matches the compensator's first
moment exactly (``E[count_j] = lambda_j h``), which is what makes the
jump-measure estimator identities hold exactly node by node; it requires
``total_intensity * h <= 1``.

Because atoms sit at step ends, each step is a single sub-interval in the
current regime and the state update never depends on the mark, so states
recombine. States are deduplicated per step on (regime, rounded x).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import ProblemSpec

Array = np.ndarray

__all__ = ["LatticeSpec", "NodeSet", "EdgeSet", "LatticeChain", "build_lattice_chain"]

_ROUND_DECIMALS = 10


@dataclass(frozen=True)
class LatticeSpec:
    """Chain resolution: time step plus an enumeration-size cap."""

    h: float
    node_cap: int = 2_000_000


@dataclass
class NodeSet:
    regime: Array  # (n,) int
    x: Array       # (n, d)
    mass: Array    # (n,) occupation probability


@dataclass
class EdgeSet:
    tail: Array    # (E,) node index at step k
    head: Array    # (E,) node index at step k+1
    prob: Array    # (E,) conditional probability given the tail
    dw: Array      # (E, d) Brownian surrogate increment
    counts: Array  # (E, m) atom counts per mark


@dataclass
class LatticeChain:
    """Enumerated chain: nodes per step and transitions between steps."""

    h: float
    K: int
    d: int
    m: int
    T: float
    nodes: list[NodeSet]
    edges: list[EdgeSet]

    @property
    def n_steps(self) -> int:
        return self.K

    def size(self) -> int:
        return sum(ns.regime.size for ns in self.nodes)


def build_lattice_chain(spec: ProblemSpec, lattice: LatticeSpec) -> LatticeChain:
    """Enumerate the chain started at the problem's initial condition.

    Refuses with a size report when the accumulated state count would
    exceed ``lattice.node_cap``.
    """
    if spec.d != 1:
        raise ValueError("lattice chain supports d = 1 only")
    T, h = spec.horizon, lattice.h
    K = int(round(T / h))
    if K < 1 or abs(K * h - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"lattice step {h} does not divide horizon {T}")
    h = T / K
    lam = spec.intensity.weights
    total = float(lam.sum())
    if total * h > 1.0 + 1e-12:
        raise ValueError(
            f"total intensity * step = {total * h:.4f} > 1; refine the lattice step"
        )
    p_none = 1.0 - total * h
    m = spec.m
    sqrt_h = np.sqrt(h)

    nodes = [NodeSet(regime=np.array([spec.initial_regime]), x=spec.initial_state[None, :], mass=np.array([1.0]))]
    edges: list[EdgeSet] = []
    size = 1

    for k in range(K):
        cur = nodes[k]
        n = cur.regime.size
        # state moves under the current regime, independent of the atom
        x_next = np.empty((n, 2))  # columns: +sqrt(h), -sqrt(h)
        for i in np.unique(cur.regime):
            rows = np.flatnonzero(cur.regime == i)
            xi = cur.x[rows]
            b = np.asarray(spec.drift(int(i), xi), dtype=float)[:, 0]
            s = np.asarray(spec.vol(int(i), xi), dtype=float)[:, 0, 0]
            base = xi[:, 0] + b * h
            x_next[rows, 0] = base + s * sqrt_h
            x_next[rows, 1] = base - s * sqrt_h

        # outcomes: 2 signs x (no atom | mark 1..m)
        per = 2 * (m + 1)
        tail = np.repeat(np.arange(n), per)
        sign = np.tile(np.repeat([0, 1], m + 1), n)  # column into x_next
        outcome = np.tile(np.arange(m + 1), 2 * n)   # 0 = no atom, j = mark j
        child_x = x_next[tail, sign]
        child_regime = np.where(outcome == 0, cur.regime[tail], outcome)
        prob = np.where(outcome == 0, p_none, lam[np.maximum(outcome - 1, 0)] * h) * 0.5
        dw = np.where(sign == 0, sqrt_h, -sqrt_h)[:, None]
        counts = np.zeros((tail.size, m), dtype=np.int16)
        has_atom = outcome > 0
        counts[np.flatnonzero(has_atom), outcome[has_atom] - 1] = 1

        key_x = np.round(child_x, _ROUND_DECIMALS)
        keys = np.stack([child_regime.astype(float), key_x], axis=1)
        uniq, head = np.unique(keys, axis=0, return_inverse=True)
        head = head.ravel()

        mass = np.zeros(uniq.shape[0])
        np.add.at(mass, head, cur.mass[tail] * prob)

        size += uniq.shape[0]
        if size > lattice.node_cap:
            raise ValueError(
                f"lattice enumeration exceeds the cap: {size} states after "
                f"step {k + 1} of {K} (cap {lattice.node_cap})"
            )

        nodes.append(NodeSet(regime=uniq[:, 0].astype(int), x=uniq[:, 1][:, None], mass=mass))
        edges.append(EdgeSet(tail=tail, head=head, prob=prob, dw=dw, counts=counts))

    return LatticeChain(h=h, K=K, d=1, m=m, T=T, nodes=nodes, edges=edges)
