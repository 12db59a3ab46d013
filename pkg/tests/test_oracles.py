import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from switchbsde import (
    LatticeSpec,
    SchemeConfig,
    build_lattice_chain,
    build_problem,
    facelift_terminal,
    fd_solve,
    lattice_dp_solve,
    oracle_compare,
    simulate_paths,
    solve_backward,
)


class TestLatticeChain:
    def test_probabilities_sum_to_one(self):
        spec = build_problem("switch2-linear")
        chain = build_lattice_chain(spec, LatticeSpec(h=0.125))
        for es in chain.edges:
            sums = np.zeros(int(es.tail.max()) + 1)
            np.add.at(sums, es.tail, es.prob)
            np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_moments_match_brownian(self):
        spec = build_problem("bm1")
        chain = build_lattice_chain(spec, LatticeSpec(h=0.25))
        es = chain.edges[0]
        mean = float(np.sum(es.prob * es.dw[:, 0]))
        var = float(np.sum(es.prob * es.dw[:, 0] ** 2))
        assert mean == pytest.approx(0.0, abs=1e-15)
        assert var == pytest.approx(0.25, abs=1e-15)

    def test_mark_probability_matches_compensator(self):
        spec = build_problem("switch2-linear")
        chain = build_lattice_chain(spec, LatticeSpec(h=0.125))
        es = chain.edges[0]
        lam = spec.intensity.weights
        for j in (1, 2):
            p = float(np.sum(es.prob * es.counts[:, j - 1]))
            assert p == pytest.approx(lam[j - 1] * chain.h, abs=1e-15)

    def test_step_too_coarse_rejected(self):
        spec = build_problem("switch2-linear")  # total intensity 3.0
        with pytest.raises(ValueError, match="refine the lattice step"):
            build_lattice_chain(spec, LatticeSpec(h=0.5))

    def test_cap_refused_with_size_report(self):
        spec = build_problem("switch2-linear")
        with pytest.raises(ValueError, match="exceeds the cap"):
            build_lattice_chain(spec, LatticeSpec(h=1 / 64, node_cap=100))

    def test_d1_only(self):
        import switchbsde.problem as pb

        coeffs = pb.CoefficientSet(
            drift=lambda i, x: np.zeros_like(x),
            vol=lambda i, x: np.broadcast_to(np.eye(2), (x.shape[0], 2, 2)).copy(),
            driver=lambda i, x, v, z: np.zeros(x.shape[0]),
            constraint=lambda i, j, x, y, yt, z: np.asarray(y) - np.asarray(yt),
            terminal=lambda i, x: x[:, 0],
        )
        spec = pb.ProblemSpec(
            m=1, d=2, horizon=1.0, intensity=pb.IntensityMeasure([1.0]),
            coefficients=coeffs, initial_regime=1, initial_state=np.zeros(2),
        )
        with pytest.raises(ValueError, match="d = 1"):
            build_lattice_chain(spec, LatticeSpec(h=0.25))


class TestLatticeDp:
    def test_single_successor_chain(self):
        # zero vol, unit drift: one deterministic successor per step
        spec = build_problem("bm1", {"sigma": [0.0], "drift": [1.0], "x0": [0.2], "T": 0.25})
        sol = lattice_dp_solve(spec, LatticeSpec(h=0.25), n=0)
        assert sol.chain.nodes[1].regime.size == 1
        assert sol.y0 == pytest.approx(0.2 + 0.25, abs=1e-14)

    def test_two_point_martingale(self):
        spec = build_problem("bm1", {"x0": [0.7], "T": 0.5})
        sol = lattice_dp_solve(spec, LatticeSpec(h=0.25), n=0)
        assert sol.y0 == pytest.approx(0.7, abs=1e-14)

    def test_matches_backward_solver_exactly(self):
        spec = build_problem("switch2-linear")
        chain = build_lattice_chain(spec, LatticeSpec(h=0.05))
        dp = lattice_dp_solve(spec, chain, n=8)
        res = solve_backward(spec, SchemeConfig(h=0.05, n=8, paths=1, seed=0), chain)
        assert abs(dp.y0 - res.y0) <= 1e-12
        for k in range(chain.K):
            assert np.max(np.abs(dp.u[k] - res.us[k])) <= 1e-12
            assert np.max(np.abs(dp.values[k] - res.ys[k])) <= 1e-12

    def test_json_export_round_trips(self):
        import json

        spec = build_problem("bm1", {"T": 0.5})
        sol = lattice_dp_solve(spec, LatticeSpec(h=0.25), n=0)
        blob = json.dumps(sol.to_dict())
        parsed = json.loads(blob)
        assert parsed["y0"] == pytest.approx(sol.y0)
        assert len(parsed["steps"]) == sol.chain.K + 1

    def test_jump_offset_identity(self):
        spec = build_problem("switch2-linear")
        dp = lattice_dp_solve(spec, LatticeSpec(h=0.05), n=4)
        for k in range(dp.chain.K):
            regimes = dp.chain.nodes[k].regime
            own = dp.proxies[k][np.arange(regimes.size), regimes - 1]
            identity = dp.proxies[k] - own[:, None]
            assert np.max(np.abs(dp.u[k] - identity)) <= 1e-10

    def test_converges_to_closed_form_penalized_value(self):
        # equal vols and a linear payoff reduce the penalized system to a
        # scalar integration: from the worse regime the gap to the better
        # one relaxes at rate n * lam toward (reward spread)/(n * lam)
        spec = build_problem("switch2-linear", {"sigma": [0.25, 0.25]})
        T, cost, spread, lam1 = 0.5, 0.1, 1.0, 1.5
        tau_c = cost / spread
        n = 4
        relax = (spread / (n * lam1)) * (1.0 - np.exp(-n * lam1 * (T - tau_c)))
        exact = 0.5 * T - cost - relax
        gaps = []
        for h in (1 / 48, 1 / 96):
            sol = lattice_dp_solve(spec, LatticeSpec(h=h), n=n)
            gaps.append(abs(sol.y0 - exact))
        assert gaps[0] <= 0.2 * (1 / 48)  # first order in the step
        assert gaps[1] <= 0.65 * gaps[0]  # and halving with it

    def test_three_regime_dual_equality(self):
        spec = build_problem("switch3")
        chain = build_lattice_chain(spec, LatticeSpec(h=1 / 16))
        dp = lattice_dp_solve(spec, chain, n=6)
        res = solve_backward(spec, SchemeConfig(h=1 / 16, n=6, paths=1, seed=0), chain)
        assert abs(dp.y0 - res.y0) <= 1e-12
        for k in range(chain.K):
            assert np.max(np.abs(dp.u[k] - res.us[k])) <= 1e-12


def quad_grid(spec, M=400):
    return (M, -4.0, 4.0) if float(spec.initial_state[0]) == 0.0 else (M, -4.0 + 0.7, 4.0 + 0.7)


class TestFdSolve:
    def test_linear_payoff_is_harmonic(self):
        spec = build_problem("bm1")
        sol = fd_solve(spec, (400, 0.7 - 4.0, 0.7 + 4.0), 1e-3)
        assert np.max(np.abs(sol.values[0, 0] - sol.xs)) <= 1e-3

    def test_quadratic_solution_exact(self):
        spec = build_problem("bm1-quad")
        sol = fd_solve(spec, (400, -4.0, 4.0), 1e-3)
        truth = sol.xs**2 + 1.0
        assert np.max(np.abs(sol.values[0, 0] - truth)) <= 1e-3

    def test_terminal_stored_facelifted(self):
        spec = build_problem("switch2-linear", {"rewards": [0.0, 0.0]})
        # force a terminal gap: regime 2 pays x + 0.3 via a shifted terminal
        import switchbsde.problem as pb

        base = spec.coefficients
        coeffs = pb.CoefficientSet(
            drift=base.drift,
            vol=base.vol,
            driver=base.driver,
            constraint=base.constraint,
            terminal=lambda i, x: x[:, 0] + (0.3 if i == 2 else 0.0),
        )
        object.__setattr__(spec, "coefficients", coeffs)
        sol = fd_solve(spec, (50, -1.0, 1.0), 1e-3, facelift=True)
        # lifted regime-1 terminal = max(x, x + 0.3 - 0.1)
        np.testing.assert_allclose(sol.values[0, -1], sol.xs + 0.2, atol=1e-12)
        np.testing.assert_allclose(sol.values[1, -1], sol.xs + 0.3, atol=1e-12)

    def test_projection_matches_analytic_switch2(self):
        spec = build_problem("switch2-linear")
        sol = fd_solve(spec, (400, -1.2, 1.2), 1e-3, mode="projection")
        T = spec.horizon
        np.testing.assert_allclose(sol.values[0, 0], sol.xs + 0.5 * T, atol=1e-9)
        np.testing.assert_allclose(sol.values[1, 0], sol.xs + 0.5 * T - 0.1, atol=1e-9)

    def test_obstacle_respected_after_projection(self):
        spec = build_problem("switch2-linear")
        sol = fd_solve(spec, (200, -1.0, 1.0), 1e-3, mode="projection")
        c = spec.switching_costs.costs
        for kt in range(sol.times.size):
            for i in (1, 2):
                j = 3 - i
                assert np.all(
                    sol.values[i - 1, kt] >= sol.values[j - 1, kt] - c[i - 1, j - 1] - 1e-10
                )

    def test_penalized_converges_to_projection(self):
        spec = build_problem("switch2-linear")
        grid = (400, -1.2, 1.2)
        proj = fd_solve(spec, grid, 1e-3, mode="projection")
        pen = fd_solve(spec, grid, 1e-3, mode="penalized", penalization=256)
        assert np.max(np.abs(pen.values - proj.values)) <= 1e-2

    def test_penalized_monotone_in_level(self):
        spec = build_problem("switch2-linear")
        grid = (100, -1.0, 1.0)
        prev = None
        for n in (1, 2, 4, 8, 16, 32, 64, 128, 256):
            sol = fd_solve(spec, grid, 1e-3, mode="penalized", penalization=n)
            if prev is not None:
                assert np.all(sol.values >= prev - 1e-12)
            prev = sol.values

    def test_three_regime_projection_matches_analytic(self):
        # from the best-reward regime the value is the plain accrual; from
        # the worst one it pays the direct switching cost immediately
        spec = build_problem("switch3")
        from switchbsde import default_grid

        sol = fd_solve(spec, default_grid(spec, 200), 1e-3, mode="projection")
        T = spec.horizon
        assert sol.value_at(0.0, 1, 0.0) == pytest.approx(1.0 * T, abs=1e-6)
        assert sol.value_at(0.0, 3, 0.0) == pytest.approx(max(0.1 * T, 1.0 * T - 0.2, 0.55 * T - 0.15), abs=1e-6)
        pen = fd_solve(spec, default_grid(spec, 200), 1e-3, mode="penalized", penalization=256)
        assert np.max(np.abs(pen.values - sol.values)) <= 1e-2

    def test_prohibitive_costs_decouple(self):
        spec = build_problem("switch2-linear", {"costs": [[0.0, 1e6], [1e6, 0.0]]})
        grid = (200, -1.0, 1.0)
        coupled = fd_solve(spec, grid, 1e-3, mode="projection")
        for i, (sig, rew) in enumerate([(0.2, 0.5), (0.3, -0.5)], start=1):
            single = build_problem(
                "bm1", {"sigma": [sig], "rewards": [rew], "x0": [0.0], "T": spec.horizon}
            )
            alone = fd_solve(single, grid, 1e-3)
            assert np.max(np.abs(coupled.values[i - 1] - alone.values[0])) <= 1e-8

    def test_requires_switching_form(self):
        spec = build_problem("bm1")
        object.__setattr__(spec, "switching_costs", None)
        with pytest.raises(ValueError, match="switching-form"):
            fd_solve(spec, (50, -1, 1), 1e-3)

    def test_penalized_needs_level(self):
        spec = build_problem("switch2-linear")
        with pytest.raises(ValueError, match="penalization level"):
            fd_solve(spec, (50, -1, 1), 1e-3, mode="penalized")

    def test_unstable_explicit_scheme_rejected(self):
        spec = build_problem("bm1-quad")
        with pytest.raises(ValueError, match="unstable"):
            fd_solve(spec, (400, -4, 4), 1e-2, theta=0.0)


class TestFacelift:
    def test_single_sweep_values(self):
        costs = np.array([[0.0, 0.1], [0.1, 0.0]])
        g = np.array([[0.0, 0.0], [0.5, -0.3]])
        lifted = facelift_terminal(g, costs)
        np.testing.assert_allclose(lifted[0], [0.4, 0.0])
        np.testing.assert_allclose(lifted[1], [0.5, -0.1])

    @settings(max_examples=50, deadline=None)
    @given(
        c12=st.floats(0.05, 1.0),
        c13=st.floats(0.05, 1.0),
        c23=st.floats(0.05, 1.0),
        g=st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    )
    def test_idempotent_under_triangle(self, c12, c13, c23, g):
        costs = np.array([[0.0, c12, c13], [c12, 0.0, c23], [c13, c23, 0.0]])
        # symmetrized costs satisfy the strict triangle unless degenerate
        for i, j, k in [(0, 1, 2), (0, 2, 1), (1, 2, 0)]:
            if not costs[i, j] < costs[i, k] + costs[k, j]:
                return
        gvals = np.asarray(g, dtype=float)[:, None]
        once = facelift_terminal(gvals, costs)
        twice = facelift_terminal(once, costs)
        np.testing.assert_allclose(twice, once, atol=1e-12)


class TestOracleCompare:
    def test_self_gap_zero(self):
        spec = build_problem("switch2-linear")
        sol = fd_solve(spec, (100, -1.0, 1.0), 1e-3)
        value = sol.value_at(0.0, 2, 0.0)
        report = oracle_compare(value, sol, (0.0, 2, 0.0))
        assert report.abs_gap == 0.0

    def test_bm1_cross_engine(self):
        spec = build_problem("bm1")
        bundle = simulate_paths(spec, 10_000, 0.05, seed=21)
        result = solve_backward(spec, SchemeConfig(h=0.05, paths=10_000, seed=21), bundle)
        sol = fd_solve(spec, (400, 0.7 - 4.0, 0.7 + 4.0), 1e-3)
        report = oracle_compare(result, sol, (0.0, 1, 0.7))
        se = float(np.std(bundle.x_reg[:, -1, 0]) / np.sqrt(bundle.N))
        assert report.abs_gap <= 3 * se + 2e-3

    def test_extrapolation_refused(self):
        spec = build_problem("switch2-linear")
        sol = fd_solve(spec, (50, -1.0, 1.0), 1e-3)
        with pytest.raises(ValueError, match="extrapolation refused"):
            oracle_compare(0.0, sol, (0.0, 1, 5.0))
        with pytest.raises(ValueError, match="not on the oracle grid"):
            oracle_compare(0.0, sol, (0.12345e-4 + 0.5e-3, 1, 0.0))
