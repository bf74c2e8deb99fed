"""Adjoint machinery: segment functionals, backward LSMC solver, optimality tests."""

import logging
import math

import numpy as np
import pytest

from memsfde.adjoint import (
    HamiltonianInputs,
    SegmentFunctional,
    hamiltonian,
    max_condition_gap,
    riesz_advanced,
    riesz_duality_check,
    solve_absde,
    stationarity_gap,
)
from memsfde.engine import CoefficientSet, ControlProblem, JumpModel, simulate
from memsfde.grid import SimGrid
from memsfde.segments import GridPath


def smooth_path(rng, n_steps, dt, t0=0.0, amplitude=0.5):
    """Random low-frequency trigonometric path on the mesh."""
    t = t0 + dt * np.arange(n_steps + 1)
    vals = np.zeros(n_steps + 1)
    for j in range(1, 5):
        a, b = rng.uniform(-amplitude, amplitude, 2) / j
        vals += a * np.cos(j * math.pi * t) + b * np.sin(j * math.pi * t)
    return GridPath(values=vals, dt=dt, t0=t0, delta_steps=0)


class TestRieszAdvanced:
    def test_unit_kernel_on_constant_path(self):
        f = SegmentFunctional.averaging(lambda r: 1.0, delta_steps=10, dt=0.1)
        p = GridPath(np.full(21, 4.0), dt=0.1, t0=0.0, delta_steps=10)
        assert riesz_advanced(f, p, 0.5) == pytest.approx(4.0)

    def test_evaluation_reads_ahead(self):
        # p(t) = t and a half-unit lag: value at t = 1 is p(1.5)
        f = SegmentFunctional.evaluation(0.5, dt=0.25)
        p = GridPath(0.25 * np.arange(9), dt=0.25, t0=0.0, delta_steps=2)
        assert riesz_advanced(f, p, 1.0) == pytest.approx(1.5)

    def test_linear_kernel_integral(self):
        # kernel r against p(r) = r over [0, 1]: integral r^2 dr = 1/3
        dt = 0.01
        f = SegmentFunctional.averaging(lambda r: r, delta_steps=100, dt=dt)
        p = GridPath(dt * np.arange(201), dt=dt, t0=0.0, delta_steps=100)
        assert riesz_advanced(f, p, 0.0) == pytest.approx(1.0 / 3.0, abs=dt**2)

    def test_zero_extension_past_path_end(self):
        f = SegmentFunctional.evaluation(0.5, dt=0.25)
        p = GridPath(np.ones(5), dt=0.25, t0=0.0, delta_steps=2)  # ends at t = 1
        assert riesz_advanced(f, p, 1.0) == 0.0
        avg = SegmentFunctional.averaging(lambda r: 1.0, delta_steps=2, dt=0.25)
        # window [1, 1.5] has support only at the left endpoint
        assert riesz_advanced(avg, p, 1.0) == pytest.approx(0.125)

    def test_off_mesh_point_rejected(self):
        with pytest.raises(ValueError):
            SegmentFunctional.evaluation(0.3, dt=0.25)
        with pytest.raises(ValueError):
            SegmentFunctional.averaging(np.ones(3), delta_steps=4, dt=0.25)


class TestRieszDuality:
    def test_zero_y_path(self):
        f = SegmentFunctional.averaging(lambda r: 1.0, delta_steps=4, dt=0.1)
        p = GridPath(np.ones(11), dt=0.1, t0=0.0, delta_steps=4)
        y = GridPath(np.zeros(11), dt=0.1, t0=0.0, delta_steps=4)
        assert riesz_duality_check(f, p, y) == (0.0, 0.0)

    def test_evaluation_at_zero_lag_is_exact(self):
        rng = np.random.Generator(np.random.Philox(key=1))
        dt = 0.05
        f = SegmentFunctional.evaluation(0.0, dt=dt)
        p = smooth_path(rng, 20, dt)
        y = smooth_path(rng, 20, dt)
        lhs, rhs = riesz_duality_check(f, p, y)
        assert lhs == pytest.approx(rhs, abs=1e-14)

    @pytest.mark.parametrize("kind", ["averaging", "evaluation"])
    def test_random_pairs_agree_to_mesh_order(self, kind):
        dt, n, d = 0.01, 100, 20
        rng = np.random.Generator(np.random.Philox(key=7))
        for _ in range(20):
            if kind == "averaging":
                kernel = rng.uniform(0.0, 1.0, d + 1)
                f = SegmentFunctional.averaging(kernel, delta_steps=d, dt=dt)
            else:
                f = SegmentFunctional.evaluation(dt * rng.integers(1, d + 1), dt=dt)
            p = smooth_path(rng, n, dt)
            y = smooth_path(rng, n, dt)
            lhs, rhs = riesz_duality_check(f, p, y)
            assert abs(lhs - rhs) < 5.0 * dt

    def test_mismatched_meshes_rejected(self):
        f = SegmentFunctional.evaluation(0.1, dt=0.1)
        p = GridPath(np.ones(11), dt=0.1, t0=0.0, delta_steps=1)
        y = GridPath(np.ones(11), dt=0.05, t0=0.0, delta_steps=1)
        with pytest.raises(ValueError):
            riesz_duality_check(f, p, y)


class TestHamiltonian:
    def test_single_drift_term(self):
        coeffs = CoefficientSet(drift=lambda *a: 1.0)
        h = hamiltonian(coeffs, HamiltonianInputs(t=0.0, x=0.0, p0=3.0))
        assert h == pytest.approx(3.0)

    def test_control_scaled_memory_product(self):
        # all three noise channels read u * x(t - delta); the Hamiltonian then
        # factors as u * lagged state * (p0 + q0 + r0-integral)
        scaled = lambda t, x, xs, m, ms, u, us: u * xs[..., -1]
        coeffs = CoefficientSet(drift=scaled, diffusion=scaled, jump=lambda *a: a[5] * a[2][..., -1])
        jumps = JumpModel(intensity=2.0, marks=(1.0,), probs=(1.0,))
        inputs = HamiltonianInputs(
            t=0.5,
            x=9.0,  # current state does not enter
            x_seg=np.array([9.0, 2.0, 1.5]),
            u=2.0,
            p0=0.1,
            q0=0.1,
            r0=0.1,
        )
        # bracket = 0.1 + 0.1 + 0.1 * 2 = 0.4; u * lag * bracket = 2 * 1.5 * 0.4
        assert hamiltonian(coeffs, inputs, jumps) == pytest.approx(1.2)

    def test_vanishes_past_horizon(self):
        coeffs = CoefficientSet(drift=lambda *a: 1.0)
        h = hamiltonian(coeffs, HamiltonianInputs(t=1.01, x=0.0, p0=5.0), horizon=1.0)
        assert h == 0.0

    def test_vector_inputs_broadcast(self):
        coeffs = CoefficientSet(running_cost=lambda t, x, xs, m, ms, u, us: x * u)
        out = hamiltonian(coeffs, HamiltonianInputs(t=0.0, x=np.array([1.0, 2.0]), p0=0.0, u=3.0))
        np.testing.assert_allclose(out, [3.0, 6.0])


def brownian_ensemble(n, seed, dt=0.01, delta_steps=10):
    grid = SimGrid(dt=dt, delta_steps=delta_steps, horizon=1.0, n_particles=n, seed=seed)
    return simulate(CoefficientSet(diffusion=lambda *a: 1.0), grid, xi=1.0)


class TestBackwardSolver:
    def test_deterministic_terminal_is_constant(self):
        ens = brownian_ensemble(2_000, seed=13)
        adj = solve_absde(ens, terminal=lambda x, law: 4.0)
        np.testing.assert_allclose(adj.p0, 4.0, atol=1e-10)
        np.testing.assert_allclose(adj.q0, 0.0, atol=1e-10)
        np.testing.assert_allclose(adj.r0, 0.0)
        assert adj.check_terminal_conventions()

    def test_brownian_martingale_recovery(self):
        # state 1 + B(t), terminal -X(T): the time-t value is -X(t) and the
        # Brownian loading is the constant -1
        ens = brownian_ensemble(20_000, seed=29)
        adj = solve_absde(ens, terminal=lambda x, law: -x)
        K = ens.grid.n_steps
        for k in (0, K // 2, K - 1):
            err = abs(adj.p0[:, k].mean() + ens.states[:, k].mean())
            assert err < 3.0 * max(adj.mean_stderr[k], 1e-12) + 1e-3
        q_means = adj.q0[:, :K].mean(axis=0)
        assert np.max(np.abs(q_means + 1.0)) < 0.05
        np.testing.assert_allclose(adj.r0, 0.0)
        assert adj.check_terminal_conventions()

    def test_column_means_follow_zero_driver_martingale(self):
        ens = brownian_ensemble(5_000, seed=3)
        adj = solve_absde(ens, terminal=lambda x, law: -x)
        means = adj.p0_on_horizon().mean(axis=0)
        steps = np.abs(np.diff(means))
        assert np.max(steps) < 3.0 * np.max(adj.mean_stderr) + 1e-4

    def test_rank_deficient_fallback_warns(self, caplog):
        # deterministic state collapses every basis column to a constant
        grid = SimGrid(dt=0.1, delta_steps=2, horizon=0.5, n_particles=16, seed=0)
        ens = simulate(CoefficientSet(drift=lambda *a: 1.0), grid, xi=1.0)
        with caplog.at_level(logging.WARNING, logger="memsfde.adjoint"):
            adj = solve_absde(ens, terminal=lambda x, law: x)
        assert len(adj.deficient_steps) == grid.n_steps
        assert any("rank-deficient" in rec.message for rec in caplog.records)
        # the fallback is still exact here: target stays the constant X(T)
        np.testing.assert_allclose(adj.p0, 1.5, atol=1e-12)

    def test_driver_reads_are_logged_and_strictly_ahead(self):
        ens = brownian_ensemble(500, seed=5)
        d = ens.grid.delta_steps
        f = SegmentFunctional.averaging(lambda r: 1.0, delta_steps=d, dt=ens.grid.dt)
        adj, ctx = solve_absde(
            ens,
            terminal=lambda x, law: -x,
            driver=lambda c, k: c.advanced_average(k, f),
            return_context=True,
        )
        assert ctx.read_log, "driver reads should be recorded"
        for k, ahead, extension in ctx.read_log:
            assert 1 <= ahead <= d
            assert extension == "zero"
        assert adj.check_terminal_conventions()

    def test_driver_cannot_read_current_or_far_future(self):
        ens = brownian_ensemble(100, seed=5)
        with pytest.raises(ValueError):
            solve_absde(ens, terminal=lambda x, law: x, driver=lambda c, k: c.p0_future(k, 0))
        too_far = ens.grid.delta_steps + 1
        with pytest.raises(ValueError):
            solve_absde(ens, terminal=lambda x, law: x, driver=lambda c, k: c.p0_future(k, too_far))

    def test_zero_extension_convention_in_context(self):
        ens = brownian_ensemble(50, seed=8)
        K, d = ens.grid.n_steps, ens.grid.delta_steps
        seen = {}

        def probe(ctx, k):
            if k == K - 1:
                seen["zero"] = ctx.p0_future(k, 2, extension="zero").copy()
                seen["terminal"] = ctx.p0_future(k, 2, extension="terminal").copy()
                seen["q_tail"] = ctx.q0_future(k, 2).copy()
            return np.zeros(ens.n_particles)

        solve_absde(ens, terminal=lambda x, law: -x, driver=probe)
        np.testing.assert_array_equal(seen["zero"], 0.0)
        np.testing.assert_allclose(seen["terminal"], -ens.states[:, K])
        np.testing.assert_array_equal(seen["q_tail"], 0.0)


class TestMaxCondition:
    def test_zero_bracket_means_no_improvement(self):
        # terminal cost is constant, so the whole adjoint triple vanishes and
        # the Hamiltonian cannot be improved by any candidate
        grid = SimGrid(dt=0.05, delta_steps=4, horizon=0.5, n_particles=200, seed=2)
        coeffs = CoefficientSet(
            drift=lambda t, x, xs, m, ms, u, us: u * xs[:, -1],
            terminal_cost=lambda x, law: 0.0,
        )
        ens = simulate(coeffs, grid, xi=1.0, control=0.0)
        adj = solve_absde(ens, terminal=lambda x, law: 0.0)
        gap, se = max_condition_gap(coeffs, ens, adj, [-1.0, 0.3, 2.0])
        assert gap == 0.0
        assert se == 0.0

    @pytest.mark.parametrize("filtration", ["trivial", "full"])
    def test_improvable_control_has_positive_gap(self, filtration):
        # with p0 = 1 the Hamiltonian is u * lag: candidate 0.5 beats u = 0
        grid = SimGrid(dt=0.05, delta_steps=4, horizon=0.5, n_particles=200, seed=2)
        coeffs = CoefficientSet(
            drift=lambda t, x, xs, m, ms, u, us: u * xs[:, -1],
            terminal_cost=lambda x, law: x,
        )
        ens = simulate(coeffs, grid, xi=1.0, control=0.0)
        adj = solve_absde(ens, terminal=lambda x, law: np.ones_like(x))
        gap, se = max_condition_gap(coeffs, ens, adj, [-1.0, 0.0, 0.5], filtration=filtration)
        assert gap == pytest.approx(0.5, abs=1e-10)
        assert gap > 3.0 * se

    def test_bad_arguments_rejected(self):
        ens = brownian_ensemble(10, seed=1)
        adj = solve_absde(ens, terminal=lambda x, law: x)
        with pytest.raises(ValueError):
            max_condition_gap(CoefficientSet(), ens, adj, [])
        with pytest.raises(ValueError):
            max_condition_gap(CoefficientSet(), ens, adj, [0.0], filtration="partial")


class TestStationarityGap:
    @staticmethod
    def quadratic_problem(n=1, seed=0):
        coeffs = CoefficientSet(
            drift=lambda t, x, xs, m, ms, u, us: u,
            running_cost=lambda t, x, xs, m, ms, u, us: -(u**2) / 2.0,
            terminal_cost=lambda x, law: -(x**2) / 2.0,
        )
        grid = SimGrid(dt=0.01, delta_steps=10, horizon=1.0, n_particles=n, seed=seed)
        return ControlProblem(coeffs=coeffs, grid=grid, xi=1.0)

    def test_known_quadratic_optimum(self):
        problem = self.quadratic_problem()
        gap, se = stationarity_gap(problem, control=-0.5, direction=1.0, eps=1e-3)
        assert abs(gap) < 1e-3

    def test_zero_direction_is_exact_zero(self):
        problem = self.quadratic_problem()
        gap, se = stationarity_gap(problem, control=-0.5, direction=0.0, eps=1e-3)
        assert (gap, se) == (0.0, 0.0)

    def test_off_optimum_sign_matches_concavity(self):
        problem = self.quadratic_problem()
        above, _ = stationarity_gap(problem, control=0.0, direction=1.0, eps=1e-3)
        below, _ = stationarity_gap(problem, control=-1.0, direction=1.0, eps=1e-3)
        assert above < 0.0 < below

    def test_common_noise_shrinks_the_error_bar(self):
        # same quadratic problem but with Brownian noise: the paired difference
        # cancels almost all of the cost variance
        coeffs = CoefficientSet(
            drift=lambda t, x, xs, m, ms, u, us: u,
            diffusion=lambda *a: 0.2,
            running_cost=lambda t, x, xs, m, ms, u, us: -(u**2) / 2.0,
            terminal_cost=lambda x, law: -(x**2) / 2.0,
        )
        grid = SimGrid(dt=0.02, delta_steps=5, horizon=1.0, n_particles=4_000, seed=17)
        problem = ControlProblem(coeffs=coeffs, grid=grid, xi=1.0)
        gap, se = stationarity_gap(problem, control=-0.5, direction=1.0, eps=1e-2)
        cost_sd = float(np.std(problem.simulate(-0.5).states[:, -1]))
        assert se < cost_sd  # paired CRN differencing beats naive MC by far
        assert abs(gap) < 3.0 * se + 1e-3
