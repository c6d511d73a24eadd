import math

import numpy as np
import pytest
from scipy import integrate

from _util import assert_within_sigma, mean_se
from coagfrag.kernels import constant_kernel, make_kernel_pair
from coagfrag.meanfield import (
    CFPDESolver,
    DensityField,
    SizeGrid,
    _gamma_f,
    compare_empirical_pde,
    empirical_balance_check,
    holder_interpolation_check,
    martingale_diagnostic,
    martingale_scaling,
    simulate_rescaled,
)
from coagfrag.samplers import InitialMeasure, RngStream

CONST_PAIR = make_kernel_pair(constant_kernel(1.0))
UNIFORM_C0 = InitialMeasure("uniform", lo=0.1, hi=1.0, total_number=1.0)


def gamma_profile_mass(grid, theta=1.0, b=1.0):
    return theta / b * (np.exp(-b * grid.edges[:-1]) - np.exp(-b * grid.edges[1:]))


class TestSizeGrid:
    def test_geometric(self):
        g = SizeGrid.geometric(1e-3, 10.0, 2.0**0.25)
        assert np.all(np.diff(g.edges) > 0)
        assert np.all((g.pivots > g.edges[:-1]) & (g.pivots < g.edges[1:]))

    def test_graded_smooth_widths(self):
        g = SizeGrid.graded(1e-3, 10.0, 2 ** (1 / 8), 0.2)
        w = np.diff(g.edges)
        growth = w[1:] / w[:-1]
        assert np.all(growth < 1.0 + (2 ** (1 / 8) - 1.0) + 1e-9)
        assert w.max() <= 0.2 * 1.0001

    def test_bin_union_snaps(self):
        g = SizeGrid.linear(0.0, 1.0, 10)
        idx, snapped = g.bin_union(0.15, 0.75)
        assert snapped == pytest.approx((0.2, 0.7))
        np.testing.assert_array_equal(idx, [2, 3, 4, 5, 6])
        with pytest.raises(ValueError):
            g.bin_union(0.11, 0.19)

    def test_invalid_grid(self):
        with pytest.raises(ValueError):
            SizeGrid(np.array([1.0, 0.5]), np.array([0.7]))


class TestDensityField:
    def test_from_gamma_measure(self):
        grid = SizeGrid.geometric(1e-4, 20.0, 2.0**0.25)
        c0 = InitialMeasure("gamma", theta=1.0, b=1.0, eps_cut=1e-4)
        f = DensityField.from_initial_measure(grid, c0)
        want = gamma_profile_mass(grid)
        np.testing.assert_allclose(f.bin_mass, want, rtol=1e-6, atol=1e-18)

    def test_moment_pivot_rule(self):
        grid = SizeGrid.linear(0.0, 1.0, 50)
        f = DensityField.from_number_density(grid, lambda x: 1.0)
        assert f.total_mass() == pytest.approx(0.5, rel=1e-10)
        assert f.moment(1) == pytest.approx(0.5, rel=1e-10)
        assert f.moment(0) == pytest.approx(1.0, rel=1e-3)


class TestSolver:
    def test_mass_conserved_up_to_reported_flux(self):
        grid = SizeGrid.graded(1e-3, 20.0, 2 ** (1 / 8), 0.25)
        solver = CFPDESolver(CONST_PAIR, grid)
        f0 = DensityField(grid, gamma_profile_mass(grid))
        m0 = f0.total_mass()
        final, _, flux = solver.solve(f0, 0.5)
        leak = flux["overflow_mass"] + flux["underflow_mass"]
        assert final.total_mass() - m0 == pytest.approx(-leak, abs=1e-12 * m0)
        assert leak <= 1e-6 * m0

    def test_stationary_profile_residual_absolute(self):
        grid = SizeGrid.graded(1e-3, 24.0, 2 ** (1 / 14), 0.115)
        solver = CFPDESolver(
            CONST_PAIR, grid, redistribution="quadratic", source_split=2
        )
        f = DensityField(grid, gamma_profile_mass(grid))
        resid, rel, scale = solver.residual_report(f)
        assert np.max(np.abs(resid)) <= 1e-3

    def test_first_order_convergence(self):
        # halving the spacing cuts the stationary residual by >= 1.8
        res = {}
        for k in (8, 16):
            grid = SizeGrid.geometric(1e-4, 30.0, 2 ** (1 / k))
            solver = CFPDESolver(CONST_PAIR, grid)  # documented linear scheme
            f = DensityField(grid, gamma_profile_mass(grid))
            resid, _, scale = solver.residual_report(f)
            res[k] = np.max(np.abs(resid)) / scale.max()
        assert res[8] / res[16] >= 1.8

    def test_config_routes_agree(self):
        # fragmentation shape 2*(x+y)**lam via an explicit constant shape or
        # via the tied-shape scaling route: identical solver behavior.
        lam = 0.0
        pair_a = make_kernel_pair(
            constant_kernel(1.0, lam), constant_kernel(2.0, lam)
        )
        pair_b = make_kernel_pair(constant_kernel(1.0, lam), frag_scale=2.0)
        grid = SizeGrid.graded(1e-3, 15.0, 2 ** (1 / 8), 0.3)
        f0 = DensityField(grid, gamma_profile_mass(grid))
        fa, _, _ = CFPDESolver(pair_a, grid).solve(
            DensityField(grid, f0.bin_mass.copy()), 0.2
        )
        fb, _, _ = CFPDESolver(pair_b, grid).solve(
            DensityField(grid, f0.bin_mass.copy()), 0.2
        )
        np.testing.assert_allclose(fa.bin_mass, fb.bin_mass, rtol=1e-12)


class TestGammaF:
    def test_matches_brute_force(self):
        pair = make_kernel_pair(
            constant_kernel(1.0, degree=1.0),
            frag_scale=1.5,
        )
        rng = np.random.default_rng(5)
        z = rng.uniform(0.1, 2.0, 12)
        N = 7
        box = (0.4, 1.3)
        got = _gamma_f(z, pair, N, box)

        def f(x):
            return 1.0 * ((x >= box[0]) & (x <= box[1]))

        lam = pair.degree
        term1 = 0.0
        for i in range(z.size):
            for j in range(z.size):
                if i == j:
                    continue
                k = z[i] * z[j] * float(pair.coag(z[i], z[j]))
                term1 += k * (f(z[i] + z[j]) - f(z[i]) - f(z[j])) ** 2
        term1 /= 2.0 * N**3
        term2 = 0.0
        for a in z:
            val, _ = integrate.quad(
                lambda u: float(pair.frag.h(np.asarray(u)))
                * (f(u * a) + f((1 - u) * a) - f(a)) ** 2,
                0,
                1,
                points=sorted(
                    p
                    for bb in box
                    for p in (bb / a, 1 - bb / a)
                    if 0 < p < 1
                )
                or None,
                limit=200,
            )
            term2 += a ** (2.0 + lam) * val
        term2 /= 2.0 * N**2
        assert got == pytest.approx(term1 + term2, rel=1e-8)


class TestGammaTracker:
    def test_incremental_matches_full(self):
        from coagfrag.dynamics import GeneratorSpec, _Engine
        from coagfrag.meanfield import _GammaTracker
        from coagfrag.state import ClusterState

        rng = RngStream(991).generator()
        z0 = rng.uniform(0.1, 2.0, 50)
        st = ClusterState(z0, (1.0, 2.0))
        eng = _Engine(st, GeneratorSpec.rescaled(CONST_PAIR, 5), rng)
        tracker = _GammaTracker(st.sizes, CONST_PAIR, 5, (0.4, 1.3))
        for _ in range(200):
            dt, action = eng._draw()
            res = eng.apply_action(dt, action)
            tracker.apply_event(res.event)
        full = _gamma_f(st.sizes, CONST_PAIR, 5, (0.4, 1.3))
        assert tracker.value() == pytest.approx(full, rel=1e-10)


class TestRescaledRuns:
    def _run(self, N, seed, n_rep=60, gamma_box=None, t_end=0.5):
        grid = SizeGrid.geometric(1e-3, 8.0, 2.0**0.25)
        return simulate_rescaled(
            N,
            UNIFORM_C0,
            CONST_PAIR,
            t_end,
            n_rep,
            seed,
            snapshot_times=np.linspace(0, t_end, 9),
            grid=grid,
            moment_exponents=(1.0, 2.0, 3.0, 3.5, 4.5),
            gamma_box=gamma_box,
        )

    def test_mass_conserved_per_replica(self):
        run = self._run(50, 631)
        path = run.moments[1.0]
        np.testing.assert_allclose(
            path, np.repeat(path[:, :1], path.shape[1], axis=1), rtol=1e-9
        )

    def test_initial_first_moment(self):
        m1 = UNIFORM_C0.moment(1)
        for N in (10, 100):
            run = self._run(N, 641 + N, n_rep=400)
            assert_within_sigma(run.moments[1.0][:, 0], m1)

    def test_moment_bound_trend(self):
        # time-integrated high moments stay bounded uniformly in N
        ints = {}
        for N in (10, 100, 1000):
            run = self._run(N, 653 + N, n_rep=40)
            vals = np.trapezoid(run.moments[4.5], run.times, axis=1)
            ints[N] = mean_se(vals)
        for N in (100, 1000):
            m, se = ints[N]
            m0, se0 = ints[10]
            assert m <= m0 + 3.0 * math.hypot(se, se0) + 0.05 * abs(m0)

    def test_holder_inequality(self):
        for N, seed in ((10, 661), (100, 673)):
            run = self._run(N, seed, n_rep=50)
            lhs, rhs = holder_interpolation_check(run, alpha=1.0, gamma=2.5, eps=1.0)
            assert lhs <= rhs * (1.0 + 1e-12)

    def test_martingale_zero_outside_support(self):
        run = self._run(20, 677, n_rep=30, gamma_box=(50.0, 60.0))
        m, se = martingale_diagnostic(run)
        assert m == 0.0 and se == 0.0

    def test_martingale_scaling_slope(self):
        est = {}
        for N in (10, 100):
            run = self._run(N, 683 + N, n_rep=150, gamma_box=(0.3, 1.2), t_end=1.0)
            est[N] = martingale_diagnostic(run)
        slope = martingale_scaling(est)
        assert abs(slope + 1.0) <= 0.25

    def test_rejects_zero_mass_measure(self):
        c0 = InitialMeasure("uniform", lo=0.1, hi=1.0, total_number=0.0)
        with pytest.raises(ValueError, match="moment condition"):
            simulate_rescaled(
                10, c0, CONST_PAIR, 0.1, 2, 1,
                snapshot_times=[0.1], grid=SizeGrid.linear(0.1, 1.0, 4),
            )


class TestComparison:
    def test_t0_sampling_error_scaling(self):
        grid = SizeGrid.geometric(1e-3, 8.0, 2.0**0.25)
        c0 = InitialMeasure("gamma", theta=1.0, b=1.0, eps_cut=1e-3)
        field = DensityField.from_initial_measure(grid, c0)
        dists = []
        for N in (50, 200, 2000):
            run = simulate_rescaled(
                N, c0, CONST_PAIR, 1e-6, 80, 691 + N,
                snapshot_times=[0.0], grid=grid,
            )
            idx, _ = grid.bin_union(0.4, 1.6)
            emp = run.bin_counts[:, 0, :][:, idx].sum(axis=1)
            dists.append(abs(emp.mean() - field.number_in(idx)))
        slope = np.polyfit(np.log([50, 200, 2000]), np.log(dists), 1)[0]
        assert slope < -0.25  # decreasing like a sampling error

    def test_stationary_comparison_small(self):
        theta = b = 1.0
        c0 = InitialMeasure("gamma", theta=theta, b=b, eps_cut=1e-6)
        grid = SizeGrid.graded(1e-3, 20.0, 2 ** (1 / 10), 0.2)
        solver = CFPDESolver(
            CONST_PAIR, grid, redistribution="quadratic", source_split=2
        )
        f0 = DensityField.from_initial_measure(grid, c0)
        final, snaps, _ = solver.solve(f0, 0.5, snapshot_times=[0.5])
        run = simulate_rescaled(
            300, c0, CONST_PAIR, 0.5, 60, 701,
            snapshot_times=[0.0, 0.25, 0.5], grid=grid,
        )
        rows = compare_empirical_pde(
            run, snaps, boxes=[(0.5, 1.0), (1.0, 2.0)], times=[0.5]
        )
        for row in rows:
            assert row["within"], row

    def test_balance_check(self):
        c0 = InitialMeasure("gamma", theta=1.0, b=1.0, eps_cut=1e-6)
        grid = SizeGrid.graded(1e-3, 20.0, 2 ** (1 / 10), 0.2)
        run = simulate_rescaled(
            300, c0, CONST_PAIR, 0.5, 60, 709,
            snapshot_times=np.linspace(0, 0.5, 33), grid=grid,
        )
        mean, se, snapped = empirical_balance_check(run, CONST_PAIR, (0.5, 1.5), 0.5)
        # binning bias rides on top of the MC error
        assert abs(mean) <= 3 * se + 0.02
