import math

import numpy as np
import pytest
from scipy import special

from _util import assert_means_agree, assert_within_sigma, mean_se
from coagfrag.samplers import (
    InitialMeasure,
    LiftingLaw,
    RngStream,
    gamma_pp_count_mean,
    pd_atoms,
    sample_gamma_pp,
    sample_lifted,
    sample_pd,
    sample_poisson_init,
    sample_tilted_pd,
    tilted_acceptance_estimate,
)

N_ENSEMBLE = 20_000


def test_rng_stream_reproducible():
    a = RngStream(123, 7).generator().random(100)
    b = RngStream(123, 7).generator().random(100)
    c = RngStream(123, 8).generator().random(100)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_pd_mass_exactly_one():
    gen = RngStream(1).generator()
    for _ in range(200):
        s = sample_pd(1.0, gen)
        assert s.total_mass == pytest.approx(1.0, abs=1e-15)
        assert np.all(np.diff(s.sizes) <= 0)


def test_pd_atoms_reproducible_across_streams():
    a = pd_atoms(0.7, RngStream(9, 3))
    b = pd_atoms(0.7, RngStream(9, 3))
    np.testing.assert_array_equal(a, b)


def test_pd_truncation_bias_bound():
    # Looser truncation drops tail sticks; any moment with exponent >= 1
    # moves by at most the truncation tolerance.
    for seed in range(20):
        loose = pd_atoms(1.0, RngStream(5, seed), trunc_tol=1e-6)
        tight = pd_atoms(1.0, RngStream(5, seed), trunc_tol=1e-12)
        assert abs(np.sum(loose**2) - np.sum(tight**2)) <= 1e-6


@pytest.mark.parametrize("theta", [0.5, 1.0, 2.0])
def test_pd_second_moment(theta):
    gen = RngStream(17).generator()
    vals = [np.sum(pd_atoms(theta, gen) ** 2) for _ in range(N_ENSEMBLE)]
    assert_within_sigma(vals, 1.0 / (1.0 + theta))


def test_tilted_max_constraint_and_plain_reduction():
    s = sample_tilted_pd(1.0, 0.4, RngStream(2, 0))
    assert s.sizes[0] <= 0.4
    a = sample_tilted_pd(1.0, 1.0, RngStream(2, 1))
    b = sample_pd(1.0, RngStream(2, 1))
    np.testing.assert_array_equal(a.sizes, b.sizes)


def test_tilted_acceptance_rate():
    # P(largest atom <= 1/2) = 1 - ln 2 for theta = 1: at most one atom can
    # exceed 1/2, so the probability is one minus the mean count above 1/2.
    n = 20_000
    est = tilted_acceptance_estimate(1.0, 0.5, n, RngStream(23))
    target = 1.0 - math.log(2.0)
    se = math.sqrt(target * (1 - target) / n)
    assert abs(est - target) <= 3 * se


def test_lifted_deterministic_equals_pd():
    a = sample_lifted(1.5, LiftingLaw("deterministic", v=1.0), RngStream(31, 4))
    b = sample_pd(1.5, RngStream(31, 4))
    np.testing.assert_array_equal(a.sizes, b.sizes)


def test_lifted_gamma_mean_mass():
    theta, b = 1.0, 2.0
    gen = RngStream(37).generator()
    law = LiftingLaw("gamma", shape=theta, rate=b)
    masses = [sample_lifted(theta, law, gen).total_mass for _ in range(N_ENSEMBLE)]
    assert_within_sigma(masses, theta / b)


class TestGammaPP:
    theta = 1.0
    b = 1.0
    eps = 1e-8

    def _ensemble(self, n, seed):
        gen = RngStream(seed).generator()
        return [sample_gamma_pp(self.theta, self.b, gen, self.eps) for _ in range(n)]

    def test_count_mean(self):
        states = self._ensemble(N_ENSEMBLE, 41)
        counts = [s.count for s in states]
        target = self.theta * (special.exp1(self.b * self.eps) - special.exp1(40.0))
        assert gamma_pp_count_mean(self.theta, self.b, self.eps) == pytest.approx(
            target, rel=1e-12
        )
        assert_within_sigma(counts, target)

    def test_second_moment(self):
        states = self._ensemble(N_ENSEMBLE, 43)
        vals = [np.sum(s.sizes**2) for s in states]
        assert_within_sigma(vals, self.theta / self.b**2)

    def test_matches_lifted_gamma(self):
        n = N_ENSEMBLE
        pp = self._ensemble(n, 47)
        gen = RngStream(53).generator()
        law = LiftingLaw("gamma", shape=self.theta, rate=self.b)
        lifted = [sample_lifted(self.theta, law, gen) for _ in range(n)]
        for moment in (
            lambda s: np.sum(s.sizes >= 0.01),
            lambda s: s.total_mass,
            lambda s: np.sum(s.sizes**2),
        ):
            assert_means_agree([moment(s) for s in pp], [moment(s) for s in lifted])


class TestPoissonInit:
    c0 = InitialMeasure("uniform", lo=0.1, hi=1.0, total_number=1.0)

    def test_moment_helpers(self):
        # uniform density 1/0.9 on [0.1, 1]
        assert self.c0.total() == pytest.approx(1.0)
        assert self.c0.moment(1) == pytest.approx((1.0**2 - 0.1**2) / 2 / 0.9)

    def test_first_moment_independent_of_N(self):
        m1 = self.c0.moment(1)
        for N in (3, 30):
            gen = RngStream(59, N).generator()
            vals = [
                sample_poisson_init(self.c0, N, gen).total_mass / N
                for _ in range(8000)
            ]
            assert_within_sigma(vals, m1)

    def test_second_moment_formula(self):
        N = 10
        gen = RngStream(61).generator()
        vals = [
            sample_poisson_init(self.c0, N, gen).total_mass ** 2 for _ in range(20_000)
        ]
        target = N * self.c0.moment(2) + N**2 * self.c0.moment(1) ** 2
        assert_within_sigma(vals, target)

    def test_empirical_measure_converges(self):
        edges = np.linspace(0.1, 1.0, 10)
        target = np.array(
            [
                self.c0.total() * (edges[i + 1] - edges[i]) / 0.9
                for i in range(len(edges) - 1)
            ]
        )
        dists = []
        for N in (100, 1000, 10_000):
            gen = RngStream(67, N).generator()
            s = sample_poisson_init(self.c0, N, gen)
            hist, _ = np.histogram(s.sizes, bins=edges)
            dists.append(np.max(np.abs(hist / N - target)))
        assert dists[2] < dists[1] < dists[0]


def test_gamma_measure_total_matches_exp1():
    c0 = InitialMeasure("gamma", theta=2.0, b=1.0, eps_cut=1e-6)
    assert c0.total() == pytest.approx(
        2.0 * (special.exp1(1e-6) - special.exp1(40.0)), rel=1e-10
    )
    # first moment ~ theta/b for small cutoff
    assert c0.moment(1) == pytest.approx(2.0, rel=1e-4)


def test_parameter_validation():
    gen = RngStream(0).generator()
    with pytest.raises(ValueError):
        pd_atoms(0.0, gen)
    with pytest.raises(ValueError):
        pd_atoms(1.0, gen, trunc_tol=1e-3)
    with pytest.raises(ValueError):
        sample_gamma_pp(1.0, 1.0, gen, eps_cut=0.5)
    with pytest.raises(ValueError):
        sample_poisson_init(TestPoissonInit.c0, 0, gen)
