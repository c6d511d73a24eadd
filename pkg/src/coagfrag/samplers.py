"""Initial-law samplers: Poisson-Dirichlet states on the unit simplex,
tilted and lifted variants, gamma point processes, and Poisson point
configurations with mean measure N*c0.

All samplers are pure functions of (parameters, generator).  Reproducibility
across runs and thread schedules comes from counter-based Philox streams
keyed by (seed, stream_id); replica r conventionally uses stream_id = r.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, special

from coagfrag.state import ClusterState

__all__ = [
    "RngStream",
    "LiftingLaw",
    "InitialMeasure",
    "TiltedAcceptanceError",
    "sample_pd",
    "pd_atoms",
    "sample_tilted_pd",
    "tilted_acceptance_estimate",
    "sample_lifted",
    "sample_gamma_pp",
    "gamma_pp_count_mean",
    "sample_poisson_init",
]

_MASK64 = (1 << 64) - 1
GAMMA_PP_TAIL = 40.0  # intensity support truncated at 40/b; tail mass < 1e-17
GAMMA_PP_GRID = 2**14


class TiltedAcceptanceError(RuntimeError):
    """Rejection sampler gave up: estimated acceptance below the floor."""


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream: identical (seed, stream_id) reproduce
    identical draws bit-exactly, independent of thread schedule."""

    seed: int
    stream_id: int = 0
    algorithm: str = "philox4x64"

    def generator(self):
        if self.algorithm != "philox4x64":
            raise ValueError(f"unknown generator algorithm {self.algorithm!r}")
        key = [self.seed & _MASK64, self.stream_id & _MASK64]
        return np.random.Generator(np.random.Philox(key=key))

    def substream(self, stream_id):
        return RngStream(self.seed, int(stream_id), self.algorithm)


def as_generator(rng):
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError("rng must be an RngStream or numpy Generator")


@dataclass(frozen=True)
class LiftingLaw:
    """Law of the positive scale variable multiplying a unit-mass state.

    kind 'deterministic' consumes no randomness, so lifting by v = 1
    reproduces the plain unit-mass draw exactly.
    """

    kind: str  # deterministic | gamma | table
    v: float = 1.0
    shape: float = 1.0
    rate: float = 1.0
    table: tuple = ()  # (values ascending, cdf) for tabulated laws

    def draw(self, rng):
        gen = as_generator(rng)
        if self.kind == "deterministic":
            return self.v
        if self.kind == "gamma":
            return float(gen.gamma(self.shape, 1.0 / self.rate))
        if self.kind == "table":
            values, cdf = self.table
            return float(np.interp(gen.random(), cdf, values))
        raise ValueError(f"unknown lifting law kind {self.kind!r}")

    def mean(self):
        if self.kind == "deterministic":
            return self.v
        if self.kind == "gamma":
            return self.shape / self.rate
        values, cdf = self.table
        return float(np.trapz(values, cdf))

    def moment_integral(self, fn, y_max=None):
        """Integral of fn against the law (quadrature; exact for point mass)."""
        if self.kind == "deterministic":
            return float(fn(self.v))
        if self.kind == "gamma":
            hi = y_max if y_max is not None else GAMMA_PP_TAIL / self.rate

            def dens(v):
                return (
                    self.rate**self.shape
                    / special.gamma(self.shape)
                    * v ** (self.shape - 1.0)
                    * math.exp(-self.rate * v)
                )

            val, _ = integrate.quad(
                lambda v: fn(v) * dens(v), 0.0, hi, epsabs=1e-12, limit=200
            )
            return val
        values, cdf = self.table
        mids = 0.5 * (np.asarray(values)[1:] + np.asarray(values)[:-1])
        w = np.diff(cdf)
        return float(np.sum(w * np.vectorize(fn)(mids)))


def pd_atoms(theta, rng, trunc_tol=1e-12):
    """Stick-breaking atoms of a Poisson-Dirichlet draw, descending.

    Beta(1, theta) sticks are broken until the unbroken mass drops below
    trunc_tol; the leftover is appended as a final atom so the atom masses
    sum to one exactly.
    """
    if theta <= 0:
        raise ValueError("Poisson-Dirichlet parameter must be positive")
    if not 0.0 < trunc_tol <= 1e-6:
        raise ValueError("truncation tolerance must lie in (0, 1e-6]")
    gen = as_generator(rng)
    block = max(32, int(4 * theta))
    pieces = []
    remaining = 1.0
    while True:
        b = gen.beta(1.0, theta, size=block)
        rem_seq = remaining * np.cumprod(1.0 - b)
        atoms = np.empty(block)
        atoms[0] = remaining * b[0]
        atoms[1:] = rem_seq[:-1] * b[1:]
        below = np.nonzero(rem_seq < trunc_tol)[0]
        if below.size:
            k = int(below[0])
            pieces.append(atoms[: k + 1])
            break
        pieces.append(atoms)
        remaining = float(rem_seq[-1])
    out = np.concatenate(pieces)
    leftover = 1.0 - math.fsum(out.tolist())
    if leftover > 0.0:
        out = np.append(out, leftover)
    out[::-1].sort()
    return out


def sample_pd(theta, rng, trunc_tol=1e-12):
    """Draw a unit-mass state from the Poisson-Dirichlet law PD(theta)."""
    return ClusterState(pd_atoms(theta, rng, trunc_tol))


def sample_tilted_pd(theta, s, rng, trunc_tol=1e-12, max_attempts=200_000):
    """PD(theta) conditioned on the largest atom being at most s.

    Plain rejection; the first accepted draw has the exact conditional law.
    Aborts with a diagnostic when the estimated acceptance probability falls
    below 1e-4.
    """
    if s >= 1.0:
        return sample_pd(theta, rng, trunc_tol)
    if not 0.0 < s < 1.0:
        raise ValueError("threshold s must lie in (0,1]")
    gen = as_generator(rng)
    for attempt in range(1, max_attempts + 1):
        atoms = pd_atoms(theta, gen, trunc_tol)
        if atoms[0] <= s:
            return ClusterState(atoms)
    raise TiltedAcceptanceError(
        f"no acceptance in {max_attempts} attempts for (theta={theta}, s={s}); "
        f"estimated acceptance < {1.0 / max_attempts:.1e} (floor 1e-4)"
    )


def tilted_acceptance_estimate(theta, s, n, rng, trunc_tol=1e-12):
    """Pilot Monte Carlo estimate of P(largest atom <= s) under PD(theta)."""
    gen = as_generator(rng)
    hits = sum(pd_atoms(theta, gen, trunc_tol)[0] <= s for _ in range(n))
    return hits / n


def sample_lifted(theta, lifting, rng, trunc_tol=1e-12):
    """Dilate a PD(theta) draw by an independent positive scale variable."""
    gen = as_generator(rng)
    v = lifting.draw(gen)
    atoms = pd_atoms(theta, gen, trunc_tol)
    return ClusterState(atoms).dilate(v)


@lru_cache(maxsize=32)
def _gamma_pp_table(b, eps_cut):
    """Log-grid inverse CDF of the normalized intensity y**-1 exp(-b y)."""
    y = np.geomspace(eps_cut, GAMMA_PP_TAIL / b, GAMMA_PP_GRID)
    e = special.exp1(b * y)
    lo, hi = e[0], e[-1]
    cdf = (lo - e) / (lo - hi)
    cdf[0], cdf[-1] = 0.0, 1.0
    return np.log(y), cdf, lo - hi


def gamma_pp_count_mean(theta, b, eps_cut):
    """Mean atom count of the truncated gamma point process."""
    _, _, mass = _gamma_pp_table(b, eps_cut)
    return theta * mass


def sample_gamma_pp(theta, b, rng, eps_cut=None):
    """Poisson point configuration with intensity theta * y**-1 exp(-b y).

    The intensity is truncated to [eps_cut, 40/b]; the dropped upper tail
    carries mass below 1e-17.
    """
    if theta <= 0 or b <= 0:
        raise ValueError("gamma point process parameters must be positive")
    if eps_cut is None:
        eps_cut = 1e-9 / b
    if not 0.0 < eps_cut <= 1e-6 / b:
        raise ValueError("eps_cut must lie in (0, 1e-6/b]")
    gen = as_generator(rng)
    log_y, cdf, mass = _gamma_pp_table(float(b), float(eps_cut))
    n = int(gen.poisson(theta * mass))
    if n == 0:
        return ClusterState([])
    atoms = np.exp(np.interp(gen.random(n), cdf, log_y))
    return ClusterState(atoms)


@dataclass(frozen=True)
class InitialMeasure:
    """Finite-first-moment measure c0 on (0, infinity), as a density.

    kinds:
      gamma   -- theta * y**-1 * exp(-b*y) on [eps_cut, 40/b]
      uniform -- constant number density on [lo, hi] with given total
      table   -- piecewise-linear density on a bounded grid
    """

    kind: str
    theta: float = 1.0
    b: float = 1.0
    eps_cut: float = 1e-6
    lo: float = 0.0
    hi: float = 1.0
    total_number: float = 1.0
    grid: tuple = ()
    values: tuple = ()

    def support(self):
        if self.kind == "gamma":
            return self.eps_cut, GAMMA_PP_TAIL / self.b
        if self.kind == "uniform":
            return self.lo, self.hi
        if self.kind == "table":
            return float(self.grid[0]), float(self.grid[-1])
        raise ValueError(f"unknown initial measure kind {self.kind!r}")

    def density(self, y):
        y = np.asarray(y, dtype=float)
        lo, hi = self.support()
        inside = (y >= lo) & (y <= hi)
        if self.kind == "gamma":
            vals = self.theta / np.maximum(y, 1e-300) * np.exp(-self.b * y)
        elif self.kind == "uniform":
            vals = np.full_like(y, self.total_number / (hi - lo))
        else:
            vals = np.interp(y, self.grid, self.values)
        return np.where(inside, vals, 0.0)

    def total(self):
        if self.kind == "gamma":
            return gamma_pp_count_mean(self.theta, self.b, self.eps_cut)
        if self.kind == "uniform":
            return self.total_number
        return float(np.trapz(self.values, self.grid))

    def moment(self, p):
        """Integral of y**p against c0."""
        lo, hi = self.support()
        val, _ = integrate.quad(
            lambda y: y**p * float(self.density(y)),
            lo,
            hi,
            epsabs=1e-12,
            epsrel=1e-10,
            limit=400,
        )
        return val

    def _atom_table(self):
        lo, hi = self.support()
        if self.kind == "gamma":
            log_y, cdf, _ = _gamma_pp_table(float(self.b), float(self.eps_cut))
            return log_y, cdf, True
        y = np.linspace(lo, hi, 4097)
        dens = self.density(y)
        cdf = integrate.cumulative_trapezoid(dens, y, initial=0.0)
        cdf /= cdf[-1]
        return y, cdf, False

    def sample_atoms(self, n, rng):
        gen = as_generator(rng)
        nodes, cdf, is_log = self._atom_table()
        draws = np.interp(gen.random(n), cdf, nodes)
        return np.exp(draws) if is_log else draws


def sample_poisson_init(c0, N, rng):
    """Poisson configuration with mean measure N*c0: Poisson atom count with
    mean N*c0(total), atoms i.i.d. from the normalized density."""
    if N < 1:
        raise ValueError("scaling parameter N must be at least 1")
    gen = as_generator(rng)
    mean = N * c0.total()
    if not math.isfinite(mean):
        raise ValueError("initial measure must have finite total mass")
    n = int(gen.poisson(mean))
    if n == 0:
        return ClusterState([])
    return ClusterState(c0.sample_atoms(n, gen))
