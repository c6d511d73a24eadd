"""Exact event-driven simulation of the split-merge jump processes, and
numeric application of their generators to observables.

Generator forms
---------------
full             merge rate K(zi,zj) per unordered pair, split rate
                 (c_check/2)*zi**(2+lam) per cluster, on the cone of
                 finite-mass states.
normalized       the same rates divided by total_mass**(2+lam); bounded,
                 related to `full` by a deterministic time change.
simplex          restriction of `full` to unit-mass states.
balanced         `full` with the fragmentation shape tied to the
                 coagulation shape by a factor theta (detailed balance).
rescaled         `full` with the merge rate divided by N (mean-field
                 scaling); splits are unscaled.
simplex_weighted custom bounded pair weight K1 and split weight F1 on the
                 unit simplex.

Simulation is exact (Gillespie).  Three selection strategies are used:
an O(1)-totals separable path for constant shapes of degree zero, an exact
pair-rate matrix for small states, and envelope thinning for large states
with general kernels (exact by dominance of the envelope).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from coagfrag import kernels as kmod
from coagfrag.kernels import KernelPair, make_kernel_pair
from coagfrag.samplers import as_generator
from coagfrag.state import ClusterState

__all__ = [
    "GeneratorForm",
    "GeneratorSpec",
    "EventRates",
    "Event",
    "StepResult",
    "Trajectory",
    "ProductObservable",
    "PowerSumObservable",
    "CylinderObservable",
    "QuadratureError",
    "event_rates",
    "step",
    "simulate",
    "apply_generator",
]

MATRIX_LIMIT = 1024  # largest state for full pair-rate matrices
RATE_OVERFLOW = 1e300
_WEIGHT_GRID = 4096  # midpoint cells for custom split-weight tables


class QuadratureError(RuntimeError):
    pass


class GeneratorForm(enum.Enum):
    FULL = "full"
    NORMALIZED = "normalized"
    SIMPLEX = "simplex"
    BALANCED = "balanced"
    RESCALED = "rescaled"
    SIMPLEX_WEIGHTED = "simplex_weighted"


@dataclass(frozen=True)
class GeneratorSpec:
    """Which jump process to run, with its parameters."""

    form: GeneratorForm
    kernels: Optional[KernelPair] = None
    theta: float = 1.0
    n_scale: int = 1  # N for the rescaled form
    k1: Optional[Callable] = None
    f1: Optional[Callable] = None
    k1_bound: Optional[float] = None
    f1_bound: Optional[float] = None

    @classmethod
    def full(cls, pair):
        return cls(GeneratorForm.FULL, pair)

    @classmethod
    def normalized(cls, pair):
        return cls(GeneratorForm.NORMALIZED, pair)

    @classmethod
    def simplex(cls, pair):
        return cls(GeneratorForm.SIMPLEX, pair)

    @classmethod
    def balanced(cls, coag_kernel, theta):
        """Fragmentation shape = theta * coagulation shape (common degree)."""
        pair = make_kernel_pair(coag_kernel, frag_scale=theta)
        return cls(GeneratorForm.BALANCED, pair, theta=float(theta))

    @classmethod
    def rescaled(cls, pair, N):
        if N < 1:
            raise ValueError("N must be a positive integer")
        return cls(GeneratorForm.RESCALED, pair, n_scale=int(N))

    @classmethod
    def weighted_simplex(cls, k1, f1, k1_bound=None, f1_bound=None):
        """Custom symmetric pair/split weights on the unit simplex.

        The total merge and split rates must be bounded on the simplex;
        callers must certify this by passing explicit bounds.
        """
        if k1_bound is None or f1_bound is None:
            raise ValueError(
                "simplex_weighted generators require explicit k1_bound and "
                "f1_bound: the generator is only defined when the total pair "
                "weight sum and the total split weight are bounded on the "
                "unit simplex"
            )
        return cls(
            GeneratorForm.SIMPLEX_WEIGHTED,
            k1=k1,
            f1=f1,
            k1_bound=float(k1_bound),
            f1_bound=float(f1_bound),
        )

    @classmethod
    def q_weighted(cls, q, theta, q_bound=1.0):
        """Pair weight x*y*Q(x,y), split weight theta*(x+y)*Q(x,y), for a
        bounded symmetric Q on the simplex: both total rates are bounded by
        q_bound and theta*q_bound respectively."""
        th = float(theta)

        def k1(x, y):
            return x * y * q(x, y)

        def f1(x, y):
            return th * (x + y) * q(x, y)

        spec = cls(
            GeneratorForm.SIMPLEX_WEIGHTED,
            theta=th,
            k1=k1,
            f1=f1,
            k1_bound=float(q_bound),
            f1_bound=th * float(q_bound),
        )
        return spec

    @property
    def lam(self):
        if self.kernels is None:
            return 0.0
        return self.kernels.degree

    def exponents(self):
        lam = self.lam
        return (1.0, 1.0 + lam, 2.0 + lam)

    def scales(self, total_mass):
        """(coagulation, fragmentation) rate multipliers for this form."""
        if self.form is GeneratorForm.NORMALIZED:
            s = total_mass ** -(2.0 + self.lam)
            return s, s
        if self.form is GeneratorForm.RESCALED:
            return 1.0 / self.n_scale, 1.0
        return 1.0, 1.0

    def validate_state(self, state):
        if self.form in (GeneratorForm.SIMPLEX, GeneratorForm.SIMPLEX_WEIGHTED):
            if abs(state.total_mass - 1.0) > 1e-9:
                raise ValueError(
                    f"{self.form.value} dynamics require unit total mass, "
                    f"got {state.total_mass!r}"
                )


@dataclass(frozen=True)
class EventRates:
    coag_total: float
    frag_total: float
    frag_weights: np.ndarray
    pair_rates: Optional[np.ndarray] = None  # upper-triangular, None if large

    @property
    def total(self):
        return self.coag_total + self.frag_total


@dataclass(frozen=True)
class Event:
    time: float
    kind: str  # "coag" | "frag"
    parents: tuple
    children: tuple


@dataclass(frozen=True)
class StepResult:
    waiting_time: float
    event: Optional[Event]
    absorbed: bool = False
    thinned: bool = False


@dataclass
class Trajectory:
    """Snapshots on a grid plus (optionally) the full event log."""

    snapshot_times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # size arrays, descending
    events: Optional[list] = None
    final_state: Optional[ClusterState] = None
    t_final: float = 0.0
    n_events: int = 0
    n_thinned: int = 0
    absorbed: bool = False


def _pair_rate_matrix(z, pair, cscale):
    """Upper-triangular merge rates cscale*K(zi,zj); zeros elsewhere."""
    n = z.size
    x = z[:, None]
    y = z[None, :]
    s = x + y
    u = np.minimum(x, y) / s
    w = cscale * x * y * s**pair.degree * pair.coag.h(u.ravel()).reshape(n, n)
    return np.triu(w, k=1)


def _coag_total_chunked(z, pair, cscale, chunk=512):
    total = 0.0
    n = z.size
    for lo in range(0, n, chunk):
        x = z[lo : lo + chunk, None]
        y = z[None, :]
        s = x + y
        u = np.minimum(x, y) / s
        w = x * y * s**pair.degree * pair.coag.h(u.ravel()).reshape(x.size, n)
        total += float(np.sum(w)) - float(np.sum(np.diagonal(w, offset=-lo)))
    return 0.5 * cscale * total


def _weighted_tables(z, k1, f1):
    """Pair-weight matrix and per-cluster split tables for custom weights.

    Split weights are tabulated by midpoint sampling on a 4096-cell grid in
    the split fraction, the same discretization policy as the kernel module.
    """
    n = z.size
    x = z[:, None]
    y = z[None, :]
    kw = np.triu(np.asarray(k1(x, y), dtype=float), k=1)
    mids = (np.arange(_WEIGHT_GRID) + 0.5) / _WEIGHT_GRID
    vals = np.asarray(f1(np.outer(z, mids), np.outer(z, 1.0 - mids)), dtype=float)
    cluster_int = vals.mean(axis=1)  # integral over u by midpoint rule
    frag_w = 0.5 * z * cluster_int
    return kw, frag_w, mids, vals


def event_rates(state, gen):
    """Exact total rates and the per-cluster/per-pair selection structure.

    The coagulation total is (scale/2) * sum over ordered distinct pairs of
    K; the fragmentation total sums (scale*c_check/2)*z**(2+lam).  Totals
    are exact for every path (chunked evaluation for large states).
    """
    gen.validate_state(state)
    z = state.sizes
    n = z.size
    if n == 0:
        return EventRates(0.0, 0.0, np.zeros(0), None)

    if gen.form is GeneratorForm.SIMPLEX_WEIGHTED:
        kw, frag_w, _, _ = _weighted_tables(z, gen.k1, gen.f1)
        return EventRates(float(np.sum(kw)), float(np.sum(frag_w)), frag_w, kw)

    pair = gen.kernels
    cscale, fscale = gen.scales(state.total_mass)
    lam = pair.degree
    frag_w = fscale * 0.5 * pair.c_check * z ** (2.0 + lam)
    frag_total = float(np.sum(frag_w))

    if n == 1:
        coag_total, mat = 0.0, np.zeros((1, 1))
    elif n <= MATRIX_LIMIT:
        mat = _pair_rate_matrix(z, pair, cscale)
        coag_total = float(np.sum(mat))
    else:
        mat = None
        if pair.coag.family == "constant" and lam == 0.0:
            s1 = state.power_sum(1.0)
            s2 = state.power_sum(2.0)
            coag_total = cscale * pair.coag.params[0] * 0.5 * (s1 * s1 - s2)
        else:
            coag_total = _coag_total_chunked(z, pair, cscale)

    if coag_total > RATE_OVERFLOW or frag_total > RATE_OVERFLOW:
        raise OverflowError("total event rate exceeds the overflow guard")
    return EventRates(coag_total, frag_total, frag_w, mat)


def _sample_index(weights, gen_rng):
    c = np.cumsum(weights)
    return int(np.searchsorted(c, gen_rng.random() * c[-1], side="right").clip(0, len(weights) - 1))


class _Engine:
    """One replica's event loop: owns the mutable state and a generator."""

    def __init__(self, state, gen, rng, matrix_limit=MATRIX_LIMIT):
        gen.validate_state(state)
        self.state = state
        self.gen = gen
        self.rng = as_generator(rng)
        self.matrix_limit = matrix_limit
        self.cscale, self.fscale = gen.scales(state.total_mass)
        pair = gen.kernels
        if gen.form is GeneratorForm.SIMPLEX_WEIGHTED:
            self.mode = "weighted"
        elif pair.coag.family == "constant" and pair.degree == 0.0:
            self.mode = "separable"
        else:
            self.mode = "matrix"  # switches to thinning on large states

    # -- exact totals and event draw ---------------------------------------

    def _draw(self):
        """Return (dt, event-application-thunk or None-for-null)."""
        st, gen, rng = self.state, self.gen, self.rng
        z = st.sizes
        n = z.size
        if n == 0:
            return math.inf, None

        if self.mode == "weighted":
            kw, frag_w, mids, vals = _weighted_tables(z, gen.k1, gen.f1)
            coag_total = float(np.sum(kw))
            frag_total = float(np.sum(frag_w))
            total = coag_total + frag_total
            if total <= 0.0:
                return math.inf, None
            dt = rng.exponential(1.0 / total)
            if rng.random() * total < coag_total:
                flat = _sample_index(kw.ravel(), rng)
                i, j = divmod(flat, n)
                return dt, ("coag", i, j)
            i = _sample_index(frag_w, rng)
            row = vals[i]
            c = np.cumsum(row)
            u = mids[int(np.searchsorted(c, rng.random() * c[-1]).clip(0, row.size - 1))]
            return dt, ("frag", i, u)

        pair = gen.kernels
        lam = pair.degree
        frag_total = self.fscale * 0.5 * pair.c_check * st.power_sum(2.0 + lam)

        if self.mode == "separable":
            h0 = pair.coag.params[0]
            s1 = st.power_sum(1.0)
            s2 = st.power_sum(2.0)
            coag_total = self.cscale * h0 * 0.5 * max(s1 * s1 - s2, 0.0)
            total = coag_total + frag_total
            if total <= 0.0:
                return math.inf, None
            dt = rng.exponential(1.0 / total)
            if rng.random() * total < coag_total:
                w = z * (s1 - z)
                i = _sample_index(w, rng)
                while True:
                    j = _sample_index(z, rng)
                    if j != i:
                        break
                return dt, ("coag", i, j)
            i = _sample_index(z * z, rng)
            return dt, ("frag", i, float(pair.sample_split(rng)))

        if n <= self.matrix_limit:
            mat = _pair_rate_matrix(z, pair, self.cscale)
            coag_total = float(np.sum(mat))
            total = coag_total + frag_total
            if total <= 0.0:
                return math.inf, None
            dt = rng.exponential(1.0 / total)
            if rng.random() * total < coag_total:
                flat = _sample_index(mat.ravel(), rng)
                i, j = divmod(flat, n)
                return dt, ("coag", i, j)
            i = _sample_index(z ** (2.0 + lam), rng)
            return dt, ("frag", i, float(pair.sample_split(rng)))

        # Thinning for large states with general kernels: propose merges at
        # the dominating envelope rate, accept against the true rate.
        c1 = max(2.0 ** (lam - 1.0), 1.0)
        s1 = st.power_sum(1.0)
        s1l = st.power_sum(1.0 + lam)
        s2l = st.power_sum(2.0 + lam)
        envelope = self.cscale * pair.c_hat * c1 * max(s1l * s1 - s2l, 0.0)
        total = envelope + frag_total
        if total <= 0.0:
            return math.inf, None
        dt = rng.exponential(1.0 / total)
        if rng.random() * total >= envelope:
            i = _sample_index(z ** (2.0 + lam), rng)
            return dt, ("frag", i, float(pair.sample_split(rng)))
        w = z ** (1.0 + lam) * (s1 - z)
        i = _sample_index(w, rng)
        while True:
            j = _sample_index(z, rng)
            if j != i:
                break
        zi, zj = z[i], z[j]
        true = pair.coag_rate(zi, zj)
        dom = pair.c_hat * c1 * (zi ** (1.0 + lam) * zj + zi * zj ** (1.0 + lam))
        if rng.random() * dom < true:
            return dt, ("coag", i, j)
        return dt, ("null",)

    def advance(self, t=0.0):
        """Draw one proposal and apply it; returns a StepResult."""
        dt, action = self._draw()
        return self.apply_action(dt, action, t)

    def apply_action(self, dt, action, t=0.0):
        if action is None:
            return StepResult(math.inf, None, absorbed=True)
        if action[0] == "null":
            return StepResult(dt, None, thinned=True)
        st = self.state
        z = st.sizes
        if action[0] == "coag":
            _, i, j = action
            parents = (float(z[i]), float(z[j]))
            st.merge(i, j)
            return StepResult(
                dt, Event(t + dt, "coag", parents, (parents[0] + parents[1],))
            )
        _, i, u = action
        zi = float(z[i])
        y = u * zi
        # A tabulated split fraction can land exactly on 0 or zi; nudge into
        # the interior in that measure-zero case.
        if not 0.0 < y < zi:
            y = min(max(y, zi * 1e-12), zi * (1.0 - 1e-12))
        st.split(i, y)
        return StepResult(dt, Event(t + dt, "frag", (zi,), (y, zi - y)))


def step(state, gen, rng):
    """Advance the state by one exact jump (mutating it); returns the
    waiting time and event.  Total rate zero is reported as absorption, not
    an error.  On large states with non-separable kernels the returned
    result may be a thinned null proposal (time advances, no jump)."""
    return _Engine(state, gen, rng).advance()


def simulate(
    state0,
    gen,
    rng,
    t_end=None,
    max_events=None,
    snapshot_times=(),
    record_events=False,
):
    """Run the jump process from state0 (not mutated) and record snapshots.

    Snapshot at grid time tau is the state with all events at times <= tau
    applied.  Deterministic given (state0, gen, seed).
    """
    if t_end is None and max_events is None:
        raise ValueError("either t_end or max_events must be given")
    horizon = math.inf if t_end is None else float(t_end)
    cap = math.inf if max_events is None else int(max_events)

    state = ClusterState(state0.sizes, gen.exponents(), state0.capacity)
    engine = _Engine(state, gen, rng)
    traj = Trajectory(events=[] if record_events else None)
    grid = sorted(float(t) for t in snapshot_times)
    gi = 0
    t = 0.0
    n_events = 0

    def flush(up_to, inclusive=True):
        nonlocal gi
        while gi < len(grid) and (
            grid[gi] <= up_to if inclusive else grid[gi] < up_to
        ):
            traj.snapshot_times.append(grid[gi])
            traj.snapshots.append(state.snapshot())
            gi += 1

    while n_events < cap:
        dt, action = engine._draw()
        if action is None:
            flush(horizon)
            traj.absorbed = True
            if horizon < math.inf:
                t = horizon
            break
        t_next = t + dt
        if t_next > horizon:
            # The next jump falls beyond the horizon: the state at the
            # horizon is the pre-jump state, so the draw is discarded.
            flush(horizon)
            t = horizon
            break
        # Grid times strictly before the jump see the pre-jump state.
        flush(t_next, inclusive=False)
        res = engine.apply_action(dt, action, t)
        t = t_next
        if res.thinned:
            traj.n_thinned += 1
            continue
        n_events += 1
        if record_events:
            traj.events.append(res.event)
    flush(t)

    traj.final_state = state
    traj.t_final = t
    traj.n_events = n_events
    return traj


# ---------------------------------------------------------------------------
# Observables and generator application
# ---------------------------------------------------------------------------


class ProductObservable:
    """Pi_phi(z) = product of phi(z_i), with phi - 1 compactly supported and
    strictly inside (0, 2) so the product converges.

    ``breaks`` lists sizes at which phi jumps, passed to the split
    quadrature as known discontinuities.
    """

    def __init__(self, phi, breaks=()):
        self.phi = phi
        self.breaks = tuple(breaks)

    def value(self, sizes):
        return float(np.prod(self.phi(np.asarray(sizes, dtype=float))))


class PowerSumObservable:
    def __init__(self, gamma):
        self.gamma = float(gamma)

    def value(self, sizes):
        return float(np.sum(np.asarray(sizes, dtype=float) ** self.gamma))


class CylinderObservable:
    """Phi_f(z) = sum of f(z_i) for bounded f with compact support."""

    def __init__(self, f, support=None):
        self.f = f
        self.support = support

    def value(self, sizes):
        return float(np.sum(self.f(np.asarray(sizes, dtype=float))))


def _quad(fn, lo, hi, what, size, points=None):
    val, err = integrate.quad(
        fn, lo, hi, epsabs=kmod.QUAD_ABS_TOL, epsrel=1e-9, limit=300, points=points
    )
    if err > max(10 * kmod.QUAD_ABS_TOL, 1e-7 * abs(val)):
        raise QuadratureError(
            f"{what} quadrature failed for cluster size {size!r} (err={err:.2g})"
        )
    return val


def _split_points(breaks, a):
    pts = set()
    for b in breaks:
        for u in (b / a, 1.0 - b / a):
            if 0.0 < u < 1.0:
                pts.add(float(u))
    return sorted(pts) or None


def apply_generator(obs, state, gen):
    """Evaluate the generator on an observable at a state.

    Merge contributions are summed over all pairs exactly; split
    contributions integrate the observable difference against the split
    density with the kernel-module quadrature tolerance.
    """
    gen.validate_state(state)
    z = np.asarray(state.sizes, dtype=float)
    n = z.size
    if n == 0:
        return 0.0

    if gen.form is GeneratorForm.SIMPLEX_WEIGHTED:
        return _apply_weighted(obs, z, gen)

    pair = gen.kernels
    lam = pair.degree
    cscale, fscale = gen.scales(state.total_mass)
    mat = _pair_rate_matrix(z, pair, cscale) if n > 1 else np.zeros((1, 1))
    iu, ju = np.triu_indices(n, k=1)
    rates = mat[iu, ju]
    zi, zj = z[iu], z[ju]

    if isinstance(obs, PowerSumObservable):
        g = obs.gamma
        coag = float(np.sum(rates * ((zi + zj) ** g - zi**g - zj**g)))
        j_gamma = _quad(
            lambda u: float(pair.frag.h(np.asarray(u)))
            * (u**g + (1.0 - u) ** g - 1.0),
            0.0,
            1.0,
            "power-sum split",
            None,
        )
        frag = fscale * 0.5 * j_gamma * float(np.sum(z ** (2.0 + lam + g)))
        return coag + frag

    if isinstance(obs, CylinderObservable):
        f = obs.f
        coag = float(np.sum(rates * (f(zi + zj) - f(zi) - f(zj))))
        frag = 0.0
        for a in z:
            pts = _split_points(obs.support, a) if obs.support is not None else None
            val = _quad(
                lambda u: float(pair.frag.h(np.asarray(u)))
                * (f(u * a) + f((1.0 - u) * a) - f(a)),
                0.0,
                1.0,
                "cylinder split",
                a,
                points=pts,
            )
            frag += fscale * 0.5 * a ** (2.0 + lam) * val
        return coag + frag

    if isinstance(obs, ProductObservable):
        phi = obs.phi
        pz = phi(z)
        if np.any(pz <= 0.0):
            raise ValueError("product observable requires phi > 0 on the state")
        total = float(np.prod(pz))
        coag = float(
            np.sum(
                rates
                * (phi(zi + zj) - pz[iu] * pz[ju])
                * (total / (pz[iu] * pz[ju]))
            )
        )
        frag = 0.0
        for a, pa in zip(z, pz):
            val = _quad(
                lambda u: float(pair.frag.h(np.asarray(u)))
                * (phi(u * a) * phi((1.0 - u) * a) - pa),
                0.0,
                1.0,
                "product split",
                a,
                points=_split_points(obs.breaks, a),
            )
            frag += fscale * 0.5 * a ** (2.0 + lam) * val * (total / pa)
        return coag + frag

    raise TypeError(f"unsupported observable type {type(obs).__name__}")


def _apply_weighted(obs, z, gen):
    n = z.size
    x = z[:, None]
    y = z[None, :]
    kw = np.triu(np.asarray(gen.k1(x, y), dtype=float), k=1)
    iu, ju = np.triu_indices(n, k=1)
    rates = kw[iu, ju]
    zi, zj = z[iu], z[ju]

    def split_term(a, diff, pts=None):
        return 0.5 * a * _quad(
            lambda u: float(gen.f1(u * a, (1.0 - u) * a)) * diff(u),
            0.0,
            1.0,
            "weighted split",
            a,
            points=pts,
        )

    if isinstance(obs, PowerSumObservable):
        g = obs.gamma
        coag = float(np.sum(rates * ((zi + zj) ** g - zi**g - zj**g)))
        frag = sum(
            split_term(a, lambda u, a=a: (u * a) ** g + ((1 - u) * a) ** g - a**g)
            for a in z
        )
        return coag + frag
    if isinstance(obs, CylinderObservable):
        f = obs.f
        coag = float(np.sum(rates * (f(zi + zj) - f(zi) - f(zj))))
        frag = sum(
            split_term(
                a,
                lambda u, a=a: f(u * a) + f((1 - u) * a) - f(a),
                _split_points(obs.support, a) if obs.support is not None else None,
            )
            for a in z
        )
        return coag + frag
    if isinstance(obs, ProductObservable):
        phi = obs.phi
        pz = phi(z)
        total = float(np.prod(pz))
        coag = float(
            np.sum(rates * (phi(zi + zj) - pz[iu] * pz[ju]) * total / (pz[iu] * pz[ju]))
        )
        frag = sum(
            split_term(
                a,
                lambda u, a=a, pa=pa: phi(u * a) * phi((1 - u) * a) - pa,
                _split_points(obs.breaks, a),
            )
            * (total / pa)
            for a, pa in zip(z, pz)
        )
        return coag + frag
    raise TypeError(f"unsupported observable type {type(obs).__name__}")
