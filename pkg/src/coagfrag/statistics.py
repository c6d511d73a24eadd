"""Correlation-measure estimation and the verification checks built on it:
hierarchy residuals, stationary-solution quadrature, Palm self-similarity,
reversibility reports, spectral-gap quantities, and the Poisson moment
formula.

Correlation estimates count ordered tuples of *distinct* atom indices, so
the k-th histogram estimates the k-th correlation measure integrated over
each cell.  Tuple counts per cell are obtained by inclusion-exclusion over
per-cell atom counts.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, special

from coagfrag.dynamics import GeneratorForm, GeneratorSpec, simulate
from coagfrag.kernels import KernelPair
from coagfrag.samplers import LiftingLaw, RngStream
from coagfrag.state import ClusterState

__all__ = [
    "CorrelationHistogram",
    "TestFunctionBox",
    "HierarchyResidual",
    "EnsembleSnapshots",
    "estimate_correlation",
    "pd_correlation_density",
    "lifted_correlation_density",
    "gamma_pp_correlation_density",
    "pd_box_integral",
    "gamma_pp_box_integral",
    "ordered_tuple_count",
    "hierarchy_generator_terms",
    "hierarchy_residual",
    "hierarchy_residuals",
    "hierarchy_residual_battery",
    "stationary_hierarchy_check",
    "run_trajectory_ensemble",
    "palm_selfsimilarity_check",
    "pd_psi_mean",
    "pd_variance_psi",
    "dirichlet_form_estimate",
    "reversibility_report",
    "poisson_moment",
]


# ---------------------------------------------------------------------------
# Correlation histograms
# ---------------------------------------------------------------------------


@dataclass
class CorrelationHistogram:
    """Monte Carlo estimate of the k-th correlation measure on a product
    grid: per-cell mean count of ordered distinct k-tuples, with standard
    errors over replicas."""

    k: int
    edges: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    n_replicas: int

    def cell_index(self, *coords):
        return tuple(int(np.searchsorted(self.edges, c, side="right")) - 1 for c in coords)


def _tuple_counts(counts, k):
    c = counts.astype(float)
    if k == 1:
        return c
    if k == 2:
        t = np.outer(c, c)
        np.fill_diagonal(t, c * (c - 1.0))
        return t
    if k == 3:
        t = np.einsum("a,b,c->abc", c, c, c)
        m = c.size
        for a in range(m):
            t[a, a, :] -= c[a] * c
            t[a, :, a] -= c[a] * c
            t[:, a, a] -= c * c[a]
            t[a, a, a] += 2.0 * c[a]
        return t
    raise ValueError("correlation order k must be 1, 2 or 3")


def estimate_correlation(ensembles, k, edges):
    """Histogram the k-th correlation measure from an ensemble of states.

    ``ensembles`` is a sequence of size arrays (one per replica); ``edges``
    are shared per-axis bin edges.
    """
    edges = np.asarray(edges, dtype=float)
    reps = [np.asarray(s.sizes if isinstance(s, ClusterState) else s) for s in ensembles]
    if len(reps) < 2:
        raise ValueError("correlation estimation needs at least two replicas")
    acc = None
    acc2 = None
    for z in reps:
        counts, _ = np.histogram(z, bins=edges)
        t = _tuple_counts(counts, k)
        if acc is None:
            acc = np.zeros_like(t)
            acc2 = np.zeros_like(t)
        acc += t
        acc2 += t * t
    n = len(reps)
    mean = acc / n
    var = np.maximum(acc2 / n - mean**2, 0.0) * n / (n - 1)
    return CorrelationHistogram(k, edges, mean, np.sqrt(var / n), n)


def pd_correlation_density(theta, points):
    """k-point correlation function of the unit-mass Poisson-Dirichlet
    configuration: theta**k / prod(x) * (1 - sum x)**(theta-1) inside the
    open simplex, zero outside."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    k = pts.shape[1]
    s = pts.sum(axis=1)
    inside = (pts > 0).all(axis=1) & (s < 1.0)
    out = np.zeros(pts.shape[0])
    good = inside
    out[good] = (
        theta**k / np.prod(pts[good], axis=1) * (1.0 - s[good]) ** (theta - 1.0)
    )
    return out if out.size > 1 else float(out[0])


def gamma_pp_correlation_density(theta, b, points):
    """Correlation functions of the gamma point process factorize."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.prod(theta / pts * np.exp(-b * pts), axis=1)
    return out if out.size > 1 else float(out[0])


def _lifted_g(theta, lifting):
    """g(s) = E[(1 - s/V)**(theta-1); V > s] for the lifting variable V."""
    if lifting.kind == "gamma" and abs(lifting.shape - theta) < 1e-12:
        rate = lifting.rate
        return lambda s: math.exp(-rate * s)
    if lifting.kind == "deterministic":
        v = lifting.v

        def g(s):
            return (1.0 - s / v) ** (theta - 1.0) if s < v else 0.0

        return g

    def g(s):
        # E[(1 - s/V)**(theta-1); V > s] = int rho(s+w) (w/(s+w))**(theta-1) dw
        val, _ = integrate.quad(
            lambda w: _lifting_density(lifting, s + w)
            * (w / (s + w)) ** (theta - 1.0),
            0.0,
            _lifting_cutoff(lifting),
            epsabs=1e-12,
            limit=300,
        )
        return val

    return g


def _lifting_density(lifting, v):
    if lifting.kind == "gamma":
        sh, r = lifting.shape, lifting.rate
        return r**sh / special.gamma(sh) * v ** (sh - 1.0) * math.exp(-r * v)
    raise ValueError("no closed density for this lifting law")


def _lifting_cutoff(lifting):
    if lifting.kind == "gamma":
        return 40.0 / lifting.rate
    if lifting.kind == "deterministic":
        return lifting.v
    values, _ = lifting.table
    return float(values[-1])


def lifted_correlation_density(theta, lifting, points):
    """Correlation functions of a dilated unit-mass PD configuration:
    theta**k / prod(z) * g(sum z), with g determined by the lifting law."""
    g = _lifted_g(theta, lifting)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    s = pts.sum(axis=1)
    out = np.array(
        [theta ** pts.shape[1] / np.prod(p) * g(si) for p, si in zip(pts, s)]
    )
    return out if out.size > 1 else float(out[0])


def pd_box_integral(theta, box):
    """Integral of the PD correlation function over a product box."""
    k = len(box)
    if k == 1:
        (a, b) = box[0]
        b = min(b, 1.0)
        val, _ = integrate.quad(
            lambda x: theta / x * (1.0 - x) ** (theta - 1.0), a, min(b, 1.0 - 1e-15)
        )
        return val
    if k == 2:
        (a1, b1), (a2, b2) = box

        def inner(x1):
            hi = min(b2, 1.0 - x1 - 1e-15)
            if hi <= a2:
                return 0.0
            val, _ = integrate.quad(
                lambda x2: theta**2
                / (x1 * x2)
                * (1.0 - x1 - x2) ** (theta - 1.0),
                a2,
                hi,
            )
            return val

        val, _ = integrate.quad(inner, a1, min(b1, 1.0 - 1e-15), limit=200)
        return val
    raise ValueError("box integrals implemented for k <= 2")


def gamma_pp_box_integral(theta, b, box):
    """Exact box integral for the gamma point process (factorizes)."""
    out = 1.0
    for (lo, hi) in box:
        out *= theta * (special.exp1(b * lo) - special.exp1(b * hi))
    return out


# ---------------------------------------------------------------------------
# Hierarchy residuals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestFunctionBox:
    """Product of per-axis interval indicators with compact support in
    (0, infinity): the admissible test-function class for the hierarchy."""

    __test__ = False  # not a pytest class

    intervals: tuple  # ((a1,b1), ..., (ak,bk))

    def __post_init__(self):
        for (a, b) in self.intervals:
            if not 0.0 < a < b < math.inf:
                raise ValueError(f"box interval ({a}, {b}) must satisfy 0 < a < b < inf")

    @property
    def k(self):
        return len(self.intervals)


def ordered_tuple_count(sizes, box):
    """Phi_f(z): number of ordered distinct index tuples with coordinates in
    the box's respective intervals."""
    z = np.asarray(sizes, dtype=float)
    ind = [np.count_nonzero((z >= a) & (z <= b)) for (a, b) in box.intervals]
    if box.k == 1:
        return float(ind[0])
    if box.k == 2:
        (a1, b1), (a2, b2) = box.intervals
        lo, hi = max(a1, a2), min(b1, b2)
        both = np.count_nonzero((z >= lo) & (z <= hi)) if lo <= hi else 0
        return float(ind[0] * ind[1] - both)
    raise ValueError("ordered tuple counts implemented for k <= 2")


def _pair_rate_full(z, pair):
    n = z.size
    x = z[:, None]
    y = z[None, :]
    s = x + y
    if pair.coag.family == "constant":
        w = pair.coag.params[0] * (x * y)
        if pair.degree != 0.0:
            w = w * s**pair.degree
    else:
        u = np.minimum(x, y) / np.maximum(s, 1e-300)
        w = x * y * s**pair.degree * pair.coag.h(u.ravel()).reshape(n, n)
    np.fill_diagonal(w, 0.0)
    return w


class _StateContext:
    """Per-state ingredients shared by every box in a term battery."""

    __slots__ = ("z", "zp", "w", "rowsum", "ssum")

    def __init__(self, sizes, pair):
        z = np.asarray(sizes, dtype=float)
        self.z = z
        self.zp = z ** (2.0 + pair.degree)
        if z.size > 1:
            self.w = _pair_rate_full(z, pair)
            self.rowsum = self.w.sum(axis=1)
            self.ssum = z[:, None] + z[None, :]
        else:
            self.w = self.rowsum = self.ssum = None


def _terms_from_context(ctx, pair, box):
    z, zp, w, rowsum, ssum = ctx.z, ctx.zp, ctx.w, ctx.rowsum, ctx.ssum
    n = z.size
    cc = pair.c_check
    if n == 0:
        return (0.0,) * 6
    if box.k == 1:
        (a, b) = box.intervals[0]
        e = (z >= a) & (z <= b)
        if w is not None:
            in_box = (ssum >= a) & (ssum <= b)
            t1 = 0.5 * float(np.sum(w * in_box))  # diagonal of w is zero
            t3 = float(rowsum @ e)
        else:
            t1 = t3 = 0.0
        t2 = 0.5 * cc * float(zp @ e)
        t4 = float(np.sum(zp * pair.split_weight(a / z, b / z)))
        return (t1, t2, t3, t4, 0.0, 0.0)

    (a1, b1), (a2, b2) = box.intervals
    e1 = ((z >= a1) & (z <= b1)).astype(float)
    e2 = ((z >= a2) & (z <= b2)).astype(float)
    f1_tot, f2_tot = float(e1.sum()), float(e2.sum())
    if w is not None:

        def coag_sum(in_box, other_e, other_tot):
            wm = w * in_box
            rows = wm.sum(axis=1)
            cols = wm.sum(axis=0)
            return other_tot * float(rows.sum()) - float(other_e @ rows) - float(
                cols @ other_e
            )

        in1 = (ssum >= a1) & (ssum <= b1)
        in2 = (ssum >= a2) & (ssum <= b2)
        t1 = 0.5 * (coag_sum(in1, e2, f2_tot) + coag_sum(in2, e1, f1_tot))
        we2 = w @ e2
        we1 = w @ e1
        t3 = (
            f2_tot * float(rowsum @ e1)
            - float(rowsum @ (e1 * e2))
            - float(e1 @ we2)
            + f1_tot * float(rowsum @ e2)
            - float(rowsum @ (e1 * e2))
            - float(e2 @ we1)
        )
        t5 = float(e1 @ we2)
    else:
        t1 = t3 = t5 = 0.0
    zpe1, zpe2 = float(zp @ e1), float(zp @ e2)
    zpe12 = float(np.sum(zp * e1 * e2))
    t2 = 0.5 * cc * (zpe1 * f2_tot - zpe12 + zpe2 * f1_tot - zpe12)
    w1 = pair.split_weight(a1 / z, b1 / z)
    w2 = pair.split_weight(a2 / z, b2 / z)
    t4 = float(np.sum(zp * w1 * (f2_tot - e2))) + float(
        np.sum(zp * w2 * (f1_tot - e1))
    )
    lo = np.maximum(a1 / z, 1.0 - b2 / z)
    hi = np.minimum(b1 / z, 1.0 - a2 / z)
    t6 = float(np.sum(zp * pair.split_weight(lo, hi)))
    return (t1, t2, t3, t4, t5, t6)


def hierarchy_generator_terms(sizes, pair, box):
    """The six generator terms for the ordered-tuple observable of a box,
    evaluated at one state (full-rate dynamics on the cone).

    Returns (t1, ..., t6); the generator value is t1 - t2 - t3 + t4 - t5 + t6.
    Split-fraction integrals reduce to interval weights of the fragmentation
    shape because the test function is a box.
    """
    return _terms_from_context(_StateContext(sizes, pair), pair, box)


TERM_SIGNS = np.array([1.0, -1.0, -1.0, 1.0, -1.0, 1.0])


@dataclass
class HierarchyResidual:
    k: int
    box: TestFunctionBox
    t: float
    lhs: float
    lhs_se: float
    terms: np.ndarray  # time-integrated I1..I6 (ensemble means)
    terms_se: np.ndarray
    residual: float
    residual_se: float
    n_replicas: int

    @property
    def rhs(self):
        return float(np.dot(TERM_SIGNS, self.terms))


@dataclass
class EnsembleSnapshots:
    """Replica snapshots on a common time grid (size arrays, descending)."""

    times: np.ndarray
    replicas: list  # list over replicas of list of arrays
    events: Optional[list] = None


def run_trajectory_ensemble(
    sampler, gen, n_replicas, seed, snapshot_times, record_events=False
):
    """Simulate independent replicas; replica r uses stream_id r."""
    times = np.asarray(sorted(float(t) for t in snapshot_times))
    reps = []
    events = [] if record_events else None
    for r in range(n_replicas):
        stream = RngStream(seed, r)
        generator = stream.generator()
        state0 = sampler(generator)
        traj = simulate(
            state0,
            gen,
            generator,
            t_end=float(times[-1]),
            snapshot_times=times,
            record_events=record_events,
        )
        reps.append(traj.snapshots)
        if record_events:
            events.append(traj.events)
    return EnsembleSnapshots(times, reps, events)


def hierarchy_residual_battery(ens, pair, boxes, ts, admissibility_check=True):
    """Monte Carlo check that correlation measures solve the hierarchy, for
    several boxes and times over one snapshot grid.  Per-state ingredients
    (pair rates, row sums) are shared across boxes.

    lhs is the ensemble mean of Phi_f(Z(t)) - Phi_f(Z(0)); the six
    right-hand terms are trapezoid time integrals of the generator terms
    along each replica.  The residual and its standard error come from the
    per-replica Dynkin differences, which is also what makes the check a
    martingale test.

    Returns a list over boxes of lists over times of HierarchyResidual.
    """
    times = ens.times
    idxs = []
    for t in ts:
        idx = int(np.searchsorted(times, t))
        if idx >= len(times) or abs(times[idx] - t) > 1e-12:
            raise ValueError(f"time {t} is not on the snapshot grid")
        idxs.append(idx)
    top = max(idxs)
    n = len(ens.replicas)
    nb = len(boxes)
    lhs = np.empty((nb, n, len(ts)))
    ints = np.empty((nb, n, len(ts), 6))
    idx_set = {idx: j for j, idx in enumerate(idxs)}
    for r, snaps in enumerate(ens.replicas):
        phi0 = [ordered_tuple_count(snaps[0], box) for box in boxes]
        running = np.zeros((nb, 6))
        prev = None
        for i in range(top + 1):
            ctx = _StateContext(snaps[i], pair)
            cur = np.array(
                [_terms_from_context(ctx, pair, box) for box in boxes]
            )
            if prev is not None:
                running += 0.5 * (times[i] - times[i - 1]) * (prev + cur)
            prev = cur
            j = idx_set.get(i)
            if j is not None:
                for bi, box in enumerate(boxes):
                    lhs[bi, r, j] = ordered_tuple_count(snaps[i], box) - phi0[bi]
                    ints[bi, r, j] = running[bi]
    out = []
    for bi, box in enumerate(boxes):
        per_box = []
        for j, t in enumerate(ts):
            d = lhs[bi, :, j] - ints[bi, :, j] @ TERM_SIGNS
            if admissibility_check and idxs[j] > 0:
                _admissibility_probe(ints[bi, :, j], n)
            per_box.append(
                HierarchyResidual(
                    k=box.k,
                    box=box,
                    t=t,
                    lhs=float(lhs[bi, :, j].mean()),
                    lhs_se=float(lhs[bi, :, j].std(ddof=1) / math.sqrt(n))
                    if n > 1
                    else 0.0,
                    terms=ints[bi, :, j].mean(axis=0),
                    terms_se=ints[bi, :, j].std(axis=0, ddof=1) / math.sqrt(n),
                    residual=float(d.mean()),
                    residual_se=float(d.std(ddof=1) / math.sqrt(n))
                    if n > 1
                    else 0.0,
                    n_replicas=n,
                )
            )
        out.append(per_box)
    return out


def hierarchy_residuals(ens, pair, box, ts, admissibility_check=True):
    """Single-box convenience wrapper around hierarchy_residual_battery."""
    return hierarchy_residual_battery(ens, pair, [box], ts, admissibility_check)[0]


def hierarchy_residual(ens, pair, box, t, admissibility_check=True):
    """Single-time convenience wrapper around hierarchy_residuals."""
    return hierarchy_residuals(ens, pair, box, [t], admissibility_check)[0]


def _admissibility_probe(ints, n):
    """Crude divergence probe: half-ensemble term means should agree with
    full-ensemble means within a generous multiple of their spread."""
    if n < 16:
        return
    half = ints[: n // 2].mean(axis=0)
    full = ints.mean(axis=0)
    spread = ints.std(axis=0, ddof=1) / math.sqrt(n // 2) + 1e-12
    ratio = np.abs(half - full) / spread
    if np.any(ratio > 12.0):
        i = int(np.argmax(ratio))
        raise RuntimeError(
            f"hierarchy term I{i+1} looks divergent with ensemble size "
            "(admissibility violation: the time integrals (i)-(iii) must be "
            "locally integrable)"
        )


# -- stationary-hierarchy pure quadrature -----------------------------------


def stationary_hierarchy_check(theta, lifting, pair, box, g_fn=None):
    """Evaluate the six hierarchy terms by quadrature with the analytic
    correlation functions of a dilated-PD family; returns their signed sum
    (zero for a stationary family with fragmentation tied to coagulation).

    The correlation functions used are r_k(z) = theta**k * g(|z|) / prod(z);
    ``g_fn`` may supply a custom g, otherwise it comes from the lifting law.
    """
    g = g_fn if g_fn is not None else _lifted_g(theta, lifting)
    cut = _lifting_cutoff(lifting)
    lam = pair.degree

    def hcoag(x, y):
        s = x + y
        return s**lam * float(pair.coag.h(np.asarray(min(x, y) / s)))

    def w_interval(zlo, zhi, z):
        return float(pair.split_weight(zlo / z, zhi / z))

    opts = {"epsabs": 1e-10, "epsrel": 1e-9, "limit": 200}

    if box.k == 1:
        (a, b) = box.intervals[0]

        def i1_inner(z1):
            lo, hi = max(a - z1, 1e-300), b - z1
            if hi <= lo:
                return 0.0
            val, _ = integrate.quad(
                lambda z2: theta**2 * hcoag(z1, z2) * g(z1 + z2), lo, hi, **opts
            )
            return val

        i1, _ = integrate.quad(i1_inner, 1e-300, b, limit=200)
        i1 *= 0.5

        i2, _ = integrate.quad(
            lambda z: 0.5 * pair.c_check * z ** (1.0 + lam) * theta * g(z), a, b, **opts
        )

        def i3_inner(z1):
            val, _ = integrate.quad(
                lambda z2: theta**2 * hcoag(z1, z2) * g(z1 + z2),
                1e-300,
                max(cut - z1, 1e-12),
                **opts,
            )
            return val

        i3, _ = integrate.quad(i3_inner, a, b, limit=200)

        i4, _ = integrate.quad(
            lambda z: theta * z ** (1.0 + lam) * g(z) * w_interval(a, b, z),
            a,
            cut,
            **opts,
        )
        terms = np.array([i1, i2, i3, i4, 0.0, 0.0])
        return float(np.dot(TERM_SIGNS, terms)), terms

    if box.k == 2:
        (a1, b1), (a2, b2) = box.intervals

        def box2_quad(fn, lo, hi):
            val, _ = integrate.quad(fn, lo, hi, **opts)
            return val

        # I1, l=1: merge lands in box 1, spectator in box 2 (and mirrored).
        def i1_part(ba, bb, sa, sb):
            # merged pair constrained to [ba,bb], spectator to [sa,sb]
            def over_z3(z3):
                def over_z1(z1):
                    lo, hi = max(ba - z1, 1e-300), bb - z1
                    if hi <= lo:
                        return 0.0
                    val, _ = integrate.quad(
                        lambda z2: theta**3
                        * hcoag(z1, z2)
                        * g(z1 + z2 + z3)
                        / z3,
                        lo,
                        hi,
                        **opts,
                    )
                    return val

                val, _ = integrate.quad(over_z1, 1e-300, bb, limit=200)
                return val

            return box2_quad(over_z3, sa, sb)

        i1 = 0.5 * (i1_part(a1, b1, a2, b2) + i1_part(a2, b2, a1, b1))

        def r2_box(fn):
            def inner(z1):
                val, _ = integrate.quad(lambda z2: fn(z1, z2), a2, b2, **opts)
                return val

            return box2_quad(inner, a1, b1)

        i2 = r2_box(
            lambda z1, z2: 0.5
            * pair.c_check
            * (z1 ** (2.0 + lam) + z2 ** (2.0 + lam))
            * theta**2
            * g(z1 + z2)
            / (z1 * z2)
        )

        # I3, l=1: K(z1, y) integrated over the free partner y; f sees (z1, z2).
        def i3_part(fix_lo, fix_hi, other_lo, other_hi):
            def over_z1(z1):
                def over_z2(z2):
                    val, _ = integrate.quad(
                        lambda y: theta**3
                        * hcoag(z1, y)
                        * g(z1 + y + z2)
                        / z2,
                        1e-300,
                        max(cut - z1 - z2, 1e-12),
                        **opts,
                    )
                    return val

                val, _ = integrate.quad(over_z2, other_lo, other_hi, **opts)
                return val

            return box2_quad(over_z1, fix_lo, fix_hi)

        i3 = i3_part(a1, b1, a2, b2) + i3_part(a2, b2, a1, b1)

        def i4_part(split_lo, split_hi, other_lo, other_hi):
            def over_z2(z2):
                val, _ = integrate.quad(
                    lambda z1: theta**2
                    * z1 ** (1.0 + lam)
                    * w_interval(split_lo, split_hi, z1)
                    * g(z1 + z2)
                    / z2,
                    split_lo,
                    cut,
                    **opts,
                )
                return val

            return box2_quad(over_z2, other_lo, other_hi)

        i4 = i4_part(a1, b1, a2, b2) + i4_part(a2, b2, a1, b1)

        i5 = r2_box(lambda z1, z2: theta**2 * hcoag(z1, z2) * g(z1 + z2))

        def i6_fn(z):
            lo = max(a1 / z, 1.0 - b2 / z)
            hi = min(b1 / z, 1.0 - a2 / z)
            if hi <= lo:
                return 0.0
            return theta * z ** (1.0 + lam) * g(z) * float(pair.split_weight(lo, hi))

        i6, _ = integrate.quad(i6_fn, a1 + a2, min(b1 + b2, cut), **opts)

        terms = np.array([i1, i2, i3, i4, i5, i6])
        return float(np.dot(TERM_SIGNS, terms)), terms

    raise ValueError("stationary hierarchy check implemented for k <= 2")


# ---------------------------------------------------------------------------
# Palm self-similarity
# ---------------------------------------------------------------------------


def palm_selfsimilarity_check(ensembles, theta, x, eps, min_hits=500):
    """First-order Palm check for unit-mass PD configurations: conditioning
    on an atom near x and removing it, the remainder should look like a
    fresh configuration dilated by (1 - atom).

    Returns a report with conditional moment estimates, their dilation-
    normalized versions, and the analytic targets.
    """
    if not 0.0 < x - eps < x + eps < 1.0:
        raise ValueError("atom window must lie inside (0,1)")
    sq_raw = []
    sq_norm = []
    mass_raw = []
    for state in ensembles:
        z = np.asarray(state.sizes if isinstance(state, ClusterState) else state)
        hits = np.nonzero((z >= x - eps) & (z <= x + eps))[0]
        for i in hits:
            rest = np.delete(z, i)
            scale = 1.0 - z[i]
            sq_raw.append(np.sum(rest**2))
            sq_norm.append(np.sum(rest**2) / scale**2)
            mass_raw.append(np.sum(rest))
    n = len(sq_raw)
    if n < min_hits:
        raise RuntimeError(
            f"only {n} conditioning hits in the window [{x-eps}, {x+eps}]; "
            f"need at least {min_hits}"
        )

    def summarize(vals):
        a = np.asarray(vals)
        return float(a.mean()), float(a.std(ddof=1) / math.sqrt(n))

    report = {
        "n_hits": n,
        "second_moment": summarize(sq_raw),
        "second_moment_target": (1.0 - x) ** 2 / (1.0 + theta),
        "second_moment_normalized": summarize(sq_norm),
        "second_moment_normalized_target": 1.0 / (1.0 + theta),
        "mass": summarize(mass_raw),
        "mass_target": 1.0 - x,
    }
    return report


# ---------------------------------------------------------------------------
# Spectral-gap quantities
# ---------------------------------------------------------------------------


def pd_psi_mean(theta, delta):
    """Mean of sum(X_i**delta) under the unit-mass PD law."""
    return special.gamma(delta) * special.gamma(theta + 1.0) / special.gamma(theta + delta)


def pd_variance_psi(theta, delta):
    """Variance of sum(X_i**delta) under the unit-mass PD law."""
    if theta <= 0 or delta <= 0:
        raise ValueError("theta and delta must be positive")
    g = special.gamma
    vals = [g(theta + 1.0), g(2.0 * delta), g(theta + 2.0 * delta), g(delta), g(theta + delta)]
    if not all(math.isfinite(v) for v in vals):
        raise OverflowError("Gamma-function overflow in the variance formula")
    chi1 = g(theta + 1.0) * g(2.0 * delta) / g(theta + 2.0 * delta)
    chi2 = g(delta) ** 2 * (
        theta * g(theta + 1.0) / g(theta + 2.0 * delta)
        - g(theta + 1.0) ** 2 / g(theta + delta) ** 2
    )
    return chi1 + chi2


def dirichlet_form_estimate(theta, delta, ensembles, q=None):
    """Monte Carlo Dirichlet form of sum(X_i**delta) for the Q-weighted
    unit-mass dynamics, from a PD(theta) ensemble.

    Returns (mean, stderr, per_replica) so consecutive deltas can be
    compared with paired differences.  ``q=None`` means Q identically 1,
    for which the split integral has a closed one-dimensional reduction.
    """
    d = float(delta)
    if q is None:
        j_val, _ = integrate.quad(
            lambda u: (u**d + (1.0 - u) ** d - 1.0) ** 2, 0.0, 1.0, epsabs=1e-12
        )
    per = []
    for state in ensembles:
        z = np.asarray(state.sizes if isinstance(state, ClusterState) else state)
        n = z.size
        iu, ju = np.triu_indices(n, k=1)
        xi, xj = z[iu], z[ju]
        qq = 1.0 if q is None else np.asarray(q(xi, xj), dtype=float)
        coag = 0.5 * np.sum(
            xi * xj * qq * ((xi + xj) ** d - xi**d - xj**d) ** 2
        )  # 1/4 of the ordered sum = 1/2 of the unordered one
        if q is None:
            frag = 0.25 * theta * j_val * float(np.sum(z ** (2.0 + 2.0 * d)))
        else:
            frag = 0.0
            for a in z:
                val, _ = integrate.quad(
                    lambda u: float(q(u * a, (1.0 - u) * a))
                    * ((u * a) ** d + ((1.0 - u) * a) ** d - a**d) ** 2,
                    0.0,
                    1.0,
                    epsabs=1e-12,
                )
                frag += 0.25 * theta * a**2 * val
        per.append(coag + frag)
    per = np.asarray(per)
    return (
        float(per.mean()),
        float(per.std(ddof=1) / math.sqrt(per.size)),
        per,
    )


# ---------------------------------------------------------------------------
# Reversibility report
# ---------------------------------------------------------------------------


def reversibility_report(
    gen,
    sampler,
    observables,
    times,
    n_replicas,
    seed,
    reversal_pair=None,
    nsigma=3.0,
):
    """Stationarity and time-reversal diagnostics for a matched
    (generator, initial law) pair.

    observables: mapping name -> function(size array) -> float.
    reversal_pair: optional (g, h) pair of such functions; checks
    E[g(Z(0)) h(Z(T))] = E[h(Z(0)) g(Z(T))].
    """
    times = sorted(float(t) for t in times)
    names = list(observables)
    vals = {nm: np.empty((n_replicas, len(times))) for nm in names}
    rev = np.empty(n_replicas) if reversal_pair else None
    for r in range(n_replicas):
        generator = RngStream(seed, r).generator()
        state0 = sampler(generator)
        traj = simulate(state0, gen, generator, t_end=times[-1], snapshot_times=times)
        for nm in names:
            fn = observables[nm]
            vals[nm][r] = [fn(s) for s in traj.snapshots]
        if reversal_pair:
            g, h = reversal_pair
            z0, zt = traj.snapshots[0], traj.snapshots[-1]
            rev[r] = g(z0) * h(zt) - h(z0) * g(zt)

    report = {"times": times, "observables": {}, "flagged": False}
    for nm in names:
        v = vals[nm]
        means = v.mean(axis=0)
        ses = v.std(axis=0, ddof=1) / math.sqrt(n_replicas)
        diffs = v - v[:, :1]
        dmean = diffs.mean(axis=0)
        dse = diffs.std(axis=0, ddof=1) / math.sqrt(n_replicas)
        with np.errstate(divide="ignore", invalid="ignore"):
            drift = np.where(dse > 0, np.abs(dmean) / np.where(dse > 0, dse, 1.0), 0.0)
        flagged = bool(np.any(drift[1:] > nsigma))
        report["observables"][nm] = {
            "means": means.tolist(),
            "stderr": ses.tolist(),
            "drift_sigma": drift.tolist(),
            "flagged": flagged,
        }
        report["flagged"] = report["flagged"] or flagged
    if reversal_pair is not None:
        m = float(rev.mean())
        se = float(rev.std(ddof=1) / math.sqrt(n_replicas))
        flagged = abs(m) > nsigma * se
        report["time_reversal"] = {"mean": m, "stderr": se, "flagged": bool(flagged)}
        report["flagged"] = report["flagged"] or flagged
    return report


# ---------------------------------------------------------------------------
# Poisson moment formula
# ---------------------------------------------------------------------------


def _compositions(n, k):
    """Ordered tuples of k positive integers summing to n."""
    if k == 1:
        yield (n,)
        return
    for first in range(1, n - k + 2):
        for rest in _compositions(n - first, k - 1):
            yield (first,) + rest


def poisson_moment(n, N, moments):
    """n-th moment of the total mass of a Poisson configuration with mean
    measure N*zeta, from the moments <psi_1>..<psi_n> of zeta.

    Exact composition enumeration; works with floats or Fractions.
    """
    if not 1 <= n <= 12:
        raise ValueError("moment order must be between 1 and 12")
    if len(moments) < n:
        raise ValueError(f"need the first {n} moments of the mean measure")
    total = 0
    for k in range(1, n + 1):
        inner = 0
        for comp in _compositions(n, k):
            term = N**k
            for part in comp:
                term = term * moments[part - 1] / math.factorial(part)
            inner += term
        total += inner / math.factorial(k)
    return total * math.factorial(n)
