"""Homogeneous rate kernels for binary coagulation and fragmentation.

A homogeneous symmetric kernel of degree ``lam`` is determined by its shape
on the diagonal cross-section, ``h(u) = H(u, 1-u)`` for ``u`` in (0,1),
through ``H(x, y) = (x+y)**lam * h(x/(x+y))``.  The coagulation rate is
``K(x, y) = x*y*H_coag(x, y)`` and the fragmentation rate density is
``F(x, y) = (x+y)*H_frag(x, y)``, so the total fragmentation rate of an
``x``-sized cluster is ``(c_check/2) * x**(2+lam)`` with
``c_check = integral of h_frag over (0,1)``.

The module computes the two normalization constants

* ``c_hat``  : sup of the coagulation shape (must be finite),
* ``c_check``: integral of the fragmentation shape (must be finite),

and tabulates the inverse CDF of the normalized split-fraction density
``h_frag(u)/c_check`` used by the event-driven simulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

__all__ = [
    "KernelError",
    "HomogeneousKernel",
    "KernelPair",
    "constant_kernel",
    "product_power_kernel",
    "abs_power_kernel",
    "sum_powers_kernel",
    "ratio_indicator_kernel",
    "custom_kernel",
    "register_shape",
    "eval_H",
    "coag_rate",
    "frag_split_density",
    "total_frag_rate",
    "kernel_constants",
    "make_kernel_pair",
]

# Tolerances shared with the statistics/meanfield quadratures.
QUAD_ABS_TOL = 1e-10
SUP_REL_TOL = 1e-9
SYMMETRY_TOL = 1e-9
CDF_TABLE_CELLS = 4096

_OVERFLOW_GUARD = 1e100


class KernelError(ValueError):
    """Invalid kernel: asymmetric, negative, unbounded or non-integrable shape."""


# Registry for named custom shapes, referenced from scenario configs.
_SHAPE_REGISTRY: dict[str, tuple[float, Callable]] = {}


def register_shape(name, degree, shape):
    """Register a named custom shape ``h(u)`` (vectorized) of given degree."""
    _SHAPE_REGISTRY[name] = (float(degree), shape)


@dataclass(frozen=True)
class HomogeneousKernel:
    """Symmetric nonnegative homogeneous kernel, held as (degree, shape)."""

    degree: float
    shape: Callable
    family: str = "custom"
    params: tuple = ()

    def __post_init__(self):
        if self.degree < 0:
            raise KernelError(
                f"homogeneity degree must be nonnegative, got {self.degree}"
            )

    def h(self, u):
        return self.shape(np.asarray(u, dtype=float))

    def __call__(self, x, y):
        return eval_H(self, x, y)


def constant_kernel(value=1.0, degree=0.0):
    """Shape identically ``value``; degree defaults to 0."""
    if value < 0:
        raise KernelError("constant shape must be nonnegative")
    v = float(value)

    def shape(u):
        return np.full_like(np.asarray(u, dtype=float), v)

    return HomogeneousKernel(float(degree), shape, "constant", (v,))


def product_power_kernel(a, b, c):
    """H(x,y) = (xy)**a * (x**b + y**b)**c, degree 2a + b*c."""
    a, b, c = float(a), float(b), float(c)

    def shape(u):
        u = np.asarray(u, dtype=float)
        return (u * (1.0 - u)) ** a * (u**b + (1.0 - u) ** b) ** c

    return HomogeneousKernel(2 * a + b * c, shape, "product_power", (a, b, c))


def abs_power_kernel(a, b, c):
    """H(x,y) = (xy)**a * |x**b - y**b|**c, degree 2a + b*c."""
    a, b, c = float(a), float(b), float(c)

    def shape(u):
        u = np.asarray(u, dtype=float)
        return (u * (1.0 - u)) ** a * np.abs(u**b - (1.0 - u) ** b) ** c

    return HomogeneousKernel(2 * a + b * c, shape, "abs_power", (a, b, c))


def sum_powers_kernel(degree, a):
    """H(x,y) = (x**a + y**a) * (x**(degree-a) + y**(degree-a))."""
    lam, a = float(degree), float(a)

    def shape(u):
        u = np.asarray(u, dtype=float)
        v = 1.0 - u
        return (u**a + v**a) * (u ** (lam - a) + v ** (lam - a))

    return HomogeneousKernel(lam, shape, "sum_powers", (lam, a))


def ratio_indicator_kernel(degree, a):
    """H(x,y) = (xy)**(degree/2) * 1{a <= x/y <= 1/a}, 0 < a < 1.

    Discontinuous but bounded; satisfies both shape conditions for any
    degree >= 0.
    """
    lam, a = float(degree), float(a)
    if not 0.0 < a < 1.0:
        raise KernelError("ratio indicator threshold must lie in (0,1)")
    lo = a / (1.0 + a)  # u/(1-u) >= a

    def shape(u):
        u = np.asarray(u, dtype=float)
        inside = (u >= lo) & (u <= 1.0 - lo)
        return np.where(inside, (u * (1.0 - u)) ** (lam / 2.0), 0.0)

    return HomogeneousKernel(lam, shape, "ratio_indicator", (lam, a))


def custom_kernel(degree, shape, name="custom"):
    if isinstance(shape, str):
        degree_reg, fn = _SHAPE_REGISTRY[shape]
        return HomogeneousKernel(degree_reg, fn, "custom", (shape,))
    return HomogeneousKernel(float(degree), shape, "custom", (name,))


def eval_H(kernel, x, y):
    """Evaluate H(x,y) = (x+y)**degree * h(x/(x+y)).

    Arguments are sorted before evaluation so symmetry holds exactly.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("kernel arguments must be positive")
    s = x + y
    u = np.minimum(x, y) / s
    out = s**kernel.degree * kernel.h(u)
    if out.ndim == 0:
        return float(out)
    return out


def coag_rate(pair, x, y):
    """Merging rate K(x,y) = x*y*H_coag(x,y) for a cluster pair."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("cluster sizes must be positive")
    out = x * y * eval_H(pair.coag, x, y)
    if np.ndim(out) == 0:
        return float(out)
    return out


def frag_split_density(pair, x, u):
    """F(ux, (1-u)x) * x as a density in the split fraction u.

    Equals ``x**(2+degree) * h_frag(u)``; its integral over (0,1) is twice
    the total fragmentation rate of an x-sized cluster.
    """
    if x <= 0:
        raise ValueError("cluster size must be positive")
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr <= 0) or np.any(u_arr >= 1):
        raise ValueError("split fraction must lie in (0,1)")
    out = x ** (2.0 + pair.frag.degree) * pair.frag.h(u_arr)
    if np.ndim(u) == 0:
        return float(out)
    return out


def total_frag_rate(pair, x):
    """Total splitting rate (c_check/2) * x**(2+degree) of an x-sized cluster."""
    if np.any(np.asarray(x) <= 0):
        raise ValueError("cluster size must be positive")
    out = 0.5 * pair.c_check * np.asarray(x, dtype=float) ** (2.0 + pair.frag.degree)
    if np.ndim(x) == 0:
        return float(out)
    return out


def _check_shape_on_grid(kernel, label):
    """Symmetry and nonnegativity probe on a fixed interior grid."""
    u = np.linspace(0.0, 0.5, 2001)[1:]  # (0, 0.5]
    hu = kernel.h(u)
    hv = kernel.h(1.0 - u)
    if np.any(hu < 0) or np.any(hv < 0):
        raise KernelError(f"{label} shape takes negative values")
    scale = np.maximum(1.0, np.maximum(np.abs(hu), np.abs(hv)))
    bad = np.abs(hu - hv) > SYMMETRY_TOL * scale
    if np.any(bad):
        i = int(np.argmax(np.abs(hu - hv) / scale))
        raise KernelError(
            f"{label} shape is asymmetric beyond {SYMMETRY_TOL:g} "
            f"(h({u[i]:.6g}) = {hu[i]:.12g} vs h({1-u[i]:.6g}) = {hv[i]:.12g})"
        )


def _golden_max(f, lo, hi, rel_tol=SUP_REL_TOL):
    """Golden-section maximization of f on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = float(f(c)), float(f(d))
    while (b - a) > rel_tol * max(abs(a), abs(b), 1e-3):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = float(f(c))
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = float(f(d))
    u = 0.5 * (a + b)
    return u, float(f(u))


def _sup_shape(kernel):
    """sup of the shape via a 1e4-point grid plus golden-section refinement."""
    n = 10_000
    u = (np.arange(n) + 0.5) / n
    h = kernel.h(u)
    if not np.all(np.isfinite(h)):
        raise KernelError(
            "coagulation shape is not finite on (0,1); the boundedness "
            "condition requires a finite sup of the coagulation shape"
        )
    i = int(np.argmax(h))
    interior_max = float(h[i])

    # Endpoint probe: shapes growing without bound toward u -> 0 (or, by
    # symmetry, u -> 1) violate the boundedness condition.  A negative local
    # power-law exponent means divergence.
    a_est = _endpoint_exponent(kernel)
    if a_est is not None and a_est < -1e-4:
        raise KernelError(
            f"coagulation shape grows like u**({a_est:.3f}) near the "
            "endpoints; the boundedness condition requires a finite sup of "
            "the coagulation shape"
        )
    probe = np.geomspace(1e-13, 1e-4, 28)
    hp = kernel.h(probe)
    if np.any(hp > _OVERFLOW_GUARD) or np.any(~np.isfinite(hp)):
        raise KernelError(
            "coagulation shape appears unbounded near the endpoints; "
            "the boundedness condition requires sup h_coag < infinity"
        )
    interior_max = max(interior_max, float(np.max(hp)))

    lo = max(u[i] - 1.5 / n, 1e-15)
    hi = min(u[i] + 1.5 / n, 1.0 - 1e-15)
    _, refined = _golden_max(lambda v: kernel.h(np.asarray(v)), lo, hi)
    c_hat = max(interior_max, refined)
    if c_hat <= 0:
        raise KernelError("coagulation shape is identically zero")
    if c_hat > _OVERFLOW_GUARD:
        raise KernelError("coagulation shape sup exceeds the overflow guard")
    return c_hat


def _endpoint_exponent(kernel):
    """Local power-law exponent of the shape near u = 0 (None if h -> 0)."""
    u1, u2 = 1e-7, 1e-10
    h1, h2 = float(kernel.h(np.asarray(u1))), float(kernel.h(np.asarray(u2)))
    if h1 <= 0 or h2 <= 0:
        return None
    return (math.log(h1) - math.log(h2)) / (math.log(u1) - math.log(u2))


def _integrate_shape(kernel):
    """Integral of the shape over (0,1), robust to u**a endpoint singularities.

    Both halves are mapped through u = 0.5*t**4, which converts an
    endpoint behavior u**a with a > -1 into an integrable t**(4a+3).
    """
    a_est = _endpoint_exponent(kernel)
    if a_est is not None and a_est <= -1.0 + 1e-6:
        raise KernelError(
            f"fragmentation shape behaves like u**({a_est:.3f}) near the "
            "endpoints; the integrability condition requires a finite "
            "integral of the fragmentation shape over (0,1)"
        )

    # The integral is taken over (0, 1/2] and doubled: symmetry is part of
    # the shape contract (validated on a grid at construction), and the
    # u -> 1 endpoint cannot be resolved in double precision for singular
    # shapes.  u is floored at 1e-300 so adaptive subdivision cannot reach
    # an exact endpoint evaluation; the omitted mass is O(u**(1+a)).
    def left(t):
        t = np.asarray(t, dtype=float)
        u = np.maximum(0.5 * t**4, 1e-300)
        return kernel.h(u) * 2.0 * t**3

    v, e = integrate.quad(left, 0.0, 1.0, epsabs=6e-14, epsrel=1e-11, limit=400)
    val, err = 2.0 * v, 2.0 * e
    if not math.isfinite(val) or val > _OVERFLOW_GUARD:
        raise KernelError("fragmentation shape integral diverges")
    if err > max(QUAD_ABS_TOL, 1e-9 * abs(val)):
        raise KernelError(
            f"fragmentation shape quadrature did not converge "
            f"(estimate {val:.6g}, error {err:.2g})"
        )
    if val <= 0:
        raise KernelError("fragmentation shape is identically zero")
    return val


def _midpoint_cdf_table(kernel):
    """Split-fraction CDF on 4097 uniform nodes via midpoint cell sampling.

    Midpoint sampling keeps discontinuous shapes usable: a jump location is
    misplaced by at most one cell width (1/4096).
    """
    m = CDF_TABLE_CELLS
    mids = (np.arange(m) + 0.5) / m
    w = kernel.h(mids)
    w = np.where(np.isfinite(w), w, 0.0)
    total = float(np.sum(w))
    if total <= 0:
        raise KernelError("fragmentation shape vanishes on the sampling grid")
    cdf = np.empty(m + 1)
    cdf[0] = 0.0
    np.cumsum(w, out=cdf[1:])
    cdf[1:] /= cdf[-1]
    cdf[-1] = 1.0
    nodes = np.linspace(0.0, 1.0, m + 1)
    return nodes, cdf


def kernel_constants(coag_shape, frag_shape):
    """Validate the two shapes and compute (c_hat, c_check, cdf table).

    Raises KernelError for asymmetric or negative shapes, an unbounded
    coagulation shape, or a non-integrable fragmentation shape.
    """
    _check_shape_on_grid(coag_shape, "coagulation")
    _check_shape_on_grid(frag_shape, "fragmentation")
    c_hat = _sup_shape(coag_shape)
    c_check = _integrate_shape(frag_shape)
    nodes, cdf = _midpoint_cdf_table(frag_shape)
    return c_hat, c_check, (nodes, cdf)


@dataclass(frozen=True)
class KernelPair:
    """A validated (coagulation, fragmentation) kernel pair of common degree.

    Immutable after construction; safe for shared concurrent reads.
    """

    coag: HomogeneousKernel
    frag: HomogeneousKernel
    c_hat: float
    c_check: float
    frag_u_nodes: np.ndarray = field(repr=False)
    frag_cdf: np.ndarray = field(repr=False)

    @property
    def degree(self):
        return self.coag.degree

    def coag_rate(self, x, y):
        return coag_rate(self, x, y)

    def frag_split_density(self, x, u):
        return frag_split_density(self, x, u)

    def total_frag_rate(self, x):
        return total_frag_rate(self, x)

    def split_cdf(self, u):
        """Tabulated CDF of the normalized split-fraction density."""
        return np.interp(u, self.frag_u_nodes, self.frag_cdf)

    def inv_split_cdf(self, v):
        return np.interp(v, self.frag_cdf, self.frag_u_nodes)

    def sample_split(self, rng, size=None):
        """Draw split fractions from h_frag(u)/c_check via the CDF table."""
        v = rng.random(size)
        return self.inv_split_cdf(v)

    def split_weight(self, lo, hi):
        """Vectorized integral of h_frag over [lo, hi] clipped to (0,1).

        Exact for constant shapes; otherwise a quadrature-backed cumulative
        table at kernel-module tolerance.
        """
        lo = np.clip(np.asarray(lo, dtype=float), 0.0, 1.0)
        hi = np.clip(np.asarray(hi, dtype=float), 0.0, 1.0)
        hi = np.maximum(hi, lo)
        if self.frag.family == "constant":
            return self.frag.params[0] * (hi - lo)
        nodes, cum = self._weight_table()
        return np.interp(hi, nodes, cum) - np.interp(lo, nodes, cum)

    def _weight_table(self):
        tab = getattr(self, "_wt_cache", None)
        if tab is None:
            tab = _cumulative_integral_table(self.frag)
            object.__setattr__(self, "_wt_cache", tab)
        return tab


def _cumulative_integral_table(kernel, cells=2**15):
    """Cumulative integral of the shape on a fine grid (Gauss per cell,
    singularity-aware quadrature for the two endpoint cells)."""
    nodes = np.linspace(0.0, 1.0, cells + 1)
    gl_x, gl_w = np.polynomial.legendre.leggauss(8)
    mid = 0.5 * (nodes[:-1] + nodes[1:])
    half = 0.5 / cells
    pts = mid[:, None] + half * gl_x[None, :]
    vals = kernel.h(pts.ravel()).reshape(cells, 8)
    cell_ints = half * vals @ gl_w
    for idx, (a, b) in ((0, (1e-300, nodes[1])), (cells - 1, (nodes[-2], 1.0 - 1e-16))):
        v, _ = integrate.quad(
            lambda t: float(kernel.h(np.asarray(t))), a, b, epsabs=1e-13, limit=200
        )
        cell_ints[idx] = v
    cum = np.concatenate(([0.0], np.cumsum(cell_ints)))
    return nodes, cum


def make_kernel_pair(coag, frag=None, frag_scale=None):
    """Build a KernelPair; ``frag_scale`` multiplies the coagulation shape
    to produce the fragmentation shape (detailed-balance construction)."""
    if frag is None:
        if frag_scale is None:
            frag = coag
        elif coag.family == "constant":
            frag = constant_kernel(float(frag_scale) * coag.params[0], coag.degree)
        else:
            s = float(frag_scale)
            base = coag.shape

            def scaled(u, _base=base, _s=s):
                return _s * _base(u)

            frag = HomogeneousKernel(coag.degree, scaled, "custom", (("scaled", s),))
    if abs(coag.degree - frag.degree) > 1e-12:
        raise KernelError(
            f"coagulation and fragmentation kernels must share one degree "
            f"(got {coag.degree} and {frag.degree})"
        )
    c_hat, c_check, (nodes, cdf) = kernel_constants(coag, frag)
    return KernelPair(coag, frag, c_hat, c_check, nodes, cdf)
