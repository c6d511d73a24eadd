"""Shared statistical helpers for the test suite."""

import math

import numpy as np


def mean_se(samples):
    a = np.asarray(samples, dtype=float)
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(a.size))


def assert_within_sigma(samples, target, nsigma=3.0, min_se=0.0):
    m, se = mean_se(samples)
    se = max(se, min_se)
    assert abs(m - target) <= nsigma * se, (
        f"mean {m:.6g} vs target {target:.6g} differs by "
        f"{abs(m - target) / max(se, 1e-300):.2f} sigma (se={se:.3g})"
    )


def assert_means_agree(a, b, nsigma=3.0):
    ma, sa = mean_se(a)
    mb, sb = mean_se(b)
    se = math.hypot(sa, sb)
    assert abs(ma - mb) <= nsigma * se, (
        f"means {ma:.6g} and {mb:.6g} differ by "
        f"{abs(ma - mb) / max(se, 1e-300):.2f} combined sigma"
    )


from scipy import integrate  # noqa: E402

from coagfrag.dynamics import GeneratorForm  # noqa: E402
from coagfrag.kernels import coag_rate  # noqa: E402


def brute_force_generator(value, sizes, gen, breaks=()):
    """Oracle: enumerate all merges and numerically integrate all splits of
    the raw jump-rate definition; independent of apply_generator's algebra.

    ``breaks`` lists size values where the observable jumps, so the split
    quadrature can be told about the induced discontinuities in u.
    """
    z = np.asarray(sizes, dtype=float)
    n = z.size
    base = value(z)
    total = 0.0

    def u_breaks(zi):
        pts = set()
        for b in breaks:
            for u in (b / zi, 1.0 - b / zi):
                if 0.0 < u < 1.0:
                    pts.add(u)
        return sorted(pts) or None

    if gen.form is GeneratorForm.SIMPLEX_WEIGHTED:
        for i in range(n):
            for j in range(i + 1, n):
                rate = float(gen.k1(z[i], z[j]))
                merged = np.concatenate([np.delete(z, (i, j)), [z[i] + z[j]]])
                total += rate * (value(merged) - base)
        for i in range(n):
            rest = np.delete(z, i)

            def integrand(u, zi=z[i], rest=rest):
                split = np.concatenate([rest, [u * zi, (1 - u) * zi]])
                return float(gen.f1(u * zi, (1 - u) * zi)) * (value(split) - base)

            val, _ = integrate.quad(
                integrand, 0, 1, epsabs=1e-12, limit=300, points=u_breaks(z[i])
            )
            total += 0.5 * z[i] * val
        return total

    pair = gen.kernels
    cscale, fscale = gen.scales(float(np.sum(z)))
    lam = pair.degree
    for i in range(n):
        for j in range(i + 1, n):
            rate = cscale * coag_rate(pair, z[i], z[j])
            merged = np.concatenate([np.delete(z, (i, j)), [z[i] + z[j]]])
            total += rate * (value(merged) - base)
    for i in range(n):
        rest = np.delete(z, i)

        def integrand(u, zi=z[i], rest=rest):
            split = np.concatenate([rest, [u * zi, (1 - u) * zi]])
            return float(pair.frag.h(np.asarray(u))) * (value(split) - base)

        val, _ = integrate.quad(
            integrand, 0, 1, epsabs=1e-12, limit=300, points=u_breaks(z[i])
        )
        total += fscale * 0.5 * z[i] ** (2.0 + lam) * val
    return total
