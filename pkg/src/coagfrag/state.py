"""Cluster configurations: finite descending size sequences and their
point-configuration view, with split/merge/dilation transformations.

A state is a finite sequence z_1 >= z_2 >= ... > 0 of positive cluster
sizes.  Total mass and a configurable set of power sums are cached with
compensated (Kahan) summation and rebuilt from scratch periodically so the
caches never drift from the data.
"""

from __future__ import annotations

import math
import struct

import numpy as np

__all__ = ["CapacityError", "ClusterState", "PointConfiguration"]

REBUILD_INTERVAL = 2**16
DEFAULT_CAPACITY = 10**6


class CapacityError(RuntimeError):
    """Cluster count exceeded the configured capacity; the replica aborts
    rather than silently dropping mass."""


class _Kahan:
    __slots__ = ("s", "c")

    def __init__(self, s=0.0):
        self.s = s
        self.c = 0.0

    def add(self, x):
        y = x - self.c
        t = self.s + y
        self.c = (t - self.s) - y
        self.s = t

    def scale(self, a):
        self.s *= a
        self.c *= a

    def set(self, s):
        self.s = s
        self.c = 0.0


class ClusterState:
    """Mutable descending sequence of positive cluster sizes.

    Single-owner mutable: replicas never share an instance.  ``snapshot()``
    returns an immutable copy of the size array for cross-thread reads.
    """

    __slots__ = ("_z", "_exponents", "_sums", "_mutations", "capacity")

    def __init__(self, sizes, power_exponents=(1.0,), capacity=DEFAULT_CAPACITY):
        # The empty configuration is admitted (a Poisson initial draw can be
        # empty); it is absorbing for the dynamics.
        z = np.array(sorted(np.asarray(sizes, dtype=float), reverse=True))
        if z.size and z[-1] <= 0:
            raise ValueError("cluster sizes must be strictly positive")
        if not np.all(np.isfinite(z)):
            raise ValueError("cluster sizes must be finite")
        self._z = z
        exps = sorted(set(float(g) for g in power_exponents) | {1.0})
        self._exponents = tuple(exps)
        self._sums = {}
        self._mutations = 0
        self.capacity = int(capacity)
        self._rebuild()

    # -- construction helpers ------------------------------------------------

    @classmethod
    def from_array(cls, sizes, like=None):
        """Build a state reusing the exponent set (and capacity) of ``like``."""
        if like is None:
            return cls(sizes)
        return cls(sizes, power_exponents=like._exponents, capacity=like.capacity)

    def with_exponents(self, power_exponents):
        return ClusterState(self._z, power_exponents, self.capacity)

    def copy(self):
        return ClusterState(self._z, self._exponents, self.capacity)

    # -- views ---------------------------------------------------------------

    @property
    def sizes(self):
        view = self._z.view()
        view.flags.writeable = False
        return view

    @property
    def count(self):
        return int(self._z.size)

    @property
    def total_mass(self):
        return self._sums[1.0].s

    def power_sum(self, gamma):
        """Sum of z_i**gamma; served from the cache when gamma is tracked."""
        gamma = float(gamma)
        if gamma < 0:
            raise ValueError("power-sum exponent must be nonnegative")
        acc = self._sums.get(gamma)
        if acc is not None:
            return acc.s
        if gamma == 0.0:
            return float(self._z.size)
        return float(np.sum(self._z**gamma))

    def snapshot(self):
        return self._z.copy()

    # -- cache maintenance ---------------------------------------------------

    def _rebuild(self):
        for g in self._exponents:
            vals = self._z if g == 1.0 else self._z**g
            acc = self._sums.get(g)
            if acc is None:
                self._sums[g] = acc = _Kahan()
            acc.set(math.fsum(vals.tolist()))
        self._mutations = 0

    def _account(self, removed=(), inserted=()):
        for g, acc in self._sums.items():
            for v in removed:
                acc.add(-(v**g) if g != 1.0 else -v)
            for v in inserted:
                acc.add(v**g if g != 1.0 else v)
        self._mutations += 1
        if self._mutations >= REBUILD_INTERVAL:
            self._rebuild()

    def check_coherence(self, rel_tol=1e-9):
        """Assert cached sums agree with recomputation (testing hook)."""
        for g in self._exponents:
            exact = math.fsum((self._z**g).tolist())
            cached = self._sums[g].s
            if abs(cached - exact) > rel_tol * max(abs(exact), 1e-300):
                raise AssertionError(
                    f"power-sum cache drifted for exponent {g}: "
                    f"{cached!r} vs {exact!r}"
                )
        if self._z.size and (np.any(np.diff(self._z) > 0) or self._z[-1] <= 0):
            raise AssertionError("size sequence is not positive descending")

    # -- transformations -----------------------------------------------------

    def _insert(self, val):
        pos = self._z.size - np.searchsorted(self._z[::-1], val, side="left")
        self._z = np.insert(self._z, pos, val)
        if self._z.size > self.capacity:
            raise CapacityError(
                f"cluster count {self._z.size} exceeds capacity {self.capacity}"
            )

    def merge(self, i, j):
        """Merge clusters at descending-order indices i and j (i != j)."""
        n = self._z.size
        if i == j:
            raise ValueError("cannot merge a cluster with itself")
        if not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"merge indices ({i}, {j}) out of range for {n} clusters")
        a, b = float(self._z[i]), float(self._z[j])
        self._z = np.delete(self._z, (min(i, j), max(i, j)))
        s = a + b
        self._insert(s)
        self._account(removed=(a, b), inserted=(s,))
        return self

    def split(self, i, y):
        """Split cluster i into pieces y and z_i - y, 0 < y < z_i."""
        n = self._z.size
        if not 0 <= i < n:
            raise IndexError(f"split index {i} out of range for {n} clusters")
        a = float(self._z[i])
        y = float(y)
        if not 0.0 < y < a:
            raise ValueError(f"split point {y} outside (0, {a})")
        rest = a - y
        self._z = np.delete(self._z, i)
        self._insert(max(y, rest))
        self._insert(min(y, rest))
        self._account(removed=(a,), inserted=(y, rest))
        return self

    def dilate(self, a):
        """Multiply every size by a > 0; order is preserved."""
        a = float(a)
        if a <= 0:
            raise ValueError("dilation factor must be positive")
        self._z *= a
        for g, acc in self._sums.items():
            acc.scale(a**g)
        return self

    def normalize(self):
        """Dilate by 1/total_mass, landing on the unit-mass simplex."""
        return self.dilate(1.0 / self.total_mass)

    # -- point-configuration view ---------------------------------------------

    def to_point_config(self):
        sizes, mult = np.unique(self._z, return_counts=True)
        atoms = tuple(zip(sizes[::-1].tolist(), mult[::-1].tolist()))
        return PointConfiguration(atoms)

    @classmethod
    def from_point_config(cls, config, power_exponents=(1.0,)):
        sizes = np.repeat(
            [s for s, _ in config.atoms], [m for _, m in config.atoms]
        )
        return cls(sizes, power_exponents)

    # -- serialization ---------------------------------------------------------

    def to_csv_row(self, replica_id, time):
        cells = [str(int(replica_id)), format(float(time), ".17g")]
        cells.extend(format(z, ".17g") for z in self._z)
        return ",".join(cells)

    @classmethod
    def from_csv_row(cls, row, power_exponents=(1.0,)):
        cells = row.strip().split(",")
        replica_id, time = int(cells[0]), float(cells[1])
        state = cls([float(c) for c in cells[2:]], power_exponents)
        return replica_id, time, state

    def to_binary(self):
        """Compact snapshot: little-endian uint64 count + float64 sizes."""
        return struct.pack("<Q", self._z.size) + self._z.astype("<f8").tobytes()

    @classmethod
    def from_binary(cls, blob, power_exponents=(1.0,)):
        (n,) = struct.unpack_from("<Q", blob)
        sizes = np.frombuffer(blob, dtype="<f8", count=n, offset=8)
        return cls(sizes, power_exponents)

    def __repr__(self):
        head = ", ".join(f"{z:.6g}" for z in self._z[:6])
        tail = ", ..." if self._z.size > 6 else ""
        return f"ClusterState([{head}{tail}], n={self._z.size}, mass={self.total_mass:.6g})"


class PointConfiguration:
    """Multiset view of a state: atoms as ((size, multiplicity), ...) pairs,
    sizes descending.  Total mass equals the source state's mass."""

    __slots__ = ("atoms",)

    def __init__(self, atoms):
        self.atoms = tuple((float(s), int(m)) for s, m in atoms)
        if any(s <= 0 or m <= 0 for s, m in self.atoms):
            raise ValueError("atoms must have positive size and multiplicity")

    @property
    def total_count(self):
        return sum(m for _, m in self.atoms)

    @property
    def total_mass(self):
        return math.fsum(s * m for s, m in self.atoms)

    def __eq__(self, other):
        return isinstance(other, PointConfiguration) and self.atoms == other.atoms

    def __hash__(self):
        return hash(self.atoms)

    def __repr__(self):
        return f"PointConfiguration({self.atoms!r})"
