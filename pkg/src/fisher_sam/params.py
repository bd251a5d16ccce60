"""Flat parameter-vector arithmetic and seeded randomness.

Parameter vectors are plain 1-D ``float64`` numpy arrays.  Reductions add
strictly left to right (``np.add.accumulate``) rather than through BLAS or
numpy's pairwise ``sum``, so results do not depend on the BLAS build, SIMD
width or thread count.
"""

import math

import numpy as np


class DimensionError(ValueError):
    """Two vectors that must share a length do not."""


class NumericError(ArithmeticError):
    """A NaN or infinity appeared where a finite value is required."""


def as_params(values, name="params"):
    """Return ``values`` as a finite 1-D float64 array (copying only if needed)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise NumericError(f"{name}[{bad}] is not finite")
    return arr


def _check_same_length(x, y):
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")


def ordered_sum(values):
    """Sum of a 1-D array added strictly left to right."""
    if values.shape[0] == 0:
        return 0.0
    return float(np.add.accumulate(values)[-1])


def axpy(a, x, y):
    """Return ``a * x + y``."""
    x = as_params(x, "x")
    y = as_params(y, "y")
    _check_same_length(x, y)
    return a * x + y


def dot(x, y):
    x = as_params(x, "x")
    y = as_params(y, "y")
    _check_same_length(x, y)
    return ordered_sum(x * y)


def norm2(x):
    """Euclidean norm, zero only for the zero vector.

    The vector is first scaled by a power of two so its largest entry lies in
    ``[0.5, 1)``.  Power-of-two scaling is exact, so wherever ``dot(x, x)``
    neither underflows nor overflows ``norm2(x) ** 2`` matches it to rounding
    of the square root, and tiny or huge vectors still get a finite nonzero norm.
    """
    x = as_params(x, "x")
    m = float(np.max(np.abs(x)))
    if m == 0.0:
        return 0.0
    e = math.frexp(m)[1]
    # two half-steps: 2**-e alone overflows when x is subnormal
    y = (x * math.ldexp(1.0, -(e // 2))) * math.ldexp(1.0, -(e - e // 2))
    return math.ldexp(math.sqrt(ordered_sum(y * y)), e)


class RandomSource:
    """Seeded random stream backed by numpy's PCG64 bit generator.

    PCG64 (O'Neill 2014, XSL-RR 128/64 variant) is fully specified and produces
    the same raw stream on every platform for a given seed.  ``spawn`` derives
    independent children through :class:`numpy.random.SeedSequence`, which is
    how concurrent workers should obtain their own streams.
    """

    def __init__(self, seed=0):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = seed
        self._seq = np.random.SeedSequence(seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n):
        children = []
        for child in self._seq.spawn(n):
            rs = RandomSource.__new__(RandomSource)
            rs.seed = self.seed
            rs._seq = child
            rs.generator = np.random.Generator(np.random.PCG64(child))
            children.append(rs)
        return children

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def unit_vector(self, k):
        """Uniformly distributed direction on the unit sphere in R^k."""
        v = self.generator.normal(size=k)
        n = np.linalg.norm(v)
        while n == 0.0:
            v = self.generator.normal(size=k)
            n = np.linalg.norm(v)
        return v / n
