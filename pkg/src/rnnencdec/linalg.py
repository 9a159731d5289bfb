"""Dense float64 linear algebra, nonlinearities and seeded initializers.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  The
helpers here add shape checking with readable errors, numerically stable
nonlinearities, and a platform-independent random stream.
"""

import numpy as np

from .errors import ParameterError, ShapeError

RNG_ALGORITHM = "philox4x64-10"


class RngState:
    """Seeded random stream backed by the counter-based Philox generator.

    Gaussian draws use the Box-Muller transform over the uniform stream so
    that the sequence of normals depends only on the Philox output, not on
    numpy's internal normal sampler.  ``stream`` selects an independent
    substream for the same seed.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed, stream=0):
        if seed < 0 or stream < 0:
            raise ParameterError("seed and stream must be nonnegative")
        self.seed = int(seed)
        self.stream = int(stream)
        bitgen = np.random.Philox(np.random.SeedSequence([self.seed, self.stream]))
        self._gen = np.random.Generator(bitgen)

    def uniform(self, size=None):
        """Uniform draws in [0, 1)."""
        return self._gen.random(size)

    def normal(self, size):
        size = tuple(np.atleast_1d(size))
        n = int(np.prod(size))
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1], keeps log finite
        u2 = self._gen.random(half)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.empty(2 * half)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n].reshape(size)

    def integers(self, high, size=None):
        """Uniform integers in [0, high)."""
        return self._gen.integers(0, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngState(seed={self.seed}, stream={self.stream}, algorithm={self.algorithm!r})"


def as_float(a):
    """Array view in float64, leaving extended-precision input untouched."""
    a = np.asarray(a)
    if a.dtype == np.longdouble:
        return a
    return a.astype(np.float64, copy=False)


def as_matrix(data):
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b):
    a = as_float(a)
    b = as_float(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def sigmoid(x):
    # tanh form is stable for large |x| and exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * as_float(x)))


def maxout_pairs(x):
    """Max over adjacent column pairs (0,1), (2,3), ... of the last axis."""
    x = as_float(x)
    if x.shape[-1] % 2:
        raise ShapeError(f"max-pair pooling needs an even width, got {x.shape[-1]}")
    return np.maximum(x[..., 0::2], x[..., 1::2])


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": lambda x: np.tanh(as_float(x)),
    "max-pair": maxout_pairs,
}


def elementwise(m, kind):
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ParameterError(f"unknown elementwise kind {kind!r}") from None
    return fn(m)


def log_softmax_rows(m):
    m = as_float(m)
    shifted = m - m.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_rows(m):
    m = as_float(m)
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def gaussian_init(rows, cols, std, rng):
    if not std > 0:
        raise ParameterError(f"std must be positive, got {std}")
    return std * rng.normal((rows, cols))


def orthogonal_init(rows, cols, rng):
    """Left singular vectors of a white Gaussian sample (square only)."""
    if rows != cols:
        raise ShapeError(f"orthogonal init needs a square shape, got ({rows}, {cols})")
    u, _, _ = np.linalg.svd(rng.normal((rows, cols)))
    return u
