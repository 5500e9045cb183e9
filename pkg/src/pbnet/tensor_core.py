"""Dense float64 kernels and a seeded PRNG.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64 and
rank 1 or 2. Every kernel validates shapes and returns a fresh array; inputs
are never modified.

The PRNG is xoshiro256** seeded through SplitMix64, written out here so the
draw sequence depends on nothing but the seed. Normal deviates come from the
Box-Muller transform applied to pairs of 53-bit uniforms; the second value of
each pair is kept as a spare for the next draw.
"""

import math

import numpy as np

from .errors import DomainError, ShapeError

_MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * math.pi


def as_tensor(data):
    """Copy ``data`` into a float64 tensor of rank 1 or 2."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise ShapeError(f"tensors must be rank 1 or 2, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def zeros(*shape):
    return np.zeros(shape, dtype=np.float64)


def _vector(name, x):
    if x.ndim != 1:
        raise ShapeError(f"{name} must be a vector, got shape {x.shape}")


def _matrix(name, a):
    if a.ndim != 2:
        raise ShapeError(f"{name} must be a matrix, got shape {a.shape}")


def _same(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def matvec(A, x):
    """Return ``A @ x`` for a J x K matrix and a length-K vector."""
    _matrix("A", A)
    _vector("x", x)
    if A.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: cannot apply matrix {A.shape} to vector {x.shape}")
    return A @ x


def matvec_t(A, v):
    """Return ``A.T @ v`` for a J x K matrix and a length-J vector."""
    _matrix("A", A)
    _vector("v", v)
    if A.shape[0] != v.shape[0]:
        raise ShapeError(f"matvec_t: cannot apply transpose of {A.shape} to vector {v.shape}")
    return v @ A


def outer(u, w):
    _vector("u", u)
    _vector("w", w)
    return np.multiply.outer(u, w)


def transpose(A):
    _matrix("A", A)
    return np.ascontiguousarray(A.T)


def add(a, b):
    _same(a, b)
    return a + b


def sub(a, b):
    _same(a, b)
    return a - b


def mul(a, b):
    _same(a, b)
    return a * b


def scale(s, x):
    """Multiply tensor ``x`` by the scalar ``s``."""
    return float(s) * x


def dot(a, b):
    _vector("a", a)
    _same(a, b)
    return float(np.dot(a, b))


def sum_squares(x):
    x = x.ravel()
    return float(np.dot(x, x))


def l2_norm(x):
    return math.sqrt(sum_squares(x))


def linf_norm(x):
    return float(np.max(np.abs(x))) if x.size else 0.0


def soft_threshold(z, tau):
    """Shrink each entry toward zero by ``tau``: ``sign(z) * max(|z| - tau, 0)``.

    This is the proximal map of ``tau * ||.||_1``. ``sign(0)`` is 0.
    """
    tau = float(tau)
    if not tau >= 0.0:
        raise DomainError(f"soft_threshold needs tau >= 0, got {tau}")
    return np.sign(z) * np.maximum(np.abs(z) - tau, 0.0)


def _splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def split_seed(seed, count):
    """Derive ``count`` independent 64-bit seeds from ``seed`` with SplitMix64."""
    state = int(seed) & _MASK64
    out = []
    for _ in range(count):
        state, z = _splitmix64(state)
        out.append(z)
    return out


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** generator with Box-Muller normals.

    A single instance must not be shared between threads.
    """

    def __init__(self, seed):
        if not 0 <= int(seed) <= _MASK64:
            raise DomainError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        state = self.seed
        s = []
        for _ in range(4):
            state, z = _splitmix64(state)
            s.append(z)
        self._s = s
        self._spare = None

    def next_u64(self):
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self):
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n):
        """Uniform integer in [0, n), unbiased by rejection."""
        if n < 1:
            raise DomainError(f"randbelow needs n >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self):
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.uniform()  # (0, 1], keeps log finite
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = _TWO_PI * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def sample(self, population, k):
        """Choose ``k`` distinct items of ``range(population)`` via partial Fisher-Yates."""
        if not 0 <= k <= population:
            raise DomainError(f"cannot choose {k} distinct items from {population}")
        pool = list(range(population))
        for i in range(k):
            j = i + self.randbelow(population - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def _check_size(*sizes):
    for n in sizes:
        if int(n) != n or n < 1:
            raise DomainError(f"sizes must be positive integers, got {sizes}")


def randn_vector(rng, length):
    _check_size(length)
    return np.array([rng.normal() for _ in range(length)], dtype=np.float64)


def randn_matrix(rng, rows, cols):
    _check_size(rows, cols)
    return randn_vector(rng, rows * cols).reshape(rows, cols)
