"""Sparse-recovery physics: measurements, objective, and the unrolled network.

The forward model is linear, ``y = A x + n``. Reconstruction solves

    min_x ||A x - y||^2 + lam * ||x||_1

by proximal gradient descent. Each iteration takes a gradient step on the data
term with step ``alpha`` and soft-thresholds by ``alpha * lam``. The unrolled
network runs ``N`` such iterations on a tape with one shared
``(A, alpha, lam)`` so the result is differentiable in all three.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import tensor_core as tc
from .errors import DomainError, ShapeError

ALPHA_MIN = 1e-8


@dataclass
class ModelParams:
    """Learnable ``(A, alpha, lam)`` plus fixed sizes ``J``, ``K`` and depth ``N``."""

    A: np.ndarray
    alpha: float
    lam: float
    N: int

    def __post_init__(self):
        self.A = tc.as_tensor(self.A)
        if self.A.ndim != 2:
            raise ShapeError(f"A must be a matrix, got shape {self.A.shape}")
        self.alpha = float(self.alpha)
        self.lam = float(self.lam)
        self.N = int(self.N)
        if self.N < 0:
            raise DomainError(f"unroll depth must be >= 0, got {self.N}")

    @property
    def J(self):
        return self.A.shape[0]

    @property
    def K(self):
        return self.A.shape[1]

    def copy(self):
        return ModelParams(self.A.copy(), self.alpha, self.lam, self.N)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0

    def __post_init__(self):
        if not self.sigma >= 0.0:
            raise DomainError(f"noise sigma must be >= 0, got {self.sigma}")


def synthesize_measurements(A, x_gt, noise=NoiseSpec(), rng=None):
    """Return ``A @ x_gt`` plus Gaussian noise of std ``noise.sigma``."""
    y = tc.matvec(A, x_gt)
    if noise.sigma > 0.0:
        if rng is None:
            raise ValueError("a noisy measurement needs an rng")
        y = tc.add(y, tc.scale(noise.sigma, tc.randn_vector(rng, y.shape[0])))
    return y


def objective(A, x, y, lam):
    if lam < 0:
        raise DomainError(f"lambda must be >= 0, got {lam}")
    r = tc.sub(tc.matvec(A, x), y)
    return tc.sum_squares(r) + lam * float(np.sum(np.abs(x)))


def data_consistency_grad(A, x, y):
    """Recorded gradient of ``||A x - y||^2`` in ``x``: ``2 A^T (A x - y)``."""
    r = ad.record_sub(ad.record_matvec(A, x), y)
    return ad.record_scale(ad.record_matvec_t(A, r), 2.0)


def data_consistency_grad_autodiff(A, x, y):
    """Same gradient, obtained by differentiating a recorded ``||A x - y||^2``.

    The derivative computation is itself recorded, so gradients can flow
    through it to ``A``, ``x`` and ``y``.
    """
    d = ad.record_sum_squares(ad.record_sub(ad.record_matvec(A, x), y))
    (g,) = ad.backward_with_graph(x.tape, d, [x])
    return g


def pgd_step(x, A, y, alpha, lam, dc_grad=data_consistency_grad):
    """One proximal gradient iteration on the tape."""
    z = ad.record_sub(x, ad.record_scale(dc_grad(A, x, y), alpha))
    return ad.record_soft_threshold(z, ad.record_mul(alpha, lam))


def unrolled_forward(A, alpha, lam, x0, y, N, dc_grad=data_consistency_grad):
    """Apply ``N`` shared-parameter PGD layers to ``x0`` and return ``x^(N)``."""
    if N < 0:
        raise DomainError(f"unroll depth must be >= 0, got {N}")
    x = x0
    for _ in range(N):
        x = pgd_step(x, A, y, alpha, lam, dc_grad)
    return x


def reconstruct(params, y, N=None, x0=None):
    """Run the unrolled network off-tape; same arithmetic as :func:`unrolled_forward`."""
    N = params.N if N is None else N
    A = params.A
    x = tc.zeros(params.K) if x0 is None else x0
    tau = params.alpha * params.lam
    for _ in range(N):
        r = tc.sub(tc.matvec(A, x), y)
        g = tc.scale(2.0, tc.matvec_t(A, r))
        z = tc.sub(x, tc.scale(params.alpha, g))
        x = tc.soft_threshold(z, tau)
    return x


class IstaResult(NamedTuple):
    x: np.ndarray
    iterations: int
    objective: float


def ista_solve(A, y, alpha, lam, max_iters=10000, tol=1e-9, x0=None, callback=None):
    """Classic fixed-parameter ISTA.

    Stops when ``||x_new - x|| <= tol * max(1, ||x||)`` or after ``max_iters``
    iterations. ``callback(n, x, obj)`` is invoked after every iteration.
    """
    if not alpha > 0:
        raise DomainError(f"alpha must be > 0, got {alpha}")
    if not lam >= 0:
        raise DomainError(f"lambda must be >= 0, got {lam}")
    if max_iters < 1:
        raise DomainError(f"max_iters must be >= 1, got {max_iters}")
    if not (tol >= 0 and np.isfinite(tol)):
        raise DomainError(f"tol must be finite and >= 0, got {tol}")
    x = tc.zeros(A.shape[1]) if x0 is None else tc.as_tensor(x0)
    tau = alpha * lam
    n = 0
    while n < max_iters:
        r = tc.sub(tc.matvec(A, x), y)
        z = tc.sub(x, tc.scale(alpha, tc.scale(2.0, tc.matvec_t(A, r))))
        x_new = tc.soft_threshold(z, tau)
        n += 1
        step = tc.l2_norm(tc.sub(x_new, x))
        done = step <= tol * max(1.0, tc.l2_norm(x))
        x = x_new
        if callback is not None:
            callback(n, x, objective(A, x, y, lam))
        if done:
            break
    return IstaResult(x, n, objective(A, x, y, lam))
