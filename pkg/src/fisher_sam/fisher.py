"""Fisher-information estimates and the inverse used by the FSAM probe."""

import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np

from .params import DimensionError, as_params


def _stack(grads):
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim == 1:
        # a single vector, or a list of scalars for k == 1
        g = g[None, :] if g.size else g
    if g.ndim != 2 or g.shape[0] == 0:
        raise ValueError("need a non-empty sequence of equal-length gradients")
    return g


def empirical_diag_fisher(grads):
    """Mean of elementwise squares over per-example gradients.

    Args:
        grads: ``(|B|, k)`` array or sequence of length-k vectors.

    Returns:
        Length-k array; entry ``i`` is ``mean_j g_j[i]**2``.
    """
    g = _stack(grads)
    return np.mean(g * g, axis=0)


def gm_fisher(grads):
    """Gradient-magnitude estimate: square of the elementwise mean gradient."""
    g = _stack(grads)
    m = np.mean(g, axis=0)
    return m * m


def gm_fisher_from_batch_grad(batch_grad):
    """Elementwise square of a batch-mean gradient.

    Coincides with ``gm_fisher(per_example_grads)`` when the loss is the mean
    negative log-likelihood, since the batch gradient is then the mean score.
    """
    g = as_params(batch_grad, "batch_grad")
    return g * g


def anti_reg_inverse(f, eta):
    """Inverse-Fisher diagonal ``1 / (1 + eta * f)``.

    ``eta`` acts as an anti-regulariser: ``eta = 0`` returns all ones, which
    turns the FSAM probe into the plain SAM probe.
    """
    if eta < 0:
        raise ValueError(f"eta must be non-negative, got {eta}")
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("Fisher diagonal entries must be non-negative")
    return 1.0 / (1.0 + eta * f)


@dataclass(frozen=True)
class ExactFisher2x2:
    """Closed-form Fisher of N(mu, sigma^2) in (mu, sigma) coordinates."""

    d11: float
    d22: float

    def __post_init__(self):
        if not (self.d11 > 0 and self.d22 > 0):
            raise ValueError("Fisher diagonal must be positive")

    def diagonal(self):
        return np.array([self.d11, self.d22])

    def inverse_diagonal(self):
        return np.array([1.0 / self.d11, 1.0 / self.d22])

    def quadratic(self, eps):
        e = np.asarray(eps, dtype=np.float64)
        return self.d11 * e[0] ** 2 + self.d22 * e[1] ** 2


def exact_gaussian_fisher(mu, sigma):
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return ExactFisher2x2(1.0 / sigma**2, 2.0 / sigma**2)


@dataclass
class SecondMomentReport:
    N: int
    M: int
    alpha: float
    max_abs_discrepancy: float
    sampling: str
    n_batches: int

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


SAMPLING_SCHEMES = ("without_replacement", "with_replacement")


def second_moment_alpha(N, M, sampling="without_replacement"):
    """Mixing weight that makes the second-moment identity exact.

    Without replacement the batch-mean variance is ``(N-M)/(M(N-1))`` times
    the population variance, giving ``alpha = M(N-1)/(N-M)``.  With
    replacement the factor is ``1/M`` and ``alpha = M``.
    """
    if not 1 <= M < N:
        raise ValueError(f"need 1 <= M < N, got N={N}, M={M}")
    if sampling == "without_replacement":
        return M * (N - 1) / (N - M)
    if sampling == "with_replacement":
        return float(M)
    raise ValueError(f"unknown sampling scheme {sampling!r}")


def _batches(N, M, sampling):
    if sampling == "without_replacement":
        # every M-subset is equally likely; order does not change the mean
        return np.array(list(itertools.combinations(range(N), M)), dtype=np.intp)
    return np.array(list(itertools.product(range(N), repeat=M)), dtype=np.intp)


def second_moment_check(vectors, M, sampling="without_replacement", alpha=None):
    """Exhaustively verify ``mean v v^T = a E_B[vb(B) vb(B)^T] + (1-a) vb vb^T``.

    ``E_B`` is taken exactly by enumerating every equally likely mini-batch of
    size ``M`` under ``sampling``.  ``alpha`` defaults to the exact constant
    for that scheme; pass a different value to confirm the check can fail.
    """
    V = np.asarray(vectors, dtype=np.float64)
    if V.ndim == 1:
        V = V[:, None]
    if V.ndim != 2:
        raise DimensionError("vectors must be a sequence of scalars or equal-length vectors")
    N = V.shape[0]
    a = second_moment_alpha(N, M, sampling) if alpha is None else float(alpha)
    batches = _batches(N, M, sampling)
    means = V[batches].mean(axis=1)
    lhs = V.T @ V / N
    e_batch = means.T @ means / batches.shape[0]
    vbar = V.mean(axis=0)
    rhs = a * e_batch + (1.0 - a) * np.outer(vbar, vbar)
    return SecondMomentReport(
        N=N,
        M=int(M),
        alpha=a,
        max_abs_discrepancy=float(np.max(np.abs(lhs - rhs))),
        sampling=sampling,
        n_batches=int(batches.shape[0]),
    )
