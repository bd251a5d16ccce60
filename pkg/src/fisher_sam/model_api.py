"""The differentiable-model contract consumed by the optimizers.

Every model works on flat parameter vectors and reports the batch MEAN loss.
Models that can also return one gradient per example set
``has_per_example_grads``; the Fisher estimators need those.
"""

from dataclasses import dataclass

import numpy as np

from .params import DimensionError, NumericError, as_params


class UnsupportedError(NotImplementedError):
    """The model lacks the capability an operation needs."""


@dataclass(frozen=True)
class Batch:
    """An ordered mini-batch: ``inputs`` is ``(n, d)``, ``targets`` is ``(n,)``."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        targets = np.asarray(self.targets)
        if inputs.shape[0] == 0:
            raise ValueError("batch must contain at least one example")
        if targets.shape[0] != inputs.shape[0]:
            raise DimensionError(
                f"{inputs.shape[0]} inputs but {targets.shape[0]} targets")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx):
        return Batch(self.inputs[idx], self.targets[idx])


class DifferentiableModel:
    """Base class for models usable by :func:`fisher_sam.optim.step`.

    Subclasses implement :meth:`loss` and :meth:`grad` (or override
    :meth:`value_and_grad` directly when both come out of one pass).
    """

    param_len: int = 0
    has_per_example_grads: bool = False

    def loss(self, params, batch):
        raise NotImplementedError

    def grad(self, params, batch):
        raise NotImplementedError

    def value_and_grad(self, params, batch):
        return self.loss(params, batch), self.grad(params, batch)

    def per_example_score_grads(self, params, batch):
        """Per-example loss gradients as a ``(|B|, k)`` array.

        For a negative log-likelihood loss row ``j`` is ``-grad log p(y_j|x_j)``;
        the sign is irrelevant to every Fisher estimate, and with this sign the
        row mean equals :meth:`grad`.
        """
        raise UnsupportedError(f"{type(self).__name__} has no per-example gradients")

    def exact_inverse_fisher(self, params):
        """Diagonal of the exact inverse Fisher metric, when known in closed form."""
        raise UnsupportedError(f"{type(self).__name__} has no closed-form Fisher")

    def project(self, params):
        """Map ``params`` back into the model's domain; identity by default."""
        return params

    def check_params(self, params):
        params = as_params(params)
        if params.shape[0] != self.param_len:
            raise DimensionError(
                f"expected {self.param_len} parameters, got {params.shape[0]}")
        return params


class QuadraticModel(DifferentiableModel):
    """``l(theta) = 0.5 * ||theta - center||^2``; ignores the batch."""

    def __init__(self, k, center=None):
        self.param_len = int(k)
        self.center = np.zeros(k) if center is None else as_params(center, "center")

    def loss(self, params, batch=None):
        d = self.check_params(params) - self.center
        return 0.5 * float(d @ d)

    def grad(self, params, batch=None):
        return self.check_params(params) - self.center


def first_nonfinite(values):
    """Index of the first non-finite entry of ``values`` or ``None``."""
    bad = np.flatnonzero(~np.isfinite(np.asarray(values)))
    return int(bad[0]) if bad.size else None


def require_finite_losses(per_example):
    idx = first_nonfinite(per_example)
    if idx is not None:
        raise NumericError(f"non-finite loss at example {idx}")


def finite_difference_grad(f, params, rel_step=1e-4):
    """Central differences with step ``rel_step * (1 + |theta_i|)`` per coordinate."""
    params = as_params(params)
    out = np.empty_like(params)
    for i in range(params.shape[0]):
        h = rel_step * (1.0 + abs(params[i]))
        up = params.copy()
        dn = params.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (f(up) - f(dn)) / (up[i] - dn[i])
    return out


def gradient_check(model, params, batch, rel_tol=1e-4, abs_tol=1e-6, rel_step=1e-4):
    """Compare ``model.grad`` with central finite differences of ``model.loss``.

    Returns ``(ok, max_rel_err)``.  A coordinate passes when its absolute
    error is below ``abs_tol`` or its relative error below ``rel_tol``.
    """
    analytic = model.grad(params, batch)
    numeric = finite_difference_grad(lambda p: model.loss(p, batch), params, rel_step)
    abs_err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel_err = np.where(scale > 0, abs_err / np.where(scale > 0, scale, 1.0), 0.0)
    ok = bool(np.all((abs_err <= abs_tol) | (rel_err <= rel_tol)))
    worst = float(np.max(np.where(abs_err <= abs_tol, 0.0, rel_err)))
    return ok, worst
