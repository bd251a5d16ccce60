"""SGD, SAM, ASAM and Fisher SAM as probe-then-step rules.

Every sharpness-aware variant does the same two things per iteration: pick a
worst-case perturbation ``eps`` of the current parameters under a
linearised loss, then take an SGD(-momentum) step with the gradient
re-evaluated at ``params + eps``.  Only the shape of the neighbourhood
differs:

* SAM   -- Euclidean ball ``||eps|| <= gamma``
* ASAM  -- magnitude-scaled ball ``||eps / |theta| || <= gamma``
* FSAM  -- Fisher ellipsoid ``eps^T F eps <= gamma^2`` (diagonal ``F``)
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import fisher
from .params import NumericError, as_params, norm2, ordered_sum

log = logging.getLogger(__name__)

VARIANTS = ("sgd", "sam", "asam", "fsam")
FISHER_MODES = ("exact_toy", "empirical_diag", "gradient_magnitude")


@dataclass
class OptimConfig:
    variant: str = "sgd"
    gamma: float = 0.05
    eta: float = 1.0
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    fisher_mode: str = "gradient_magnitude"

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.fisher_mode not in FISHER_MODES:
            raise ValueError(f"fisher_mode must be one of {FISHER_MODES}")
        if self.gamma < 0 or self.eta < 0 or self.weight_decay < 0:
            raise ValueError("gamma, eta and weight_decay must be non-negative")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class ProbeResult:
    """Probe ``epsilon`` plus what is needed to evaluate its diagnostics.

    ``constraint_value`` and ``grad_norm`` are computed on access so that the
    optimizer step does not pay for diagnostics it never reads.
    """

    epsilon: np.ndarray
    g: np.ndarray = field(repr=False)
    kind: str = "sam"
    scale: np.ndarray = field(default=None, repr=False)

    @property
    def grad_norm(self):
        return norm2(self.g)

    @property
    def constraint_value(self):
        eps = self.epsilon
        if self.kind == "fsam":
            return ordered_sum(eps * eps / self.scale)
        if self.kind == "asam":
            nz = self.scale != 0
            ratio = np.zeros_like(eps)
            ratio[nz] = eps[nz] / np.abs(self.scale[nz])
            return ordered_sum(ratio * ratio)
        return ordered_sum(eps * eps)


@dataclass
class TrajectoryRecord:
    """State at the start of iteration ``iter`` and the step taken from it."""

    iter: int
    params: np.ndarray
    loss: float
    probe_norm: float
    lr: float


@dataclass
class OptimState:
    """Momentum buffer and step counter; owned by a single training run."""

    momentum_buffer: np.ndarray = None
    t: int = 0
    projections: int = 0
    grad_evals: int = 0


def _zero_probe(g):
    return ProbeResult(np.zeros_like(g), g)


def _sam(g, gamma):
    gn = math.sqrt(ordered_sum(g * g))
    if gn == 0.0 or gamma == 0:
        return _zero_probe(g)
    return ProbeResult((gamma / gn) * g, g)


def _asam(theta, g, gamma):
    scaled = theta * g
    sn = math.sqrt(ordered_sum(scaled * scaled))
    if sn == 0.0 or gamma == 0:
        return _zero_probe(g)
    return ProbeResult((gamma / sn) * (theta * scaled), g, "asam", theta)


def _fsam(g, inv_f, gamma):
    pre = inv_f * g
    radicand = ordered_sum(pre * g)
    if radicand <= 0.0 or gamma == 0:
        return _zero_probe(g)
    return ProbeResult((gamma / math.sqrt(radicand)) * pre, g, "fsam", inv_f)


def _check_gamma(gamma):
    if gamma < 0:
        raise ValueError("gamma must be non-negative")


def sam_probe(g, gamma):
    """Euclidean probe ``gamma * g / ||g||``."""
    _check_gamma(gamma)
    return _sam(as_params(g, "g"), gamma)


def asam_probe(theta, g, gamma):
    """Magnitude-scaled probe ``gamma * theta^2 g / ||theta g||`` (elementwise).

    Axes with ``theta_i == 0`` get ``eps_i == 0``; their constraint term is
    counted as zero.
    """
    _check_gamma(gamma)
    theta = as_params(theta, "theta")
    g = as_params(g, "g")
    if theta.shape != g.shape:
        raise ValueError("theta and g must have the same length")
    return _asam(theta, g, gamma)


def fsam_probe(g, inv_f, gamma):
    """Fisher-ellipsoid probe ``gamma * F^-1 g / sqrt(g^T F^-1 g)``.

    ``inv_f`` is the diagonal of ``F^-1``.  The constraint value is
    ``sum(eps_i^2 / inv_f_i)``, i.e. ``eps^T F eps``.
    """
    _check_gamma(gamma)
    g = as_params(g, "g")
    inv_f = as_params(inv_f, "inv_f")
    if inv_f.shape != g.shape:
        raise ValueError("inv_f and g must have the same length")
    if np.any(inv_f <= 0):
        raise ValueError("inverse Fisher entries must be positive")
    return _fsam(g, inv_f, gamma)


def inverse_fisher(model, params, batch, g, cfg):
    """Diagonal inverse Fisher for the FSAM probe under ``cfg.fisher_mode``."""
    if cfg.fisher_mode == "exact_toy":
        inv_f = np.asarray(model.exact_inverse_fisher(params), dtype=np.float64)
        if inv_f.shape != g.shape or np.any(inv_f <= 0):
            raise ValueError("model returned an invalid inverse Fisher diagonal")
        return inv_f
    if cfg.fisher_mode == "empirical_diag":
        f = fisher.empirical_diag_fisher(model.per_example_score_grads(params, batch))
    else:
        # g is already checked finite, so g * g is a valid diagonal
        f = g * g
    return 1.0 / (1.0 + cfg.eta * f)


def probe(model, params, batch, g, cfg):
    if cfg.variant == "sgd":
        return _zero_probe(g)
    if cfg.variant == "sam":
        return _sam(g, cfg.gamma)
    if cfg.variant == "asam":
        return _asam(params, g, cfg.gamma)
    return _fsam(g, inverse_fisher(model, params, batch, g, cfg), cfg.gamma)


def _evaluate(model, params, batch, phase, state):
    try:
        loss, g = model.value_and_grad(params, batch)
    except NumericError as exc:
        raise NumericError(f"{phase}: {exc}") from exc
    state.grad_evals += 1
    if not math.isfinite(loss):
        raise NumericError(f"{phase}: non-finite loss")
    if not np.all(np.isfinite(g)):
        raise NumericError(f"{phase}: non-finite gradient")
    return loss, g


def _project(model, params, state):
    out = model.project(params)
    if out is not params and not np.array_equal(out, params):
        state.projections += 1
        log.debug("projected parameters back into the model domain at t=%d", state.t)
    return out


def step(model, params, batch, cfg, state=None, lr=None):
    """One iteration of ``cfg.variant``.

    The gradient at the probed point is used as-is (no derivative through
    ``eps``).  Weight decay and momentum act on that re-evaluated gradient
    only.  When the probe is identically zero (SGD, ``gamma == 0`` or a zero
    gradient) the first gradient is reused, so those cases match SGD bit for
    bit.

    Returns:
        ``(new_params, record)``; ``state`` is updated in place.
    """
    state = OptimState() if state is None else state
    lr = cfg.lr if lr is None else lr
    params = model.check_params(params)
    loss, g = _evaluate(model, params, batch, "probe", state)
    pr = probe(model, params, batch, g, cfg)
    probe_norm = norm2(pr.epsilon)
    if probe_norm > 0:
        probed = _project(model, params + pr.epsilon, state)
        _, g_sharp = _evaluate(model, probed, batch, "re-eval", state)
    else:
        g_sharp = g
    update = g_sharp + cfg.weight_decay * params if cfg.weight_decay else g_sharp
    if cfg.momentum:
        if state.momentum_buffer is None:
            state.momentum_buffer = np.zeros_like(params)
        state.momentum_buffer = cfg.momentum * state.momentum_buffer + update
        update = state.momentum_buffer
    state.t += 1
    new = _project(model, params - lr * update, state)
    record = TrajectoryRecord(state.t, params, float(loss), probe_norm, float(lr))
    return new, record


def cosine_lr(base_lr, t, T):
    """``base_lr * (1 + cos(pi t / T)) / 2`` for ``0 <= t <= T``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / T))


def trajectory_csv(records, include_params=True):
    """Serialise records as ``iter,loss,probe_norm,lr[,theta_0,...]`` CSV text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    k = len(records[0].params) if (records and include_params) else 0
    w.writerow(["iter", "loss", "probe_norm", "lr"] + [f"theta_{i}" for i in range(k)])
    for r in records:
        row = [r.iter, repr(r.loss), repr(r.probe_norm), repr(r.lr)]
        if include_params:
            row += [repr(float(v)) for v in r.params]
        w.writerow(row)
    return buf.getvalue()
