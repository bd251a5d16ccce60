"""Two-basin toy landscape over univariate-Gaussian parameters (mu, sigma).

The loss is a negative log-mixture of two KL energy terms,

    l(mu, sigma) = -log sum_i alpha_i exp(-KL(N(mu, sigma^2) || N(m_i, s_i^2)) / beta_i^2)

with one wide (flat) and one narrow (sharp) basin.  Because the loss depends
on the parameters only through a Gaussian, the parameter plane carries the
Gaussian Fisher metric ``diag(1/sigma^2, 2/sigma^2)``; the FSAM runs here use
that metric exactly.
"""

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .fisher import exact_gaussian_fisher
from .model_api import DifferentiableModel
from .optim import OptimConfig, OptimState, step
from .params import as_params

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3


@dataclass(frozen=True)
class GaussianParams:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def as_vector(self):
        return np.array([self.mu, self.sigma], dtype=np.float64)

    @classmethod
    def from_vector(cls, v):
        return cls(float(v[0]), float(v[1]))


@dataclass(frozen=True)
class ToyLossSpec:
    """Two energy components ``(m, s, alpha, beta)``."""

    components: tuple = ((20.0, 30.0, 0.7, 1.8), (-20.0, 10.0, 0.3, 1.2))

    def __post_init__(self):
        comps = tuple(tuple(float(x) for x in c) for c in self.components)
        if len(comps) != 2 or any(len(c) != 4 for c in comps):
            raise ValueError("need exactly two (m, s, alpha, beta) components")
        for m, s, alpha, beta in comps:
            if not s > 0:
                raise ValueError("component scale s must be positive")
            if alpha < 0:
                raise ValueError("component weight alpha must be non-negative")
            if beta == 0:
                raise ValueError("component temperature beta must be non-zero")
        if all(c[2] == 0 for c in comps):
            raise ValueError("at least one component needs a positive weight")
        object.__setattr__(self, "components", comps)

    def to_dict(self):
        return {"components": [list(c) for c in self.components]}


REFERENCE_SPEC = ToyLossSpec()

# Published reference minima for REFERENCE_SPEC (flat, sharp).
REFERENCE_FLAT = (19.85, 29.95)
REFERENCE_SHARP = (-15.94, 13.46)

# Start points of the two optimizer comparisons: a large-sigma start inside
# the sharp basin, and a near-zero-mu start inside the sharp basin.
START_A = (-24.0, 32.5)
START_B = (-0.5, 9.0)


def _kl(mu, sigma, m, s):
    """KL(N(mu, sigma^2) || N(m, s^2)), written to stay accurate near zero."""
    x = sigma / s - 1.0
    return 0.5 * x * x + (x - np.log1p(x)) + (mu - m) ** 2 / (2.0 * s * s)


def _dkl(mu, sigma, m, s):
    return (mu - m) / (s * s), sigma / (s * s) - 1.0 / sigma


def kl_univariate_gaussians(p, q):
    """KL(p || q) for two univariate Gaussians given as :class:`GaussianParams`."""
    if not (p.sigma > 0 and q.sigma > 0):
        raise ValueError("sigmas must be positive")
    return float(_kl(p.mu, p.sigma, q.mu, q.sigma))


def _log_terms(mu, sigma, spec):
    terms = []
    for m, s, alpha, beta in spec.components:
        if alpha == 0:
            terms.append(np.full(np.shape(mu), -np.inf))
        else:
            terms.append(math.log(alpha) - _kl(mu, sigma, m, s) / (beta * beta))
    return np.stack(terms)


def toy_loss_array(mu, sigma, spec=REFERENCE_SPEC):
    """Vectorised loss; ``mu`` and ``sigma`` broadcast against each other."""
    mu, sigma = np.broadcast_arrays(np.asarray(mu, float), np.asarray(sigma, float))
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    a = _log_terms(mu, sigma, spec)
    top = np.max(a, axis=0)
    return -(top + np.log(np.sum(np.exp(a - top), axis=0)))


def toy_grad_array(mu, sigma, spec=REFERENCE_SPEC):
    """Vectorised gradient; returns an array of shape ``broadcast + (2,)``."""
    mu, sigma = np.broadcast_arrays(np.asarray(mu, float), np.asarray(sigma, float))
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    a = _log_terms(mu, sigma, spec)
    w = np.exp(a - np.max(a, axis=0))
    w /= np.sum(w, axis=0)
    gmu = np.zeros_like(mu)
    gsig = np.zeros_like(mu)
    for wi, (m, s, alpha, beta) in zip(w, spec.components):
        if alpha == 0:
            continue
        dmu, dsig = _dkl(mu, sigma, m, s)
        gmu = gmu + wi * dmu / (beta * beta)
        gsig = gsig + wi * dsig / (beta * beta)
    return np.stack([gmu, gsig], axis=-1)


def _unpack(theta):
    if isinstance(theta, GaussianParams):
        return theta.mu, theta.sigma
    v = as_params(theta, "theta")
    if v.shape[0] != 2:
        raise ValueError("toy parameters are (mu, sigma)")
    if not v[1] > 0:
        raise ValueError("sigma must be positive")
    return v[0], v[1]


def toy_loss(theta, spec=REFERENCE_SPEC):
    mu, sigma = _unpack(theta)
    return float(toy_loss_array(mu, sigma, spec))


def toy_grad(theta, spec=REFERENCE_SPEC):
    """Closed-form ``(dl/dmu, dl/dsigma)``: softmax-weighted KL gradients."""
    mu, sigma = _unpack(theta)
    return toy_grad_array(mu, sigma, spec)


class ToyModel(DifferentiableModel):
    """The toy loss as a :class:`DifferentiableModel`; the batch is ignored.

    ``project`` clamps sigma to ``SIGMA_FLOOR`` so iterates stay in the
    Gaussian family.
    """

    param_len = 2

    def __init__(self, spec=REFERENCE_SPEC):
        self.spec = spec

    def loss(self, params, batch=None):
        return toy_loss(self.check_params(params), self.spec)

    def grad(self, params, batch=None):
        return toy_grad(self.check_params(params), self.spec)

    def exact_inverse_fisher(self, params):
        return exact_gaussian_fisher(params[0], params[1]).inverse_diagonal()

    def project(self, params):
        if params[1] >= SIGMA_FLOOR:
            return params
        out = params.copy()
        out[1] = SIGMA_FLOOR
        return out


def hessian_trace_fd(theta, spec=REFERENCE_SPEC, h=1e-3, loss_fn=None):
    """Second central differences summed over both axes.

    ``loss_fn`` overrides the toy loss with any function of a length-2 vector.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    f = loss_fn if loss_fn is not None else (lambda v: toy_loss(v, spec))
    if isinstance(theta, GaussianParams):
        theta = theta.as_vector()
    t = np.asarray(theta, dtype=np.float64)
    f0 = f(t)
    total = 0.0
    for i in range(t.shape[0]):
        e = np.zeros_like(t)
        e[i] = h
        total += (f(t + e) - 2.0 * f0 + f(t - e)) / (h * h)
    return total


def _hessian_fd(theta, spec, h=1e-3):
    H = np.empty((2, 2))
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        H[:, i] = (toy_grad(theta + e, spec) - toy_grad(theta - e, spec)) / (2 * h)
    return 0.5 * (H + H.T)


@dataclass
class MinimumRecord:
    theta: np.ndarray
    loss: float
    hessian_trace: float
    converged: bool = True

    def to_dict(self):
        return {
            "theta": [float(x) for x in self.theta],
            "loss": self.loss,
            "hessian_trace": self.hessian_trace,
            "converged": self.converged,
        }


def default_start_grid():
    mus = np.linspace(-50.0, 50.0, 6)
    sigmas = np.linspace(2.0, 58.0, 5)
    return np.array([(m, s) for s in sigmas for m in mus])


def find_minima(spec=REFERENCE_SPEC, starts=None, lr=100.0, max_step=2.0,
                max_iter=20000, grad_tol=1e-8, dedup=0.5):
    """Gradient descent from every start; returns distinct minima sorted by loss.

    Each start keeps its own step size: a step ``-lr_i * grad`` (clipped to
    length ``max_step``) is accepted only if it lowers the loss, after which
    ``lr_i`` grows by 1.5x; rejected steps halve ``lr_i``.  Runs that do not
    reach ``grad_tol`` or end on a saddle are returned with
    ``converged=False`` after the converged minima.
    """
    starts = default_start_grid() if starts is None else np.asarray(
        [s.as_vector() if isinstance(s, GaussianParams) else s for s in starts], float)
    if starts.ndim != 2 or starts.shape[0] == 0:
        raise ValueError("need a non-empty grid of (mu, sigma) starts")
    t = starts.copy()
    t[:, 1] = np.maximum(t[:, 1], SIGMA_FLOOR)
    rate = np.full(len(t), float(lr))
    loss = toy_loss_array(t[:, 0], t[:, 1], spec)
    active = np.ones(len(t), dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        g = toy_grad_array(t[idx, 0], t[idx, 1], spec)
        done = np.linalg.norm(g, axis=-1) < grad_tol
        active[idx[done]] = False
        idx, g = idx[~done], g[~done]
        if idx.size == 0:
            break
        step_vec = -rate[idx, None] * g
        n = np.linalg.norm(step_vec, axis=-1, keepdims=True)
        step_vec *= np.minimum(1.0, max_step / np.maximum(n, 1e-300))
        cand = t[idx] + step_vec
        cand[:, 1] = np.maximum(cand[:, 1], SIGMA_FLOOR)
        cand_loss = toy_loss_array(cand[:, 0], cand[:, 1], spec)
        ok = cand_loss <= loss[idx]
        t[idx[ok]] = cand[ok]
        loss[idx[ok]] = cand_loss[ok]
        rate[idx[ok]] *= 1.5
        rate[idx[~ok]] *= 0.5
        # a step too small to move the iterate cannot make progress
        stuck = ~ok & (rate[idx] * np.linalg.norm(g, axis=-1) < 1e-15 * (1 + np.abs(t[idx]).max(axis=1)))
        active[idx[stuck]] = False

    grad_ok = np.linalg.norm(toy_grad_array(t[:, 0], t[:, 1], spec), axis=-1) < grad_tol
    records = []
    for theta, unfinished, small in zip(t, active, grad_ok):
        is_min = not unfinished and small and np.all(np.linalg.eigvalsh(_hessian_fd(theta, spec)) > 0)
        records.append(MinimumRecord(theta.copy(), toy_loss(theta, spec),
                                     hessian_trace_fd(theta, spec), converged=bool(is_min)))
    found, flagged = [], []
    # converged runs first, so a flagged run ending on a known minimum is dropped
    for rec in sorted(records, key=lambda r: not r.converged):
        if all(np.linalg.norm(rec.theta - r.theta) >= dedup for r in found + flagged):
            (found if rec.converged else flagged).append(rec)
    if flagged:
        log.warning("%d start(s) did not converge to a minimum", len(flagged))
    found.sort(key=lambda r: r.loss)
    return found + flagged


def label_minima(minima):
    """Map ``{'flat': theta, 'sharp': theta}`` from two converged minima by Hessian trace."""
    conv = [m for m in minima if m.converged]
    if len(conv) != 2:
        raise ValueError(f"expected two minima, got {len(conv)}")
    flat, sharp = sorted(conv, key=lambda m: m.hessian_trace)
    return {"flat": flat.theta, "sharp": sharp.theta}


@dataclass
class BasinResult:
    start: tuple
    variant: str
    gamma: float
    final_theta: np.ndarray
    basin: str
    distance: float
    iters: int
    projections: int
    records: list = field(repr=False, default_factory=list)

    def summary(self):
        return {
            "start": [float(x) for x in self.start],
            "variant": self.variant,
            "gamma": self.gamma,
            "final_theta": [float(x) for x in self.final_theta],
            "basin": self.basin,
            "distance_to_basin_minimum": self.distance,
            "iters": self.iters,
            "sigma_projections": self.projections,
        }

    def to_json(self):
        return json.dumps(self.summary(), sort_keys=True)


def toy_config(variant, gamma=None, lr=50.0, momentum=0.9):
    """Optimizer settings used for the toy comparisons.

    The per-variant neighbourhood sizes differ because the neighbourhoods
    live on different scales (Euclidean, magnitude-relative, Fisher).
    """
    defaults = {"sgd": 0.0, "sam": 0.05, "asam": 0.05, "fsam": 0.3}
    return OptimConfig(variant=variant, gamma=defaults[variant] if gamma is None else gamma,
                       lr=lr, momentum=momentum, fisher_mode="exact_toy")


def basin_experiment(spec, start, cfg, iterations=1000, minima=None):
    """Run ``cfg`` from ``start`` for ``iterations`` full-batch steps.

    The final iterate is labelled with the nearest of the two minima
    (``flat`` = smaller Hessian trace).  ``minima`` may be passed to avoid
    recomputing them.
    """
    minima = label_minima(find_minima(spec)) if minima is None else minima
    model = ToyModel(spec)
    theta = model.project(as_params(
        start.as_vector() if isinstance(start, GaussianParams) else start, "start").copy())
    start_t = tuple(float(x) for x in theta)
    state = OptimState()
    records = []
    for _ in range(iterations):
        theta, rec = step(model, theta, None, cfg, state)
        records.append(rec)
    dist = {k: float(np.linalg.norm(theta - v)) for k, v in minima.items()}
    basin = min(dist, key=dist.get)
    if state.projections:
        log.info("sigma projected %d times", state.projections)
    return BasinResult(start_t, cfg.variant, cfg.gamma, theta, basin, dist[basin],
                       iterations, state.projections, records)


@dataclass
class KLFisherPoint:
    scale: float
    kl: float
    fisher_quadratic: float
    ratio: float
    remainder: float
    skipped: bool = False


def kl_fisher_ratio(theta, direction, scales):
    """Compare exact KL with the Fisher quadratic along ``theta + t * direction``.

    For each ``t``: ``fisher_quadratic = t^2 d^T F d``, ``ratio = KL / (fisher_quadratic / 2)``
    (the second-order Taylor term of KL is half the Fisher quadratic) and
    ``remainder = |KL - fisher_quadratic / 2|``, which shrinks like ``t^3``.
    Scales that push sigma to zero or below are returned with ``skipped=True``.
    """
    mu, sigma = _unpack(theta)
    d = as_params(direction, "direction")
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    F = exact_gaussian_fisher(mu, sigma)
    dFd = F.quadratic(d)
    out = []
    for t in scales:
        s2 = sigma + t * d[1]
        if not s2 > 0:
            out.append(KLFisherPoint(t, math.nan, math.nan, math.nan, math.nan, True))
            continue
        kl = float(_kl(mu + t * d[0], s2, mu, sigma))
        quad = t * t * dFd
        out.append(KLFisherPoint(t, kl, quad, kl / (0.5 * quad), abs(kl - 0.5 * quad)))
    return out


def remainder_slope(points):
    """Least-squares slope of log remainder against log scale."""
    pts = [p for p in points if not p.skipped and p.remainder > 0]
    if len(pts) < 2:
        return math.nan
    x = np.log([p.scale for p in pts])
    y = np.log([p.remainder for p in pts])
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class ContourGrid:
    mu: np.ndarray
    sigma: np.ndarray
    loss: np.ndarray  # shape (len(sigma), len(mu))

    def argmin(self):
        i, j = np.unravel_index(np.argmin(self.loss), self.loss.shape)
        return float(self.mu[j]), float(self.sigma[i]), float(self.loss[i, j])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mu", "sigma", "loss"])
        for i, s in enumerate(self.sigma):
            for j, m in enumerate(self.mu):
                w.writerow([repr(float(m)), repr(float(s)), repr(float(self.loss[i, j]))])
        return buf.getvalue()


def contour_grid(spec=REFERENCE_SPEC, mu_range=(-60.0, 60.0), sigma_range=(1.0, 60.0),
                 resolution=(121, 60)):
    """Loss on a regular grid, rows indexed by sigma and columns by mu."""
    if np.isscalar(resolution):
        resolution = (resolution, resolution)
    nmu, nsig = int(resolution[0]), int(resolution[1])
    if nmu < 2 or nsig < 2:
        raise ValueError("resolution must be at least 2 per axis")
    if not sigma_range[0] > 0:
        raise ValueError("sigma range must be positive")
    mu = np.linspace(mu_range[0], mu_range[1], nmu)
    sigma = np.linspace(sigma_range[0], sigma_range[1], nsig)
    M, S = np.meshgrid(mu, sigma)
    return ContourGrid(mu, sigma, toy_loss_array(M, S, spec))
