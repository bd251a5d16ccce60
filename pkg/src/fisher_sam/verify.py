"""Property suite run by ``fisher-sam verify``.

Each check returns a :class:`CheckResult`; the suite passes only if every
check does.  Checks are grouped into families so a report shows which kind
of invariant broke.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fisher, toy2d
from .mlp_bench import MlpModel, MlpSpec, gen_blobs
from .model_api import QuadraticModel, gradient_check
from .optim import OptimConfig, OptimState, asam_probe, fsam_probe, sam_probe, step
from .params import RandomSource

log = logging.getLogger(__name__)


@dataclass
class CheckResult:
    family: str
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


@dataclass
class VerifyConfig:
    seed: int = 0
    second_moment_max_n: int = 6
    second_moment_sets: int = 20
    second_moment_tol: float = 1e-10
    second_moment_alpha_offset: float = 0.0
    kl_pairs: int = 20
    kl_ratio_tol: float = 0.05
    kl_min_slope: float = 2.7
    probe_tuples: int = 1000
    probe_samples: int = 10000
    probe_rel_tol: float = 1e-9
    probe_slack: float = 1e-9
    gradcheck_points: int = 10
    gradcheck_rel_tol: float = 1e-4
    collapse_steps: int = 100


def check_second_moment(cfg, rs):
    """Exhaustive batch enumeration for every ``1 <= M < N <= max_n``."""
    worst = 0.0
    worst_at = None
    for N in range(2, cfg.second_moment_max_n + 1):
        for M in range(1, N):
            alpha = fisher.second_moment_alpha(N, M) + cfg.second_moment_alpha_offset
            for _ in range(cfg.second_moment_sets):
                k = int(rs.integers(1, 4))
                rep = fisher.second_moment_check(rs.normal(size=(N, k)), M, alpha=alpha)
                if rep.max_abs_discrepancy > worst:
                    worst, worst_at = rep.max_abs_discrepancy, (N, M)
    return CheckResult("second_moment", "second_moment_identity", worst <= cfg.second_moment_tol,
                       {"max_abs_discrepancy": worst, "worst_NM": worst_at,
                        "tolerance": cfg.second_moment_tol,
                        "alpha_offset": cfg.second_moment_alpha_offset})


def random_toy_point(rs):
    return np.array([rs.uniform(-30, 30), rs.uniform(0.5, 40)])


def check_kl_fisher(cfg, rs):
    worst_ratio, min_slope = 0.0, math.inf
    for _ in range(cfg.kl_pairs):
        theta = random_toy_point(rs)
        d = rs.unit_vector(2)
        sigma = theta[1]
        mid = toy2d.kl_fisher_ratio(theta, d, [1e-3 * sigma])[0]
        worst_ratio = max(worst_ratio, abs(mid.ratio - 1.0))
        pts = toy2d.kl_fisher_ratio(theta, d, sigma * np.logspace(-4, -2, 9))
        min_slope = min(min_slope, toy2d.remainder_slope(pts))
    ok = worst_ratio <= cfg.kl_ratio_tol and min_slope >= cfg.kl_min_slope
    return CheckResult("kl_fisher", "kl_matches_fisher_quadratic", ok,
                       {"max_abs_ratio_minus_1": worst_ratio, "min_remainder_slope": min_slope})


def random_probe_tuple(rs):
    k = int(rs.integers(1, 9))
    theta = rs.normal(size=k) * rs.uniform(0.1, 3.0)
    theta[theta == 0] = 1.0
    g = rs.normal(size=k)
    inv_f = rs.uniform(0.01, 1.0, size=k)
    gamma = float(rs.uniform(0.01, 2.0))
    return theta, g, inv_f, gamma


def _probes(theta, g, inv_f, gamma):
    return {
        "sam": sam_probe(g, gamma),
        "asam": asam_probe(theta, g, gamma),
        "fsam": fsam_probe(g, inv_f, gamma),
    }


def feasible_samples(kind, theta, inv_f, gamma, u):
    """Map unit directions ``u`` (rows) onto the boundary of each feasible set."""
    if kind == "sam":
        return gamma * u
    if kind == "asam":
        return gamma * np.abs(theta) * u
    # eps^T F eps = gamma^2 with F = diag(1 / inv_f)
    scale = np.sqrt(np.sum(u * u / inv_f, axis=1, keepdims=True))
    return gamma * u / scale


def check_probes(cfg, rs):
    worst_constraint = 0.0
    worst_gap = -math.inf
    for _ in range(cfg.probe_tuples):
        theta, g, inv_f, gamma = random_probe_tuple(rs)
        u = rs.normal(size=(cfg.probe_samples, len(g)))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        for kind, pr in _probes(theta, g, inv_f, gamma).items():
            rel = abs(pr.constraint_value - gamma**2) / gamma**2
            worst_constraint = max(worst_constraint, rel)
            best = float(g @ pr.epsilon)
            sampled = float(np.max(feasible_samples(kind, theta, inv_f, gamma, u) @ g))
            worst_gap = max(worst_gap, (sampled - best) / max(1.0, abs(best)))
    return [
        CheckResult("probe_constraint", "probe_on_constraint_boundary",
                    worst_constraint <= cfg.probe_rel_tol,
                    {"max_rel_error": worst_constraint}),
        CheckResult("probe_optimality", "probe_beats_sampled_directions",
                    worst_gap <= cfg.probe_slack, {"max_scaled_gap": worst_gap}),
    ]


def check_gradients(cfg, rs):
    results = []
    worst, ok = 0.0, True
    model = toy2d.ToyModel()
    for _ in range(cfg.gradcheck_points):
        good, rel = gradient_check(model, random_toy_point(rs), None, cfg.gradcheck_rel_tol)
        ok &= good
        worst = max(worst, rel)
    results.append(CheckResult("gradient", "toy_gradient", ok, {"max_rel_error": worst}))
    for sizes, act in [((2, 8, 3), "tanh"), ((2, 6, 5, 3), "relu"), ((1, 4, 2), "tanh")]:
        model = MlpModel(MlpSpec(sizes, act))
        data = gen_blobs(int(rs.integers(0, 2**31)), 12, sizes[-1], sizes[0], 0.5)
        worst, ok = 0.0, True
        for _ in range(cfg.gradcheck_points):
            params = smooth_point(model, data, rs)
            good, rel = gradient_check(model, params, data.batch(), cfg.gradcheck_rel_tol)
            ok &= good
            worst = max(worst, rel)
        results.append(CheckResult("gradient", f"mlp_gradient_{act}_{'x'.join(map(str, sizes))}",
                                   ok, {"max_rel_error": worst}))
    return results


def smooth_point(model, data, rs, margin=1e-2, tries=1000):
    """A random init whose hidden pre-activations all stay ``margin`` away from ReLU kinks."""
    for _ in range(tries):
        params = model.init_params(int(rs.integers(0, 2**31)))
        if model.kink_margin(params, data.features) > margin:
            return params
    raise RuntimeError("no kink-free point found")


def _trajectory(model, params, batch_fn, cfg, n):
    state = OptimState()
    out = []
    for t in range(n):
        params, _ = step(model, params, batch_fn(t), cfg, state)
        out.append(params)
    return np.array(out)


def collapse_cases(steps):
    """``(label, model, params0, batch_fn, cfg_a, cfg_b)`` pairs that must match bitwise."""
    toy = toy2d.ToyModel()
    toy_start = np.array(toy2d.START_A)
    spec = MlpSpec((2, 16, 3), "relu")
    mlp = MlpModel(spec)
    data = gen_blobs(7, 64, 3, 2, 0.3)
    order = np.arange(64)

    def mlp_batches(t):
        return data.batch(np.roll(order, 16 * t)[:16])

    cases = []
    for label, model, p0, batch_fn, lr in [
        ("toy", toy, toy_start, lambda t: None, 5.0),
        ("mlp", mlp, mlp.init_params(3), mlp_batches, 0.1),
    ]:
        base = dict(lr=lr, momentum=0.9, weight_decay=1e-4 if label == "mlp" else 0.0)
        cases.append((f"{label}_eta0_fsam_is_sam", model, p0, batch_fn,
                      OptimConfig("fsam", gamma=0.05, eta=0.0, **base),
                      OptimConfig("sam", gamma=0.05, **base)))
        for v in ("sam", "asam", "fsam"):
            cases.append((f"{label}_gamma0_{v}_is_sgd", model, p0, batch_fn,
                          OptimConfig(v, gamma=0.0, **base), OptimConfig("sgd", **base)))
    return cases


def check_collapse(cfg, rs):
    results = []
    for label, model, p0, batch_fn, ca, cb in collapse_cases(cfg.collapse_steps):
        ta = _trajectory(model, p0, batch_fn, ca, cfg.collapse_steps)
        tb = _trajectory(model, p0, batch_fn, cb, cfg.collapse_steps)
        same = ta.tobytes() == tb.tobytes()
        results.append(CheckResult("collapse", label, same,
                                   {"steps": cfg.collapse_steps,
                                    "max_abs_diff": float(np.max(np.abs(ta - tb)))}))
    return results


def check_fisher_estimators(cfg, rs):
    spec = MlpSpec((2, 6, 3), "tanh")
    model = MlpModel(spec)
    data = gen_blobs(11, 24, 3, 2, 0.4)
    params = model.init_params(5)
    pe = model.per_example_score_grads(params, data.batch())
    mean_gap = float(np.max(np.abs(pe.mean(axis=0) - model.grad(params, data.batch()))))
    gm_gap = float(np.max(np.abs(fisher.gm_fisher(pe)
                                 - fisher.gm_fisher_from_batch_grad(model.grad(params, data.batch())))))
    single = pe[:1]
    single_gap = float(np.max(np.abs(fisher.gm_fisher(single) - fisher.empirical_diag_fisher(single))))
    ok = mean_gap <= 1e-12 and gm_gap <= 1e-12 and single_gap == 0.0
    return CheckResult("fisher", "estimator_consistency", ok,
                       {"per_example_mean_gap": mean_gap, "gm_batch_gap": gm_gap,
                        "single_example_gap": single_gap})


def check_exact_probe_sanity(cfg, rs):
    """On a quadratic bowl the SAM probe raises the linearised loss by exactly ``gamma * ||g||``."""
    model = QuadraticModel(3)
    params = np.array([1.0, -2.0, 0.5])
    g = model.grad(params)
    eps = sam_probe(g, 0.1).epsilon
    ok = math.isclose(float(g @ eps), 0.1 * float(np.linalg.norm(g)), rel_tol=1e-12)
    return CheckResult("probe_constraint", "sam_linear_gain_equals_gamma_norm", ok,
                       {"gain": float(g @ eps)})


FAMILIES = {
    "second_moment": check_second_moment,
    "kl_fisher": check_kl_fisher,
    "probes": check_probes,
    "gradient": check_gradients,
    "collapse": check_collapse,
    "fisher": check_fisher_estimators,
    "probe_sanity": check_exact_probe_sanity,
}


def run_suite(cfg=None, only=None):
    """Run every check; returns ``(all_passed, [CheckResult, ...])``."""
    cfg = VerifyConfig() if cfg is None else cfg
    results = []
    names = list(FAMILIES) if only is None else list(only)
    for name, rs in zip(names, RandomSource(cfg.seed).spawn(len(names))):
        out = FAMILIES[name](cfg, rs)
        out = out if isinstance(out, list) else [out]
        for r in out:
            log.info("%s %s/%s", "PASS" if r.passed else "FAIL", r.family, r.name)
        results.extend(out)
    return all(r.passed for r in results), results


def families(results):
    return sorted({r.family for r in results})
