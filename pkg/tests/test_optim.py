import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fisher_sam import optim
from fisher_sam.model_api import QuadraticModel
from fisher_sam.optim import (OptimConfig, OptimState, asam_probe, cosine_lr, fsam_probe, sam_probe,
                              step, trajectory_csv)
from fisher_sam.params import NumericError
from fisher_sam.toy2d import ToyModel

vec = st.lists(st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3), min_size=1, max_size=6)
# entries are zero or large enough that squared sums cannot underflow
grad_entry = st.floats(-10, 10).filter(lambda v: v == 0 or abs(v) > 1e-100)


def sampled_best(g, feasible):
    return float(np.max(feasible @ g))


class TestSamProbe:
    def test_three_four_five(self):
        np.testing.assert_allclose(sam_probe([3.0, 4.0], 0.1).epsilon, [0.06, 0.08], rtol=1e-15)

    def test_zero_gradient(self):
        pr = sam_probe([0.0, 0.0], 0.7)
        np.testing.assert_array_equal(pr.epsilon, [0.0, 0.0])
        assert pr.constraint_value == 0.0
        assert pr.grad_norm == 0.0

    def test_brute_force_optimal(self, rng):
        g = rng.normal(size=4)
        u = rng.normal(size=(10000, 4))
        u *= 0.3 / np.linalg.norm(u, axis=1, keepdims=True)
        best = float(g @ sam_probe(g, 0.3).epsilon)
        assert sampled_best(g, u) <= best + 1e-9

    def test_negative_gamma(self):
        with pytest.raises(ValueError):
            sam_probe([1.0], -1.0)


class TestAsamProbe:
    def test_hand_evaluation(self):
        eps = asam_probe([2.0, 1.0], [1.0, 2.0], 1.0).epsilon
        np.testing.assert_allclose(eps, [math.sqrt(2), 1 / math.sqrt(2)], rtol=1e-14)

    def test_zero_axis_frozen(self):
        pr = asam_probe([0.0, 2.0], [5.0, 1.0], 0.5)
        assert pr.epsilon[0] == 0.0
        assert pr.constraint_value == pytest.approx(0.25, rel=1e-12)

    def test_brute_force_optimal(self, rng):
        theta = rng.normal(size=5)
        g = rng.normal(size=5)
        u = rng.normal(size=(10000, 5))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        feasible = 0.2 * np.abs(theta) * u
        best = float(g @ asam_probe(theta, g, 0.2).epsilon)
        assert sampled_best(g, feasible) <= best + 1e-9


class TestFsamProbe:
    def test_hand_evaluation(self):
        pr = fsam_probe([1.0, 2.0], [1.0, 0.25], 1.0)
        np.testing.assert_allclose(pr.epsilon, [1 / math.sqrt(2), 1 / (2 * math.sqrt(2))], rtol=1e-14)
        assert pr.constraint_value == pytest.approx(1.0, rel=1e-14)

    def test_identity_metric_is_sam(self):
        g = np.array([0.3, -1.2, 4.4])
        a = fsam_probe(g, np.ones(3), 0.05).epsilon
        b = sam_probe(g, 0.05).epsilon
        assert a.tobytes() == b.tobytes()

    def test_zero_gradient(self):
        np.testing.assert_array_equal(fsam_probe([0.0, 0.0], [1.0, 1.0], 1.0).epsilon, [0, 0])

    @pytest.mark.parametrize("inv_f", [[0.0, 1.0], [-0.5, 1.0]])
    def test_nonpositive_inverse_rejected(self, inv_f):
        with pytest.raises(ValueError):
            fsam_probe([1.0, 1.0], inv_f, 1.0)

    def test_exact_gaussian_neighbourhood(self):
        # eps_mu^2 / sigma^2 + 2 eps_sigma^2 / sigma^2 == gamma^2
        mu, sigma, gamma = 3.0, 2.5, 0.4
        model = ToyModel()
        theta = np.array([mu, sigma])
        pr = fsam_probe(model.grad(theta), model.exact_inverse_fisher(theta), gamma)
        e = pr.epsilon
        assert e[0] ** 2 / sigma**2 + 2 * e[1] ** 2 / sigma**2 == pytest.approx(gamma**2, rel=1e-12)


class TestProbeProperties:
    @given(vec, st.data(), st.floats(1e-3, 5.0))
    def test_constraints_tight(self, theta, data, gamma):
        k = len(theta)
        g = np.array(data.draw(st.lists(grad_entry, min_size=k, max_size=k)))
        inv_f = np.array(data.draw(st.lists(st.floats(1e-3, 1.0), min_size=k, max_size=k)))
        theta = np.array(theta)
        for pr in (sam_probe(g, gamma), asam_probe(theta, g, gamma), fsam_probe(g, inv_f, gamma)):
            if np.any(g != 0):
                assert pr.constraint_value == pytest.approx(gamma**2, rel=1e-9)
            else:
                assert pr.constraint_value == 0.0

    @given(vec, st.floats(0, 5))
    def test_constraint_never_exceeded(self, g, gamma):
        assert sam_probe(g, gamma).constraint_value <= gamma**2 * (1 + 1e-12) + 1e-9

    def test_ascent_on_smooth_model(self, rng):
        model = QuadraticModel(5, center=rng.normal(size=5))
        for _ in range(50):
            theta = rng.normal(size=5) * 3
            g = model.grad(theta)
            gamma = 1e-3 * float(np.linalg.norm(theta))
            for pr in (sam_probe(g, gamma), asam_probe(theta, g, gamma),
                       fsam_probe(g, rng.uniform(0.1, 1, 5), gamma)):
                assert model.loss(theta + pr.epsilon) >= model.loss(theta) - 1e-6


class TestConfig:
    def test_variant_case_insensitive(self):
        assert OptimConfig("FSAM").variant == "fsam"

    @pytest.mark.parametrize("kwargs", [
        {"variant": "adam"}, {"gamma": -1}, {"eta": -1}, {"lr": 0}, {"momentum": 1.0},
        {"weight_decay": -1e-3}, {"fisher_mode": "kfac"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            OptimConfig(**kwargs)


class TestStep:
    def test_sgd_quadratic(self):
        new, rec = step(QuadraticModel(2), [1.0, 0.0], None, OptimConfig("sgd", lr=0.1))
        np.testing.assert_allclose(new, [0.9, 0.0], rtol=1e-15)
        assert rec.iter == 1 and rec.loss == 0.5 and rec.probe_norm == 0.0

    def test_sam_uses_probed_gradient(self):
        # on 0.5||theta||^2 the gradient at theta + eps is theta + eps
        theta = np.array([3.0, 4.0])
        new, _ = step(QuadraticModel(2), theta, None, OptimConfig("sam", gamma=0.5, lr=0.1))
        np.testing.assert_allclose(new, theta - 0.1 * (theta + 0.5 * theta / 5.0))

    @pytest.mark.parametrize("variant, evals", [("sgd", 1), ("sam", 2), ("asam", 2), ("fsam", 2)])
    def test_gradient_evaluation_count(self, variant, evals):
        state = OptimState()
        step(QuadraticModel(3), [1.0, 2.0, 3.0], None, OptimConfig(variant, gamma=0.1), state)
        assert state.grad_evals == evals

    def test_momentum_and_weight_decay(self):
        cfg = OptimConfig("sgd", lr=0.1, momentum=0.5, weight_decay=0.1)
        state = OptimState()
        p1, _ = step(QuadraticModel(1), [1.0], None, cfg, state)
        # update = g + wd * theta = 1.1; buffer = 1.1
        np.testing.assert_allclose(p1, [1.0 - 0.11])
        p2, _ = step(QuadraticModel(1), p1, None, cfg, state)
        upd = p1[0] * 1.1
        np.testing.assert_allclose(p2, [p1[0] - 0.1 * (0.5 * 1.1 + upd)])

    @pytest.mark.parametrize("variant", ["sam", "asam", "fsam"])
    def test_gamma_zero_collapses_to_sgd(self, variant):
        model = ToyModel()
        base = dict(lr=20.0, momentum=0.9, fisher_mode="exact_toy")
        a, b = np.array([-24.0, 32.5]), np.array([-24.0, 32.5])
        sa, sb = OptimState(), OptimState()
        for _ in range(100):
            a, _ = step(model, a, None, OptimConfig(variant, gamma=0.0, **base), sa)
            b, _ = step(model, b, None, OptimConfig("sgd", **base), sb)
            assert a.tobytes() == b.tobytes()

    def test_eta_zero_collapses_to_sam(self):
        model = QuadraticModel(3, center=[1.0, -2.0, 0.5])
        a = b = np.array([4.0, 4.0, 4.0])
        sa, sb = OptimState(), OptimState()
        for _ in range(100):
            a, _ = step(model, a, None, OptimConfig("fsam", gamma=0.3, eta=0.0, momentum=0.9), sa)
            b, _ = step(model, b, None, OptimConfig("sam", gamma=0.3, momentum=0.9), sb)
            assert a.tobytes() == b.tobytes()

    def test_numeric_error_names_phase(self):
        class Cliff(QuadraticModel):
            def value_and_grad(self, params, batch=None):
                if params[0] > 1.0:
                    return math.inf, params
                return super().value_and_grad(params, batch)

        with pytest.raises(NumericError, match="re-eval"):
            step(Cliff(1), [0.9], None, OptimConfig("sam", gamma=0.5))
        with pytest.raises(NumericError, match="probe"):
            step(Cliff(1), [2.0], None, OptimConfig("sam", gamma=0.5))

    def test_sigma_projection_counted(self):
        model = ToyModel()
        state = OptimState()
        new, _ = step(model, [0.0, 100.0], None, OptimConfig("sgd", lr=1e6), state)
        assert new[1] == 1e-3
        assert state.projections == 1

    def test_iters_strictly_increase(self):
        state = OptimState()
        p = np.array([1.0, 1.0])
        iters = []
        for _ in range(5):
            p, rec = step(QuadraticModel(2), p, None, OptimConfig("fsam"), state)
            iters.append(rec.iter)
        assert iters == sorted(set(iters))


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0.2, 0, 10) == 0.2
        assert cosine_lr(0.2, 10, 10) == pytest.approx(0.0, abs=1e-17)
        assert cosine_lr(0.2, 5, 10) == pytest.approx(0.1, rel=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(0.1, 11, 10)
        with pytest.raises(ValueError):
            cosine_lr(0.1, 0, 0)


class TestTrajectoryCsv:
    def test_columns(self):
        state = OptimState()
        p = np.array([1.0, 2.0])
        recs = []
        for _ in range(3):
            p, r = step(QuadraticModel(2), p, None, OptimConfig("sam"), state)
            recs.append(r)
        text = trajectory_csv(recs)
        lines = text.splitlines()
        assert lines[0] == "iter,loss,probe_norm,lr,theta_0,theta_1"
        assert len(lines) == 4
        assert trajectory_csv(recs, include_params=False).splitlines()[0] == "iter,loss,probe_norm,lr"

    def test_round_trip_floats(self):
        rec = optim.TrajectoryRecord(1, np.array([0.1 + 0.2]), 1 / 3, 0.0, 0.1)
        row = trajectory_csv([rec]).splitlines()[1].split(",")
        assert float(row[1]) == 1 / 3 and float(row[4]) == 0.1 + 0.2
