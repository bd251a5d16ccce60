import numpy as np
import pytest

from fisher_sam.model_api import (Batch, DifferentiableModel, QuadraticModel, UnsupportedError,
                                  finite_difference_grad, first_nonfinite, gradient_check,
                                  require_finite_losses)
from fisher_sam.params import DimensionError, NumericError


class TestBatch:
    def test_lengths_must_match(self):
        with pytest.raises(DimensionError):
            Batch(np.zeros((3, 2)), np.zeros(2))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            Batch(np.zeros((0, 2)), np.zeros(0))

    def test_1d_inputs_become_columns(self):
        b = Batch([1.0, 2.0, 3.0], [0, 1, 0])
        assert b.inputs.shape == (3, 1)
        assert len(b) == 3

    def test_subset(self):
        b = Batch(np.arange(8.0).reshape(4, 2), [0, 1, 2, 3])
        s = b.subset([1, 3])
        np.testing.assert_array_equal(s.targets, [1, 3])


class TestQuadratic:
    def test_loss_and_grad(self):
        m = QuadraticModel(2, center=[1.0, -1.0])
        assert m.loss([1.0, -1.0]) == 0.0
        assert m.loss([2.0, 1.0]) == 2.5
        np.testing.assert_array_equal(m.grad([2.0, 1.0]), [1.0, 2.0])

    def test_wrong_length(self):
        with pytest.raises(DimensionError):
            QuadraticModel(3).grad([1.0, 2.0])

    def test_gradient_check_passes(self):
        ok, _ = gradient_check(QuadraticModel(4), np.array([0.3, -2.0, 5.0, 1e-3]), None)
        assert ok


class TestCapabilities:
    def test_defaults_raise_unsupported(self):
        m = QuadraticModel(2)
        with pytest.raises(UnsupportedError):
            m.per_example_score_grads([0.0, 0.0], None)
        with pytest.raises(UnsupportedError):
            m.exact_inverse_fisher([0.0, 0.0])

    def test_project_default_identity(self):
        p = np.array([1.0, 2.0])
        assert DifferentiableModel().project(p) is p


class TestFiniteness:
    def test_first_nonfinite_index(self):
        assert first_nonfinite([1.0, 2.0]) is None
        assert first_nonfinite([1.0, np.inf, np.nan]) == 1

    def test_require_finite_reports_example(self):
        with pytest.raises(NumericError, match="example 2"):
            require_finite_losses([0.1, 0.2, np.nan])


class TestFiniteDifference:
    def test_cubic(self):
        f = lambda v: float(np.sum(v**3))
        p = np.array([0.5, -1.5, 2.0])
        np.testing.assert_allclose(finite_difference_grad(f, p, 1e-5), 3 * p**2, rtol=1e-8)

    def test_detects_wrong_gradient(self):
        class Broken(QuadraticModel):
            def grad(self, params, batch=None):
                return 1.01 * super().grad(params, batch)

        ok, worst = gradient_check(Broken(3), np.array([1.0, 2.0, 3.0]), None)
        assert not ok
        assert worst > 1e-3
