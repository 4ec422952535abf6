import numpy as np
import pytest

from fedsim.numerics import (
    Batch,
    LogisticRegression,
    MLP,
    ParamVector,
    QuadraticFed,
    finite_diff_grad,
    grad,
    hvp,
    loss,
)


def random_batch(rng, b, dim, classes):
    return Batch(rng.standard_normal((b, dim)), rng.integers(0, classes, size=b))


def model_zoo(rng):
    """One instance of each model kind with a random point and batch."""
    quad = QuadraticFed(rng.standard_normal(6), rng.uniform(0.5, 2.0, 6))
    logistic = LogisticRegression(5, 4)
    mlp = MLP((5, 8, 4))
    cases = []
    for model in (quad, logistic, mlp):
        params = ParamVector(rng.standard_normal(model.d), model.layer_shapes)
        batch = random_batch(rng, 12, 5, 4)
        cases.append((model, params, batch))
    return cases


class TestParamVector:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ParamVector(np.array([1.0, np.nan]))

    def test_rejects_bad_layer_shapes(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(5), ((2, 2),))

    def test_layers_views(self):
        pv = ParamVector(np.arange(6.0), ((2, 2), (2, 1)))
        layers = pv.layers()
        assert layers[0].shape == (2, 2)
        assert layers[1].shape == (2, 1)
        assert np.array_equal(layers[1].ravel(), [4.0, 5.0])

    def test_arithmetic_and_dim_check(self):
        a = ParamVector(np.array([1.0, 2.0]))
        b = ParamVector(np.array([3.0, 4.0]))
        assert np.array_equal((a + b).values, [4.0, 6.0])
        assert np.array_equal((b - a).values, [2.0, 2.0])
        assert np.array_equal((2.0 * a).values, [2.0, 4.0])
        assert a.dot(b) == 11.0
        with pytest.raises(ValueError):
            a + ParamVector(np.zeros(3))


class TestLoss:
    def test_quadratic_center_one(self):
        model = QuadraticFed(np.array([1.0]))
        batch = Batch(np.zeros((1, 1)), np.zeros(1, dtype=int))
        assert loss(model, ParamVector(np.zeros(1)), batch) == pytest.approx(0.5, abs=0)
        assert loss(model, ParamVector(np.ones(1)), batch) == 0.0

    def test_logistic_matches_handcoded_cross_entropy(self):
        rng = np.random.default_rng(0)
        model = LogisticRegression(4, 3)
        params = ParamVector(0.5 * rng.standard_normal(model.d), model.layer_shapes)
        batch = random_batch(rng, 10, 4, 3)
        # independent oracle: direct softmax cross-entropy, no shared helpers
        W = params.values.reshape(4, 3)
        logits = batch.features @ W
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expected = -np.mean(np.log(probs[np.arange(10), batch.labels]))
        assert loss(model, params, batch) == pytest.approx(expected, rel=1e-12)

    def test_dimension_mismatch_raises(self):
        model = LogisticRegression(4, 3)
        batch = random_batch(np.random.default_rng(0), 5, 4, 3)
        with pytest.raises(ValueError):
            loss(model, ParamVector(np.zeros(7)), batch)

    def test_batch_validation(self):
        with pytest.raises(ValueError):
            Batch(np.zeros((0, 3)), np.zeros(0, dtype=int))
        model = LogisticRegression(2, 2)
        bad = Batch(np.zeros((2, 2)), np.array([0, 5]))
        with pytest.raises(ValueError):
            loss(model, ParamVector(np.zeros(4), model.layer_shapes), bad)


class TestGrad:
    def test_quadratic_gradient(self):
        model = QuadraticFed(np.array([1.0]))
        batch = Batch(np.zeros((1, 1)), np.zeros(1, dtype=int))
        g = grad(model, ParamVector(np.zeros(1)), batch)
        assert g.values[0] == -1.0

    def test_matches_finite_differences_all_kinds(self):
        rng = np.random.default_rng(1)
        for model, params, batch in model_zoo(rng):
            g = grad(model, params, batch)
            fd = finite_diff_grad(model, params, batch, h=1e-5)
            err = np.linalg.norm(g.values - fd.values) / max(1.0, g.norm())
            assert err <= 1e-5

    def test_mlp_zero_weights_zero_gradient(self):
        model = MLP((3, 4, 2))
        params = ParamVector(np.zeros(model.d), model.layer_shapes)
        batch = random_batch(np.random.default_rng(2), 8, 3, 2)
        g = grad(model, params, batch)
        assert np.all(g.values == 0.0)

    def test_purity(self):
        rng = np.random.default_rng(3)
        for model, params, batch in model_zoo(rng):
            assert loss(model, params, batch) == loss(model, params, batch)
            assert np.array_equal(grad(model, params, batch).values, grad(model, params, batch).values)


class TestFiniteDiff:
    def test_quadratic_exact(self):
        model = QuadraticFed(np.array([1.0]))
        batch = Batch(np.zeros((1, 1)), np.zeros(1, dtype=int))
        fd = finite_diff_grad(model, ParamVector(np.zeros(1)), batch, h=1e-5)
        assert fd.values[0] == pytest.approx(-1.0, abs=1e-8)

    def test_diag_curvature_exact(self):
        model = QuadraticFed(np.zeros(2), np.array([1.0, 2.0]))
        batch = Batch(np.zeros((1, 1)), np.zeros(1, dtype=int))
        fd = finite_diff_grad(model, ParamVector(np.ones(2)), batch, h=1e-5)
        assert np.allclose(fd.values, [1.0, 2.0], atol=1e-8)

    def test_rejects_nonpositive_h(self):
        model = QuadraticFed(np.zeros(1))
        batch = Batch(np.zeros((1, 1)), np.zeros(1, dtype=int))
        with pytest.raises(ValueError):
            finite_diff_grad(model, ParamVector(np.zeros(1)), batch, h=0.0)


class TestHvp:
    def setup_method(self):
        self.model = QuadraticFed(np.zeros(3), np.array([1.0, 2.0, 3.0]))
        self.batch = Batch(np.zeros((1, 1)), np.zeros(1, dtype=int))
        self.params = ParamVector(np.zeros(3))

    def test_diag_quadratic(self):
        out = hvp(self.model, self.params, self.batch, ParamVector(np.ones(3)))
        assert np.allclose(out.values, [1.0, 2.0, 3.0], atol=1e-9)

    def test_basis_vector(self):
        e1 = ParamVector(np.array([1.0, 0.0, 0.0]))
        out = hvp(self.model, self.params, self.batch, e1)
        assert np.allclose(out.values, [1.0, 0.0, 0.0], atol=1e-9)

    def test_zero_direction_rejected(self):
        with pytest.raises(ValueError):
            hvp(self.model, self.params, self.batch, ParamVector(np.zeros(3)))

    def test_mlp_symmetry(self):
        rng = np.random.default_rng(4)
        model = MLP((4, 6, 3))
        params = ParamVector(rng.standard_normal(model.d), model.layer_shapes)
        batch = random_batch(rng, 10, 4, 3)
        u = ParamVector(rng.standard_normal(model.d))
        v = ParamVector(rng.standard_normal(model.d))
        uhv = u.values @ hvp(model, params, batch, v).values
        vhu = v.values @ hvp(model, params, batch, u).values
        assert abs(uhv - vhu) <= 1e-4 * max(1.0, abs(uhv))

    def test_linearity(self):
        rng = np.random.default_rng(5)
        u = ParamVector(rng.standard_normal(3))
        v = ParamVector(rng.standard_normal(3))
        combo = hvp(self.model, self.params, self.batch, 2.0 * u + 3.0 * v)
        parts = 2.0 * hvp(self.model, self.params, self.batch, u) + 3.0 * hvp(
            self.model, self.params, self.batch, v
        )
        assert np.allclose(combo.values, parts.values, atol=1e-9)

        model = MLP((4, 5, 3))
        params = ParamVector(rng.standard_normal(model.d), model.layer_shapes)
        batch = random_batch(rng, 8, 4, 3)
        u = ParamVector(rng.standard_normal(model.d))
        v = ParamVector(rng.standard_normal(model.d))
        combo = hvp(model, params, batch, 2.0 * u + 3.0 * v)
        parts = 2.0 * hvp(model, params, batch, u) + 3.0 * hvp(model, params, batch, v)
        scale = max(1.0, np.linalg.norm(combo.values))
        assert np.linalg.norm(combo.values - parts.values) / scale <= 1e-4
