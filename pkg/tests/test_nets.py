import numpy as np
import pytest

import lsxlab.autodiff as ad
import lsxlab.nets as nets


def small_cnn(seed=0, **kw):
    spec = nets.CnnSpec(in_channels=1, num_classes=3, height=12, width=12,
                        conv1=3, conv2=4, kernel=3, pool=2, fc1=16, **kw)
    return nets.CnnClassifier(spec, seed)


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = small_cnn(7), small_cnn(7)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_different_seeds_differ(self):
        a, b = small_cnn(1), small_cnn(2)
        assert any(not np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_fan_in_bound(self):
        spec = nets.ConceptPredictorSpec(n_slots=10, n_attrs=10, num_classes=4, hidden=8)
        m = nets.ConceptPredictor(spec, 0)
        assert np.all(np.abs(m.params["fc1.w"]) <= 0.1)  # fan_in = 100

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValueError):
            nets.CnnSpec(height=5, width=5, kernel=5).validate()


class TestPredict:
    def test_zero_final_layer_uniform_logits(self):
        m = small_cnn(0)
        m.params["fc2.w"] = np.zeros_like(m.params["fc2.w"])
        m.params["fc2.b"] = np.zeros_like(m.params["fc2.b"])
        out = m.predict_logits(np.random.default_rng(0).uniform(size=(4, 1, 12, 12)))
        assert np.array_equal(out, np.zeros((4, 3)))

    def test_batch_rows(self):
        m = small_cnn(0)
        out = m.predict_logits(np.zeros((5, 1, 12, 12)))
        assert out.shape == (5, 3)

    def test_shape_mismatch(self):
        m = small_cnn(0)
        with pytest.raises(ad.ShapeError):
            m.predict_logits(np.zeros((2, 3, 12, 12)))


class TestTrainStep:
    def test_sgd_quadratic_hand(self):
        # one SGD step, lr=0.1 on w^2 at w=1 -> 0.8
        class Scalar(nets._Model):
            def __init__(self):
                self.params = {"w": np.array(1.0)}

        m = Scalar()
        opt = nets.Optimizer(kind="sgd", lr=0.1)
        g = ad.Graph()
        leaves = m.bind(g)
        loss = ad.mul(leaves["w"], leaves["w"])
        value = nets.train_step(m, opt, g, loss, leaves)
        assert value == pytest.approx(1.0)
        assert m.params["w"] == pytest.approx(0.8, abs=1e-15)

    def test_lr_zero_keeps_params(self):
        m = small_cnn(3)
        before = m.copy_params()
        opt = nets.Optimizer(kind="adam", lr=0.0)
        x = np.random.default_rng(0).uniform(size=(4, 1, 12, 12))
        y = np.array([0, 1, 2, 0])
        g = ad.Graph()
        leaves = m.bind(g)
        loss = nets.cross_entropy(m.logits(g.leaf(x), leaves), y)
        nets.train_step(m, opt, g, loss, leaves)
        for k in before:
            assert np.array_equal(before[k], m.params[k])

    def test_separable_toy_loss_decreases_and_fits(self):
        rng = np.random.default_rng(5)
        x = np.concatenate([rng.normal(-2, 0.3, (20, 4)), rng.normal(2, 0.3, (20, 4))])
        y = np.array([0] * 20 + [1] * 20)
        spec = nets.ConceptPredictorSpec(n_slots=1, n_attrs=4, num_classes=2, hidden=0)
        m = nets.ConceptPredictor(spec, 0)
        opt = nets.Optimizer(kind="adam", lr=0.05)
        losses = []
        for _ in range(100):
            g = ad.Graph()
            leaves = m.bind(g)
            loss = nets.cross_entropy(m.logits(g.leaf(x), leaves), y)
            losses.append(nets.train_step(m, opt, g, loss, leaves))
        assert losses[-1] < losses[0]
        assert m.accuracy(x, y) == 100.0

    def test_adam_deterministic(self):
        results = []
        for _ in range(2):
            m = small_cnn(9)
            opt = nets.Optimizer(kind="adam", lr=1e-3)
            x = np.random.default_rng(1).uniform(size=(8, 1, 12, 12))
            y = np.arange(8) % 3
            for _ in range(5):
                g = ad.Graph()
                leaves = m.bind(g)
                loss = nets.cross_entropy(m.logits(g.leaf(x), leaves), y)
                nets.train_step(m, opt, g, loss, leaves)
            results.append(m.copy_params())
        for k in results[0]:
            assert np.array_equal(results[0][k], results[1][k])

    def test_non_finite_loss_aborts(self):
        class Scalar(nets._Model):
            def __init__(self):
                self.params = {"w": np.array(1e308)}

        m = Scalar()
        g = ad.Graph()
        leaves = m.bind(g)
        with np.errstate(over="ignore"):
            loss = ad.mul(leaves["w"], leaves["w"])
            with pytest.raises(nets.DivergenceError):
                nets.train_step(m, nets.Optimizer(), g, loss, leaves)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = small_cnn(4)
        path = tmp_path / "m.ckpt"
        nets.save_params(path, m.params)
        loaded = nets.load_params(path)
        assert set(loaded) == set(m.params)
        for k in m.params:
            assert np.array_equal(loaded[k], m.params[k])

    def test_magic_guard(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            nets.load_params(path)

    def test_scalar_param(self, tmp_path):
        path = tmp_path / "s.ckpt"
        nets.save_params(path, {"w": np.array(3.5)})
        assert nets.load_params(path)["w"] == pytest.approx(3.5)


class TestModelGradients:
    def test_cnn_param_gradients_match_fd(self):
        m = small_cnn(2)
        x = np.random.default_rng(3).uniform(size=(2, 1, 12, 12))
        y = np.array([1, 2])

        def loss_fn(w1):
            saved = m.params["conv1.w"]
            m.params["conv1.w"] = w1
            try:
                out = nets.cross_entropy(ad.Tensor(m.predict_logits(x)), y).item()
            finally:
                m.params["conv1.w"] = saved
            return out

        g = ad.Graph()
        leaves = m.bind(g)
        loss = nets.cross_entropy(m.logits(g.leaf(x), leaves), y)
        grads = ad.backward(g, loss, [leaves["conv1.w"].node])
        analytic = grads[leaves["conv1.w"].node].data

        point = m.params["conv1.w"]
        numeric = np.zeros_like(point)
        eps = 1e-6
        flat = point.reshape(-1)
        for i in range(flat.size):
            b = np.zeros_like(flat)
            b[i] = eps
            numeric.reshape(-1)[i] = (
                loss_fn((flat + b).reshape(point.shape)) - loss_fn((flat - b).reshape(point.shape))
            ) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        assert np.max(np.abs(analytic - numeric) / denom) < 1e-4
