import numpy as np
import pytest

from config import TrainConfig
from errors import CacheError, DivergenceError, ShapeError, SpecError
from gradcore import (
    Gradients, LayerSpec, Model, NetworkSpec, backward, fit, forward, grad_check, init_model,
    load_checkpoint, lr_at, parameter_hash, save_checkpoint, sgd_step,
)
from losses import ce_loss_and_grad, smooth_label_rows, softmax_rows


def _ce(targets):
    return lambda logits: ce_loss_and_grad(logits, targets)


def _train_cfg(**kw):
    base = dict(epochs=1, batch_size=8, learning_rate=0.1, momentum=0.0, weight_decay=0.0, decay_epochs=[])
    base.update(kw)
    return TrainConfig(**base)


def _zero_grads(model):
    return Gradients(tuple(np.zeros_like(w) for w in model.weights),
                     tuple(np.zeros_like(b) for b in model.biases))


class TestSpec:
    def test_mlp_chains_dims(self):
        spec = NetworkSpec.mlp(5, [7, 3], 4)
        assert [(l.in_dim, l.out_dim) for l in spec.layers] == [(5, 7), (7, 3), (3, 4)]
        assert spec.layers[-1].activation == "none"
        assert spec.penultimate_dim == 3

    def test_binary_weights_skip_first_and_last(self):
        spec = NetworkSpec.mlp(5, [6, 6], 3, activation="binary-sign", binary_weights=True)
        assert [l.binary_weights for l in spec.layers] == [False, True, False]

    def test_rejects_bad_chains(self):
        with pytest.raises(SpecError):
            NetworkSpec(4, 3, (LayerSpec(4, 5), LayerSpec(6, 3, "none")))
        with pytest.raises(SpecError):
            NetworkSpec(4, 3, (LayerSpec(4, 5), LayerSpec(5, 3, "relu")))
        with pytest.raises(SpecError):
            NetworkSpec(4, 3, (LayerSpec(4, 5, binary_weights=True), LayerSpec(5, 3, "none")))
        with pytest.raises(SpecError):
            NetworkSpec(4, 3, (LayerSpec(4, 3, "none"),))

    def test_dict_round_trip(self):
        spec = NetworkSpec.mlp(3, [4], 2, activation="tanh")
        assert NetworkSpec.from_dict(spec.to_dict()) == spec


class TestInitForward:
    def test_init_deterministic(self):
        spec = NetworkSpec.mlp(4, [8], 3)
        a, b = init_model(spec, 7), init_model(spec, 7)
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p, q)
        c = init_model(spec, 8)
        assert any(not np.array_equal(p, q) for p, q in zip(a.parameters(), c.parameters()))

    def test_init_rejects_non_spec(self):
        with pytest.raises(SpecError):
            init_model({"input_dim": 3}, 0)

    def test_glorot_uniform_bounds(self):
        model = init_model(NetworkSpec.mlp(300, [200, 50], 10), 4)
        for layer, w, b in zip(model.spec.layers, model.weights, model.biases):
            limit = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
            assert np.abs(w).max() <= limit
            assert np.abs(w).max() >= 0.95 * limit
            assert abs(w.mean()) < 0.05 * limit
            np.testing.assert_array_equal(b, 0.0)

    def test_zero_model_is_uniform(self):
        spec = NetworkSpec.mlp(3, [4], 5)
        model = Model(spec, tuple(np.zeros((l.out_dim, l.in_dim)) for l in spec.layers),
                      tuple(np.zeros(l.out_dim) for l in spec.layers), seed=0)
        logits = forward(model, np.ones((2, 3))).logits
        np.testing.assert_array_equal(logits, 0.0)
        np.testing.assert_allclose(softmax_rows(logits), 0.2)

    def test_hand_computed_logits(self):
        spec = NetworkSpec(1, 2, (LayerSpec(1, 1, "none"), LayerSpec(1, 2, "none")))
        model = Model(spec, (np.array([[1.0]]), np.array([[2.0], [-1.0]])),
                      (np.array([0.0]), np.array([0.5, 0.0])), seed=0)
        record = forward(model, np.array([[3.0], [-1.0]]))
        np.testing.assert_allclose(record.logits, [[6.5, -3.0], [-1.5, 1.0]])
        np.testing.assert_allclose(record.penultimate, [[3.0], [-1.0]])

    def test_batch_order_preserved(self, rng):
        model = init_model(NetworkSpec.mlp(3, [5], 4), 1)
        x = rng.normal(size=(6, 3))
        full = forward(model, x).logits
        for i in range(6):
            np.testing.assert_allclose(forward(model, x[i]).logits[0], full[i])

    def test_dim_mismatch(self):
        model = init_model(NetworkSpec.mlp(3, [5], 4), 1)
        with pytest.raises(ShapeError):
            forward(model, np.zeros((2, 4)))

    def test_parameters_read_only(self):
        model = init_model(NetworkSpec.mlp(3, [5], 4), 1)
        with pytest.raises(ValueError):
            model.weights[0][0, 0] = 1.0


class TestBackward:
    def test_zero_upstream(self, rng):
        model = init_model(NetworkSpec.mlp(3, [5, 5], 4), 0)
        record = forward(model, rng.normal(size=(4, 3)))
        grads = backward(model, record, np.zeros((4, 4)))
        assert all(np.all(g == 0) for g in grads.as_list())

    def test_stale_record(self, rng):
        model = init_model(NetworkSpec.mlp(3, [5], 4), 0)
        record = forward(model, rng.normal(size=(4, 3)))
        stepped = sgd_step(model, backward(model, record, rng.normal(size=(4, 4))), _train_cfg(), 0)
        with pytest.raises(CacheError):
            backward(stepped, record, np.zeros((4, 4)))

    def test_duplicated_batch_same_mean_gradient(self, rng):
        model = init_model(NetworkSpec.mlp(3, [6], 3), 2)
        x = rng.normal(size=(3, 3))
        t = smooth_label_rows(np.array([0, 1, 2]), 0.0, 3)
        r1 = forward(model, x)
        g1 = backward(model, r1, ce_loss_and_grad(r1.logits, t)[1])
        x2, t2 = np.repeat(x, 2, axis=0), np.repeat(t, 2, axis=0)
        r2 = forward(model, x2)
        g2 = backward(model, r2, ce_loss_and_grad(r2.logits, t2)[1])
        for a, b in zip(g1.as_list(), g2.as_list()):
            np.testing.assert_allclose(a, b, atol=1e-14)

    def test_relu_net_matches_finite_differences(self, rng):
        model = init_model(NetworkSpec.mlp(4, [8, 8], 3), 5)
        x = rng.normal(size=(6, 4))
        t = smooth_label_rows(rng.integers(0, 3, size=6), 0.1, 3)
        assert grad_check(model, _ce(t), x, eps=1e-5, num_samples=120) <= 1e-4

    def test_linear_model(self, rng):
        model = init_model(NetworkSpec.mlp(3, [4], 3, activation="none"), 1)
        x = rng.normal(size=(5, 3))
        t = smooth_label_rows(rng.integers(0, 3, size=5), 0.0, 3)
        assert grad_check(model, _ce(t), x, eps=1e-5, num_samples=50) <= 1e-6

    def test_larger_step_larger_error(self, rng):
        model = init_model(NetworkSpec.mlp(3, [6], 3, activation="tanh"), 3)
        x = rng.normal(size=(5, 3))
        t = smooth_label_rows(rng.integers(0, 3, size=5), 0.0, 3)
        coarse = grad_check(model, _ce(t), x, eps=1e-3, num_samples=40, seed=9)
        fine = grad_check(model, _ce(t), x, eps=1e-5, num_samples=40, seed=9)
        assert coarse > fine


class TestSgd:
    def test_zero_lr_leaves_parameters(self, rng):
        model = init_model(NetworkSpec.mlp(3, [4], 2), 0)
        cfg = _train_cfg(decay_epochs=[0], decay_factor=0.0, weight_decay=5e-4, momentum=0.9)
        assert lr_at(cfg, 0) == 0.0
        grads = Gradients(tuple(rng.normal(size=w.shape) for w in model.weights),
                          tuple(rng.normal(size=b.shape) for b in model.biases))
        stepped = sgd_step(model, grads, cfg, 0)
        for p, q in zip(model.parameters(), stepped.parameters()):
            np.testing.assert_array_equal(p, q)
        assert stepped.version == model.version + 1

    def test_plain_step(self, rng):
        model = init_model(NetworkSpec.mlp(2, [3], 2), 0)
        grads = Gradients(tuple(rng.normal(size=w.shape) for w in model.weights),
                          tuple(rng.normal(size=b.shape) for b in model.biases))
        stepped = sgd_step(model, grads, _train_cfg(learning_rate=0.3), 0)
        for p, g, q in zip(model.parameters(), grads.as_list(), stepped.parameters()):
            np.testing.assert_allclose(q, p - 0.3 * g)

    def test_momentum_buffer(self, rng):
        model = init_model(NetworkSpec.mlp(2, [3], 2), 0)
        g = rng.normal(size=model.weights[0].shape)
        grads = Gradients((g,) + tuple(np.zeros_like(w) for w in model.weights[1:]),
                          tuple(np.zeros_like(b) for b in model.biases))
        cfg = _train_cfg(momentum=0.9)
        once = sgd_step(model, grads, cfg, 0)
        twice = sgd_step(once, grads, cfg, 0)
        np.testing.assert_allclose(twice.velocity[0], g * 1.9)
        np.testing.assert_allclose(twice.weights[0], model.weights[0] - 0.1 * g - 0.1 * 1.9 * g)

    def test_biases_not_decayed(self):
        model = init_model(NetworkSpec.mlp(2, [3], 2), 0)
        model = model.with_parameters([p + 1.0 for p in model.parameters()])
        stepped = sgd_step(model, _zero_grads(model), _train_cfg(weight_decay=0.1), 0)
        np.testing.assert_array_equal(stepped.biases[0], model.biases[0])
        np.testing.assert_allclose(stepped.weights[0], model.weights[0] * (1 - 0.1 * 0.1))

    def test_non_finite_gradient(self):
        model = init_model(NetworkSpec.mlp(2, [3], 2), 0)
        bad = _zero_grads(model)
        bad = Gradients((np.full_like(bad.weights[0], np.nan),) + bad.weights[1:], bad.biases)
        with pytest.raises(DivergenceError):
            sgd_step(model, bad, _train_cfg(), 0)

    def test_binary_latent_weights_clipped(self):
        model = init_model(NetworkSpec.mlp(2, [3, 3], 2, activation="binary-sign", binary_weights=True), 0)
        grads = Gradients(tuple(np.full_like(w, -100.0) for w in model.weights),
                          tuple(np.zeros_like(b) for b in model.biases))
        stepped = sgd_step(model, grads, _train_cfg(learning_rate=1.0), 0)
        assert np.all(np.abs(stepped.weights[1]) <= 1.5)
        assert np.all(stepped.weights[0] > 1.5)  # real-valued layers are not clipped

    def test_schedules(self):
        step = _train_cfg(epochs=10, learning_rate=1.0, decay_epochs=[3, 6], decay_factor=0.1)
        assert [lr_at(step, e) for e in (0, 3, 6)] == pytest.approx([1.0, 0.1, 0.01])
        linear = _train_cfg(epochs=10, learning_rate=1.0, schedule="linear")
        assert [lr_at(linear, e) for e in (0, 5, 9)] == pytest.approx([1.0, 0.5, 0.1])


class TestFit:
    def _separable(self, rng):
        x = np.concatenate([rng.normal(size=(100, 2)) + [3.0, 0.0], rng.normal(size=(100, 2)) - [3.0, 0.0]])
        y = np.repeat([0, 1], 100)
        return x, y

    def test_separable_task(self, rng):
        x, y = self._separable(rng)
        t = smooth_label_rows(y, 0.0, 2)
        model = init_model(NetworkSpec.mlp(2, [8], 2), 0)
        cfg = _train_cfg(epochs=100, batch_size=32, learning_rate=0.05, momentum=0.9)
        model = fit(model, x, lambda idx, z: ce_loss_and_grad(z, t[idx]), cfg)
        acc = np.mean(forward(model, x).logits.argmax(axis=1) == y)
        assert acc >= 0.99

    def test_deterministic_and_logs_every_epoch(self, rng):
        x, y = self._separable(rng)
        t = smooth_label_rows(y, 0.1, 2)
        cfg = _train_cfg(epochs=5, batch_size=16, momentum=0.9, weight_decay=5e-4)
        runs = []
        for _ in range(2):
            seen = []
            model = fit(init_model(NetworkSpec.mlp(2, [8], 2), 0), x,
                        lambda idx, z: ce_loss_and_grad(z, t[idx]), cfg,
                        on_epoch=lambda e, m, loss: seen.append((e, loss)))
            runs.append((seen, parameter_hash(model)))
        assert runs[0] == runs[1]
        assert [e for e, _ in runs[0][0]] == list(range(5))

    def test_full_batch_linear_model_loss_never_increases(self, rng):
        # no nonlinearity anywhere: the network computes an affine map, trained with CE
        x = np.concatenate([rng.normal(size=(30, 3)) * 0.5 + 0.5, rng.normal(size=(30, 3)) * 0.5 - 0.5])
        t = smooth_label_rows(np.repeat([0, 1], 30), 0.0, 2)
        model = init_model(NetworkSpec.mlp(3, [4], 2, activation="none"), 2)
        losses = []
        fit(model, x, lambda idx, z: ce_loss_and_grad(z, t[idx]), _train_cfg(epochs=40, batch_size=60),
            on_epoch=lambda e, m, loss: losses.append(loss))
        assert len(losses) == 40
        assert np.all(np.diff(losses) <= 1e-12)
        assert losses[-1] < losses[0]

    def test_huge_learning_rate_diverges(self, rng):
        x, y = self._separable(rng)
        t = smooth_label_rows(y, 0.0, 2)
        cfg = _train_cfg(epochs=5, batch_size=16, learning_rate=1e300)
        with pytest.raises(DivergenceError):
            fit(init_model(NetworkSpec.mlp(2, [8], 2, activation="none"), 0), x,
                lambda idx, z: ce_loss_and_grad(z, t[idx]), cfg)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        model = init_model(NetworkSpec.mlp(3, [4, 5], 2, activation="tanh"), 11)
        path = save_checkpoint(tmp_path / "m.ckpt", model, epoch=7)
        loaded, header = load_checkpoint(path)
        assert header["epoch"] == 7 and header["seed"] == 11
        assert header["num_parameters"] == model.num_parameters
        assert parameter_hash(loaded) == parameter_hash(model)
        x = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(forward(loaded, x).logits, forward(model, x).logits)

    def test_layout(self, tmp_path):
        model = init_model(NetworkSpec.mlp(2, [3], 2), 0)
        raw = save_checkpoint(tmp_path / "m.ckpt", model, 0).read_bytes()
        magic, header, block = raw.split(b"\n", 2)
        assert magic == b"LSDISTILL-CKPT 1"
        flat = np.frombuffer(block, dtype="<f8")
        np.testing.assert_array_equal(flat[:6], model.weights[0].ravel())
        np.testing.assert_array_equal(flat[6:9], model.biases[0])

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"nope\n{}\n")
        with pytest.raises(SpecError):
            load_checkpoint(p)
