import numpy as np
import pytest

from ewflow.nn import (
    AdamState,
    MlpModel,
    adam_step,
    backward,
    forward,
    forward_cached,
    load_checkpoint,
    save_checkpoint,
    soft_update,
    time_embedding,
)
from ewflow.rng import Rng


def test_zero_parameters_give_zero_output():
    model = MlpModel.init(2, 2, Rng(0), hidden=(16, 16), embed_dim=8)
    for w in model.weights:
        w[:] = 0.0
    out = forward(model, Rng(1).normal((5, 2)), np.full(5, 0.3))
    assert np.all(out == 0.0)


def test_parameter_count_formula():
    model = MlpModel.init(2, 2, Rng(0), hidden=(16, 16), embed_dim=8)
    sizes = [2 + 8, 16, 16, 2]
    want = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    assert model.n_params == want == len(model.flat_params())


def test_pure_linear_layer_is_matrix_multiply():
    model = MlpModel.init(3, 2, Rng(0), hidden=(), embed_dim=0)
    x = Rng(1).normal((7, 3))
    want = x @ model.weights[0] + model.biases[0]
    assert np.abs(forward(model, x) - want).max() < 1e-14


def test_output_depends_on_time():
    model = MlpModel.init(2, 2, Rng(2), hidden=(32,), embed_dim=16)
    x = Rng(3).normal((4, 2))
    a = forward(model, x, np.full(4, 0.2))
    b = forward(model, x, np.full(4, 0.8))
    assert np.linalg.norm(a - b) > 0


def test_time_embedding_shape_and_range():
    emb = time_embedding(np.array([0.0, 0.5, 1.0]), 64)
    assert emb.shape == (3, 64)
    assert np.abs(emb).max() <= 1.0
    with pytest.raises(ValueError):
        time_embedding(np.array([0.5]), 7)


def test_backward_matches_finite_differences():
    rng = Rng(4)
    model = MlpModel.init(2, 2, rng, hidden=(16, 16), embed_dim=8)
    x = rng.normal((6, 2))
    t = rng.uniform(0.1, 0.9, 6)
    up = rng.normal((6, 2))
    _, cache = forward_cached(model, x, t)
    gw, gb = backward(model, cache, up)
    prng = Rng(5)
    h = 1e-4
    for _ in range(20):
        li = int(prng.integers(0, len(model.weights)))
        r = int(prng.integers(0, model.weights[li].shape[0]))
        c = int(prng.integers(0, model.weights[li].shape[1]))
        orig = model.weights[li][r, c]
        model.weights[li][r, c] = orig + h
        fp = float((forward(model, x, t) * up).sum())
        model.weights[li][r, c] = orig - h
        fm = float((forward(model, x, t) * up).sum())
        model.weights[li][r, c] = orig
        fd = (fp - fm) / (2 * h)
        assert abs(fd - gw[li][r, c]) / max(abs(fd), 1e-6) < 1e-4
    # bias probe
    fd_b = None
    orig = model.biases[0][0]
    model.biases[0][0] = orig + h
    fp = float((forward(model, x, t) * up).sum())
    model.biases[0][0] = orig - h
    fm = float((forward(model, x, t) * up).sum())
    model.biases[0][0] = orig
    fd_b = (fp - fm) / (2 * h)
    assert abs(fd_b - gb[0][0]) / max(abs(fd_b), 1e-6) < 1e-4


def test_zero_upstream_zero_gradients():
    model = MlpModel.init(2, 2, Rng(6), hidden=(8,), embed_dim=4)
    _, cache = forward_cached(model, Rng(7).normal((3, 2)), np.full(3, 0.5))
    gw, gb = backward(model, cache, np.zeros((3, 2)))
    assert all(np.all(g == 0) for g in gw) and all(np.all(g == 0) for g in gb)


def test_linear_gradient_is_outer_product():
    model = MlpModel.init(3, 2, Rng(8), hidden=(), embed_dim=0)
    x = Rng(9).normal((5, 3))
    up = Rng(10).normal((5, 2))
    _, cache = forward_cached(model, x)
    gw, gb = backward(model, cache, up)
    assert np.abs(gw[0] - x.T @ up).max() < 1e-12
    assert np.abs(gb[0] - up.sum(axis=0)).max() < 1e-12


def test_adam_zero_gradient_is_noop():
    model = MlpModel.init(2, 1, Rng(11), hidden=(4,), embed_dim=2)
    before = model.flat_params().copy()
    st = AdamState.for_model(model, lr=1e-3)
    zeros_w = [np.zeros_like(w) for w in model.weights]
    zeros_b = [np.zeros_like(b) for b in model.biases]
    adam_step(st, model, zeros_w, zeros_b)
    assert np.array_equal(model.flat_params(), before)


def test_adam_first_step_magnitude():
    # from zero moments with constant gradient g the bias-corrected step is
    # -lr * g / (|g| + eps), i.e. about -lr * sign(g)
    model = MlpModel.init(1, 1, Rng(12), hidden=(), embed_dim=0)
    model.weights[0][:] = 0.0
    model.biases[0][:] = 0.0
    st = AdamState.for_model(model, lr=1e-3)
    gw = [np.ones_like(model.weights[0])]
    gb = [np.zeros_like(model.biases[0])]
    adam_step(st, model, gw, gb)
    assert model.weights[0][0, 0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_constant_gradient_reaches_sign_step():
    model = MlpModel.init(1, 1, Rng(13), hidden=(), embed_dim=0)
    st = AdamState.for_model(model, lr=1e-3)
    g = 0.37
    prev = model.weights[0][0, 0]
    for _ in range(500):
        prev = model.weights[0][0, 0]
        adam_step(st, model, [np.full_like(model.weights[0], g)], [np.zeros_like(model.biases[0])])
    assert abs((prev - model.weights[0][0, 0]) - 1e-3) < 1e-5


def test_soft_update_examples():
    a = MlpModel.init(2, 2, Rng(14), hidden=(4,), embed_dim=2)
    b = MlpModel.init(2, 2, Rng(15), hidden=(4,), embed_dim=2)
    t = a.copy()
    soft_update(t, b, 1.0)
    assert np.array_equal(t.flat_params(), b.flat_params())
    t = a.copy()
    soft_update(t, b, 0.0)
    assert np.array_equal(t.flat_params(), a.flat_params())
    t = a.copy()
    t.weights[0][:] = 0.0
    online = a.copy()
    online.weights[0][:] = 1.0
    soft_update(t, online, 0.005)
    assert t.weights[0][0, 0] == pytest.approx(0.005)


def test_checkpoint_round_trip(tmp_path):
    model = MlpModel.init(2, 2, Rng(16), hidden=(8, 8), embed_dim=4, context_dim=3, accepts_beta=True)
    path = tmp_path / "model.bin"
    save_checkpoint(model, path, meta={"model_kind": "score", "beta": 2.0})
    back, meta = load_checkpoint(path)
    assert meta["model_kind"] == "score" and meta["beta"] == 2.0
    assert back.arch() == model.arch()
    # parameters survive up to float32 quantization
    assert np.abs(back.flat_params() - model.flat_params()).max() < 1e-6
    x = Rng(17).normal((4, 2))
    ctx = Rng(18).normal((4, 3))
    a = forward(model, x, np.full(4, 0.4), context=ctx, beta_norm=np.full(4, 0.5))
    b = forward(back, x, np.full(4, 0.4), context=ctx, beta_norm=np.full(4, 0.5))
    assert np.abs(a - b).max() < 1e-5


def test_checkpoint_rejects_corrupt_blob(tmp_path):
    model = MlpModel.init(2, 2, Rng(19), hidden=(8,), embed_dim=4)
    path = tmp_path / "model.bin"
    save_checkpoint(model, path)
    data = path.read_bytes()
    path.write_bytes(data[:-8])  # truncate parameters
    with pytest.raises(ValueError, match="parameter count"):
        load_checkpoint(path)


def test_training_determinism_bit_identical():
    def run():
        model = MlpModel.init(2, 2, Rng(20), hidden=(16,), embed_dim=8)
        st = AdamState.for_model(model, lr=1e-3)
        data_rng = Rng(21)
        for _ in range(50):
            x = data_rng.normal((32, 2))
            t = data_rng.uniform(0.1, 0.9, 32)
            target = data_rng.normal((32, 2))
            out, cache = forward_cached(model, x, t)
            gw, gb = backward(model, cache, 2 * (out - target) / 32)
            adam_step(st, model, gw, gb)
        return model.flat_params()

    assert np.array_equal(run(), run())


def test_input_validation():
    model = MlpModel.init(2, 2, Rng(22), hidden=(8,), embed_dim=4, context_dim=2)
    x = np.zeros((3, 2))
    with pytest.raises(ValueError, match="context"):
        forward(model, x, np.full(3, 0.5))
    with pytest.raises(ValueError, match="beta"):
        forward(model, x, np.full(3, 0.5), context=np.zeros((3, 2)), beta_norm=np.full(3, 0.5))
    no_ctx = MlpModel.init(2, 2, Rng(23), hidden=(8,), embed_dim=4)
    with pytest.raises(ValueError, match="dim"):
        forward(no_ctx, np.zeros((3, 5)), np.full(3, 0.5))
