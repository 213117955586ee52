import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from p2pgrid import surrogate as sg
from p2pgrid.config import ModelShape, TrainConfig

SMALL = ModelShape(d_model=16, n_layers=1, n_heads=2, d_ff=32)


def features(rng, s=None, n=33):
    size = (n, 5) if s is None else (s, n, 5)
    X = rng.normal(size=size)
    X[..., 0] *= 300.0
    X[..., 1] = np.abs(X[..., 1]) * 100.0
    return X


def model(seed=0, shape=ModelShape()):
    m = sg.SurrogateModel.init(shape, seed=seed)
    rng = np.random.default_rng(seed + 100)
    # perturb everything so LN gains, biases and normalisation all matter
    for k, v in m.params.items():
        m.params[k] = v + 0.1 * rng.normal(size=v.shape)
    m.x_mean = np.array([10.0, 80.0, 0.1, -0.2, 0.0])
    m.x_std = np.array([300.0, 100.0, 1.0, 1.0, 1.0])
    m.y_mean, m.y_std = -20.0, 250.0
    return m


@pytest.fixture(scope="module")
def mdl():
    return model()


def test_attention_rows_sum_to_one(mdl, rng):
    for A in sg.attention_weights(mdl, features(rng, 8)):
        assert A.shape == (8, 4, 33, 33)
        assert np.max(np.abs(A.sum(axis=-1) - 1.0)) <= 1e-6
        assert np.all(A >= 0)


def test_softmax_is_shift_invariant_and_stable():
    s = np.array([[1000.0, 1001.0, 999.0]])
    p = sg.softmax(s)
    assert np.all(np.isfinite(p))
    assert np.allclose(p, sg.softmax(s - 1000.0))


def test_layer_norm_statistics(mdl, rng):
    for mean, var in sg.layer_norm_stats(mdl, features(rng, 4)):
        assert np.max(np.abs(mean)) <= 1e-6
        assert np.max(np.abs(var - 1.0)) <= 1e-4


def test_gelu_values():
    assert sg.gelu(np.array(0.0)) == 0.0
    assert sg.gelu(np.array(10.0)) == pytest.approx(10.0)
    assert sg.gelu(np.array(1.0)) == pytest.approx(0.8413447460685429)


def test_input_gradient_matches_finite_differences(mdl):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        X = features(rng)
        bus = int(rng.integers(33))
        g = sg.input_gradient(mdl, X, bus)
        h = 1e-3
        Xp, Xm = X.copy(), X.copy()
        Xp[bus, 0] += h
        Xm[bus, 0] -= h
        fd = (sg.forward(mdl, Xp)[bus] - sg.forward(mdl, Xm)[bus]) / (2 * h)
        worst = max(worst, abs(g - fd) / max(abs(fd), 1e-8))
    assert worst <= 1e-4


def test_parameter_gradient_matches_finite_differences():
    m = model(1, SMALL)
    rng = np.random.default_rng(2)
    X, y = features(rng, 3, 6), rng.normal(size=(3, 6))
    Xn = (X - m.x_mean) / m.x_std

    def loss(mm):
        yh, _, _ = sg._forward(mm, Xn)
        return float(((yh - y) ** 2).sum())

    yh, cache, _ = sg._forward(m, Xn, keep=True)
    grads, _ = sg._backward(m, cache, 2.0 * (yh - y))
    h = 1e-6
    for name in ("embed.W", "layer0.Wq", "layer0.Wk", "layer0.ln1.g", "layer0.W2", "head.W", "head.b"):
        flat = m.params[name].reshape(-1)
        for j in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            keep = flat[j]
            flat[j] = keep + h
            up = loss(m)
            flat[j] = keep - h
            dn = loss(m)
            flat[j] = keep
            fd = (up - dn) / (2 * h)
            assert grads[name].reshape(-1)[j] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_predict_and_slopes_agrees_with_single_calls(mdl, rng):
    X = features(rng)
    idx = [16, 21, 24, 31]
    pred, slope = sg.predict_and_slopes(mdl, X, idx)
    full = sg.forward(mdl, X)
    assert np.allclose(pred, full[idx], atol=1e-10)
    for b, s in zip(idx, slope):
        assert s == pytest.approx(sg.input_gradient(mdl, X, b), rel=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_permutation_equivariance(seed):
    m = model(0, SMALL)
    rng = np.random.default_rng(seed)
    X = features(rng, n=12)
    perm = rng.permutation(12)
    assert np.max(np.abs(sg.forward(m, X[perm]) - sg.forward(m, X)[perm])) <= 1e-9


def test_zero_head_predicts_the_target_mean(rng):
    m = model()
    m.params["head.W"][:] = 0.0
    m.params["head.b"][:] = 0.0
    assert np.allclose(sg.forward(m, features(rng)), m.y_mean)


def test_save_load_is_bitwise(mdl, tmp_path, rng):
    path = tmp_path / "m.bin"
    sg.save(mdl, path)
    back = sg.load(path, expect=ModelShape())
    assert sg.to_bytes(back) == path.read_bytes()
    X = features(rng, 3)
    assert sg.forward(back, X).tobytes() == sg.forward(mdl, X).tobytes()


def test_corrupted_files_are_rejected(mdl, tmp_path):
    blob = sg.to_bytes(mdl)
    with pytest.raises(sg.ModelFormatError, match="checksum"):
        sg.from_bytes(blob[:-8])
    flipped = bytearray(blob)
    flipped[-3] ^= 0xFF
    with pytest.raises(sg.ModelFormatError, match="checksum"):
        sg.from_bytes(bytes(flipped))
    with pytest.raises(sg.ModelFormatError):
        sg.from_bytes(b"hello")
    with pytest.raises(sg.ModelFormatError, match="shape"):
        sg.from_bytes(blob, expect=SMALL)
    with pytest.raises(sg.ModelFormatError):
        sg.load(tmp_path / "missing.bin")


def test_bad_shapes():
    with pytest.raises(sg.SurrogateError):
        sg.SurrogateModel.init(ModelShape(d_model=10, n_heads=4))
    m = model(0, SMALL)
    with pytest.raises(sg.SurrogateError):
        sg.forward(m, np.zeros((4, 3)))


def linear_data(s=300, n=8, seed=0):
    rng = np.random.default_rng(seed)
    X = features(rng, s, n)
    y = 0.9 * X[..., 0] - 0.3 * X[..., 1] + 5.0
    return X, y


def test_learns_a_linear_map():
    X, y = linear_data()
    m, hist = sg.train(X, y, TrainConfig(learning_rate=3e-3, epochs=200, patience=0,
                                              batch_size=32, seed=3), SMALL)
    Xt, yt = linear_data(100, seed=9)
    assert sg.evaluate(m, Xt, yt).r2 >= 0.999
    slopes = [sg.input_gradient(m, Xt[k], 2) for k in range(10)]
    assert np.median(slopes) == pytest.approx(0.9, abs=0.05)
    assert hist.records[-1].train_loss < hist.records[0].train_loss / 10


def test_constant_target_is_learned_exactly():
    X, _ = linear_data(50)
    y = np.full(X.shape[:2], 42.0)
    m, _ = sg.train(X, y, TrainConfig(epochs=3, batch_size=16), SMALL)
    assert np.allclose(sg.forward(m, X[:5]), 42.0, atol=1e-6)


def test_training_is_deterministic():
    X, y = linear_data(60)
    cfg = TrainConfig(epochs=3, batch_size=16, seed=11)
    a, ha = sg.train(X, y, cfg, SMALL)
    b, hb = sg.train(X, y, cfg, SMALL)
    assert sg.to_bytes(a) == sg.to_bytes(b)
    assert ha.to_csv() == hb.to_csv()


def test_best_checkpoint_is_returned():
    X, y = linear_data(80)
    m, hist = sg.train(X, y, TrainConfig(epochs=8, batch_size=16), SMALL)
    best = min(r.val_loss for r in hist.records)
    assert hist.records[hist.best_epoch - 1].val_loss == best


def test_training_rejects_bad_input():
    X, y = linear_data(10)
    with pytest.raises(sg.SurrogateError):
        sg.train(X, y[:, :3], TrainConfig(epochs=1), SMALL)
    y[0, 0] = np.nan
    with pytest.raises(sg.SurrogateError):
        sg.train(X, y, TrainConfig(epochs=1), SMALL)


def test_divergence_is_reported():
    X, y = linear_data(20)
    with pytest.raises(sg.TrainingDiverged):
        with np.errstate(all="ignore"):
            sg.train(X, y, TrainConfig(epochs=2, learning_rate=1e300), SMALL)


def test_history_csv():
    X, y = linear_data(20)
    _, hist = sg.train(X, y, TrainConfig(epochs=2, batch_size=8), SMALL)
    lines = hist.to_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,grad_norm"
    assert len(lines) == 3
