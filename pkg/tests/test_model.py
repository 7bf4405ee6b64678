import numpy as np
import pytest
from gradcheck import numeric_grad, rel_error

from eegssfi.nn.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from eegssfi.nn.layers import softmax
from eegssfi.nn.model import TAPS, CnnModel, build_model, loss_and_grads
from eegssfi.nn.optim import AdamState, adam_step
from eegssfi.ssfi import Normalizer


def test_param_count_grid64():
    # conv: 6*9*32+32, 32*9*16+16, 3x(16*9*16+16); bn: 4 blocks x 2 x (32,16,16,16)
    # fc: 256*64+64, 64*32+32, 32*3+3
    assert build_model(64).n_params() == 32131


def test_output_shapes():
    m = build_model(64, seed=0)
    x = np.random.default_rng(0).random((2, 64, 64, 6)).astype(np.float32)
    logits = m.logits(x)
    assert logits.shape == (2, 3)
    assert np.max(np.abs(m.predict_proba(x).sum(axis=1) - 1)) < 1e-6
    assert m.predict(x).shape == (2,)


@pytest.mark.parametrize("layer,shape", [("CNV1", (1, 32, 32, 32)), ("CNV2", (1, 16, 16, 16)),
                                         ("CNV5", (1, 2, 2, 16)), ("FC1", (1, 64)), ("OUT", (1, 3))])
def test_layer_taps(layer, shape):
    m = build_model(32)
    out, _ = m.forward(np.zeros((1, 32, 32, 6)), stop=layer)
    assert out.shape == shape
    assert layer in TAPS


def test_bad_grid_and_input():
    with pytest.raises(ValueError):
        CnnModel(grid=40)
    with pytest.raises(ValueError):
        build_model(16).forward(np.zeros((1, 16, 16, 5)))
    with pytest.raises(ValueError):
        build_model(16).op_index("CNV9")


def test_init_deterministic():
    a, b = build_model(16, seed=3), build_model(16, seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert not np.array_equal(build_model(16, seed=4).params["conv1_w"], a.params["conv1_w"])


def test_forward_rejects_nonfinite():
    x = np.zeros((1, 16, 16, 6))
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        build_model(16).forward(x)


def test_end_to_end_gradient(rng):
    """Full reduced model in float64 train mode, dropout disabled."""
    m = build_model(16, seed=2, dtype=np.float64)
    x = rng.standard_normal((3, 16, 16, 6))
    y = np.array([0, 1, 2])
    saved = {k: v.copy() for k, v in m.buffers.items()}

    def loss():
        for k, v in saved.items():
            m.buffers[k][...] = v
        return loss_and_grads(m, x, y, "train", dropout=False)[0]

    _, grads, _ = loss_and_grads(m, x, y, "train", dropout=False)
    for name, p in m.params.items():
        idx = rng.choice(p.size, min(p.size, 12), replace=False)
        num = numeric_grad(loss, p, h=1e-5, idx=idx)
        assert rel_error(grads[name].reshape(-1)[idx], num.reshape(-1)[idx], floor=1e-6) < 1e-3, name
    num_x = numeric_grad(loss, x, idx=rng.choice(x.size, 12, replace=False))
    assert num_x.any()


def test_loss_decreases_on_separable_batch():
    rng = np.random.default_rng(0)
    m = build_model(16, seed=0)
    m.l2 = 0.0  # isolate the data term
    y = np.repeat([0, 1, 2], 6)
    x = rng.standard_normal((18, 16, 16, 6)).astype(np.float32) * 0.1
    for i, c in enumerate(y):
        x[i, :, :, c] += 1.0
    state = AdamState()
    first = None
    for step in range(40):
        loss, grads, _ = loss_and_grads(m, x, y, "train", np.random.default_rng(step))
        first = loss if first is None else first
        adam_step(m.params, grads, state)
    assert loss < 0.7 * first
    assert np.mean(m.predict(x) == y) == 1.0


def test_copy_is_deep():
    m = build_model(16)
    c = m.copy(np.float64)
    c.params["conv1_w"][...] = 0
    assert m.params["conv1_w"].any()
    assert c.params["fc1_w"].dtype == np.float64


def test_checkpoint_round_trip(tmp_path, rng):
    m = build_model(32, seed=9)
    m.buffers["bn1_mean"][...] = rng.standard_normal(32)
    m.normalizer = Normalizer(np.arange(6.0), np.ones(6) * 2, "train", 10)
    m.majority = 2
    p = save_checkpoint(m, tmp_path / "m.ckpt", extra={"subject": 4})
    assert not (tmp_path / "m.ckpt.partial").exists()
    back = load_checkpoint(p)
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])
    np.testing.assert_array_equal(back.buffers["bn1_mean"], m.buffers["bn1_mean"])
    np.testing.assert_array_equal(back.normalizer.mean, m.normalizer.mean)
    assert back.majority == 2 and back.grid == 32
    assert checkpoint_bytes(back, {"subject": 4}) == p.read_bytes()
    x = rng.random((2, 32, 32, 6)).astype(np.float32)
    np.testing.assert_array_equal(back.logits(x), m.logits(x))


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"garbage-bytes-here")
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_softmax_of_model_logits_sums_to_one(rng):
    m = build_model(16, dtype=np.float64)
    p = softmax(m.logits(rng.standard_normal((4, 16, 16, 6))))
    assert np.max(np.abs(p.sum(axis=1) - 1)) < 1e-12


# --------------------------------------------------------------------------
# optimizer


def test_adam_first_step_is_lr_sign():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -10.0, 1e-3])}
    adam_step(p, g, AdamState(lr=0.1, eps=0.0))
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 2.9])


def test_adam_matches_reference(rng):
    w = rng.standard_normal(5)
    p = {"w": w.copy()}
    st = AdamState()
    m = v = np.zeros(5)
    for t in range(1, 6):
        g = rng.standard_normal(5)
        adam_step(p, {"w": g}, st)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12)
    assert st.step == 5


def test_adam_minimizes_quadratic():
    p = {"w": np.array([5.0, -3.0])}
    st = AdamState(lr=0.1)
    for _ in range(500):
        adam_step(p, {"w": 2 * p["w"]}, st)
    assert np.all(np.abs(p["w"]) < 1e-2)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState())
