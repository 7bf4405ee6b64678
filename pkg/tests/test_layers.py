import numpy as np
import pytest
from gradcheck import numeric_grad, rel_error

from eegssfi.nn import layers as L
from eegssfi.nn.model import build_model, l2_penalty

TOL = 1e-4


def _check(f, analytic, x, h=1e-5):
    assert rel_error(analytic, numeric_grad(f, x, h)) < TOL


def test_conv_gradients(rng):
    x = rng.standard_normal((2, 5, 6, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)
    g = rng.standard_normal((2, 5, 6, 4))
    out, cache = L.conv2d_forward(x, w, b)
    dx, dw, db = L.conv2d_backward(g, cache)
    loss = lambda: np.sum(L.conv2d_forward(x, w, b)[0] * g)
    _check(loss, dx, x)
    _check(loss, dw, w)
    _check(loss, db, b)


def test_conv_matches_direct_sum(rng):
    x = rng.standard_normal((1, 4, 4, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    out, _ = L.conv2d_forward(x, w, b)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for i in range(4):
        for j in range(4):
            ref = np.einsum("abc,abcf->f", xp[0, i:i + 3, j:j + 3], w) + b
            np.testing.assert_allclose(out[0, i, j], ref, atol=1e-12)


def test_conv_shape_errors(rng):
    with pytest.raises(ValueError):
        L.conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))
    with pytest.raises(ValueError):
        L.conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 2, 1)), np.zeros(2))


def test_pool_gradients(rng):
    # distinct values keep the argmax stable under the finite-difference step
    x = rng.permutation(2 * 4 * 6 * 3).reshape(2, 4, 6, 3).astype(float) * 0.1
    g = rng.standard_normal((2, 2, 3, 3))
    _, idx = L.maxpool_forward(x)
    _check(lambda: np.sum(L.maxpool_forward(x)[0] * g), L.maxpool_backward(g, idx), x)


def test_pool_odd_dims():
    with pytest.raises(ValueError):
        L.maxpool_forward(np.zeros((1, 3, 4, 1)))


def test_pool_tie_rule():
    x = np.array([[5.0, 5.0], [5.0, 1.0]]).reshape(1, 2, 2, 1)
    out, idx = L.maxpool_forward(x)
    assert out.item() == 5.0 and idx.item() == 0
    d = L.maxpool_backward(np.full((1, 1, 1, 1), 2.0), idx)
    assert d.sum() == 2.0 and d[0, 0, 0, 0] == 2.0


def test_relu_gradient(rng):
    x = rng.standard_normal((3, 7))
    x[np.abs(x) < 1e-3] = 0.5
    g = rng.standard_normal((3, 7))
    _, mask = L.relu_forward(x)
    _check(lambda: np.sum(L.relu_forward(x)[0] * g), L.relu_backward(g, mask), x)


def test_batchnorm_train_gradients(rng):
    x = rng.standard_normal((4, 3, 3, 5)) * 2 + 1
    gamma = rng.standard_normal(5)
    beta = rng.standard_normal(5)
    g = rng.standard_normal(x.shape)

    def loss():
        rm, rv = np.zeros(5), np.ones(5)
        return np.sum(L.batchnorm_forward(x, gamma, beta, rm, rv, "train")[0] * g)

    _, cache = L.batchnorm_forward(x, gamma, beta, np.zeros(5), np.ones(5), "train")
    dx, dgamma, dbeta = L.batchnorm_backward(g, cache)
    _check(loss, dx, x)
    _check(loss, dgamma, gamma)
    _check(loss, dbeta, beta)


def test_batchnorm_infer_gradient(rng):
    x = rng.standard_normal((2, 2, 2, 3))
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    rm, rv = rng.standard_normal(3), rng.random(3) + 0.5
    g = rng.standard_normal(x.shape)
    _, cache = L.batchnorm_forward(x, gamma, beta, rm, rv, "infer")
    dx, _, _ = L.batchnorm_backward(g, cache)
    _check(lambda: np.sum(L.batchnorm_forward(x, gamma, beta, rm, rv, "infer")[0] * g), dx, x)


def test_batchnorm_train_normalizes_and_updates(rng):
    x = rng.standard_normal((8, 4, 4, 2)) * 3 + 2
    rm, rv = np.zeros(2), np.ones(2)
    out, _ = L.batchnorm_forward(x, np.ones(2), np.zeros(2), rm, rv, "train")
    np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1, atol=1e-4)
    mu = x.mean(axis=(0, 1, 2))
    var_unbiased = x.reshape(-1, 2).var(axis=0, ddof=1)
    np.testing.assert_allclose(rm, 0.1 * mu)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var_unbiased)


def test_batchnorm_infer_uses_running_stats():
    x = np.full((1, 1, 1, 2), 3.0)
    out, _ = L.batchnorm_forward(x, np.ones(2), np.zeros(2), np.full(2, 1.0), np.full(2, 4.0), "infer")
    np.testing.assert_allclose(out.ravel(), 2.0 / np.sqrt(4.0 + L.BN_EPS))


def test_batchnorm_batch_of_one():
    with pytest.raises(ValueError):
        L.batchnorm_forward(np.zeros((1, 2, 2, 1)), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), "train")
    with pytest.raises(ValueError):
        L.batchnorm_forward(np.zeros((2, 2, 2, 1)), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), "eval")


def test_dense_gradients(rng):
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 3))
    b = rng.standard_normal(3)
    g = rng.standard_normal((4, 3))
    _, cache = L.dense_forward(x, w, b)
    dx, dw, db = L.dense_backward(g, cache)
    loss = lambda: np.sum(L.dense_forward(x, w, b)[0] * g)
    _check(loss, dx, x)
    _check(loss, dw, w)
    _check(loss, db, b)


def test_softmax_cross_entropy_gradient(rng):
    logits = rng.standard_normal((5, 3)) * 3
    labels = np.array([0, 2, 1, 1, 0])
    _, d = L.softmax_cross_entropy(logits, labels)
    _check(lambda: L.softmax_cross_entropy(logits, labels)[0], d, logits)


def test_softmax_rows_and_stability():
    logits = np.array([[1000.0, 0.0, -1000.0], [0.0, 0.0, 0.0], [-5.0, 2.0, 7.5]])
    p = L.softmax(logits)
    assert np.all(np.isfinite(p))
    assert np.max(np.abs(p.sum(axis=1) - 1)) < 1e-12
    np.testing.assert_allclose(p[1], 1 / 3)
    loss, _ = L.softmax_cross_entropy(logits[:1], np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-12)
    loss, _ = L.softmax_cross_entropy(logits[1:2], np.array([2]))
    assert loss == pytest.approx(np.log(3))


def test_softmax_cross_entropy_label_errors():
    with pytest.raises(ValueError):
        L.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        L.softmax_cross_entropy(np.zeros((2, 3)), np.array([0]))


def test_l2_penalty_gradient(rng):
    m = build_model(grid=16, seed=1, dtype=np.float64)
    lam = 0.01
    pen, grads = l2_penalty(m, lam)
    assert set(grads) == set(m.regularized_names())
    assert "out_w" not in grads and "conv1_b" not in grads
    for name in ("conv3_w", "fc2_w"):
        w = m.params[name]
        idx = rng.choice(w.size, 20, replace=False)
        num = numeric_grad(lambda: l2_penalty(m, lam)[0], w, idx=idx)
        assert rel_error(grads[name].reshape(-1)[idx], num.reshape(-1)[idx]) < TOL


def test_dropout_statistics():
    rng = np.random.default_rng(0)
    x = np.ones((200, 500))
    out, mask = L.dropout_forward(x, 0.3, "train", rng)
    assert abs(np.mean(out == 0) - 0.3) < 0.01
    assert abs(out.mean() - 1.0) < 0.01
    np.testing.assert_array_equal(L.dropout_backward(x, mask), out)


def test_dropout_infer_identity():
    x = np.arange(6.0)
    out, mask = L.dropout_forward(x, 0.3, "infer")
    assert out is x and mask is None
    with pytest.raises(ValueError):
        L.dropout_forward(x, 1.0, "train", np.random.default_rng(0))
    with pytest.raises(ValueError):
        L.dropout_forward(x, 0.3, "train", None)
