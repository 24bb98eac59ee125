import numpy as np
import pytest

from gestream import autodiff as ad
from gestream.errors import FormatError


def _check(f, shape, seed=0, tol=1e-5):
    x = ad.Tensor(np.random.default_rng(seed).normal(size=shape),
                  requires_grad=True)
    assert ad.grad_check(f, x) < tol


def test_elementwise_grads():
    _check(lambda x: (ad.exp(x) * ad.sigmoid(x)).sum(), (3, 4))
    _check(lambda x: ad.tanh(x).mean(), (5,))
    _check(lambda x: ad.gelu(x).sum(), (4, 3), tol=1e-4)
    _check(lambda x: ad.log(ad.exp(x) + 1.0).sum(), (6,))
    _check(lambda x: ad.power(x * x + 1.0, -0.5).sum(), (4,))


def test_matmul_and_reshape_grads():
    w = ad.Tensor(np.random.default_rng(1).normal(size=(4, 3)))
    _check(lambda x: (x @ w).sum(), (5, 4))
    _check(lambda x: x.reshape(2, 6).swapaxes(0, 1).sum(), (3, 4))


def test_softmax_cross_entropy_grad():
    targets = np.array([1, 0, 2])

    def f(x):
        lp = ad.log_softmax(x, axis=-1)
        picked = lp[(np.arange(3), targets)]
        return -picked.mean()

    _check(f, (3, 4))


def test_layer_norm_grad():
    g = ad.Tensor(np.random.default_rng(2).normal(size=4))
    b = ad.Tensor(np.random.default_rng(3).normal(size=4))
    _check(lambda x: (ad.layer_norm(x, g, b) * ad.layer_norm(x, g, b)).sum(),
           (3, 4), tol=1e-4)


def test_conv_grads():
    w = ad.Tensor(np.random.default_rng(4).normal(size=(3, 2, 5)))
    b = ad.Tensor(np.zeros(5))
    _check(lambda x: ad.conv1d_causal(x, w, b, stride=2).sum(), (1, 8, 2))
    wt = ad.Tensor(np.random.default_rng(5).normal(size=(4, 5, 2)))
    bt = ad.Tensor(np.zeros(2))
    _check(lambda x: ad.conv_transpose1d_causal(x, wt, bt, stride=2).sum(),
           (1, 4, 5))


def test_embedding_and_getitem_grads():
    idx = np.array([0, 2, 2, 1])
    _check(lambda x: ad.embedding(x, idx).sum(), (3, 4))
    _check(lambda x: (x[idx] * x[idx]).sum(), (3, 4))


def test_conv1d_causality():
    # output row i sees inputs <= i*stride + stride - 1 and nothing later
    rng = np.random.default_rng(6)
    w = ad.Tensor(rng.normal(size=(3, 2, 4)))
    b = ad.Tensor(rng.normal(size=4))
    x = rng.normal(size=(1, 10, 2))
    base = ad.conv1d_causal(ad.Tensor(x), w, b, stride=2).data
    x2 = x.copy()
    x2[0, 6:] += 100.0
    pert = ad.conv1d_causal(ad.Tensor(x2), w, b, stride=2).data
    np.testing.assert_array_equal(base[0, :3], pert[0, :3])
    assert np.abs(pert[0, 3:] - base[0, 3:]).max() > 1.0


def test_straight_through_passes_soft_grad():
    soft = ad.Tensor(np.array([0.2, 0.5, 0.3]), requires_grad=True)
    hard = np.array([0.0, 1.0, 0.0])
    out = ad.straight_through(hard, soft)
    np.testing.assert_array_equal(out.data, hard)
    (out * ad.Tensor(np.array([1.0, 2.0, 3.0]))).sum().backward()
    np.testing.assert_array_equal(soft.grad, [1.0, 2.0, 3.0])


def test_adamw_matches_hand_step():
    lr, wd, b1, b2, eps = 1e-2, 0.01, 0.9, 0.999, 1e-8
    w0 = np.array([1.0, -2.0])
    g = np.array([0.5, 0.25])
    p = {"w": ad.Tensor(w0.copy(), requires_grad=True)}
    p["w"].grad = g.copy()
    opt = ad.AdamW(p, lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    opt.step()
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mh, vh = m / (1 - b1), v / (1 - b2)
    expect = w0 - lr * (mh / (np.sqrt(vh) + eps) + wd * w0)
    np.testing.assert_allclose(p["w"].data, expect, atol=1e-12)


def test_cosine_lr_endpoints():
    assert ad.cosine_lr(0, 100, 1e-4, 1e-5) == pytest.approx(1e-4)
    assert ad.cosine_lr(99, 100, 1e-4, 1e-5) == pytest.approx(1e-5)
    mid = ad.cosine_lr(50, 101, 1e-4, 1e-5)
    assert 1e-5 < mid < 1e-4


def test_checkpoint_round_trip(tmp_path):
    params = {"a.w": ad.Tensor(np.arange(6.0).reshape(2, 3)),
              "b": ad.Tensor(np.array([1.5]))}
    meta = {"kind": "test", "config": {"d": 3}}
    path = tmp_path / "x.ckpt"
    ad.save_checkpoint(path, params, meta=meta)
    loaded, meta2 = ad.load_checkpoint(path)
    assert meta2 == meta
    assert sorted(loaded) == sorted(params)
    for k in params:
        np.testing.assert_array_equal(loaded[k].data, params[k].data)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(FormatError):
        ad.load_checkpoint(path)


def test_no_grad_blocks_graph():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = (x * 2.0).sum()
    assert y.requires_grad is False
