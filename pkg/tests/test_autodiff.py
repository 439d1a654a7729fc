"""Finite-difference verification of the autodiff core."""

import numpy as np
import pytest

from ivrlab import autodiff as ad
from ivrlab.autodiff import Tensor, concat, conv2d, softmax, upsample2
from ivrlab.nn import LayerNorm, Linear, Mlp, apply_rotary, rotary_tables, sdpa

RNG = np.random.default_rng(0)


def fd_grad(f, x, eps=1e-6):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy(); xp[idx] += eps
        xm = x.copy(); xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
        it.iternext()
    return g


def check(build, x, tol=1e-6):
    """build(Tensor) -> scalar Tensor; compares backward grad to FD."""
    t = Tensor(x, requires_grad=True)
    out = build(t)
    out.backward()
    num = fd_grad(lambda a: build(Tensor(a)).item(), x)
    assert np.allclose(t.grad, num, rtol=tol, atol=tol), \
        f"max abs err {np.abs(t.grad - num).max()}"


M23 = RNG.normal(size=(2, 3))
M34 = RNG.normal(size=(3, 4))


@pytest.mark.parametrize("fn", [
    lambda t: (t * t).sum(),
    lambda t: (t + 2.0 * t).mean(),
    lambda t: (t / (t * t + 1.0)).sum(),
    lambda t: (t ** 3).sum(),
    lambda t: t.exp().sum(),
    lambda t: (t * t + 0.5).log().sum(),
    lambda t: (t * t + 0.1).sqrt().sum(),
    lambda t: t.tanh().sum(),
    lambda t: t.sigmoid().sum(),
    lambda t: t.gelu().sum(),
    lambda t: (t.reshape(6, 2) @ Tensor(M23)).sum(),
    lambda t: t.reshape(3, 4).transpose(1, 0).sum(axis=0).mean(),
    lambda t: (softmax(t.reshape(3, 4), axis=-1) * Tensor(M34)).sum(),
    lambda t: t[2:9].sum() + (t[::2] * 3.0).sum(),
    lambda t: concat([t[:4], t[4:] * 2.0], axis=0).sum(),
])
def test_elementwise_and_shape_ops(fn):
    check(fn, RNG.normal(size=12))


def test_broadcasting_grads():
    a = RNG.normal(size=(3, 1, 4))
    b = RNG.normal(size=(2, 4))
    ta = Tensor(a, requires_grad=True)
    tb = Tensor(b, requires_grad=True)
    out = (ta * tb + tb).sum()
    out.backward()
    na = fd_grad(lambda x: float((x[:, None, :, :] * b + b).sum()) if False else
                 float((Tensor(x).data * b + b).sum()), a)
    nb = fd_grad(lambda x: float((a * x + x).sum()), b)
    assert np.allclose(ta.grad, na, atol=1e-6)
    assert np.allclose(tb.grad, nb, atol=1e-6)


def test_matmul_batched():
    a = RNG.normal(size=(2, 3, 4))
    b = RNG.normal(size=(4, 5))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    w = RNG.normal(size=(2, 3, 5))
    (ta @ tb * Tensor(w)).sum().backward()
    na = fd_grad(lambda x: float(((x @ b) * w).sum()), a)
    nb = fd_grad(lambda x: float(((a @ x) * w).sum()), b)
    assert np.allclose(ta.grad, na, atol=1e-6)
    assert np.allclose(tb.grad, nb, atol=1e-6)


def test_clip_gradient_mask():
    x = np.array([-2.0, -0.5, 0.3, 0.9, 1.7])
    t = Tensor(x, requires_grad=True)
    (t.clip(0.0, 1.0) * Tensor(np.arange(1.0, 6.0))).sum().backward()
    assert np.allclose(t.grad, [0.0, 0.0, 3.0, 4.0, 0.0])


def test_conv2d_grads():
    x = RNG.normal(size=(2, 5, 6, 3))
    w = RNG.normal(size=(3, 3, 3, 4))
    b = RNG.normal(size=4)
    out_w = RNG.normal(size=(2, 3, 3, 4))  # stride 2, pad 1 -> 3x3

    def run(xv, wv, bv):
        return float((conv2d(Tensor(xv), Tensor(wv), Tensor(bv), stride=2, pad=1).data
                      * out_w).sum())

    tx, tw, tb = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)
    (conv2d(tx, tw, tb, stride=2, pad=1) * Tensor(out_w)).sum().backward()
    assert np.allclose(tx.grad, fd_grad(lambda v: run(v, w, b), x), atol=1e-6)
    assert np.allclose(tw.grad, fd_grad(lambda v: run(x, v, b), w), atol=1e-6)
    assert np.allclose(tb.grad, fd_grad(lambda v: run(x, w, v), b), atol=1e-6)


def test_upsample2_grad():
    x = RNG.normal(size=(1, 3, 2, 2))
    out_w = RNG.normal(size=(1, 6, 4, 2))
    t = Tensor(x, requires_grad=True)
    (upsample2(t) * Tensor(out_w)).sum().backward()
    num = fd_grad(lambda v: float((upsample2(Tensor(v)).data * out_w).sum()), x)
    assert np.allclose(t.grad, num, atol=1e-6)


def test_layers_end_to_end_grad():
    rng = np.random.default_rng(1)
    lin = Linear(rng, 6, 6, "lin")
    ln = LayerNorm(6, "ln")
    mlp = Mlp(rng, 6, 12, "mlp")
    x = rng.normal(size=(2, 5, 6))

    def forward(xv):
        h = ln(lin(Tensor(xv) if not isinstance(xv, Tensor) else xv))
        return (mlp(h) + h).sum()

    t = Tensor(x, requires_grad=True)
    forward(t).backward()
    num = fd_grad(lambda v: forward(Tensor(v)).item(), x)
    assert np.allclose(t.grad, num, rtol=1e-5, atol=1e-6)


def test_attention_with_rotary_grad():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(2, 4, 8))
    k = rng.normal(size=(2, 6, 8))
    v = rng.normal(size=(2, 6, 8))
    cq, sq = rotary_tables(np.arange(4.0), 8)
    ck, sk = rotary_tables(np.arange(6.0), 8)

    def forward(qv, kv, vv):
        out = sdpa(apply_rotary(qv, cq, sq), apply_rotary(kv, ck, sk), vv)
        return (out * out).sum()

    tq = Tensor(q, requires_grad=True)
    tk = Tensor(k, requires_grad=True)
    tv = Tensor(v, requires_grad=True)
    forward(tq, tk, tv).backward()
    for t, x, which in [(tq, q, 0), (tk, k, 1), (tv, v, 2)]:
        args = [q, k, v]

        def f(val):
            args2 = list(args)
            args2[which] = val
            return forward(Tensor(args2[0]), Tensor(args2[1]), Tensor(args2[2])).item()

        assert np.allclose(t.grad, fd_grad(f, x), rtol=1e-5, atol=1e-6)


def test_no_grad_matches_grad_path_bitwise():
    rng = np.random.default_rng(3)
    lin = Linear(rng, 4, 4, "l")
    x = rng.normal(size=(3, 4))
    y1 = lin(Tensor(x, requires_grad=True)).tanh().data
    with ad.no_grad():
        y2 = lin(Tensor(x)).tanh().data
    assert np.array_equal(y1, y2)


def test_second_use_accumulates():
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = (t * t).sum() + t.sum()
    y.backward()
    assert np.allclose(t.grad, [3.0, 5.0])
