import numpy as np
import pytest
from hypothesis import given, strategies as st

from vmq import autodiff as ad


def _fd_check(build, inputs, h=1e-6, tol=1e-6):
    """Compare tape gradients of sum(w * build(...)) with central differences."""
    t = ad.Tape()
    leaves = [t.leaf(v, requires_grad=True) for v in inputs]
    out = build(t, *leaves)
    w = np.random.default_rng(0).standard_normal(out.shape)
    loss = t.op(np.array((out.value * w).sum()), (out,), lambda g: (g * w,))
    t.backward(loss)

    def f(vals):
        t2 = ad.Tape()
        return float((build(t2, *[t2.leaf(v) for v in vals]).value * w).sum())

    for k, v in enumerate(inputs):
        num = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            vp = [x.copy() for x in inputs]
            vm = [x.copy() for x in inputs]
            vp[k][i] += h
            vm[k][i] -= h
            num[i] = (f(vp) - f(vm)) / (2 * h)
        np.testing.assert_allclose(leaves[k].grad, num, rtol=tol, atol=tol)


def test_elementwise_ops():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((1, 3, 4))
    _fd_check(lambda t, x, y: ad.mul(t, ad.add(t, x, y), ad.sub(t, x, y)), [a, b])
    _fd_check(lambda t, x: ad.silu(t, ad.scale(t, x, 3.0)), [a])
    _fd_check(lambda t, x: ad.softplus(t, x), [a])
    _fd_check(lambda t, x: ad.take(t, ad.flip(t, x), 1, 3), [a])


def test_linear_and_conv():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 5, 3))
    w = rng.standard_normal((4, 3))
    cw = rng.standard_normal((3, 3))
    _fd_check(lambda t, v: ad.linear(t, v, w, np.ones(4)), [x])
    _fd_check(lambda t, v: ad.causal_conv3(t, v, cw, np.ones(3)), [x])


def test_scan_gradients():
    rng = np.random.default_rng(3)
    s, l, d, n = 2, 4, 3, 2
    x = rng.standard_normal((s, l, d))
    dt = rng.uniform(0.1, 0.9, (s, l, d))
    b = rng.standard_normal((s, l, n))
    c = rng.standard_normal((s, l, n))
    a = -rng.uniform(0.5, 2, (d, n))
    ds = rng.standard_normal(d)
    _fd_check(lambda t, x_, dt_, b_, c_: ad.scan(t, x_, dt_, b_, c_, a, ds), [x, dt, b, c], tol=1e-5)


def test_cosine_loss_values_and_gradient():
    rng = np.random.default_rng(4)
    y = rng.standard_normal((3, 2, 5))
    t = ad.Tape()
    for q, expect in ((y, 0.0), (2 * y, 0.0), (-y, 2.0)):
        assert float(ad.cosine_loss(t, t.const(q), y).value) == pytest.approx(expect, abs=1e-12)
    q = rng.standard_normal(y.shape)
    _fd_check(lambda t, v: ad.cosine_loss(t, v, y), [q], tol=1e-6)


def test_cosine_loss_zero_reference_contributes_zero():
    t = ad.Tape()
    ref = np.zeros((2, 3))
    ref[1] = 1.0
    q = t.leaf(np.ones((2, 3)), requires_grad=True)
    loss = ad.cosine_loss(t, q, ref)
    t.backward(loss)
    assert float(loss.value) == pytest.approx(0.0, abs=1e-12)
    assert not q.grad[0].any()


def _qlin(x, s, dx, dw, qmax=15, eps=0, wbar=1):
    t = ad.Tape()
    v = [t.leaf(np.array(a, dtype=np.float64).reshape(shape), requires_grad=True) for a, shape in ((x, (1, 1, 1)), (s, (1,)), (dx, (1,)), (dw, (1,)))]
    out, _ = ad.quant_linear(t, v[0], v[1], v[2], np.array([eps]), qmax, v[3], np.array([[wbar]], np.int8))
    t.backward(t.op(np.array(out.value.sum()), (out,), lambda g: (np.full(out.shape, g),)))
    return float(out.value.sum()), [float(p.grad.sum()) for p in v]


def test_lsq_hand_cases():
    # on grid, in range: code 3, residual 0 -> d/d dx = 0
    y, (gx, gs, gdx, gdw) = _qlin(0.75, 1.0, 0.25, 2.0)
    assert y == pytest.approx(1.5)
    assert gdx == pytest.approx(0.0) and gx == pytest.approx(2.0) and gdw == pytest.approx(0.75)
    assert gs == pytest.approx(-0.75 * 2.0)
    # off grid: v = 2.5 rounds away to 3, residual 0.5 -> d/d dx = w * 0.5
    y, (gx, gs, gdx, gdw) = _qlin(0.25, 1.0, 0.1, 2.0)
    assert y == pytest.approx(0.6)
    assert gdx == pytest.approx(2.0 * 0.5)
    # saturated: code pinned at qmax; d/d x = 0, d/d dx = w * (qmax - eps)
    y, (gx, gs, gdx, gdw) = _qlin(10.0, 1.0, 0.25, 2.0)
    assert y == pytest.approx(2.0 * 0.25 * 15)
    assert gx == 0.0 and gs == 0.0 and gdx == pytest.approx(2.0 * 15)


@given(st.integers(0, 2**31 - 1), st.sampled_from([15, 255]))
def test_frozen_surrogate_matches_at_base_and_is_smooth(seed, qmax):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4)) * 2
    dx = rng.uniform(0.05, 0.3, 3)
    eps = rng.integers(0, qmax + 1, 3)

    def run(d, frozen=None):
        t = ad.Tape()
        xv = t.leaf(x)
        dv = t.leaf(d, requires_grad=True)
        out, fr = ad.fake_quant_tokens(t, xv, dv, eps, qmax, frozen)
        w = np.linspace(-1, 1, out.value.size).reshape(out.shape)
        loss = t.op(np.array((out.value * w).sum()), (out,), lambda g: (g * w,))
        t.backward(loss)
        return float(loss.value), dv.grad, fr

    base, grad, fr = run(dx)
    assert run(dx, fr)[0] == pytest.approx(base, abs=1e-12)
    h = 1e-6 * dx
    for i in range(3):
        e = np.zeros(3)
        e[i] = h[i]
        fd = (run(dx + e, fr)[0] - run(dx - e, fr)[0]) / (2 * h[i])
        assert fd == pytest.approx(grad[i], rel=1e-5, abs=1e-8)


def test_backward_needs_scalar():
    t = ad.Tape()
    with pytest.raises(ValueError):
        t.backward(t.leaf(np.ones(2), requires_grad=True))
