"""A small tape-based reverse-mode differentiator for one model block.

Values are float64 numpy arrays. Each op records a closure mapping the output
cotangent to parent cotangents; :meth:`Tape.backward` replays the tape in
reverse creation order, which is a valid topological order.

Fake-quant nodes use the straight-through convention with LSQ step
gradients. Passing ``frozen`` residuals (``round(v) - v`` captured at a base
point) turns them into smooth functions whose exact derivatives equal those
conventions, which is what finite-difference checks need.
"""

import numpy as np

from vmq import kernels
from vmq.kernels import round_half_away


class Var:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False, parents=(), vjp=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape


class Tape:
    def __init__(self):
        self.nodes = []

    def leaf(self, value, requires_grad=False):
        v = Var(np.asarray(value, dtype=np.float64), requires_grad)
        return v

    def const(self, value):
        return Var(np.asarray(value, dtype=np.float64), False)

    def op(self, value, parents, vjp):
        live = any(p.requires_grad for p in parents)
        v = Var(value, live, parents, vjp if live else None)
        if live:
            self.nodes.append(v)
        return v

    def backward(self, out):
        if out.value.size != 1:
            raise ValueError("backward needs a scalar output")
        for n in self.nodes:
            n.grad = None
        out.grad = np.ones_like(out.value)
        for node in reversed(self.nodes):
            if node.grad is None or node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(t, a, b):
    return t.op(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(t, a, b):
    return t.op(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(t, a, b):
    av, bv = a.value, b.value
    return t.op(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(t, a, c):
    return t.op(a.value * c, (a,), lambda g: (g * c,))


def silu(t, a):
    x = a.value
    sig = 0.5 + 0.5 * np.tanh(0.5 * x)
    return t.op(x * sig, (a,), lambda g: (g * (sig * (1.0 + x * (1.0 - sig))),))


def softplus(t, a):
    x = a.value
    sig = 0.5 + 0.5 * np.tanh(0.5 * x)
    return t.op(np.logaddexp(0.0, x), (a,), lambda g: (g * sig,))


def flip(t, a, axis=1):
    return t.op(np.flip(a.value, axis), (a,), lambda g: (np.flip(g, axis),))


def take(t, a, lo, hi):
    """Slice ``[lo:hi]`` of the last axis."""
    full = a.shape

    def vjp(g):
        out = np.zeros(full)
        out[..., lo:hi] = g
        return (out,)

    return t.op(a.value[..., lo:hi], (a,), vjp)


def causal_conv3(t, a, w, b):
    """Depthwise causal width-3 conv over axis 1 with constant taps."""
    x = a.value
    out = x * w[:, 2]
    out[:, 1:] += x[:, :-1] * w[:, 1]
    out[:, 2:] += x[:, :-2] * w[:, 0]
    if b is not None:
        out = out + b

    def vjp(g):
        gx = g * w[:, 2]
        gx[:, :-1] += g[:, 1:] * w[:, 1]
        gx[:, :-2] += g[:, 2:] * w[:, 0]
        return (gx,)

    return t.op(out, (a,), vjp)


def linear(t, a, weight, bias=None):
    """``a @ weight.T + bias`` with constant weights."""
    y = a.value @ weight.T
    if bias is not None:
        y = y + bias
    return t.op(y, (a,), lambda g: (g @ weight,))


# ---------------------------------------------------------------------------
# fake quantization
# ---------------------------------------------------------------------------


def _codes(v, e, qmax, frozen):
    """Rounding residual, in-range mask and clipped codes.

    With ``frozen = (r, inside)`` from a base point, in-range elements follow
    ``v + r + e`` and the rest stay pinned to their saturated code, so the
    result is smooth near the base point.
    """
    if frozen is None:
        r = round_half_away(v) - v
        c = v + r + e
        inside = (c >= 0.0) & (c <= qmax)
        return r, inside, np.clip(c, 0.0, qmax)
    r, inside = frozen
    c = v + r + e
    sat = np.where(c > 0.5 * qmax, float(qmax), 0.0)
    return r, inside, np.where(inside, c, sat)


def fake_quant_tokens(t, x, dx, eps, qmax, frozen=None):
    """Per-token affine fake-quant of ``x`` [S, L, D] with steps ``dx`` [L].

    Returns ``(out, frozen)`` where ``frozen = (round(v) - v, in_range)`` at
    this evaluation (or the ``frozen`` passed in).
    """
    xv = x.value
    d = dx.value[:, None]
    e = np.asarray(eps, dtype=np.float64)[:, None]
    v = xv / d
    r, inside, cc = _codes(v, e, qmax, frozen)
    out = d * (cc - e)

    def vjp(g):
        gx = np.where(inside, g, 0.0)
        # inside: (code - eps) - v = r; saturated: (code - eps)
        step = np.where(inside, r, cc - e)
        gd = (g * step).sum(axis=(0, 2))
        return gx, gd

    return t.op(out, (x, dx), vjp), (r, inside)


def quant_linear(t, x, s, dx, eps, qmax, dw, wbar, bias=None, frozen=None):
    """Fake-quant linear: ``fq(x / s) @ (dw * wbar).T + bias``.

    Gradients flow to ``x``, ``s``, ``dx`` and ``dw``; ``wbar`` is frozen.
    Returns ``(out, frozen)`` as in :func:`fake_quant_tokens`.
    """
    inv = 1.0 / s.value
    xv = x.value
    xs = xv * inv
    d = dx.value[:, None]
    e = np.asarray(eps, dtype=np.float64)[:, None]
    v = xs / d
    r, inside, cc = _codes(v, e, qmax, frozen)
    xh = d * (cc - e)
    wq = wbar.astype(np.float64)
    w = dw.value[:, None] * wq
    y = xh @ w.T
    if bias is not None:
        y = y + bias

    def vjp(g):
        gxh = g @ w
        gw = np.einsum("slo,slk->ok", g, xh)
        gdw = (gw * wq).sum(axis=1)
        gxs = np.where(inside, gxh, 0.0)
        step = np.where(inside, r, cc - e)
        gd = (gxh * step).sum(axis=(0, 2))
        gx = gxs * inv
        gs = -(gxs * xv).sum(axis=(0, 1)) * inv * inv
        return gx, gs, gd, gdw

    return t.op(y, (x, s, dx, dw), vjp), (r, inside)


# ---------------------------------------------------------------------------
# scan and loss
# ---------------------------------------------------------------------------

_NO_HQ = np.zeros(3)


def scan(t, x, dt, bmat, cmat, a, dskip):
    xv, dv, bv, cv = (np.ascontiguousarray(n.value) for n in (x, dt, bmat, cmat))
    if not np.all(dv > 0):
        raise ValueError("selective_scan requires a strictly positive step size")
    s_, l_, d_ = xv.shape
    hs = np.empty((s_, l_, d_, a.shape[1]), dtype=np.float64)
    ds = np.zeros(d_) if dskip is None else np.asarray(dskip, dtype=np.float64)
    a64 = np.asarray(a, dtype=np.float64)
    y, _, _ = kernels.scan_forward(xv, dv, bv, cv, a64, ds, _NO_HQ, hs)

    def vjp(g):
        return kernels.scan_backward(xv, dv, bv, cv, a64, ds, hs, np.ascontiguousarray(g))

    return t.op(y, (x, dt, bmat, cmat), vjp)


def cosine_loss(t, yq, yref):
    """Mean over samples of ``1 - cos(yq_i, yref_i)`` on flattened samples.

    Samples whose reference has zero norm contribute 0.
    """
    q = yq.value.reshape(yq.shape[0], -1)
    r = np.asarray(yref, dtype=np.float64).reshape(q.shape)
    nq = np.sqrt((q * q).sum(axis=1))
    nr = np.sqrt((r * r).sum(axis=1))
    dot = (q * r).sum(axis=1)
    den = nq * nr + 1e-12
    live = nr > 0
    cos = np.where(live, dot / den, 1.0)
    n = q.shape[0]
    loss = np.array((1.0 - cos).mean())

    def vjp(g):
        # d cos / d q = r / den - dot * nr * q / (nq * den**2)
        safe_nq = np.where(nq > 0, nq, 1.0)
        dq = r / den[:, None] - (dot * nr / (safe_nq * den * den))[:, None] * q
        dq = np.where(live[:, None], dq, 0.0)
        return ((-g / n) * dq.reshape(yq.shape),)

    return t.op(loss, (yq,), vjp)
