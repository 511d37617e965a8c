"""Hot numeric kernels, each with a numba loop variant and a numpy variant.

The public names (``quantize_rows``, ``scan_forward`` ...) are bound to one of
the two variants at import time according to :data:`vmq._jit.USE_NUMBA`.
``int_gemm`` always uses the BLAS variant. Both variants stay importable
under ``*_loops`` / ``*_numpy`` for tests and benchmarks.

Rounding is half-away-from-zero everywhere, evaluated in float64 so that the
two variants produce identical integer codes from identical float32 inputs.
"""

import numpy as np

from vmq._jit import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# integer GEMM
# ---------------------------------------------------------------------------


@njit
def int_gemm_loops(a, b):
    m, k = a.shape
    n = b.shape[1]
    # widen once; a branch-free inner loop vectorizes
    bw = b.astype(np.int32)
    out = np.zeros((m, n), dtype=np.int32)
    for i in range(m):
        for p in range(k):
            av = np.int32(a[i, p])
            for j in range(n):
                out[i, j] += av * bw[p, j]
    return out


# |product| <= 2**14 for 8-bit operands, so float32 sums stay exact up to
# this inner dimension; float64 covers the rest
_F32_EXACT_K = 1 << 10


def int_gemm_numpy(a, b):
    ft = np.float32 if a.shape[1] <= _F32_EXACT_K else np.float64
    prod = a.astype(ft) @ b.astype(ft)
    return prod.astype(np.int32)


# ---------------------------------------------------------------------------
# activation quantizers (codes are stored shifted by 2**(b-1) to fit int8)
# ---------------------------------------------------------------------------


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@njit
def _rha(t):
    v = np.float64(t)
    if v >= 0.0:
        return np.floor(v + 0.5)
    return -np.floor(-v + 0.5)


@njit
def quantize_rows_loops(x, inv_s, dx, eps, qmax, shift):
    """Smooth and quantize rows with static params; row ``i`` uses
    ``dx[i % P]`` and ``eps[i % P]`` where ``P = len(dx)``."""
    m, d = x.shape
    period = dx.shape[0]
    out = np.empty((m, d), dtype=np.int8)
    for i in range(m):
        di = dx[i % period]
        ei = np.float64(eps[i % period])
        for j in range(d):
            xs = x[i, j] * inv_s[j]
            c = _rha(xs / di) + ei
            if c < 0.0:
                c = 0.0
            elif c > qmax:
                c = qmax
            out[i, j] = np.int8(np.int64(c) - shift)
    return out


def quantize_rows_numpy(x, inv_s, dx, eps, qmax, shift):
    m, d = x.shape
    p = dx.shape[0]
    xs = (x * inv_s[None, :]).reshape(m // p, p, d)
    t = xs / dx[:, None]
    c = round_half_away(t) + eps[:, None].astype(np.float64)
    c = np.clip(c, 0.0, qmax)
    return (c.astype(np.int64) - shift).astype(np.int8).reshape(m, d)


@njit
def dynamic_quantize_rows_loops(x, inv_s, qmax, shift, floor):
    """Smooth, reduce and quantize each row online. Returns (codes, dx, eps)."""
    m, d = x.shape
    out = np.empty((m, d), dtype=np.int8)
    dx = np.empty(m, dtype=x.dtype)
    eps = np.empty(m, dtype=np.int32)
    buf = np.empty(d, dtype=x.dtype)
    for i in range(m):
        lo = 0.0
        hi = 0.0
        for j in range(d):
            v = x[i, j] * inv_s[j]
            buf[j] = v
            if v < lo:
                lo = v
            if v > hi:
                hi = v
        delta = (hi - lo) / qmax
        if delta < floor:
            delta = floor
        dx[i] = delta
        di = dx[i]
        e = _rha(-lo / np.float64(di))
        if e < 0.0:
            e = 0.0
        elif e > qmax:
            e = qmax
        eps[i] = np.int32(e)
        for j in range(d):
            c = _rha(buf[j] / di) + e
            if c < 0.0:
                c = 0.0
            elif c > qmax:
                c = qmax
            out[i, j] = np.int8(np.int64(c) - shift)
    return out, dx, eps


def dynamic_quantize_rows_numpy(x, inv_s, qmax, shift, floor):
    xs = x * inv_s[None, :]
    lo = np.minimum(xs.min(axis=1), 0).astype(np.float64)
    hi = np.maximum(xs.max(axis=1), 0).astype(np.float64)
    dx = np.maximum((hi - lo) / qmax, floor).astype(x.dtype)
    eps = np.clip(round_half_away(-lo / dx.astype(np.float64)), 0, qmax).astype(np.int32)
    c = round_half_away(xs / dx[:, None]) + eps[:, None]
    c = np.clip(c, 0.0, qmax)
    return (c.astype(np.int64) - shift).astype(np.int8), dx, eps


@njit
def dequantize_loops(acc, corr_eps, rowsum, dw, dx, bias):
    """y[i, o] = (acc - corr_eps[i] * rowsum[o]) * dw[o] * dx[i] + bias[o]."""
    m, n = acc.shape
    out = np.empty((m, n), dtype=dw.dtype)
    for i in range(m):
        ce = corr_eps[i]
        di = dx[i]
        for o in range(n):
            v = acc[i, o] - ce * rowsum[o]
            out[i, o] = np.float32(v) * (dw[o] * di) + bias[o]
    return out


def dequantize_numpy(acc, corr_eps, rowsum, dw, dx, bias):
    v = acc - corr_eps[:, None] * rowsum[None, :]
    return v.astype(np.float32) * (dw[None, :] * dx[:, None]) + bias[None, :]


@njit
def dequantize_table_loops(acc, corr, scale, bias):
    """Static-table variant: the offset correction and the output step are
    precomputed [P x out] tables, row ``i`` of ``acc`` using table row
    ``i % P`` (P is the calibrated token count, or 1 for per-tensor)."""
    m, n = acc.shape
    period = corr.shape[0]
    out = np.empty((m, n), dtype=scale.dtype)
    for i in range(m):
        r = i % period
        for o in range(n):
            out[i, o] = np.float32(acc[i, o] - corr[r, o]) * scale[r, o] + bias[o]
    return out


def dequantize_table_numpy(acc, corr, scale, bias):
    m, n = acc.shape
    p = corr.shape[0]
    a = acc.reshape(m // p, p, n)
    return ((a - corr).astype(np.float32) * scale + bias).reshape(m, n)


# ---------------------------------------------------------------------------
# selective scan
# ---------------------------------------------------------------------------


@njit
def _fq(v, delta, eps, qmax):
    c = _rha(v / delta) + eps
    if c < 0.0:
        c = 0.0
    elif c > qmax:
        c = qmax
    return delta * (c - eps)


@njit
def _decay_arg(dt, at, out):
    l_, d_ = dt.shape
    n_ = at.shape[0]
    for t in range(l_):
        for n in range(n_):
            for d in range(d_):
                out[t, n, d] = np.float64(dt[t, d]) * at[n, d]


def _decays(dt, at, buf):
    """exp(dt * A) for one sample into ``buf`` [L, N, D] (``at`` is A.T).

    numba has no vector exp without SVML, so the exponent goes through
    numpy's SIMD exp on a cache-sized buffer.
    """
    _decay_arg(dt, at, buf)
    np.exp(buf, out=buf)
    return buf


# The per-sample kernels keep the state as [N, D] so the innermost loop runs
# over contiguous channels and vectorizes.


@njit
def _scan_sample(x, dt, bmat, cmat, da, dskip, hq, hs, y, rng):
    l_, d_ = x.shape
    n_ = da.shape[1]
    h = np.zeros((n_, d_), dtype=np.float64)
    u = np.empty(d_)
    acc = np.empty(d_)
    # per-channel extremes keep the inner loops free of scalar reductions
    lo = np.full(d_, rng[0])
    hi = np.full(d_, rng[1])
    store = hs.size > 0
    hdelta = hq[0]
    heps = hq[1]
    hqmax = hq[2]
    for t in range(l_):
        for d in range(d_):
            u[d] = np.float64(dt[t, d]) * np.float64(x[t, d])
            acc[d] = 0.0
        for n in range(n_):
            bn = np.float64(bmat[t, n])
            cn = np.float64(cmat[t, n])
            if hdelta > 0.0:
                for d in range(d_):
                    h[n, d] = _fq(da[t, n, d] * h[n, d] + bn * u[d], hdelta, heps, hqmax)
            else:
                for d in range(d_):
                    h[n, d] = da[t, n, d] * h[n, d] + bn * u[d]
            for d in range(d_):
                hv = h[n, d]
                lo[d] = min(lo[d], hv)
                hi[d] = max(hi[d], hv)
                acc[d] += cn * hv
            if store:
                for d in range(d_):
                    hs[t, d, n] = h[n, d]
        for d in range(d_):
            y[t, d] = acc[d] + dskip[d] * np.float64(x[t, d])
    rng[0] = lo.min()
    rng[1] = hi.max()


def scan_forward_loops(x, dt, bmat, cmat, a, dskip, hq, hs):
    """Batched selective scan.

    x, dt: [S, L, D]; bmat, cmat: [S, L, N]; a: [D, N]; dskip: [D].
    hq = (delta, eps, qmax) fake-quantizes the state after each step when
    delta > 0. hs is either an [S, L, D, N] buffer that receives every state
    or a size-0 array. Returns (y, hmin, hmax).
    """
    s_, l_, d_ = x.shape
    at = np.ascontiguousarray(np.asarray(a, dtype=np.float64).T)
    hq = np.asarray(hq, dtype=np.float64)
    y = np.empty_like(x)
    buf = np.empty((l_, at.shape[0], d_))
    rng = np.zeros(2)
    store = hs.size > 0
    for s in range(s_):
        da = _decays(dt[s], at, buf)
        _scan_sample(x[s], dt[s], bmat[s], cmat[s], da, dskip, hq, hs[s] if store else hs, y[s], rng)
    return y, float(rng[0]), float(rng[1])


def scan_forward_numpy(x, dt, bmat, cmat, a, dskip, hq, hs):
    s_, l_, d_ = x.shape
    n_ = a.shape[1]
    y = np.empty_like(x)
    h = np.zeros((s_, d_, n_), dtype=np.float64)
    a64 = a.astype(np.float64)
    hdelta, heps, hqmax = (float(v) for v in hq)
    store = hs.size > 0
    hmin = 0.0
    hmax = 0.0
    for t in range(l_):
        dv = dt[:, t, :].astype(np.float64)
        xv = x[:, t, :].astype(np.float64)
        h = np.exp(dv[:, :, None] * a64[None]) * h + (dv * xv)[:, :, None] * bmat[:, t, None, :]
        if hdelta > 0.0:
            c = np.clip(round_half_away(h / hdelta) + heps, 0.0, hqmax)
            h = hdelta * (c - heps)
        hmin = min(hmin, float(h.min()))
        hmax = max(hmax, float(h.max()))
        if store:
            hs[:, t] = h
        y[:, t, :] = np.einsum("sdn,sn->sd", h, cmat[:, t].astype(np.float64)) + dskip * xv
    return y, hmin, hmax


@njit
def _load_state(hs, t, out):
    d_, n_ = hs.shape[1], hs.shape[2]
    for n in range(n_):
        for d in range(d_):
            out[n, d] = hs[t, d, n]


@njit
def _scan_backward_sample(x, dt, bmat, cmat, at, da, dskip, hs, gy, gx, gdt, gb, gc):
    l_, d_ = x.shape
    n_ = at.shape[0]
    gh = np.zeros((n_, d_), dtype=np.float64)
    ht = np.empty((n_, d_))
    hp = np.zeros((n_, d_))
    ghv = np.empty(d_)
    gxv = np.empty(d_)
    gdv = np.empty(d_)
    _load_state(hs, l_ - 1, ht)
    for t in range(l_ - 1, -1, -1):
        if t > 0:
            _load_state(hs, t - 1, hp)
        else:
            hp[:, :] = 0.0
        for d in range(d_):
            gxv[d] = dskip[d] * gy[t, d]
            gdv[d] = 0.0
        for n in range(n_):
            bn = bmat[t, n]
            cn = cmat[t, n]
            for d in range(d_):
                g = ghv[d] = gh[n, d] + cn * gy[t, d]
                dan = da[t, n, d]
                gdv[d] += g * (dan * at[n, d] * hp[n, d] + bn * x[t, d])
                gxv[d] += g * dt[t, d] * bn
                gh[n, d] = g * dan
            # scalar reductions stay out of the vectorized loop above
            sc = 0.0
            sb = 0.0
            for d in range(d_):
                sc += gy[t, d] * ht[n, d]
                sb += ghv[d] * dt[t, d] * x[t, d]
            gc[t, n] += sc
            gb[t, n] += sb
        for d in range(d_):
            gx[t, d] = gxv[d]
            gdt[t, d] = gdv[d]
        ht, hp = hp, ht


def scan_backward_loops(x, dt, bmat, cmat, a, dskip, hs, gy):
    """Reverse pass of ``scan_forward`` (no state quantization).

    Returns gradients with respect to x, dt, bmat, cmat.
    """
    s_, l_, d_ = x.shape
    at = np.ascontiguousarray(np.asarray(a, dtype=np.float64).T)
    gx = np.zeros_like(x)
    gdt = np.zeros_like(dt)
    gb = np.zeros_like(bmat)
    gc = np.zeros_like(cmat)
    buf = np.empty((l_, at.shape[0], d_))
    for s in range(s_):
        da = _decays(dt[s], at, buf)
        _scan_backward_sample(x[s], dt[s], bmat[s], cmat[s], at, da, dskip, hs[s], gy[s], gx[s], gdt[s], gb[s], gc[s])
    return gx, gdt, gb, gc


def scan_backward_numpy(x, dt, bmat, cmat, a, dskip, hs, gy):
    s_, l_, d_ = x.shape
    n_ = a.shape[1]
    gx = np.empty_like(x)
    gdt = np.empty_like(dt)
    gb = np.empty_like(bmat)
    gc = np.empty_like(cmat)
    gh = np.zeros((s_, d_, n_), dtype=np.float64)
    for t in range(l_ - 1, -1, -1):
        g = gy[:, t, :]
        xv = x[:, t, :]
        dv = dt[:, t, :]
        ht = hs[:, t]
        hp = hs[:, t - 1] if t > 0 else np.zeros_like(ht)
        gc[:, t] = np.einsum("sd,sdn->sn", g, ht)
        ghv = gh + g[:, :, None] * cmat[:, t, None, :]
        da = np.exp(dv[:, :, None] * a[None])
        bt = bmat[:, t, None, :]
        gdt[:, t] = (ghv * (da * a[None] * hp + bt * xv[:, :, None])).sum(-1)
        gb[:, t] = np.einsum("sdn,sd->sn", ghv, dv * xv)
        gx[:, t] = dskip * g + np.einsum("sdn,sn->sd", ghv, bmat[:, t]) * dv
        gh = ghv * da
    return gx, gdt, gb, gc


# ---------------------------------------------------------------------------
# depthwise causal conv
# ---------------------------------------------------------------------------


@njit
def _conv3_fill(x, wt, b, out):
    s_, l_, e_ = x.shape
    for s in range(s_):
        for t in range(l_):
            for e in range(e_):
                v = x[s, t, e] * wt[2, e]
                if t >= 1:
                    v += x[s, t - 1, e] * wt[1, e]
                if t >= 2:
                    v += x[s, t - 2, e] * wt[0, e]
                out[s, t, e] = v + b[e]


def causal_conv3_loops(x, w, b):
    """Width-3 depthwise causal conv of [S, L, E] in one fused pass.

    Adds terms in the same order as the numpy variant, so results match
    bit for bit.
    """
    dtype = np.result_type(x, w) if b is None else np.result_type(x, w, b)
    out = np.empty(x.shape, dtype=dtype)
    bias = np.zeros(x.shape[-1], dtype=dtype) if b is None else np.asarray(b, dtype=dtype)
    _conv3_fill(np.ascontiguousarray(x), np.ascontiguousarray(np.asarray(w).T), bias, out)
    return out


def causal_conv3_numpy(x, w, b):
    out = x * w[:, 2]
    out[:, 1:] += x[:, :-1] * w[:, 1]
    out[:, 2:] += x[:, :-2] * w[:, 0]
    if b is not None:
        out += b
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

# BLAS beats the compiled loops on every measured shape
# (benchmarks/bench_kernels.py), so both backends use it
int_gemm = int_gemm_numpy

if USE_NUMBA:
    quantize_rows = quantize_rows_loops
    dynamic_quantize_rows = dynamic_quantize_rows_loops
    dequantize = dequantize_loops
    dequantize_table = dequantize_table_loops
    scan_forward = scan_forward_loops
    scan_backward = scan_backward_loops
    causal_conv3 = causal_conv3_loops
else:
    quantize_rows = quantize_rows_numpy
    dynamic_quantize_rows = dynamic_quantize_rows_numpy
    dequantize = dequantize_numpy
    dequantize_table = dequantize_table_numpy
    scan_forward = scan_forward_numpy
    scan_backward = scan_backward_numpy
    causal_conv3 = causal_conv3_numpy

VARIANTS = {
    "int_gemm": (int_gemm_loops, int_gemm_numpy),
    "quantize_rows": (quantize_rows_loops, quantize_rows_numpy),
    "dynamic_quantize_rows": (dynamic_quantize_rows_loops, dynamic_quantize_rows_numpy),
    "dequantize": (dequantize_loops, dequantize_numpy),
    "dequantize_table": (dequantize_table_loops, dequantize_table_numpy),
    "scan_forward": (scan_forward_loops, scan_forward_numpy),
    "scan_backward": (scan_backward_loops, scan_backward_numpy),
    "causal_conv3": (causal_conv3_loops, causal_conv3_numpy),
}
