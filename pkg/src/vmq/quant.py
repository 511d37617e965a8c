"""Quantizer primitives, smoothing scales and int4 packing.

Asymmetric (activation) quantization::

    code = clip(round(x / delta) + eps, 0, 2**b - 1)
    x_hat = delta * (code - eps)

Symmetric (weight) quantization, one step per output row::

    code = clip(round(w / delta), -(2**(b-1) - 1), 2**(b-1) - 1)
    w_hat = delta * code

Rounding is half-away-from-zero. Steps are stored as float32 and floored at
``DELTA_FLOOR``.
"""

from dataclasses import dataclass, field

import numpy as np

from vmq import core, kernels, model as mdl
from vmq.kernels import round_half_away

DELTA_FLOOR = 1e-8
MIN_BITS = 2
MAX_BITS = 8

PER_TENSOR = "per-tensor"
PER_CHANNEL = "per-channel"
PER_TOKEN = "per-token"
GRANULARITIES = (PER_TENSOR, PER_CHANNEL, PER_TOKEN)


def check_bits(bits):
    if int(bits) != bits or not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bit width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    return int(bits)


def _check_gamma(gamma):
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(~(g > 0)) or np.any(g > 1):
        raise ValueError(f"clip ratio must lie in (0, 1], got {gamma}")
    return g


@dataclass
class QuantParams:
    """Step sizes and zero offsets for one tensor.

    ``delta`` is a float32 scalar array (per-tensor) or vector. ``eps`` holds
    integer zero offsets for asymmetric quantizers and is ``None`` for
    symmetric ones.
    """

    bits: int
    granularity: str
    delta: np.ndarray
    eps: np.ndarray | None = None
    gamma: np.ndarray = field(default_factory=lambda: np.float64(1.0))

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        self.delta = np.asarray(self.delta, dtype=np.float32)
        if self.eps is not None:
            self.eps = np.asarray(self.eps, dtype=np.int32)

    @property
    def symmetric(self):
        return self.eps is None

    @property
    def qmax(self):
        if self.symmetric:
            return (1 << (self.bits - 1)) - 1
        return (1 << self.bits) - 1

    def copy(self):
        return QuantParams(
            self.bits,
            self.granularity,
            self.delta.copy(),
            None if self.eps is None else self.eps.copy(),
            np.array(self.gamma, copy=True),
        )


@dataclass
class SmoothScale:
    """Per-input-channel smoothing vector.

    ``folded`` is True once the activation-side divide lives in the producing
    layer; otherwise it has to be applied explicitly at inference.
    """

    s: np.ndarray
    alpha: float = 0.5
    folded: bool = False

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float32)
        if self.s.ndim != 1 or not np.all(self.s > 0):
            raise ValueError("smoothing scale must be a strictly positive vector")

    @property
    def inv(self):
        return (np.float32(1.0) / self.s).astype(np.float32)

    @classmethod
    def identity(cls, d, alpha=0.5):
        return cls(np.ones(d, dtype=np.float32), alpha)


# ---------------------------------------------------------------------------
# asymmetric (activation) quantizers
# ---------------------------------------------------------------------------


def affine_from_range(lo, hi, bits, gamma=1.0):
    """Vectorised min-max step/offset from range endpoints.

    The range is shrunk symmetrically by ``gamma`` and then widened to contain
    zero, which keeps the offset an integer in ``[0, 2**b - 1]`` and makes
    constant tensors exactly representable. Returns ``(delta f32, eps i32)``.
    """
    bits = check_bits(bits)
    g = _check_gamma(gamma)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    qmax = (1 << bits) - 1
    cut = (1.0 - g) * (hi - lo) / 2.0
    lo = np.minimum(lo + cut, 0.0)
    hi = np.maximum(hi - cut, 0.0)
    delta = np.maximum((hi - lo) / qmax, DELTA_FLOOR).astype(np.float32)
    eps = np.clip(round_half_away(-lo / delta.astype(np.float64)), 0, qmax).astype(np.int32)
    return delta, eps


def minmax_affine_params(x, bits, gamma=1.0):
    x = np.asarray(x, dtype=np.float32)
    if x.size == 0:
        raise ValueError("cannot compute quantization range of an empty tensor")
    delta, eps = affine_from_range(x.min(), x.max(), bits, gamma)
    return QuantParams(bits, PER_TENSOR, delta, eps, np.float64(gamma))


def _token_view(qp, x):
    """Broadcastable (delta, eps) for ``x`` under ``qp``."""
    if qp.granularity == PER_TOKEN:
        n = qp.delta.shape[0]
        if x.ndim < 2 or x.shape[-2] != n:
            raise core.DimensionError(f"per-token params cover {n} tokens, tensor has shape {x.shape}")
        return qp.delta[:, None], qp.eps[:, None]
    if qp.granularity == PER_CHANNEL:
        raise ValueError("asymmetric per-channel activation quantization is not supported")
    return qp.delta, qp.eps


def affine_codes(x, qp):
    """Integer codes in [0, 2**b - 1] (int32)."""
    if qp.symmetric:
        raise ValueError("affine quantizer needs a zero offset")
    x = np.asarray(x, dtype=np.float32)
    delta, eps = _token_view(qp, x)
    c = round_half_away(x / delta) + eps
    return np.clip(c, 0, qp.qmax).astype(np.int32)


def fake_quant_affine(x, qp):
    """Quantize-dequantize ``x``; per-token params index axis -2."""
    x = np.asarray(x, dtype=np.float32)
    delta, eps = _token_view(qp, x)
    c = affine_codes(x, qp)
    return (delta * (c - eps).astype(np.float32)).astype(np.float32)


def per_token_params(acts, bits, gamma=1.0):
    """Per-position (delta, eps) from calibration activations.

    ``acts`` is ``[S, L, D]`` (or a list of ``[L, D]`` arrays, or a single
    ``[L, D]``). Min and max are pooled over samples and channels for each
    token position. ``gamma`` is a scalar or a length-``L`` vector.
    """
    if isinstance(acts, (list, tuple)):
        shapes = {np.shape(a)[-2] for a in acts}
        if len(shapes) != 1:
            raise core.DimensionError(f"samples disagree on token length: {sorted(shapes)}")
        acts = np.stack([np.asarray(a, dtype=np.float32) for a in acts])
    a = np.asarray(acts, dtype=np.float32)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.size == 0:
        raise core.DimensionError(f"expected [S, L, D] activations, got {a.shape}")
    lo = a.min(axis=(0, 2))
    hi = a.max(axis=(0, 2))
    delta, eps = affine_from_range(lo, hi, bits, gamma)
    g = np.broadcast_to(np.asarray(gamma, dtype=np.float64), lo.shape).copy()
    return QuantParams(bits, PER_TOKEN, delta, eps, g)


def dynamic_per_token_quant(x, bits):
    """Online per-row min-max quantization of ``x`` [L, D].

    Returns codes in [0, 2**b - 1] (int32) and the per-row params.
    """
    bits = check_bits(bits)
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise core.DimensionError(f"expected [L, D], got {x.shape}")
    shift = 1 << (bits - 1)
    ones = np.ones(x.shape[1], dtype=np.float32)
    q, dx, eps = kernels.dynamic_quantize_rows(x, ones, float((1 << bits) - 1), shift, DELTA_FLOOR)
    codes = q.astype(np.int32) + shift
    return codes, QuantParams(bits, PER_TOKEN, dx, eps, np.ones(x.shape[0]))


# ---------------------------------------------------------------------------
# symmetric (weight) quantizers
# ---------------------------------------------------------------------------


def symmetric_weight_params(w, bits, gamma=1.0):
    """Per-output-row steps ``gamma * max|W[o]| / (2**(b-1) - 1)``."""
    bits = check_bits(bits)
    g = _check_gamma(gamma)
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise core.DimensionError(f"weights must be 2-D, got {w.shape}")
    qmax = (1 << (bits - 1)) - 1
    amax = np.abs(w).max(axis=1).astype(np.float64) if w.shape[1] else np.zeros(w.shape[0])
    delta = np.maximum(g * amax / qmax, DELTA_FLOOR).astype(np.float32)
    gam = np.broadcast_to(g, delta.shape).copy()
    return QuantParams(bits, PER_CHANNEL, delta, None, gam)


def quantize_weights(w, qp):
    """Integer weight codes W-bar (int8)."""
    if not qp.symmetric:
        raise ValueError("weight quantizer is symmetric")
    w = np.asarray(w, dtype=np.float32)
    c = round_half_away(w / qp.delta[:, None])
    return np.clip(c, -qp.qmax, qp.qmax).astype(np.int8)


def fake_quant_symmetric(w, qp):
    return (qp.delta[:, None] * quantize_weights(w, qp).astype(np.float32)).astype(np.float32)


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------


def smooth_scale(max_abs_x, max_abs_w, alpha=0.5):
    """``s = max|X|**alpha / max|W|**(1 - alpha)`` with zeros floored at 1e-8."""
    mx = np.maximum(np.asarray(max_abs_x, dtype=np.float64), DELTA_FLOOR)
    mw = np.maximum(np.asarray(max_abs_w, dtype=np.float64), DELTA_FLOOR)
    if mx.shape != mw.shape:
        raise core.DimensionError(f"stat lengths differ: {mx.shape} vs {mw.shape}")
    if np.any(np.asarray(max_abs_x) < 0) or np.any(np.asarray(max_abs_w) < 0):
        raise ValueError("max-abs statistics must be non-negative")
    return (mx**alpha / mw ** (1.0 - alpha)).astype(np.float32)


def apply_smoothing(layer, s, producer=None, alpha=0.5):
    """Scale ``layer`` columns by ``s`` and move ``1/s`` to the activation side.

    With ``producer`` (a Linear whose outputs are this layer's inputs) the
    divide is folded into the producer's rows and bias. Otherwise it is
    returned as an unfolded :class:`SmoothScale` for the caller to apply.
    Returns ``(layer, producer, scale)``; inputs are not modified.
    """
    s = np.asarray(s, dtype=np.float32)
    d = layer.weight.shape[1]
    if s.shape != (d,):
        raise core.DimensionError(f"smoothing scale has length {s.size}, layer has {d} inputs")
    scale = SmoothScale(s, alpha)
    new = mdl.Linear(layer.weight * s[None, :], None if layer.bias is None else layer.bias.copy())
    if producer is None:
        return new, None, scale
    if producer.weight.shape[0] != d:
        raise core.DimensionError(f"producer emits {producer.weight.shape[0]} channels, layer takes {d}")
    inv = scale.inv
    prod = mdl.Linear(
        producer.weight * inv[:, None], None if producer.bias is None else producer.bias * inv
    )
    scale.folded = True
    return new, prod, scale


# ---------------------------------------------------------------------------
# int4 packing
# ---------------------------------------------------------------------------


def pack_int4(codes):
    """Pack int4 codes two per byte, low nibble first; odd lengths are
    zero-padded."""
    c = np.asarray(codes).ravel()
    if c.size and (c.min() < -8 or c.max() > 7):
        raise ValueError(f"int4 codes must lie in [-8, 7], got range [{c.min()}, {c.max()}]")
    c = c.astype(np.int16)
    if c.size % 2:
        c = np.concatenate([c, np.zeros(1, dtype=np.int16)])
    lo = c[0::2] & 15
    hi = c[1::2] & 15
    return ((hi << 4) | lo).astype(np.uint8)


def unpack_int4(packed, n=None):
    """Inverse of :func:`pack_int4`; ``n`` trims the zero pad."""
    p = np.asarray(packed, dtype=np.uint8).ravel().astype(np.int16)
    out = np.empty(p.size * 2, dtype=np.int16)
    out[0::2] = p & 15
    out[1::2] = p >> 4
    out = np.where(out > 7, out - 16, out).astype(np.int8)
    if n is not None:
        if not 0 <= n <= out.size:
            raise ValueError(f"cannot take {n} codes from {out.size}")
        out = out[:n]
    return out


# ---------------------------------------------------------------------------
# calibration statistics
# ---------------------------------------------------------------------------


@dataclass
class ActStats:
    """Running statistics of one linear layer's input [S, L, D]."""

    max_abs: np.ndarray
    tok_min: np.ndarray
    tok_max: np.ndarray
    reservoir: np.ndarray
    count: int = 0
    _keys: np.ndarray = field(default=None, repr=False)

    def update(self, x, rng, cap):
        x = np.asarray(x, dtype=np.float32)
        self.max_abs = np.maximum(self.max_abs, np.abs(x).max(axis=(0, 1)))
        self.tok_min = np.minimum(self.tok_min, x.min(axis=(0, 2)))
        self.tok_max = np.maximum(self.tok_max, x.max(axis=(0, 2)))
        self.count += x.shape[0]
        # reservoir by random keys: keep the ``cap`` values with smallest key,
        # which is a uniform sample without replacement however the stream is
        # batched
        vals = np.concatenate([self.reservoir, x.ravel()])
        keys = np.concatenate([self._keys, rng.random(x.size)])
        if vals.size > cap:
            keep = np.argpartition(keys, cap - 1)[:cap]
            keep.sort()
            vals, keys = vals[keep], keys[keep]
        self.reservoir, self._keys = vals, keys

    @classmethod
    def empty(cls, seq_len, d):
        return cls(
            max_abs=np.zeros(d, dtype=np.float32),
            tok_min=np.full(seq_len, np.inf, dtype=np.float32),
            tok_max=np.full(seq_len, -np.inf, dtype=np.float32),
            reservoir=np.zeros(0, dtype=np.float32),
            _keys=np.zeros(0),
        )


class _StatsTap(mdl.FPContext):
    def __init__(self, taps, rng, cap):
        self.taps = taps
        self.rng = rng
        self.cap = cap
        self.stats = {}

    def linear(self, path, x, layer):
        if self.taps is None or path in self.taps:
            st = self.stats.get(path)
            if st is None:
                st = self.stats[path] = ActStats.empty(x.shape[-2], x.shape[-1])
            st.update(x if x.ndim == 3 else x[None], self.rng, self.cap)
        return super().linear(path, x, layer)


def collect_activation_stats(model, calib, taps=None, cap=4096, seed=0, batch_size=64):
    """FP forward over ``calib`` recording per-layer input statistics.

    ``taps`` restricts recording to the named linear paths (default: all).
    """
    calib = np.asarray(calib, dtype=np.float32)
    if calib.ndim == 2:
        calib = calib[None]
    if calib.shape[0] == 0:
        raise ValueError("calibration set is empty")
    if taps is not None:
        known = set(model.linear_paths())
        taps = list(taps)
        for t in taps:
            if t not in known:
                raise KeyError(f"unknown tap point {t!r}")
        taps = set(taps)
    ctx = _StatsTap(taps, np.random.default_rng(seed), cap)
    for i in range(0, calib.shape[0], batch_size):
        mdl.model_forward(model, calib[i : i + batch_size], ctx)
    return ctx.stats
