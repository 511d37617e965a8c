"""Quantized inference: integer and fake-quant linears, recipes, ablations.

A quantized linear computes, for smoothed input rows ``x / s``::

    codes = clip(round((x / s) / dx[l]) + eps[l], 0, 2**b - 1)
    Y[l, o] = (sum_k Wbar[o, k] * codes[l, k] - eps[l] * rowsum[o]) * dw[o] * dx[l]

Activation codes are held as ``codes - 2**(b-1)`` so they fit int8 for every
supported width; the offset correction uses ``eps - 2**(b-1)`` to match.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from vmq import core, kernels, model as mdl, quant

PTS = "pts"
PER_TENSOR = "per-tensor"
DYNAMIC = "dynamic"
FP = "fp"
MODES = (PTS, PER_TENSOR, DYNAMIC, FP)

FP_BITS = 32
RECIPE_FORMAT = "vmq-recipe"
RECIPE_VERSION = 1
HSTATE_BITS = 8


class RecipeError(ValueError):
    pass


class _PhaseTimer:
    """Accumulates wall time per linear phase."""

    def __init__(self):
        self.totals = {"quantize": 0.0, "gemm": 0.0, "dequantize": 0.0}

    def add(self, phase, t0):
        t1 = time.perf_counter()
        self.totals[phase] += t1 - t0
        return t1


@dataclass
class QuantizedLinear:
    """Frozen integer weights plus activation parameters for one linear.

    ``act`` is per-token (PTS), per-tensor, or ``None`` (dynamic only).
    ``s`` is the smoothing vector whose inverse multiplies the activations.
    """

    wbar: np.ndarray
    dw: np.ndarray
    s: np.ndarray
    act: quant.QuantParams | None
    w_bits: int
    a_bits: int
    bias: np.ndarray | None = None
    cls_row: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.wbar = np.ascontiguousarray(self.wbar, dtype=np.int8)
        self.dw = np.asarray(self.dw, dtype=np.float32)
        self.s = np.asarray(self.s, dtype=np.float32)
        d_out, d_in = self.wbar.shape
        if self.dw.shape != (d_out,) or self.s.shape != (d_in,):
            raise core.DimensionError(
                f"wbar {self.wbar.shape} inconsistent with dw {self.dw.shape} / s {self.s.shape}"
            )
        wq = (1 << (self.w_bits - 1)) - 1
        if self.wbar.size and np.abs(self.wbar.astype(np.int16)).max() > wq:
            raise ValueError(f"weight codes exceed the {self.w_bits}-bit symmetric range")

    @classmethod
    def build(cls, weight, bias, s, wq, act, a_bits, cls_row=None):
        """Quantize ``weight @ diag(s)`` with the symmetric params ``wq``."""
        s = np.asarray(s, dtype=np.float32)
        wbar = quant.quantize_weights(np.asarray(weight, dtype=np.float32) * s[None, :], wq)
        return cls(wbar, wq.delta, s, act, wq.bits, a_bits, bias, cls_row)

    @property
    def d_in(self):
        return self.wbar.shape[1]

    @property
    def d_out(self):
        return self.wbar.shape[0]

    @property
    def shift(self):
        return 1 << (self.a_bits - 1)

    @property
    def aq_max(self):
        return float((1 << self.a_bits) - 1)

    def _get(self, key, fn):
        v = self._cache.get(key)
        if v is None:
            v = self._cache[key] = fn()
        return v

    @property
    def rowsum(self):
        return self._get("rowsum", lambda: self.wbar.astype(np.int32).sum(axis=1, dtype=np.int32))

    @property
    def wbar_t(self):
        return self._get("wbar_t", lambda: np.ascontiguousarray(self.wbar.T))

    @property
    def inv_s(self):
        return self._get("inv_s", lambda: (np.float32(1.0) / self.s).astype(np.float32))

    @property
    def w_hat(self):
        return self._get("w_hat", lambda: self.dw[:, None] * self.wbar.astype(np.float32))

    def _bias(self, bias):
        b = self.bias if bias is None else bias
        return np.zeros(self.d_out, dtype=np.float32) if b is None else np.asarray(b, dtype=np.float32)

    def static_tables(self, act):
        """Offset-correction and step tables for static activation params."""
        key = ("tables", id(act))

        def make():
            e = act.eps.reshape(-1).astype(np.int32) - np.int32(self.shift)
            d = act.delta.reshape(-1).astype(np.float32)
            corr = (e[:, None] * self.rowsum[None, :]).astype(np.int32)
            scale = (d[:, None] * self.dw[None, :]).astype(np.float32)
            return d, e + np.int32(self.shift), corr, scale

        return self._get(key, make)


def _rows(x, d_in):
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] != d_in:
        raise core.DimensionError(f"linear expects {d_in} input channels, got {x.shape[-1]}")
    return x, np.ascontiguousarray(x.reshape(-1, d_in))


def _static_int(ql, x2d, act, bias, timer):
    dx, eps, corr, scale = ql.static_tables(act)
    t0 = time.perf_counter() if timer else 0.0
    q = kernels.quantize_rows(x2d, ql.inv_s, dx, eps, ql.aq_max, ql.shift)
    if timer:
        t0 = timer.add("quantize", t0)
    acc = kernels.int_gemm(q, ql.wbar_t)
    if timer:
        t0 = timer.add("gemm", t0)
    y = kernels.dequantize_table(acc, corr, scale, bias)
    if timer:
        timer.add("dequantize", t0)
    return y


def _dynamic_int(ql, x2d, bias, timer):
    t0 = time.perf_counter() if timer else 0.0
    q, dx, eps = kernels.dynamic_quantize_rows(x2d, ql.inv_s, ql.aq_max, ql.shift, quant.DELTA_FLOOR)
    if timer:
        t0 = timer.add("quantize", t0)
    acc = kernels.int_gemm(q, ql.wbar_t)
    if timer:
        t0 = timer.add("gemm", t0)
    y = kernels.dequantize(acc, eps - np.int32(ql.shift), ql.rowsum, ql.dw, dx, bias)
    if timer:
        timer.add("dequantize", t0)
    return y


def _fake_static(ql, x, act, bias):
    xh = quant.fake_quant_affine(x * ql.inv_s, act)
    return xh @ ql.w_hat.T + bias


def _fake_dynamic(ql, x2d, bias):
    xs = x2d * ql.inv_s
    _, qp = quant.dynamic_per_token_quant(xs, ql.a_bits)
    return quant.fake_quant_affine(xs, qp) @ ql.w_hat.T + bias


def _run_static(ql, x, act, kind, integer, bias, cls_fp, timer):
    x, x2d = _rows(x, ql.d_in)
    lead = x.shape[:-1]
    b = ql._bias(bias)
    if kind == PTS:
        if x.ndim < 2 or x.shape[-2] != act.delta.shape[0]:
            raise core.DimensionError(
                f"PTS params cover {act.delta.shape[0]} tokens, input has {x.shape[-2] if x.ndim > 1 else 1}"
            )
    if integer:
        y = _static_int(ql, x2d, act, b, timer).reshape(*lead, ql.d_out)
    else:
        y = _fake_static(ql, x, act, b)
    return _apply_cls(ql, x, y, b, cls_fp)


def _apply_cls(ql, x, y, b, cls_fp):
    if not cls_fp or ql.cls_row is None or x.ndim < 2:
        return y
    r = ql.cls_row
    y = np.array(y, copy=True)
    y[..., r, :] = (x[..., r, :] * ql.inv_s) @ ql.w_hat.T + b
    return y


def quantized_linear_pts(ql, x, integer=True, bias=None, cls_fp=False, timer=None):
    """Per-token static linear on ``x`` [..., L, D_in]."""
    if ql.act is None or ql.act.granularity != quant.PER_TOKEN:
        raise RecipeError("PTS needs per-token activation params")
    return _run_static(ql, x, ql.act, PTS, integer, bias, cls_fp, timer)


def quantized_linear_per_tensor(ql, x, integer=True, bias=None, cls_fp=False, timer=None, act=None):
    """Per-tensor static linear. ``act`` overrides the stored params."""
    act = act or ql.act
    if act is None or act.granularity != quant.PER_TENSOR:
        raise RecipeError("per-tensor mode needs scalar activation params")
    if act.delta.ndim == 0:
        act = quant.QuantParams(act.bits, act.granularity, act.delta.reshape(1), act.eps.reshape(1), act.gamma)
    return _run_static(ql, x, act, PER_TENSOR, integer, bias, cls_fp, timer)


def quantized_linear_dynamic(ql, x, integer=True, bias=None, cls_fp=False, timer=None):
    """Per-token dynamic linear: row ranges are measured on every call."""
    x, x2d = _rows(x, ql.d_in)
    b = ql._bias(bias)
    if integer:
        y = _dynamic_int(ql, x2d, b, timer)
    else:
        y = _fake_dynamic(ql, x2d, b)
    y = y.reshape(*x.shape[:-1], ql.d_out)
    return _apply_cls(ql, x, y, b, cls_fp)


def per_tensor_from_tokens(act):
    """Scalar params covering the union of per-token ranges."""
    if act.granularity == quant.PER_TENSOR:
        return act
    d = act.delta.astype(np.float64)
    e = act.eps.astype(np.float64)
    lo = float(np.min(-e * d))
    hi = float(np.max(((1 << act.bits) - 1 - e) * d))
    delta, eps = quant.affine_from_range(lo, hi, act.bits)
    return quant.QuantParams(act.bits, quant.PER_TENSOR, delta.reshape(1), eps.reshape(1), np.float64(1.0))


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------


@dataclass
class Recipe:
    """Calibrated quantization of every linear in a model.

    ``hstate`` maps scan paths to the (lo, hi) state range used by the
    hidden-state ablation. ``meta`` carries calibration metadata.
    """

    mode: str
    w_bits: int
    a_bits: int
    layers: dict
    hstate: dict = field(default_factory=dict)
    quantize_hidden_state: bool = False
    cls_fp_override: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise RecipeError(f"unknown mode {self.mode!r}")
        if self.mode == FP:
            return
        for path, ql in self.layers.items():
            if ql.w_bits != self.w_bits or ql.a_bits != self.a_bits:
                raise RecipeError(f"{path}: bit widths differ from the recipe's W{self.w_bits}A{self.a_bits}")

    @property
    def label(self):
        if self.mode == FP:
            return "fp"
        return f"w{self.w_bits}a{self.a_bits}"

    def check_covers(self, model):
        if self.mode == FP:
            return
        for path in model.linear_paths():
            if path not in self.layers:
                raise RecipeError(f"recipe has no entry for layer {path}")

    def with_mode(self, mode):
        """Same weights and smoothing under a different activation mode."""
        if mode == self.mode:
            return self
        if self.mode == FP or mode == FP:
            raise RecipeError(f"cannot convert a {self.mode} recipe to {mode}")
        layers = {}
        for path, ql in self.layers.items():
            act = ql.act
            if mode == PER_TENSOR:
                if act is None:
                    raise RecipeError("a dynamic recipe has no static ranges to convert")
                act = per_tensor_from_tokens(act)
            elif mode == PTS:
                if act is None or act.granularity != quant.PER_TOKEN:
                    raise RecipeError("PTS needs per-token ranges from calibration")
            layers[path] = QuantizedLinear(ql.wbar, ql.dw, ql.s, act, ql.w_bits, ql.a_bits, ql.bias, ql.cls_row)
        return Recipe(
            mode, self.w_bits, self.a_bits, layers, dict(self.hstate),
            self.quantize_hidden_state, self.cls_fp_override, dict(self.meta),
        )


def fp_recipe(model):
    """The bits=32 sentinel: every linear runs in floating point."""
    return Recipe(FP, FP_BITS, FP_BITS, {}, meta={"method": "fp"})


class QuantContext(mdl.FPContext):
    """Forward hooks that run each linear per ``recipe``.

    ``linears=False`` keeps every linear in floating point (used with
    ``hstate=True`` for the hidden-state-only ablation).
    """

    def __init__(self, recipe, integer=True, linears=True, hstate=None, cls_fp=None, timer=None):
        self.recipe = recipe
        self.integer = integer
        self.linears = linears and recipe.mode != FP
        self.hstate = recipe.quantize_hidden_state if hstate is None else hstate
        self.cls_fp = recipe.cls_fp_override if cls_fp is None else cls_fp
        self.timer = timer
        self._hq = {}

    def linear(self, path, x, layer):
        if not self.linears:
            return mdl.fp_linear(x, layer)
        ql = self.recipe.layers.get(path)
        if ql is None:
            raise RecipeError(f"recipe has no entry for layer {path}")
        kw = dict(integer=self.integer, bias=layer.bias, cls_fp=self.cls_fp, timer=self.timer)
        mode = self.recipe.mode
        if mode == PTS:
            return quantized_linear_pts(ql, x, **kw)
        if mode == PER_TENSOR:
            return quantized_linear_per_tensor(ql, x, **kw)
        return quantized_linear_dynamic(ql, x, **kw)

    def state_quant(self, path):
        if not self.hstate:
            return None
        hq = self._hq.get(path)
        if hq is None:
            if path not in self.recipe.hstate:
                raise RecipeError(f"recipe has no hidden-state range for {path}")
            lo, hi = self.recipe.hstate[path]
            delta, eps = quant.affine_from_range(lo, hi, HSTATE_BITS)
            hq = self._hq[path] = np.array([delta, eps, (1 << HSTATE_BITS) - 1], dtype=np.float64)
        return hq


def quantized_model_forward(model, recipe, patches, integer=True, linears=True, hstate=None, cls_fp=None):
    """Logits with every linear replaced per ``recipe``.

    ``hstate`` / ``cls_fp`` default to the recipe's ablation flags.
    """
    recipe.check_covers(model)
    ctx = QuantContext(recipe, integer=integer, linears=linears, hstate=hstate, cls_fp=cls_fp)
    return mdl.model_forward(model, patches, ctx)


class _RangeTap(mdl.FPContext):
    def __init__(self):
        self.ranges = {}

    def scan_range(self, path, lo, hi):
        old = self.ranges.get(path)
        if old is not None:
            lo, hi = min(lo, old[0]), max(hi, old[1])
        self.ranges[path] = (float(lo), float(hi))


def calibrate_hidden_state(model, calib, batch_size=64):
    """Offline per-scan state range (lo, hi) over the calibration set."""
    calib = np.asarray(calib, dtype=np.float32)
    tap = _RangeTap()
    for i in range(0, calib.shape[0], batch_size):
        mdl.model_forward(model, calib[i : i + batch_size], tap)
    # stored as float32, so round now to make export/import exact
    return {p: (float(np.float32(lo)), float(np.float32(hi))) for p, (lo, hi) in tap.ranges.items()}


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _qp_manifest(qp):
    if qp is None:
        return None
    return {"bits": qp.bits, "granularity": qp.granularity, "gamma": np.asarray(qp.gamma).tolist()}


def export_recipe(recipe, path):
    """Write ``recipe`` as a tensor container; the manifest lives in the
    header metadata. Per-layer keys: ``<path>.{wbar,dw,dx,eps,s,rowsum}``."""
    tensors = {}
    layers = {}
    for name, ql in recipe.layers.items():
        packed = ql.w_bits == 4
        flat = ql.wbar.reshape(-1)
        tensors[f"{name}.wbar"] = quant.pack_int4(flat) if packed else ql.wbar
        tensors[f"{name}.dw"] = ql.dw
        tensors[f"{name}.s"] = ql.s
        tensors[f"{name}.rowsum"] = ql.rowsum
        if ql.act is not None:
            tensors[f"{name}.dx"] = ql.act.delta.reshape(-1)
            tensors[f"{name}.eps"] = ql.act.eps.reshape(-1)
        layers[name] = {
            "shape": list(ql.wbar.shape),
            "packed": packed,
            "logical_len": int(flat.size),
            "cls_row": ql.cls_row,
            "act": _qp_manifest(ql.act),
        }
    for name, (lo, hi) in recipe.hstate.items():
        tensors[f"{name}.hrange"] = np.array([lo, hi], dtype=np.float32)
    meta = {
        "format": RECIPE_FORMAT,
        "version": RECIPE_VERSION,
        "mode": recipe.mode,
        "w_bits": recipe.w_bits,
        "a_bits": recipe.a_bits,
        "flags": {
            "quantize_hidden_state": recipe.quantize_hidden_state,
            "cls_fp_override": recipe.cls_fp_override,
        },
        "layers": layers,
        "hstate": sorted(recipe.hstate),
        "calibration": recipe.meta,
    }
    core.save_container(path, tensors, meta)


def _need(t, key):
    if key not in t:
        raise RecipeError(f"recipe file is missing tensor {key!r}")
    return t[key]


def import_recipe(path, model=None):
    """Load a recipe; with ``model`` the layer set is validated and biases
    are attached from the model."""
    t, meta = core.load_container(path, with_meta=True)
    if meta.get("format") != RECIPE_FORMAT:
        raise RecipeError(f"{path}: not a recipe file (format={meta.get('format')!r})")
    if meta.get("version") != RECIPE_VERSION:
        raise RecipeError(f"{path}: unsupported recipe version {meta.get('version')}")
    layers = {}
    for name, info in meta["layers"].items():
        raw = _need(t, f"{name}.wbar")
        if info["packed"]:
            wbar = quant.unpack_int4(raw, info["logical_len"]).reshape(info["shape"])
        else:
            wbar = raw
        act = None
        a = info.get("act")
        if a is not None:
            act = quant.QuantParams(
                a["bits"], a["granularity"], _need(t, f"{name}.dx"), _need(t, f"{name}.eps"), np.asarray(a["gamma"])
            )
        ql = QuantizedLinear(
            wbar, _need(t, f"{name}.dw"), _need(t, f"{name}.s"), act, meta["w_bits"], meta["a_bits"],
            cls_row=info.get("cls_row"),
        )
        if not np.array_equal(ql.rowsum, _need(t, f"{name}.rowsum")):
            raise RecipeError(f"{name}: stored row sums disagree with the weight codes")
        layers[name] = ql
    hstate = {}
    for name in meta.get("hstate", []):
        lo, hi = _need(t, f"{name}.hrange").tolist()
        hstate[name] = (lo, hi)
    flags = meta.get("flags", {})
    recipe = Recipe(
        meta["mode"], meta["w_bits"], meta["a_bits"], layers, hstate,
        bool(flags.get("quantize_hidden_state", False)), bool(flags.get("cls_fp_override", False)),
        meta.get("calibration", {}),
    )
    if model is not None:
        attach_model(recipe, model)
    return recipe


def attach_model(recipe, model):
    """Validate coverage against ``model`` and copy its biases in."""
    recipe.check_covers(model)
    for p, ql in recipe.layers.items():
        try:
            layer = model.get_linear(p)
        except (ValueError, IndexError, AttributeError):
            raise RecipeError(f"model has no layer {p}") from None
        if layer.weight.shape != ql.wbar.shape:
            raise RecipeError(f"{p}: weight shape {layer.weight.shape} != recipe {ql.wbar.shape}")
        ql.bias = layer.bias
    return recipe
