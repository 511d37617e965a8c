"""Calibration: smoothing init, step-size grid search, block-wise tuning.

``calibrate`` runs the full pipeline for the ``ptq4vm`` method and the simpler
``minmax`` / ``smoothquant`` baselines, and emits a :class:`~vmq.qexec.Recipe`.

Block-wise tuning compares the quantized block output against the
floating-point block output on the same (quantized-prefix) input.
"""

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from vmq import autodiff as ad, model as mdl, qexec, quant

GRID = tuple(round(1.0 - 0.05 * i, 2) for i in range(11))
EPOCHS_BY_BITS = {8: 10, 6: 50, 4: 100}
METHODS = ("minmax", "smoothquant", "ptq4vm")
OPTIMIZERS = ("gd", "adam")


class CalibrationError(RuntimeError):
    pass


@dataclass
class Hyper:
    lr_s: float = 1e-2
    lr_q: float = 5e-4
    alpha: float = 0.5
    epochs: int | None = None
    grid: tuple = GRID
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "gd"

    def __post_init__(self):
        if not (self.lr_s >= 0 and self.lr_q >= 0):
            raise ValueError("learning rates must be non-negative")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        self.grid = tuple(sorted({float(g) for g in self.grid}, reverse=True))
        if not self.grid or any(not 0 < g <= 1 for g in self.grid) or 1.0 not in self.grid:
            raise ValueError("grid must be a non-empty subset of (0, 1] containing 1.0")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")

    def epochs_for(self, bits):
        if self.epochs is not None:
            return self.epochs
        return EPOCHS_BY_BITS.get(bits, EPOCHS_BY_BITS[4])

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "grid" in known:
            known["grid"] = tuple(known["grid"])
        return cls(**known)


@dataclass
class LayerState:
    """Learnable and frozen quantities of one linear during calibration."""

    path: str
    weight: np.ndarray
    bias: np.ndarray | None
    s: np.ndarray
    w_bits: int
    a_bits: int
    dx: np.ndarray | None = None
    eps: np.ndarray | None = None
    dw: np.ndarray | None = None
    wbar: np.ndarray | None = None
    gamma_x: np.ndarray | None = None
    gamma_w: np.ndarray | None = None
    cls_row: int | None = None

    @property
    def qmax(self):
        return (1 << self.a_bits) - 1

    def freeze(self):
        """Quantize W diag(s) with the current steps; W-bar is fixed from here on."""
        wq = quant.QuantParams(self.w_bits, quant.PER_CHANNEL, self.dw.astype(np.float32))
        self.wbar = quant.quantize_weights(self.weight * self.s.astype(np.float32)[None, :], wq)

    def params(self):
        return {"s": self.s, "dx": self.dx, "dw": self.dw}

    def quantized_linear(self):
        act = quant.QuantParams(self.a_bits, quant.PER_TOKEN, self.dx, self.eps, self.gamma_x)
        return qexec.QuantizedLinear(
            self.wbar, self.dw, self.s, act, self.w_bits, self.a_bits, self.bias, self.cls_row
        )


@dataclass
class CalibState:
    layers: dict
    stage: str = "init"
    history: dict = field(default_factory=dict)
    moments: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


def stage1_smooth_init(model, calib, alpha=0.5, stats=None):
    """Per-linear smoothing scales from FP activation maxima and weight
    column maxima."""
    if stats is None:
        stats = quant.collect_activation_stats(model, calib)
    scales = {}
    for path in model.linear_paths():
        w = model.get_linear(path).weight
        s = quant.smooth_scale(stats[path].max_abs, np.abs(w).max(axis=0), alpha)
        scales[path] = quant.SmoothScale(s, alpha)
    return scales


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


def _sorted_grid(grid):
    g = sorted({float(v) for v in grid}, reverse=True)
    if not g:
        raise ValueError("grid must be non-empty")
    return g


def grid_search_affine(x, bits, grid=GRID):
    """Per-tensor clip ratio minimizing the squared fake-quant error.

    Ties go to the larger ratio. Returns ``(gamma, QuantParams, losses)`` with
    ``losses`` aligned to the descending grid.
    """
    x = np.asarray(x, dtype=np.float32)
    g = _sorted_grid(grid)
    losses = []
    for gamma in g:
        qp = quant.minmax_affine_params(x, bits, gamma)
        err = x.astype(np.float64) - quant.fake_quant_affine(x, qp)
        losses.append(float(np.sum(err * err)))
    k = int(np.argmin(losses))
    return g[k], quant.minmax_affine_params(x, bits, g[k]), losses


def grid_search_tokens(acts, bits, grid=GRID):
    """Per-position clip ratios for ``acts`` [S, L, D], errors pooled over
    samples and channels."""
    a = np.asarray(acts, dtype=np.float32)
    if a.ndim == 2:
        a = a[None]
    g = _sorted_grid(grid)
    lo = a.min(axis=(0, 2))
    hi = a.max(axis=(0, 2))
    losses = np.empty((len(g), a.shape[1]))
    for i, gamma in enumerate(g):
        delta, eps = quant.affine_from_range(lo, hi, bits, gamma)
        qp = quant.QuantParams(bits, quant.PER_TOKEN, delta, eps)
        err = a.astype(np.float64) - quant.fake_quant_affine(a, qp)
        losses[i] = np.einsum("sld,sld->l", err, err)
    k = np.argmin(losses, axis=0)
    gam = np.asarray(g)[k]
    delta, eps = quant.affine_from_range(lo, hi, bits, gam)
    return quant.QuantParams(bits, quant.PER_TOKEN, delta, eps, gam)


def grid_search_weights(w, bits, grid=GRID):
    """Per-output-row clip ratios for symmetric weight quantization."""
    w = np.asarray(w, dtype=np.float32)
    g = _sorted_grid(grid)
    losses = np.empty((len(g), w.shape[0]))
    for i, gamma in enumerate(g):
        qp = quant.symmetric_weight_params(w, bits, gamma)
        err = w.astype(np.float64) - quant.fake_quant_symmetric(w, qp)
        losses[i] = np.einsum("ok,ok->o", err, err)
    k = np.argmin(losses, axis=0)
    return quant.symmetric_weight_params(w, bits, np.asarray(g)[k])


def stage2_grid_search(acts, weight, bits, grid=GRID, s=None):
    """Initial (weight, activation) params for one linear.

    ``acts`` are the layer's raw inputs [S, L, D_in]; with ``s`` both sides
    are searched in the smoothed domain (``acts / s``, ``W diag(s)``).
    Returns ``(wq, act)``.
    """
    w_bits, a_bits = bits if isinstance(bits, tuple) else (bits, bits)
    weight = np.asarray(weight, dtype=np.float32)
    acts = np.asarray(acts, dtype=np.float32)
    if s is not None:
        s = np.asarray(s, dtype=np.float32)
        weight = weight * s[None, :]
        acts = acts / s
    return grid_search_weights(weight, w_bits, grid), grid_search_tokens(acts, a_bits, grid)


# ---------------------------------------------------------------------------
# differentiable block
# ---------------------------------------------------------------------------


class _Graph:
    """Builds the fake-quant block on a tape, creating parameter leaves."""

    def __init__(self, states, frozen=None, quantize=True):
        self.tape = ad.Tape()
        self.states = states
        self.frozen = frozen
        self.residuals = {}
        self.vars = {}
        self.quantize = quantize

    def linear(self, path, x):
        st = self.states[path]
        if not self.quantize:
            return ad.linear(self.tape, x, st.weight.astype(np.float64), st.bias)
        pv = {k: self.tape.leaf(v, requires_grad=True) for k, v in st.params().items()}
        self.vars[path] = pv
        fr = None if self.frozen is None else self.frozen[path]
        out, r = ad.quant_linear(
            self.tape, x, pv["s"], pv["dx"], st.eps, st.qmax, pv["dw"], st.wbar,
            None if st.bias is None else st.bias.astype(np.float64), fr,
        )
        self.residuals[path] = r
        return out


def _branch(gr, p, x, path, sfx):
    t = gr.tape
    if p.conv_w is not None:
        x = ad.silu(t, ad.causal_conv3(t, x, p.conv_w.astype(np.float64), None if p.conv_b is None else p.conv_b))
    r, n = p.dt_rank, p.d_state
    dbl = gr.linear(f"{path}.x_proj{sfx}", x)
    dt_in = ad.take(t, dbl, 0, r)
    bmat = ad.take(t, dbl, r, r + n)
    cmat = ad.take(t, dbl, r + n, r + 2 * n)
    dt = ad.softplus(t, gr.linear(f"{path}.dt_proj{sfx}", dt_in))
    return ad.scan(t, x, dt, bmat, cmat, p.A, p.d_skip)


def block_graph(gr, block, u, path):
    """Output of ``block`` on ``u`` [S, L, D], residual included."""
    t = gr.tape
    uv = t.const(u)
    e = block.d_inner
    xz = gr.linear(f"{path}.in_proj", uv)
    x = ad.take(t, xz, 0, e)
    z = ad.take(t, xz, e, 2 * e)
    y = _branch(gr, block.fwd, x, path, "")
    if block.bwd is not None:
        yb = _branch(gr, block.bwd, ad.flip(t, x), path, "_b")
        y = ad.scale(t, ad.add(t, y, ad.flip(t, yb)), 0.5)
    g = ad.mul(t, y, ad.silu(t, z))
    return ad.add(t, uv, gr.linear(f"{path}.out_proj", g))


def block_paths(block, path):
    paths = [f"{path}.in_proj", f"{path}.x_proj", f"{path}.dt_proj"]
    if block.bwd is not None:
        paths += [f"{path}.x_proj_b", f"{path}.dt_proj_b"]
    paths.append(f"{path}.out_proj")
    return paths


def fp_block(block, u):
    """Floating-point block output on ``u`` (the tuning target)."""
    return mdl.block_forward(block, u).astype(np.float64)


def block_loss(block, states, u, y_ref, path="block", frozen=None):
    gr = _Graph(states, frozen)
    out = block_graph(gr, block, np.asarray(u, dtype=np.float64), path)
    return float(ad.cosine_loss(gr.tape, out, y_ref).value)


def block_backward(block, states, u, y_ref, path="block", frozen=None):
    """Loss and gradients ``{layer: {"s", "dx", "dw"}}`` of the cosine loss.

    Also returns the rounding residuals of this evaluation, which can be fed
    back as ``frozen`` to evaluate the matching smooth surrogate.
    """
    gr = _Graph(states, frozen)
    out = block_graph(gr, block, np.asarray(u, dtype=np.float64), path)
    loss = ad.cosine_loss(gr.tape, out, y_ref)
    gr.tape.backward(loss)
    grads = {}
    for p, pv in gr.vars.items():
        gd = {}
        for k, v in pv.items():
            g = v.grad if v.grad is not None else np.zeros_like(v.value)
            if not np.all(np.isfinite(g)):
                raise CalibrationError(f"non-finite gradient for {k} of {p}")
            gd[k] = g
        grads[p] = gd
    return float(loss.value), grads, gr.residuals


# ---------------------------------------------------------------------------
# stage 3
# ---------------------------------------------------------------------------

_ADAM = (0.9, 0.999, 1e-8)


def _step(state, key, layer, name, g, lr, optimizer):
    p = getattr(layer, name)
    if optimizer == "adam":
        b1, b2, eps = _ADAM
        m, v, n = state.moments.get(key, (np.zeros_like(p), np.zeros_like(p), 0))
        n += 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.moments[key] = (m, v, n)
        upd = lr * (m / (1 - b1**n)) / (np.sqrt(v / (1 - b2**n)) + eps)
    else:
        upd = lr * g
    setattr(layer, name, np.maximum(p - upd, quant.DELTA_FLOOR))


def _eval_loss(block, states, u, y_ref, path, bs):
    tot = 0.0
    for i in range(0, u.shape[0], bs):
        tot += block_loss(block, states, u[i : i + bs], y_ref[i : i + bs], path) * min(bs, u.shape[0] - i)
    return tot / u.shape[0]


def _snapshot(states, paths):
    return {p: {k: v.copy() for k, v in states[p].params().items()} for p in paths}


def _restore(states, snap):
    for p, d in snap.items():
        for k, v in d.items():
            setattr(states[p], k, v.copy())


def stage3_block_tune(block, path, u, y_ref, state, hyper, epochs, rng=None):
    """Tune (s, dx, dw) of one block; keeps the epoch-best parameters.

    Each epoch makes three passes over the data: one updating only s, then
    one for dx, then one for dw.
    Returns the loss history ``[post-stage-2, epoch 1, ...]``.
    """
    rng = rng or np.random.default_rng(hyper.seed)
    paths = block_paths(block, path)
    states = state.layers
    u = np.asarray(u, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    bs = hyper.batch_size
    best = _eval_loss(block, states, u, y_ref, path, bs)
    if not math.isfinite(best):
        raise CalibrationError(f"{path}: initial loss is not finite")
    best_snap = _snapshot(states, paths)
    history = [best]
    groups = (("s", hyper.lr_s), ("dx", hyper.lr_q), ("dw", hyper.lr_q))
    for _ in range(epochs):
        for name, lr in groups:
            order = rng.permutation(u.shape[0])
            for i in range(0, u.shape[0], bs):
                idx = order[i : i + bs]
                _, grads, _ = block_backward(block, states, u[idx], y_ref[idx], path)
                for p in paths:
                    _step(state, (p, name), states[p], name, grads[p][name], lr, hyper.optimizer)
        loss = _eval_loss(block, states, u, y_ref, path, bs)
        if not math.isfinite(loss):
            raise CalibrationError(f"{path}: loss became non-finite")
        history.append(loss)
        if loss < best:
            best = loss
            best_snap = _snapshot(states, paths)
    _restore(states, best_snap)
    state.history[path] = history
    return history


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


class _InputTap(mdl.FPContext):
    def __init__(self, paths):
        self.paths = set(paths)
        self.acts = {}

    def linear(self, path, x, layer):
        if path in self.paths:
            self.acts.setdefault(path, []).append(np.array(x, copy=True))
        return super().linear(path, x, layer)


def _block_layer_inputs(block, u, path, bs=64):
    tap = _InputTap(block_paths(block, path))
    for i in range(0, u.shape[0], bs):
        mdl.block_forward(block, u[i : i + bs], tap, path)
    return {p: np.concatenate(v) for p, v in tap.acts.items()}


def _parse_bits(bits):
    if bits in ("fp", None, qexec.FP_BITS):
        return None
    if isinstance(bits, str):
        b = bits.lower()
        if not (b.startswith("w") and "a" in b):
            raise ValueError(f"bits must look like w4a4 or fp, got {bits!r}")
        w, a = b[1:].split("a")
        bits = (int(w), int(a))
    if isinstance(bits, int):
        bits = (bits, bits)
    w, a = bits
    if w == qexec.FP_BITS and a == qexec.FP_BITS:
        return None
    return quant.check_bits(w), quant.check_bits(a)


class _SmoothedRangeTap(mdl.FPContext):
    """Global min/max of smoothed inputs (x / s) per linear."""

    def __init__(self, scales):
        self.scales = scales
        self.ranges = {}

    def linear(self, path, x, layer):
        xs = x / self.scales[path].s if self.scales else x
        lo, hi = float(xs.min()), float(xs.max())
        old = self.ranges.get(path)
        if old is not None:
            lo, hi = min(lo, old[0]), max(hi, old[1])
        self.ranges[path] = (lo, hi)
        return super().linear(path, x, layer)


def _minmax_recipe(model, calib, w_bits, a_bits, scales, method, bs=64):
    tap = _SmoothedRangeTap(scales)
    for i in range(0, calib.shape[0], bs):
        mdl.model_forward(model, calib[i : i + bs], tap)
    layers = {}
    for path in model.linear_paths():
        layer = model.get_linear(path)
        s = scales[path].s if scales else np.ones(layer.weight.shape[1], dtype=np.float32)
        lo, hi = tap.ranges[path]
        delta, eps = quant.affine_from_range(lo, hi, a_bits)
        act = quant.QuantParams(a_bits, quant.PER_TENSOR, delta.reshape(1), eps.reshape(1))
        wq = quant.symmetric_weight_params(layer.weight * s[None, :], w_bits)
        layers[path] = qexec.QuantizedLinear.build(
            layer.weight, layer.bias, s, wq, act, a_bits, mdl.layer_cls_row(model.spec, path)
        )
    return qexec.Recipe(qexec.PER_TENSOR, w_bits, a_bits, layers, meta={"method": method})


def calibrate(model, calib, bits, hyper=None, method="ptq4vm", log=None):
    """Calibrate ``model`` on ``calib`` [S, L0, D_in] and return a recipe.

    ``bits`` is ``"w4a4"``-style, an int, a ``(w, a)`` pair, or ``"fp"`` (the
    32-bit sentinel, which reproduces FP logits exactly).
    """
    hyper = hyper or Hyper()
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    calib = np.asarray(calib, dtype=np.float32)
    if calib.ndim != 3 or calib.shape[0] == 0:
        raise ValueError(f"calibration set must be a non-empty [S, L0, D_in] batch, got {calib.shape}")
    spec = model.spec
    if calib.shape[1:] != (spec.n_patches, spec.patch_dim):
        raise ValueError(
            f"calibration patches {list(calib.shape[1:])} do not match the model ({spec.n_patches}, {spec.patch_dim})"
        )
    parsed = _parse_bits(bits)
    t0 = time.perf_counter()
    if parsed is None:
        return qexec.fp_recipe(model)
    w_bits, a_bits = parsed
    hstate = qexec.calibrate_hidden_state(model, calib)
    meta = {"method": method, "hyper": hyper.to_dict(), "calib_count": int(calib.shape[0])}
    if method == "minmax":
        recipe = _minmax_recipe(model, calib, w_bits, a_bits, None, method)
    else:
        scales = stage1_smooth_init(model, calib, hyper.alpha)
        if method == "smoothquant":
            recipe = _minmax_recipe(model, calib, w_bits, a_bits, scales, method)
        else:
            recipe = _ptq4vm(model, calib, w_bits, a_bits, scales, hyper, meta, log)
    recipe.hstate = hstate
    recipe.meta.update(meta)
    recipe.meta["seconds"] = round(time.perf_counter() - t0, 3)
    return recipe


def _ptq4vm(model, calib, w_bits, a_bits, scales, hyper, meta, log):
    rng = np.random.default_rng(hyper.seed)
    state = CalibState(layers={})
    epochs = hyper.epochs_for(a_bits)
    u = mdl.embed_tokens(model, calib)
    blocks_meta = []
    layers = {}
    for k, block in enumerate(model.blocks):
        path = f"blocks.{k}"
        paths = block_paths(block, path)
        acts = _block_layer_inputs(block, u, path)
        for p in paths:
            layer = model.get_linear(p)
            s = scales[p].s.astype(np.float64)
            wq, act = stage2_grid_search(acts[p], layer.weight, (w_bits, a_bits), hyper.grid, scales[p].s)
            st = LayerState(
                p, layer.weight, layer.bias, s, w_bits, a_bits,
                dx=act.delta.astype(np.float64), eps=act.eps, dw=wq.delta.astype(np.float64),
                gamma_x=act.gamma, gamma_w=wq.gamma, cls_row=mdl.layer_cls_row(model.spec, p),
            )
            st.freeze()
            state.layers[p] = st
        state.stage = "grid"
        y_ref = fp_block(block, u)
        hist = stage3_block_tune(block, path, u, y_ref, state, hyper, epochs, rng)
        blocks_meta.append({"block": path, "loss_grid": hist[0], "loss_final": min(hist), "epochs": epochs})
        if log:
            log(f"{path}: loss {hist[0]:.6g} -> {min(hist):.6g} over {epochs} epochs")
        for p in paths:
            layers[p] = state.layers[p].quantized_linear()
        sub = qexec.Recipe(qexec.PTS, w_bits, a_bits, {p: layers[p] for p in paths})
        u = mdl.block_forward(block, u, qexec.QuantContext(sub), path)
    state.stage = "tuned"
    meta["blocks"] = blocks_meta
    return qexec.Recipe(qexec.PTS, w_bits, a_bits, layers, meta={})
