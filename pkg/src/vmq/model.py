"""Desk-scale Vision-Mamba style network and its synthetic workloads.

A model is a patch embedding, an optional CLS token, a stack of selective-scan
blocks (forward or bidirectional), a final RMS norm and a linear head. Every
linear inside a block is addressed by a dotted path such as
``blocks.2.x_proj_b``; those paths are the keys used by calibration recipes.

Forward passes are batched: activations are ``[samples, tokens, channels]``
float32 arrays.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vmq import core, kernels

RMS_EPS = 1e-6

# ---------------------------------------------------------------------------
# structures
# ---------------------------------------------------------------------------


@dataclass
class Linear:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray | None = None

    @property
    def shape(self):
        return self.weight.shape


@dataclass
class SsmParams:
    """One scan direction: conv, x_proj, dt_proj, A and the skip term."""

    x_proj: Linear  # [R + 2N, E]
    dt_proj: Linear  # [E, R], with bias
    a_log: np.ndarray  # [E, N]
    d_skip: np.ndarray | None = None  # [E]
    conv_w: np.ndarray | None = None  # [E, 3], causal depthwise
    conv_b: np.ndarray | None = None  # [E]

    @property
    def A(self):
        return -np.exp(self.a_log)

    @property
    def d_state(self):
        return self.a_log.shape[1]

    @property
    def dt_rank(self):
        return self.dt_proj.weight.shape[1]


@dataclass
class Block:
    in_proj: Linear  # [2E, D_model]
    fwd: SsmParams
    out_proj: Linear  # [D_model, E]
    bwd: SsmParams | None = None

    @property
    def bidirectional(self):
        return self.bwd is not None

    @property
    def d_inner(self):
        return self.out_proj.weight.shape[1]


@dataclass(frozen=True)
class PathologySpec:
    """Engineered activation pathologies.

    ``outlier_channels`` are out_proj input channels whose gate rows are scaled
    by ``channel_gain`` (with the matching out_proj columns scaled down).
    ``token_spikes`` maps token position to an additive bias applied after
    patch embedding, with amplitude in units of the embedded-token RMS.
    ``tail_gain`` > 1 draws gate weights from a normal times a Student-t (df=3)
    sample and scales the gate rows by ``tail_gain``. ``cls_scale`` sizes the
    CLS embedding relative to the patch tokens. ``state_gain`` scales the scan
    input of the outlier channels (with x_proj and out_proj columns scaled
    down), which widens the hidden-state range.
    """

    outlier_channels: tuple[int, ...] = ()
    channel_gain: float = 1.0
    token_spikes: tuple[tuple[int, float], ...] = ()
    tail_gain: float = 1.0
    cls_scale: float = 1.0
    state_gain: float = 1.0

    def __post_init__(self):
        if self.channel_gain < 1 or self.tail_gain < 1 or self.state_gain < 1:
            raise ValueError("pathology gains must be >= 1")
        if self.cls_scale <= 0:
            raise ValueError("cls_scale must be positive")

    @property
    def heavy_tail(self):
        return self.tail_gain > 1

    def to_dict(self):
        return {
            "outlier_channels": list(self.outlier_channels),
            "channel_gain": self.channel_gain,
            "token_spikes": [list(p) for p in self.token_spikes],
            "tail_gain": self.tail_gain,
            "cls_scale": self.cls_scale,
            "state_gain": self.state_gain,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            outlier_channels=tuple(int(c) for c in d.get("outlier_channels", ())),
            channel_gain=float(d.get("channel_gain", 1.0)),
            token_spikes=tuple((int(p), float(a)) for p, a in d.get("token_spikes", ())),
            tail_gain=float(d.get("tail_gain", 1.0)),
            cls_scale=float(d.get("cls_scale", 1.0)),
            state_gain=float(d.get("state_gain", 1.0)),
        )


BENIGN = PathologySpec()
DEFAULT_PATHOLOGY = PathologySpec(
    outlier_channels=(3, 17),
    channel_gain=50.0,
    token_spikes=((9, 2.0),),
    tail_gain=2.0,
    cls_scale=0.35,
)


@dataclass(frozen=True)
class ModelSpec:
    grid_h: int = 4
    grid_w: int = 4
    patch_size: int = 2
    channels: int = 3
    d_model: int = 16
    d_inner: int = 32
    d_state: int = 4
    dt_rank: int = 2
    n_blocks: int = 2
    n_classes: int = 10
    cls_pos: int | None = -1  # None: no CLS token; -1: middle of the sequence
    bidirectional: bool = True
    use_conv: bool = True
    use_dskip: bool = True

    @property
    def n_patches(self):
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    @property
    def has_cls(self):
        return self.cls_pos is not None

    @property
    def cls_index(self):
        if self.cls_pos is None:
            return None
        if self.cls_pos == -1:
            return self.n_patches // 2
        if not 0 <= self.cls_pos <= self.n_patches:
            raise ValueError(f"cls_pos {self.cls_pos} outside [0, {self.n_patches}]")
        return self.cls_pos

    @property
    def seq_len(self):
        return self.n_patches + (1 if self.has_cls else 0)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


SIZES = {
    "tiny": ModelSpec(),
    "small": ModelSpec(
        grid_h=8, grid_w=8, patch_size=2, d_model=48, d_inner=96, d_state=8, dt_rank=3, n_blocks=4
    ),
}


@dataclass
class Model:
    spec: ModelSpec
    embed: Linear  # [D_model, patch_dim]
    blocks: list[Block]
    norm_w: np.ndarray  # [D_model]
    head: Linear  # [n_classes, D_model]
    cls_token: np.ndarray | None = None  # [D_model]
    pos_bias: np.ndarray | None = None  # [L, D_model]
    pathology: PathologySpec = field(default_factory=PathologySpec)

    def linear_paths(self):
        """Paths of every quantizable linear, in execution order."""
        paths = []
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}"
            paths += [f"{p}.in_proj", f"{p}.x_proj", f"{p}.dt_proj"]
            if blk.bidirectional:
                paths += [f"{p}.x_proj_b", f"{p}.dt_proj_b"]
            paths.append(f"{p}.out_proj")
        return paths

    def get_linear(self, path):
        _, i, name = path.split(".")
        blk = self.blocks[int(i)]
        if name in ("in_proj", "out_proj"):
            return getattr(blk, name)
        branch = blk.bwd if name.endswith("_b") else blk.fwd
        return getattr(branch, name.removesuffix("_b"))

    def scan_paths(self):
        paths = []
        for i, blk in enumerate(self.blocks):
            paths.append(f"blocks.{i}.scan")
            if blk.bidirectional:
                paths.append(f"blocks.{i}.scan_b")
        return paths


def layer_cls_row(spec, path):
    """Row of a linear's input holding the CLS token (reversed in _b branches)."""
    idx = spec.cls_index
    if idx is None:
        return None
    if path.endswith("_b"):
        return spec.seq_len - 1 - idx
    return idx


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def silu(x):
    # tanh form: no overflow for large |x|
    return x * (0.5 + 0.5 * np.tanh(0.5 * x))


def softplus(x):
    # stable form; np.logaddexp is ~10x slower on float32
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def rms_norm(x, w):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return (x / r) * w


def causal_conv3(x, w, b):
    """Depthwise causal conv of width 3 over the token axis of [S, L, E]."""
    return kernels.causal_conv3(x, w, b)


def fp_linear(x, layer):
    s, l, d = x.shape
    y = x.reshape(s * l, d) @ layer.weight.T
    if layer.bias is not None:
        y += layer.bias
    return y.reshape(s, l, -1)


class FPContext:
    """Hooks used by the forward pass. Subclasses swap in quantized linears,
    record activations, or quantize the scan state."""

    def linear(self, path, x, layer):
        return fp_linear(x, layer)

    def state_quant(self, path):
        return None

    def scan_range(self, path, lo, hi):
        pass


_FP = FPContext()
_NO_HQ = np.zeros(3)
_NO_HS = np.zeros((0, 0, 0, 0))


def zoh_discretize(a, b, delta):
    """Zero-order-hold discretization of a scalar (diagonal) SSM entry."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    da = delta * a
    abar = math.exp(da)
    if a == 0:
        return abar, delta * b
    return abar, math.expm1(da) / da * delta * b


def selective_scan(x, dt, bmat, cmat, a, d_skip=None, state_quant=None, return_range=False):
    """Input-dependent scan with Ā_t = exp(Δ̄_t A) and B̄_t = Δ̄_t B_t.

    Accepts single sequences ([L, D], [L, N]) or batches ([S, L, D], [S, L, N]).
    """
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x, dt, bmat, cmat = (np.asarray(v)[None] for v in (x, dt, bmat, cmat))
    dt = np.asarray(dt, dtype=x.dtype)
    if not np.all(dt > 0):
        raise ValueError("selective_scan requires a strictly positive step size")
    a = np.asarray(a, dtype=np.float64)
    if d_skip is None:
        d_skip = np.zeros(x.shape[-1], dtype=x.dtype)
    hq = _NO_HQ if state_quant is None else np.asarray(state_quant, dtype=np.float64)
    y, lo, hi = kernels.scan_forward(
        np.ascontiguousarray(x),
        np.ascontiguousarray(dt),
        np.ascontiguousarray(bmat, dtype=x.dtype),
        np.ascontiguousarray(cmat, dtype=x.dtype),
        a,
        np.asarray(d_skip, dtype=x.dtype),
        hq,
        _NO_HS,
    )
    if single:
        y = y[0]
    if return_range:
        return y, lo, hi
    return y


def _branch_forward(p, x, ctx, path, sfx):
    if p.conv_w is not None:
        x = silu(causal_conv3(x, p.conv_w, p.conv_b))
    r = p.dt_rank
    n = p.d_state
    dbl = ctx.linear(f"{path}.x_proj{sfx}", x, p.x_proj)
    dt_in = np.ascontiguousarray(dbl[..., :r])
    bmat = dbl[..., r : r + n]
    cmat = dbl[..., r + n : r + 2 * n]
    dt = softplus(ctx.linear(f"{path}.dt_proj{sfx}", dt_in, p.dt_proj))
    y, lo, hi = selective_scan(
        x, dt, bmat, cmat, p.A, p.d_skip, ctx.state_quant(f"{path}.scan{sfx}"), return_range=True
    )
    ctx.scan_range(f"{path}.scan{sfx}", lo, hi)
    return y


def block_forward(block, tokens, ctx=None, path="block"):
    """Residual selective-scan block on [L, D_model] or [S, L, D_model]."""
    ctx = ctx or _FP
    u = np.asarray(tokens, dtype=np.float32)
    single = u.ndim == 2
    if single:
        u = u[None]
    d_model = block.in_proj.weight.shape[1]
    if u.shape[-1] != d_model:
        raise core.DimensionError(f"block expects {d_model} channels, got {u.shape[-1]}")
    e = block.d_inner
    xz = ctx.linear(f"{path}.in_proj", u, block.in_proj)
    x, z = xz[..., :e], xz[..., e:]
    y = _branch_forward(block.fwd, np.ascontiguousarray(x), ctx, path, "")
    if block.bwd is not None:
        xb = np.ascontiguousarray(x[:, ::-1])
        yb = _branch_forward(block.bwd, xb, ctx, path, "_b")
        y = 0.5 * (y + yb[:, ::-1])
    g = y * silu(z)
    out = u + ctx.linear(f"{path}.out_proj", np.ascontiguousarray(g), block.out_proj)
    if out.shape != u.shape:
        raise core.DimensionError(f"token shape changed across block: {u.shape} -> {out.shape}")
    return out[0] if single else out


def embed_tokens(model, patches):
    spec = model.spec
    p = np.asarray(patches, dtype=np.float32)
    if p.ndim == 2:
        p = p[None]
    if p.shape[1:] != (spec.n_patches, spec.patch_dim):
        raise core.DimensionError(
            f"expected patches of shape [{spec.n_patches}, {spec.patch_dim}], got {list(p.shape[1:])}"
        )
    t = fp_linear(p, model.embed)
    if spec.has_cls:
        c = spec.cls_index
        cls = np.broadcast_to(model.cls_token, (t.shape[0], 1, spec.d_model))
        t = np.concatenate([t[:, :c], cls, t[:, c:]], axis=1)
    if model.pos_bias is not None:
        t = t + model.pos_bias
    return t.astype(np.float32)


def head_forward(model, tokens):
    t = rms_norm(tokens, model.norm_w)
    feat = t[:, model.spec.cls_index] if model.spec.has_cls else t.mean(axis=1)
    y = feat @ model.head.weight.T
    if model.head.bias is not None:
        y = y + model.head.bias
    return y


def model_forward(model, patches, ctx=None, return_tokens=False):
    """Logits for one sample ([L0, D_in]) or a batch ([S, L0, D_in])."""
    single = np.ndim(patches) == 2
    t = embed_tokens(model, patches)
    seq = model.spec.seq_len
    for i, blk in enumerate(model.blocks):
        t = block_forward(blk, t, ctx, f"blocks.{i}")
        if t.shape[1] != seq:
            raise core.DimensionError(f"token length {t.shape[1]} != {seq} after block {i}")
    logits = head_forward(model, t)
    if single:
        logits = logits[0]
        t = t[0]
    return (logits, t) if return_tokens else logits


def block_inputs(model, patches, ctx=None):
    """Residual stream entering each block, plus the final one: list of [S, L, D]."""
    t = embed_tokens(model, patches)
    outs = [t]
    for i, blk in enumerate(model.blocks):
        t = block_forward(blk, t, ctx, f"blocks.{i}")
        outs.append(t)
    return outs


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _dense(rng, out, inp, scale=1.0):
    return (rng.standard_normal((out, inp)) * (scale / math.sqrt(inp))).astype(np.float32)


def _unit_rows(w):
    return (w / np.linalg.norm(w, axis=1, keepdims=True)).astype(np.float32)


def _ssm(rng, spec):
    e, n, r = spec.d_inner, spec.d_state, spec.dt_rank
    # Mamba-style init: A = -[1..N] per channel, softplus(dt bias) log-uniform
    a_log = np.log(np.tile(np.arange(1, n + 1, dtype=np.float32), (e, 1)))
    dt0 = np.exp(rng.uniform(math.log(_DT_RANGE[0]), math.log(_DT_RANGE[1]), size=e))
    dt_bias = (dt0 + np.log(-np.expm1(-dt0))).astype(np.float32)
    p = SsmParams(
        x_proj=Linear(_dense(rng, r + 2 * n, e, scale=_XPROJ_SCALE)),
        dt_proj=Linear(_dense(rng, e, r, scale=_DTPROJ_SCALE), dt_bias),
        a_log=a_log.astype(np.float32),
        d_skip=np.ones(e, dtype=np.float32) if spec.use_dskip else None,
    )
    if spec.use_conv:
        taps = rng.standard_normal((e, 3)) * 0.5
        taps[:, 2] = np.abs(taps[:, 2]) + 1.0
        p.conv_w = _unit_rows(taps)
        p.conv_b = np.zeros(e, dtype=np.float32)
    return p


def _build(spec, seed, pathology):
    rng = np.random.default_rng(seed)
    # heavy-tail multipliers come from their own stream so that a benign
    # pathology reproduces the base model draw for draw
    tail_rng = np.random.default_rng([seed, 2])
    e, dm = spec.d_inner, spec.d_model
    blocks = []
    for _ in range(spec.n_blocks):
        x_rows = _dense(rng, e, dm)
        z_rows = _dense(rng, e, dm)
        if pathology.heavy_tail:
            z_rows *= tail_rng.standard_t(3, size=(e, dm)).astype(np.float32)
        blk = Block(
            in_proj=Linear(np.concatenate([x_rows, z_rows], axis=0)),
            fwd=_ssm(rng, spec),
            out_proj=Linear(_dense(rng, dm, e, scale=_RESIDUAL_SCALE)),
            bwd=_ssm(rng, spec) if spec.bidirectional else None,
        )
        blocks.append(blk)
    embed = Linear(_dense(rng, dm, spec.patch_dim), np.zeros(dm, dtype=np.float32))
    ref, _ = gen_calibration_set(_HEAD_REF_SEED + seed, 32, spec)
    tok_rms = float(np.sqrt(np.mean(fp_linear(ref, embed) ** 2)))
    cls = None
    if spec.has_cls:
        cls = (rng.standard_normal(dm) * tok_rms * pathology.cls_scale).astype(np.float32)
    head = Linear(_dense(rng, spec.n_classes, dm), np.zeros(spec.n_classes, dtype=np.float32))
    pos_bias = None
    if pathology.token_spikes:
        # equal-magnitude entries so no single residual channel carries the
        # spike; amplitude is in units of the embedded-token RMS
        direction = tail_rng.choice(np.array([-1.0, 1.0], dtype=np.float32), size=dm)
        pos_bias = np.zeros((spec.seq_len, dm), dtype=np.float32)
        for pos, amp in pathology.token_spikes:
            pos_bias[pos] += amp * tok_rms * direction
    model = Model(
        spec=spec,
        embed=embed,
        blocks=blocks,
        norm_w=np.ones(dm, dtype=np.float32),
        head=head,
        cls_token=cls,
        pos_bias=pos_bias,
        pathology=pathology,
    )
    # data-aware init: each in_proj row gets unit output RMS on a reference
    # batch that already carries the token spikes, then the gate rows receive
    # the tail and outlier gains on top of that common scale
    gain = np.ones(2 * e, dtype=np.float32)
    gain[e:] = pathology.tail_gain
    ch = np.asarray(pathology.outlier_channels, dtype=np.int64)
    gain[e + ch] *= pathology.channel_gain
    gain[ch] *= pathology.state_gain
    spikes = sorted({pos for pos, _ in pathology.token_spikes})
    t = embed_tokens(model, ref)
    for blk in blocks:
        # gate rows orthogonal to the typical token mean, so every gate is
        # roughly centred and SiLU does not turn a mean offset into a channel
        # outlier; the median over positions ignores spiked positions
        pos_mean = t.mean(axis=0, dtype=np.float64)
        mu = np.median(pos_mean, axis=0)
        zw = blk.in_proj.weight[e:].astype(np.float64)
        zw -= np.outer(zw @ mu, mu) / max(mu @ mu, 1e-30)
        blk.in_proj.weight[e:] = zw
        if spikes:
            # the scan branch is polynomial in its input (x, B, C and the step
            # all scale with it), so spiked positions reach the block through
            # the gate only; otherwise the spike compounds across blocks
            q, _ = np.linalg.qr((pos_mean[spikes] - mu).T)
            xw = blk.in_proj.weight[:e].astype(np.float64)
            blk.in_proj.weight[:e] = xw - (xw @ q) @ q.T
        xz = fp_linear(t, blk.in_proj)
        rms = np.sqrt(np.mean(np.square(xz, dtype=np.float64), axis=(0, 1))) + 1e-12
        blk.in_proj.weight *= (gain / rms)[:, None].astype(np.float32)
        # open gates: a row with a small input (the CLS token) still passes
        # its scan output on instead of being gated to zero
        bias = np.zeros(2 * e, dtype=np.float32)
        bias[e:] = _GATE_BIAS
        blk.in_proj.bias = bias
        if ch.size:
            blk.out_proj.weight[:, ch] /= pathology.channel_gain * pathology.state_gain
            for br in (blk.fwd, blk.bwd):
                if br is not None:
                    br.x_proj.weight[:, ch] /= pathology.state_gain
        x = fp_linear(t, blk.in_proj)[..., :e]
        _scale_scan(blk.fwd, x)
        if blk.bwd is not None:
            _scale_scan(blk.bwd, x[:, ::-1])
        t = block_forward(blk, t)
    return model


def _scale_scan(p, x):
    """Unit-RMS B and C per state, then C rescaled so the scan term (without
    the skip) has ``_SCAN_GAIN`` times the RMS of its input."""
    if p.conv_w is not None:
        x = silu(causal_conv3(np.ascontiguousarray(x), p.conv_w, p.conv_b))
    r, n = p.dt_rank, p.d_state
    w = p.x_proj.weight
    dbl = fp_linear(np.ascontiguousarray(x), p.x_proj)
    bc = np.sqrt(np.mean(np.square(dbl[..., r:], dtype=np.float64), axis=(0, 1))) + 1e-12
    w[r:] /= bc[:, None].astype(np.float32)
    dbl = fp_linear(np.ascontiguousarray(x), p.x_proj)
    dt = softplus(fp_linear(np.ascontiguousarray(dbl[..., :r]), p.dt_proj))
    y = selective_scan(x, dt, dbl[..., r : r + n], dbl[..., r + n :], p.A, None)
    ratio = np.sqrt(np.mean(np.square(y, dtype=np.float64)) / np.mean(np.square(x, dtype=np.float64)))
    w[r + n :] *= np.float32(_SCAN_GAIN / max(ratio, 1e-12))


def make_base_model(spec, seed):
    """Random model without injected pathologies."""
    return _build(spec, seed, BENIGN)


def make_pathological_model(spec, pathology=DEFAULT_PATHOLOGY, seed=0, center_head=True):
    """Random model with injected channel outliers, token spikes and a heavy
    gate tail.

    Outlier channels get ``channel_gain`` on their gate rows and the inverse on
    the matching out_proj columns, so the function changes far less than the
    out_proj input statistics do.

    With ``center_head`` the head bias is set to minus the mean logit over a
    reference batch drawn from a seed disjoint from calibration seeds, so that
    top-1 agreement is not dominated by one class.
    """
    e = spec.d_inner
    for c in pathology.outlier_channels:
        if not 0 <= c < e:
            raise ValueError(f"outlier channel {c} outside [0, {e})")
    for pos, _ in pathology.token_spikes:
        if not 0 <= pos < spec.seq_len:
            raise ValueError(f"token spike position {pos} outside [0, {spec.seq_len})")
    model = _build(spec, seed, pathology)
    if center_head:
        ref, _ = gen_calibration_set(_HEAD_REF_SEED + seed, 128, spec)
        logits = model_forward(model, ref)
        model.head.bias = (model.head.bias - logits.mean(axis=0)).astype(np.float32)
    return model


_HEAD_REF_SEED = 10_000_019
# Init scales. Without a per-block norm each block is a high-degree polynomial
# in its input, so B, C, the step and the residual increment are kept small
# enough that a 4-block stack stays bounded on every built-in size.
_XPROJ_SCALE = 0.3
_DTPROJ_SCALE = 0.3
_RESIDUAL_SCALE = 0.15
_GATE_BIAS = 1.0
_DT_RANGE = (1e-3, 1e-1)
_SCAN_GAIN = 0.3


def zero_model(spec):
    m = make_base_model(spec, 0)
    for blk in m.blocks:
        for layer in (blk.in_proj, blk.out_proj):
            layer.weight[...] = 0
        for br in (blk.fwd, blk.bwd):
            if br is None:
                continue
            br.x_proj.weight[...] = 0
            br.dt_proj.weight[...] = 0
            br.dt_proj.bias[...] = 0
            if br.conv_w is not None:
                br.conv_w[...] = 0
    m.embed.weight[...] = 0
    m.head.weight[...] = 0
    return m


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def gen_images(seed, count, spec):
    """Oriented-gradient textures with noise; labels are orientation bins."""
    rng = np.random.default_rng(seed)
    h = spec.grid_h * spec.patch_size
    w = spec.grid_w * spec.patch_size
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    theta = rng.uniform(0, math.pi, size=count)
    labels = np.minimum((theta / math.pi * spec.n_classes).astype(np.int64), spec.n_classes - 1)
    imgs = np.empty((count, spec.channels, h, w), dtype=np.float32)
    for i in range(count):
        ux, uy = math.cos(theta[i]), math.sin(theta[i])
        proj = xx * ux + yy * uy
        img = np.zeros((spec.channels, h, w))
        for k in range(3):
            freq = rng.uniform(0.5, 3.0) * (k + 1)
            phase = rng.uniform(0, 2 * math.pi)
            amp = rng.uniform(0.3, 1.0) / (k + 1)
            color = rng.uniform(0.2, 1.0, size=spec.channels)
            img += color[:, None, None] * amp * np.cos(2 * math.pi * freq * proj + phase)[None]
        img += rng.uniform(-1, 1) * proj[None]
        img += 0.1 * rng.standard_normal(img.shape)
        imgs[i] = img
    return imgs, labels


def patchify(imgs, spec):
    s, c, h, w = imgs.shape
    p = spec.patch_size
    x = imgs.reshape(s, c, spec.grid_h, p, spec.grid_w, p)
    x = x.transpose(0, 2, 4, 3, 5, 1)  # S, gh, gw, p, p, C
    return np.ascontiguousarray(x.reshape(s, spec.n_patches, spec.patch_dim), dtype=np.float32)


def gen_calibration_set(seed, count, spec):
    """Deterministic batch of patch tensors [count, L0, D_in] plus labels."""
    if count < 1:
        raise ValueError("count must be >= 1")
    imgs, labels = gen_images(seed, count, spec)
    return patchify(imgs, spec), labels


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

MODEL_FORMAT = "vmq-model"
MODEL_VERSION = 1


def _linear_tensors(prefix, layer, out):
    out[f"{prefix}.weight"] = layer.weight
    if layer.bias is not None:
        out[f"{prefix}.bias"] = layer.bias


def model_tensors(model):
    t = {}
    _linear_tensors("embed", model.embed, t)
    if model.cls_token is not None:
        t["cls_token"] = model.cls_token
    if model.pos_bias is not None:
        t["pos_bias"] = model.pos_bias
    for i, blk in enumerate(model.blocks):
        p = f"blocks.{i}"
        _linear_tensors(f"{p}.in_proj", blk.in_proj, t)
        _linear_tensors(f"{p}.out_proj", blk.out_proj, t)
        for sfx, br in (("", blk.fwd), ("_b", blk.bwd)):
            if br is None:
                continue
            _linear_tensors(f"{p}.x_proj{sfx}", br.x_proj, t)
            _linear_tensors(f"{p}.dt_proj{sfx}", br.dt_proj, t)
            t[f"{p}.a_log{sfx}"] = br.a_log
            for name in ("d_skip", "conv_w", "conv_b"):
                v = getattr(br, name)
                if v is not None:
                    t[f"{p}.{name}{sfx}"] = v
    t["norm_w"] = model.norm_w
    _linear_tensors("head", model.head, t)
    return t


def save_model(path, model):
    meta = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "spec": model.spec.to_dict(),
        "pathology": model.pathology.to_dict(),
    }
    core.save_container(path, model_tensors(model), meta)


def _lin(t, prefix):
    return Linear(t[f"{prefix}.weight"], t.get(f"{prefix}.bias"))


def load_model(path):
    t, meta = core.load_container(path, with_meta=True)
    if meta.get("format") != MODEL_FORMAT:
        raise core.ContainerError(f"{path}: not a model file (format={meta.get('format')!r})")
    if meta.get("version") != MODEL_VERSION:
        raise core.ContainerError(f"{path}: unsupported model version {meta.get('version')}")
    spec = ModelSpec.from_dict(meta["spec"])
    blocks = []
    for i in range(spec.n_blocks):
        p = f"blocks.{i}"
        branches = []
        for sfx in ("", "_b"):
            if f"{p}.a_log{sfx}" not in t:
                branches.append(None)
                continue
            branches.append(
                SsmParams(
                    x_proj=_lin(t, f"{p}.x_proj{sfx}"),
                    dt_proj=_lin(t, f"{p}.dt_proj{sfx}"),
                    a_log=t[f"{p}.a_log{sfx}"],
                    d_skip=t.get(f"{p}.d_skip{sfx}"),
                    conv_w=t.get(f"{p}.conv_w{sfx}"),
                    conv_b=t.get(f"{p}.conv_b{sfx}"),
                )
            )
        blocks.append(Block(_lin(t, f"{p}.in_proj"), branches[0], _lin(t, f"{p}.out_proj"), branches[1]))
    return Model(
        spec=spec,
        embed=_lin(t, "embed"),
        blocks=blocks,
        norm_w=t["norm_w"],
        head=_lin(t, "head"),
        cls_token=t.get("cls_token"),
        pos_bias=t.get("pos_bias"),
        pathology=PathologySpec.from_dict(meta.get("pathology", {})),
    )


def save_dataset(path, patches, labels, seed=None):
    meta = {"format": "vmq-data", "seed": seed, "count": int(len(patches))}
    core.save_container(path, {"patches": patches, "labels": labels.astype(np.int32)}, meta)


def load_dataset(path):
    t = core.load_container(Path(path))
    return t["patches"], t["labels"].astype(np.int64)
