"""Activation observations, fidelity metrics and the latency harness.

CSV headers
-----------
Distribution reports (``report_rows``)::

    layer,kind,index,value

with ``kind`` one of ``token`` (per-token mean |a|), ``channel`` (per-channel
mean |a|), ``flagged`` (value 1 per flagged channel), ``percentile`` (index
is the percentile), ``long_tail`` and ``token_corr`` (index 0).

Benchmarks (``bench_rows``)::

    mode,batch,warmup,reps,median_s,smooth_s,quantize_s,gemm_s,dequantize_s,backend,threads
"""

import csv
import gc
import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from vmq import _jit, model as mdl, qexec

OUTLIER_K = 5.0
TAIL_PERCENTILES = (1.0, 99.0)
MIN_TAIL_VALUES = 100
REPORT_PERCENTILES = (0.0, 1.0, 5.0, 25.0, 50.0, 75.0, 95.0, 99.0, 100.0)
PHASES = ("smooth", "quantize", "gemm", "dequantize")

# A layer input counts as benign when its peak token sits below
# BENIGN_PEAK_RATIO times the median token, no channel is flagged at
# OUTLIER_K, and the long-tail ratio stays below BENIGN_TAIL_RATIO.
BENIGN_PEAK_RATIO = 4.0
BENIGN_TAIL_RATIO = 15.0


@dataclass
class DistributionReport:
    token_profile: np.ndarray
    channel_profile: np.ndarray
    flagged: list
    long_tail: float
    degenerate: bool
    percentiles: dict
    token_corr: float

    def to_dict(self):
        return {
            "token_profile": self.token_profile.tolist(),
            "channel_profile": self.channel_profile.tolist(),
            "flagged": list(self.flagged),
            "long_tail": self.long_tail,
            "degenerate": self.degenerate,
            "percentiles": {str(k): v for k, v in self.percentiles.items()},
            "token_corr": self.token_corr,
        }


def _as_3d(acts):
    a = np.asarray(acts, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[0] < 1:
        raise ValueError(f"activations must be [S, L, D] with S >= 1, got shape {a.shape}")
    return a


def token_variance_report(acts):
    """Per-token mean |a| over samples and channels, plus the mean pairwise
    correlation of per-sample token profiles (1.0 when S == 1 or profiles are
    flat)."""
    a = np.abs(_as_3d(acts))
    profile = a.mean(axis=(0, 2))
    per_sample = a.mean(axis=2)
    return profile, _profile_corr(per_sample)


def _profile_corr(p):
    if p.shape[0] < 2:
        return 1.0
    c = p - p.mean(axis=1, keepdims=True)
    n = np.linalg.norm(c, axis=1)
    live = n > 0
    if live.sum() < 2:
        return 1.0
    c = c[live] / n[live, None]
    g = c @ c.T
    k = g.shape[0]
    return float((g.sum() - np.trace(g)) / (k * (k - 1)))


def channel_outlier_report(acts, k=OUTLIER_K):
    """Channels whose mean |a| exceeds ``k`` times the median channel."""
    if not k > 1:
        raise ValueError(f"outlier threshold k must be > 1, got {k}")
    a = np.abs(_as_3d(acts))
    prof = a.mean(axis=(0, 1))
    med = np.median(prof)
    flagged = np.flatnonzero(prof > k * med)
    return prof, sorted(int(c) for c in flagged)


def long_tail_metric(acts, percentiles=TAIL_PERCENTILES):
    """``(max - min) / (p_hi - p_lo)``; returns ``(ratio, degenerate)``.

    A zero denominator yields ``(1.0, True)``.
    """
    v = np.asarray(acts, dtype=np.float64).ravel()
    if v.size < MIN_TAIL_VALUES:
        raise ValueError(f"long-tail metric needs at least {MIN_TAIL_VALUES} values, got {v.size}")
    lo, hi = np.percentile(v, percentiles)
    den = hi - lo
    if not den > 0:
        return 1.0, True
    return float((v.max() - v.min()) / den), False


def peak_token_ratio(report):
    prof = report.token_profile
    med = np.median(prof)
    return float(prof.max() / med) if med > 0 else 1.0


def is_benign(report):
    return (
        peak_token_ratio(report) < BENIGN_PEAK_RATIO
        and not report.flagged
        and report.long_tail < BENIGN_TAIL_RATIO
    )


def distribution_report(acts, k=OUTLIER_K):
    a = _as_3d(acts)
    tok, corr = token_variance_report(a)
    chan, flagged = channel_outlier_report(a, k)
    tail, degenerate = long_tail_metric(a)
    pct = dict(zip(REPORT_PERCENTILES, np.percentile(a, REPORT_PERCENTILES).tolist()))
    return DistributionReport(tok, chan, flagged, tail, degenerate, pct, corr)


class _LayerTap(mdl.FPContext):
    def __init__(self, paths):
        self.paths = set(paths)
        self.acts = {p: [] for p in paths}

    def linear(self, path, x, layer):
        if path in self.paths:
            self.acts[path].append(np.array(x, copy=True))
        return super().linear(path, x, layer)


def layer_inputs(model, patches, layers, batch_size=64):
    """FP input activations [S, L, D] of each named linear."""
    known = set(model.linear_paths())
    for p in layers:
        if p not in known:
            raise KeyError(f"unknown layer {p!r}")
    tap = _LayerTap(layers)
    patches = np.asarray(patches, dtype=np.float32)
    for i in range(0, patches.shape[0], batch_size):
        mdl.model_forward(model, patches[i : i + batch_size], tap)
    return {p: np.concatenate(v) for p, v in tap.acts.items()}


def analyze(model, patches, layers, k=OUTLIER_K):
    acts = layer_inputs(model, patches, layers)
    return {p: distribution_report(a, k) for p, a in acts.items()}


def report_rows(reports):
    rows = []
    for layer, r in reports.items():
        rows += [(layer, "token", i, float(v)) for i, v in enumerate(r.token_profile)]
        rows += [(layer, "channel", i, float(v)) for i, v in enumerate(r.channel_profile)]
        rows += [(layer, "flagged", c, 1.0) for c in r.flagged]
        rows += [(layer, "percentile", p, float(v)) for p, v in r.percentiles.items()]
        rows.append((layer, "long_tail", 0, r.long_tail))
        rows.append((layer, "token_corr", 0, r.token_corr))
    return rows


def write_csv(header, rows, path=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


REPORT_HEADER = ("layer", "kind", "index", "value")


# ---------------------------------------------------------------------------
# fidelity
# ---------------------------------------------------------------------------


def fidelity_metrics(fp_logits, q_logits):
    """Mean per-sample cosine, top-1 agreement and mean |logit error|."""
    a = np.asarray(fp_logits, dtype=np.float64)
    b = np.asarray(q_logits, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"logit shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 1:
        a, b = a[None], b[None]
    dot = (a * b).sum(axis=1)
    cos = dot / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), np.finfo(np.float64).tiny)
    both_zero = (np.abs(a).sum(axis=1) == 0) & (np.abs(b).sum(axis=1) == 0)
    cos = np.where(both_zero, 1.0, cos)
    return {
        "cosine": float(cos.mean()),
        "agreement": float(np.mean(a.argmax(axis=1) == b.argmax(axis=1))),
        "mae": float(np.abs(a - b).mean()),
    }


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------


@dataclass
class BenchResult:
    """Median full-forward latency and per-phase medians over the linears.

    Smoothing is fused into the quantize kernel, so ``smooth`` is always 0
    and its cost is part of ``quantize``.
    """

    mode: str
    batch: int
    warmup: int
    reps: int
    median_s: float
    phases: dict
    samples: list = field(repr=False, default_factory=list)
    backend: str = ""
    threads: int | None = None

    def row(self):
        return (
            self.mode, self.batch, self.warmup, self.reps, self.median_s,
            *(float(self.phases.get(p, 0.0)) for p in PHASES),
            self.backend, "" if self.threads is None else self.threads,
        )

    def to_text(self):
        lines = [
            f"mode: {self.mode}",
            f"batch: {self.batch}",
            f"warmup: {self.warmup}",
            f"reps: {self.reps}",
            f"median_ms: {self.median_s * 1e3:.4f}",
        ]
        lines += [f"{p}_ms: {self.phases.get(p, 0.0) * 1e3:.4f}" for p in PHASES]
        lines += [f"backend: {self.backend}", f"threads: {self.threads or 'default'}"]
        return "\n".join(lines) + "\n"


BENCH_HEADER = (
    "mode", "batch", "warmup", "reps", "median_s",
    *(f"{p}_s" for p in PHASES), "backend", "threads",
)


def _bench_checks(model, recipe, mode, batch, warmup, reps):
    if mode not in qexec.MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if recipe.mode != mode:
        raise qexec.RecipeError(f"recipe mode {recipe.mode!r} does not match requested mode {mode!r}")
    if reps < 1 or warmup < 0 or batch < 1:
        raise ValueError("need reps >= 1, warmup >= 0, batch >= 1")
    recipe.check_covers(model)


def _timed_forward(model, recipe, patches):
    timer = qexec._PhaseTimer()
    ctx = qexec.QuantContext(recipe, timer=timer)
    t0 = time.perf_counter()
    mdl.model_forward(model, patches, ctx)
    return time.perf_counter() - t0, timer.totals


def bench_modes(model, recipes, batch=32, warmup=100, reps=100, patches=None, seed=0):
    """Median wall time of a full integer-path forward for each mode.

    ``recipes`` maps mode to a recipe in that mode. Modes are interleaved
    round by round, for warmup as well as for timing, so slow drift in
    machine speed hits every mode alike. As in ``timeit``, the garbage
    collector is paused while timing, so collections triggered by objects
    the caller keeps alive do not land inside a forward. Returns
    ``{mode: BenchResult}``.
    """
    for mode, recipe in recipes.items():
        _bench_checks(model, recipe, mode, batch, warmup, reps)
    if patches is None:
        patches, _ = mdl.gen_calibration_set(seed, batch, model.spec)
    patches = np.asarray(patches, dtype=np.float32)[:batch]
    for _ in range(warmup):
        for recipe in recipes.values():
            mdl.model_forward(model, patches, qexec.QuantContext(recipe))
    samples = {m: [] for m in recipes}
    phase_samples = {m: {p: [] for p in PHASES} for m in recipes}
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(reps):
            for mode, recipe in recipes.items():
                dt, totals = _timed_forward(model, recipe, patches)
                samples[mode].append(dt)
                for p in PHASES:
                    phase_samples[mode][p].append(totals.get(p, 0.0))
    finally:
        if was_enabled:
            gc.enable()
    return {
        mode: BenchResult(
            mode=mode,
            batch=int(patches.shape[0]),
            warmup=warmup,
            reps=reps,
            median_s=statistics.median(samples[mode]),
            phases={p: statistics.median(v) for p, v in phase_samples[mode].items()},
            samples=samples[mode],
            backend=_jit.backend_name(),
            threads=_jit.thread_limit(),
        )
        for mode in recipes
    }


def bench_latency(model, recipe, mode, batch=32, warmup=100, reps=100, patches=None, seed=0):
    """Median wall time of a full integer-path forward in ``mode``."""
    return bench_modes(model, {mode: recipe}, batch, warmup, reps, patches, seed)[mode]
