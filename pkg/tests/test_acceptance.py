"""The twelve acceptance criteria, each at its stated tolerance and runtime.

Every test prints one ``criterion N: PASS|FAIL`` line; the lines are
repeated in the pytest terminal summary.
"""

import os
import time

import numpy as np
import pytest

import fdcheck
from test_jlss import oracle_grid_gamma
from test_qexec import fake_reference, random_layer, rel
from vmq import _jit, insight, jlss, model as mdl, qexec, quant

CALIB_SEED, CALIB_COUNT = 1, 256
EVAL_SEED, EVAL_COUNT = 2, 1000


@pytest.fixture(scope="module", autouse=True)
def single_thread():
    old = os.environ.get("VMQ_THREADS")
    os.environ["VMQ_THREADS"] = "1"
    _jit.apply_thread_limit()
    yield
    if old is None:
        os.environ.pop("VMQ_THREADS")
    else:
        os.environ["VMQ_THREADS"] = old


def test_c01_quantizer_correctness(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst, idem = 0.0, True
    for i in range(1000):
        x = (rng.standard_normal(rng.integers(1, 200)) * rng.uniform(1e-3, 1e3) + rng.uniform(-5, 5)).astype(np.float32)
        bits, gamma = int(rng.integers(2, 9)), float(rng.uniform(0.5, 1.0))
        qp = quant.minmax_affine_params(x, bits, gamma)
        xh = quant.fake_quant_affine(x, qp)
        d = float(qp.delta)
        inside = (x >= -float(qp.eps) * d) & (x <= (qp.qmax - float(qp.eps)) * d)
        if inside.any():
            # float32 storage contributes one ulp of |x| on top of the bound
            slack = np.abs(x - xh)[inside] - d / 2 - 1e-6 - np.spacing(np.abs(x[inside]))
            worst = max(worst, float(slack.max()))
        idem &= bool(np.array_equal(quant.fake_quant_affine(xh, qp), xh))
    dt = time.perf_counter() - t0
    ok = worst <= 0 and idem and dt < 5
    criterion(1, ok, f"worst excess {worst:.3g}, idempotent {idem}, {dt:.2f} s")


def test_c02_smoothing_identity(criterion):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    drift = 0.0
    for _ in range(100):
        d_in, d_out = rng.integers(1, 64, 2)
        w = rng.standard_normal((d_out, d_in)).astype(np.float32)
        x = (rng.standard_normal((16, d_in)) * rng.uniform(0.1, 20, d_in)).astype(np.float32)
        s = rng.uniform(0.05, 20, d_in).astype(np.float32)
        new, _, sc = quant.apply_smoothing(mdl.Linear(w, None), s)
        y0 = x.astype(np.float64) @ w.T.astype(np.float64)
        y1 = (x * sc.inv) @ new.weight.T
        drift = max(drift, float(np.linalg.norm(y1 - y0) / np.linalg.norm(y0)))
    dt = time.perf_counter() - t0
    criterion(2, drift < 1e-5 and dt < 5, f"max relative drift {drift:.3g}, {dt:.2f} s")


def test_c03_pts_decomposition(criterion):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst, nonzero_eps, packed = 0.0, 0, 0
    for i in range(200):
        w4 = i % 2 == 1
        ql, x = random_layer(rng, 4 if w4 else 8, 8, packed=w4)
        packed += w4
        nonzero_eps += bool(np.any(ql.act.eps != 0))
        yi = qexec.quantized_linear_pts(ql, x, integer=True)
        worst = max(worst, rel(yi, qexec.quantized_linear_pts(ql, x, integer=False)), rel(yi, fake_reference(ql, x, ql.act)))
    dt = time.perf_counter() - t0
    ok = worst < 1e-5 and nonzero_eps > 100 and packed == 100 and dt < 30
    criterion(3, ok, f"worst rel {worst:.3g}, {nonzero_eps}/200 with eps != 0, {packed} packed int4, {dt:.2f} s")


def test_c04_int4_packing(criterion):
    lo, hi = np.meshgrid(np.arange(-8, 8), np.arange(-8, 8))
    pairs = np.stack([lo.ravel(), hi.ravel()], axis=1).ravel()
    packed = quant.pack_int4(pairs)
    bij = sorted(packed.tolist()) == list(range(256)) and np.array_equal(quant.unpack_int4(packed), pairs)
    byte = int(quant.pack_int4([3, -2])[0])
    criterion(4, bij and byte == 0xE3, f"bijective {bij}, pack([3, -2]) = {byte:#04x}")


def test_c05_grid_search_oracle(criterion):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    mismatches = 0
    for i in range(100):
        x = (rng.standard_normal(16) * rng.uniform(0.1, 10)).astype(np.float32)
        x[rng.integers(16)] *= rng.uniform(1, 8)
        bits = int(rng.choice([2, 4, 8]))
        g, _, _ = jlss.grid_search_affine(x, bits, jlss.GRID)
        mismatches += g != oracle_grid_gamma(x, bits, jlss.GRID)
    dt = time.perf_counter() - t0
    criterion(5, mismatches == 0 and dt < 10, f"{mismatches}/100 mismatches, {dt:.2f} s")


def test_c06_gradient_check(criterion):
    t0 = time.perf_counter()
    pts = fdcheck.fd_points(50)
    dt = time.perf_counter() - t0
    worst = max(p[-1] for p in pts)
    L = fdcheck.FD_SPEC.seq_len
    ok = len(pts) == 50 and worst < 1e-3 and L == 5 and dt < 120
    criterion(6, ok, f"50 points, L={L}, max relative error {worst:.3g}, {dt:.2f} s")


# ---------------------------------------------------------------------------
# end-to-end on the shipped pathological tiny model
# ---------------------------------------------------------------------------


class Ladder:
    def __init__(self):
        spec = mdl.SIZES["tiny"]
        self.model = mdl.make_pathological_model(spec)
        self.calib, _ = mdl.gen_calibration_set(CALIB_SEED, CALIB_COUNT, spec)
        self.ev, _ = mdl.gen_calibration_set(EVAL_SEED, EVAL_COUNT, spec)
        self.fp = mdl.model_forward(self.model, self.ev)
        self.recipes, self.seconds = {}, {}

    def recipe(self, bits, method, epochs=None):
        key = (bits, method, epochs)
        if key not in self.recipes:
            t0 = time.perf_counter()
            self.recipes[key] = jlss.calibrate(self.model, self.calib, bits, jlss.Hyper(epochs=epochs), method)
            self.seconds[key] = time.perf_counter() - t0
        return self.recipes[key]

    def metrics(self, recipe, **kw):
        return insight.fidelity_metrics(self.fp, qexec.quantized_model_forward(self.model, recipe, self.ev, **kw))


@pytest.fixture(scope="module")
def ladder():
    return Ladder()


def test_c07_jlss_improvement(criterion, ladder):
    t0 = time.perf_counter()
    steps = [("minmax", "minmax", None), ("+smoothing", "smoothquant", None), ("+PTS+grid", "ptq4vm", 0), ("+JLSS", "ptq4vm", None)]
    cos = [ladder.metrics(ladder.recipe("w4a4", m, e))["cosine"] for _, m, e in steps]
    blocks = ladder.recipe("w4a4", "ptq4vm").meta["blocks"]
    per_block = all(b["loss_final"] <= b["loss_grid"] for b in blocks)
    increasing = all(a < b for a, b in zip(cos, cos[1:]))
    dt = time.perf_counter() - t0
    ladder_txt = " -> ".join(f"{n} {c:.4f}" for (n, _, _), c in zip(steps, cos))
    criterion(7, per_block and increasing and dt < 300, f"{ladder_txt}; stage 3 <= stage 2 on all blocks {per_block}; {dt:.1f} s")


def test_c08_method_ordering(criterion, ladder):
    t0 = time.perf_counter()
    agree = {}
    for bits in ("w4a4", "w8a8"):
        agree[bits] = [ladder.metrics(ladder.recipe(bits, m))["agreement"] for m in ("ptq4vm", "smoothquant", "minmax")]
    dt = time.perf_counter() - t0
    ordered = all(a[0] >= a[1] >= a[2] for a in agree.values())
    margin = agree["w4a4"][0] - agree["w4a4"][2]
    ok = ordered and margin >= 0.05 and dt < 600
    txt = "; ".join(f"{b} ptq4vm/smoothquant/minmax {a[0]:.3f}/{a[1]:.3f}/{a[2]:.3f}" for b, a in agree.items())
    criterion(8, ok, f"{txt}; W4A4 margin {100 * margin:.1f} pp; {dt:.1f} s")


def test_c09a_hidden_state_ablation(criterion, ladder):
    t0 = time.perf_counter()
    r = ladder.recipe("w8a8", "minmax")
    linears = ladder.metrics(r)["cosine"]
    hstate = ladder.metrics(r, linears=False, hstate=True)["cosine"]
    dt = time.perf_counter() - t0
    criterion("9a", hstate < linears and dt < 300, f"hidden-state-only 8-bit cosine {hstate:.4f} vs linears-only 8-bit {linears:.4f}; {dt:.1f} s")


def test_c09b_cls_fp_override(criterion, ladder):
    t0 = time.perf_counter()
    r = ladder.recipe("w8a8", "minmax")
    full = ladder.metrics(r)["cosine"]
    cls = ladder.metrics(r, cls_fp=True)["cosine"]
    dt = time.perf_counter() - t0
    criterion("9b", cls > full and dt < 300, f"FP CLS override cosine {cls:.4f} vs full quantization {full:.4f}; {dt:.1f} s")


def test_c10_latency_directions(criterion):
    t0 = time.perf_counter()
    spec = mdl.SIZES["small"]
    m = mdl.make_pathological_model(spec)
    calib, _ = mdl.gen_calibration_set(CALIB_SEED, 64, spec)
    r = jlss.calibrate(m, calib, "w8a8", jlss.Hyper(epochs=0))
    recipes = {mode: r.with_mode(mode) for mode in (qexec.PER_TENSOR, qexec.PTS, qexec.DYNAMIC)}
    recipes[qexec.FP] = qexec.fp_recipe(m)
    res = insight.bench_modes(m, recipes, batch=32, warmup=100, reps=100)
    med = {mode: b.median_s for mode, b in res.items()}
    fp = med[qexec.FP]
    dt = time.perf_counter() - t0
    a = med[qexec.PTS] / med[qexec.PER_TENSOR]
    b = med[qexec.DYNAMIC] / med[qexec.PTS]
    ok = a <= 1.10 and b >= 1.10 and dt < 600
    criterion(
        10, ok,
        f"PTS/per-tensor {a:.3f} (<= 1.10), dynamic/PTS {b:.3f} (>= 1.10); "
        f"PTS {med[qexec.PTS] * 1e3:.1f} ms, FP {fp * 1e3:.1f} ms, FP/PTS {fp / med[qexec.PTS]:.2f}x (not gated); {dt:.0f} s",
    )


def test_c11_calibration_envelope(criterion, ladder):
    key = ("w4a4", "ptq4vm", None)
    ladder.recipe(*key)
    secs = ladder.seconds[key]
    criterion(11, secs <= 120, f"full ptq4vm W4A4 calibration on {CALIB_COUNT} samples, 1 thread: {secs:.1f} s (<= 120 s)")


def test_c12_observation_metrics(criterion):
    t0 = time.perf_counter()
    spec = mdl.SIZES["tiny"]
    x, _ = mdl.gen_calibration_set(EVAL_SEED, 200, spec)
    layer = "blocks.0.out_proj"
    sick = mdl.make_pathological_model(spec)
    r = insight.analyze(sick, x, [layer])[layer]
    want_ch = sorted(sick.pathology.outlier_channels)
    want_tok = sick.pathology.token_spikes[0][0]
    peak = int(np.argmax(r.token_profile))
    path_ok = r.flagged == want_ch and peak == want_tok and r.long_tail > 20
    benign = insight.analyze(mdl.make_pathological_model(spec, mdl.BENIGN), x, [layer])[layer]
    benign_ok = insight.is_benign(benign)
    dt = time.perf_counter() - t0
    criterion(
        12, path_ok and benign_ok and dt < 60,
        f"pathological: channels {r.flagged} (want {want_ch}), peak token {peak} (want {want_tok}), long tail {r.long_tail:.1f}; "
        f"benign: peak ratio {insight.peak_token_ratio(benign):.2f} (< {insight.BENIGN_PEAK_RATIO}), "
        f"flagged {benign.flagged}, long tail {benign.long_tail:.1f} (< {insight.BENIGN_TAIL_RATIO}); {dt:.1f} s",
    )
