"""Compiled loops vs numpy fallback for every kernel in ``vmq.kernels.VARIANTS``.

Shapes follow the built-in small model at batch 32 (M = 32 x 65 token rows).

    python3 benchmarks/bench_kernels.py [--reps 20] [--csv out.csv]
"""

import statistics
import time

import click
import numpy as np

from vmq import _jit, insight, kernels

S, L, D_MODEL, D_INNER, N = 32, 65, 48, 96, 8
M = S * L


def _cases(rng):
    a8 = rng.integers(-128, 128, (M, D_INNER), dtype=np.int8)
    b8 = rng.integers(-8, 8, (D_INNER, D_MODEL), dtype=np.int8)
    x = rng.standard_normal((M, D_INNER)).astype(np.float32)
    inv_s = rng.uniform(0.5, 2.0, D_INNER).astype(np.float32)
    dx = rng.uniform(0.01, 0.05, L).astype(np.float32)
    eps = rng.integers(100, 156, L).astype(np.int32)
    acc = rng.integers(-20000, 20000, (M, D_MODEL), dtype=np.int32)
    corr = rng.integers(-500, 500, M).astype(np.int32)
    rowsum = rng.integers(-300, 300, D_MODEL).astype(np.int32)
    dw = rng.uniform(0.001, 0.01, D_MODEL).astype(np.float32)
    dxm = rng.uniform(0.01, 0.05, M).astype(np.float32)
    bias = rng.standard_normal(D_MODEL).astype(np.float32)
    tcorr = rng.standard_normal((L, D_MODEL)).astype(np.float64)
    tscale = rng.uniform(1e-5, 1e-4, (L, D_MODEL)).astype(np.float32)
    sx = rng.standard_normal((S, L, D_INNER)).astype(np.float32)
    sdt = rng.uniform(1e-3, 0.1, (S, L, D_INNER)).astype(np.float32)
    sb = rng.standard_normal((S, L, N)).astype(np.float32)
    sc = rng.standard_normal((S, L, N)).astype(np.float32)
    sa = -np.tile(np.arange(1.0, N + 1), (D_INNER, 1))
    sd = np.ones(D_INNER, dtype=np.float32)
    s64 = [v.astype(np.float64) for v in (sx, sdt, sb, sc)]
    hs = np.empty((S, L, D_INNER, N))
    kernels.scan_forward_loops(*s64, sa, sd.astype(np.float64), np.zeros(3), hs)
    gy = rng.standard_normal((S, L, D_INNER))
    cw = rng.standard_normal((D_INNER, 3)).astype(np.float32)
    cb = rng.standard_normal(D_INNER).astype(np.float32)
    return {
        "int_gemm": (a8, b8),
        "quantize_rows": (x, inv_s, dx, eps, 255.0, 128),
        "dynamic_quantize_rows": (x, inv_s, 255.0, 128, 1e-8),
        "dequantize": (acc, corr, rowsum, dw, dxm, bias),
        "dequantize_table": (acc, tcorr, tscale, bias),
        "scan_forward": (sx, sdt, sb, sc, sa, sd, np.zeros(3), np.zeros((0, 0, 0, 0))),
        "scan_backward": (*s64, sa, sd.astype(np.float64), hs, gy),
        "causal_conv3": (sx, cw, cb),
    }


def _time(fn, args, reps):
    fn(*args)  # compile / warm
    t = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(*args)
        t.append(time.perf_counter() - t0)
    return statistics.median(t)


def _agree(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(np.asarray(u, np.float64), np.asarray(v, np.float64), rtol=1e-4, atol=1e-4) for u, v in zip(a, b))


@click.command()
@click.option("--reps", type=click.IntRange(1), default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None)
def main(reps, seed, csv_path):
    if not _jit.HAS_NUMBA:
        raise click.ClickException("numba is not installed; nothing to compare")
    _jit.apply_thread_limit()
    cases = _cases(np.random.default_rng(seed))
    rows = []
    click.echo(f"{'kernel':<24}{'numba_ms':>10}{'numpy_ms':>10}{'speedup':>9}  agree")
    for name, (loops, fallback) in kernels.VARIANTS.items():
        args = cases[name]
        t_nb = _time(loops, args, reps)
        t_np = _time(fallback, args, reps)
        ok = _agree(loops(*args), fallback(*args))
        rows.append((name, t_nb, t_np, t_np / t_nb, ok))
        click.echo(f"{name:<24}{t_nb * 1e3:>10.3f}{t_np * 1e3:>10.3f}{t_np / t_nb:>8.2f}x  {ok}")
    if csv_path:
        insight.write_csv(("kernel", "numba_s", "numpy_s", "speedup", "agree"), rows, csv_path)


if __name__ == "__main__":
    main()
