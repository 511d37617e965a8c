"""Batch front-end: ``vmq gen | calibrate | eval | analyze | bench``.

Every failure ends with exit code 1 (runtime) or 2 (usage) and a single
JSON line on stderr, ``{"error": "<kind>", "message": "..."}``.
"""

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from vmq import _jit, core, insight, jlss, model as mdl, qexec

BITS = ("w8a8", "w6a6", "w4a4", "fp")
ABLATIONS = ("none", "hstate", "clsfp")
PATHOLOGIES = {"default": mdl.DEFAULT_PATHOLOGY, "benign": mdl.BENIGN}
CALIB_COUNT = 256
EVAL_COUNT = 1000
# wall-clock fields never go into artifacts
_VOLATILE = ("seconds",)


class CliError(Exception):
    def __init__(self, kind, message, code=1):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _dump(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _emit(text, out):
    if out is None:
        click.echo(text, nl=False)
    else:
        Path(out).write_text(text)


def _log(msg):
    click.echo(msg, err=True)


def _load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError("ConfigError", f"{path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError("ConfigError", f"{path}: top level must be an object")
    return cfg


def _merge(cfg, **flags):
    """Flags win over the config file; unset flags are ``None``."""
    out = dict(cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _pathology(value):
    if value in PATHOLOGIES:
        return PATHOLOGIES[value]
    p = Path(value)
    if not p.is_file():
        raise CliError("ConfigError", f"pathology must be one of {sorted(PATHOLOGIES)} or a JSON file, got {value!r}")
    return mdl.PathologySpec.from_dict(json.loads(p.read_text()))


def _model_and_recipe(model_path, recipe_path):
    model = mdl.load_model(model_path)
    recipe = qexec.import_recipe(recipe_path, model)
    return model, recipe


@click.group()
def cli():
    """Post-training quantization for desk-scale visual state-space models."""
    _jit.apply_thread_limit()


@cli.command("gen")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--size", type=click.Choice(sorted(mdl.SIZES)), default="tiny", show_default=True)
@click.option("--pathology", default="default", show_default=True, help="default, benign, or a JSON PathologySpec file.")
@click.option("--calib-count", type=click.IntRange(1), default=CALIB_COUNT, show_default=True)
@click.option("--eval-count", type=click.IntRange(1), default=EVAL_COUNT, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def cmd_gen(seed, size, pathology, calib_count, eval_count, out_dir):
    """Write model.vmq, calib.vmq (seed+1) and eval.vmq (seed+2) to OUT."""
    spec = mdl.SIZES[size]
    path = _pathology(pathology)
    m = mdl.make_pathological_model(spec, path, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mdl.save_model(out / "model.vmq", m)
    for name, s, n in (("calib", seed + 1, calib_count), ("eval", seed + 2, eval_count)):
        x, y = mdl.gen_calibration_set(s, n, spec)
        mdl.save_dataset(out / f"{name}.vmq", x, y, seed=s)
    click.echo(_dump({"model": str(out / "model.vmq"), "calib": str(out / "calib.vmq"), "eval": str(out / "eval.vmq")}), nl=False)


@cli.command("calibrate")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--calib", "calib_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--bits", type=click.Choice(BITS), default=None, help="Default w4a4.")
@click.option("--method", type=click.Choice(jlss.METHODS), default=None, help="Default ptq4vm.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--epochs", type=click.IntRange(0), default=None)
@click.option("--lr-s", type=float, default=None)
@click.option("--lr-q", type=float, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--batch-size", type=click.IntRange(1), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--optimizer", type=click.Choice(jlss.OPTIMIZERS), default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def cmd_calibrate(model_path, calib_path, bits, method, config_path, out_path, **hyper_flags):
    """Calibrate a model and write a recipe file."""
    cfg = _merge(_load_config(config_path), bits=bits, method=method, **hyper_flags)
    bits = cfg.pop("bits", "w4a4")
    method = cfg.pop("method", "ptq4vm")
    if bits not in BITS:
        raise CliError("ConfigError", f"bits must be one of {BITS}, got {bits!r}", 2)
    if method not in jlss.METHODS:
        raise CliError("ConfigError", f"method must be one of {jlss.METHODS}, got {method!r}", 2)
    unknown = set(cfg) - set(jlss.Hyper.__dataclass_fields__)
    if unknown:
        raise CliError("ConfigError", f"unknown config keys {sorted(unknown)}", 2)
    hyper = jlss.Hyper.from_dict(cfg)
    model = mdl.load_model(model_path)
    calib, _ = mdl.load_dataset(calib_path)
    recipe = jlss.calibrate(model, calib, bits, hyper, method, log=_log)
    seconds = recipe.meta.get("seconds")
    for k in _VOLATILE:
        recipe.meta.pop(k, None)
    qexec.export_recipe(recipe, out_path)
    if seconds is not None:
        _log(f"calibrated in {seconds:.1f} s")
    click.echo(_dump({"recipe": out_path, "bits": recipe.label, "method": recipe.meta.get("method", method)}), nl=False)


@cli.command("eval")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--recipe", "recipe_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ablate", type=click.Choice(ABLATIONS), default="none", show_default=True)
@click.option("--mode", type=click.Choice(qexec.MODES), default=None, help="Override the recipe's activation mode.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
def cmd_eval(model_path, recipe_path, data_path, ablate, mode, out_path):
    """Fidelity of the quantized model against FP logits."""
    model, recipe = _model_and_recipe(model_path, recipe_path)
    if mode is not None:
        recipe = recipe.with_mode(mode)
    x, labels = mdl.load_dataset(data_path)
    fp = mdl.model_forward(model, x)
    if ablate == "hstate":
        if not recipe.hstate:
            raise CliError("RecipeError", "recipe has no hidden-state ranges for the hstate ablation")
        q = qexec.quantized_model_forward(model, recipe, x, linears=False, hstate=True, cls_fp=False)
    else:
        q = qexec.quantized_model_forward(model, recipe, x, hstate=False, cls_fp=ablate == "clsfp")
    report = insight.fidelity_metrics(fp, q)
    report.update(
        bits=recipe.label,
        mode=recipe.mode,
        method=recipe.meta.get("method"),
        ablate=ablate,
        samples=int(x.shape[0]),
        fp_label_accuracy=float(np.mean(fp.argmax(axis=1) == labels)),
        q_label_accuracy=float(np.mean(q.argmax(axis=1) == labels)),
    )
    _emit(_dump(report), out_path)


@cli.command("analyze")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--layer", "layers", multiple=True, help="Linear path, e.g. blocks.0.out_proj. Repeatable; default all.")
@click.option("--k", type=float, default=insight.OUTLIER_K, show_default=True, help="Outlier threshold over the median channel.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="CSV file; structured text on stdout otherwise.")
def cmd_analyze(model_path, data_path, layers, k, out_path):
    """Token, channel and long-tail reports for layer input activations."""
    model = mdl.load_model(model_path)
    x, _ = mdl.load_dataset(data_path)
    layers = list(layers) or model.linear_paths()
    try:
        reports = insight.analyze(model, x, layers, k)
    except KeyError as exc:
        raise CliError("ConfigError", exc.args[0], 2) from None
    if out_path is not None:
        insight.write_csv(insight.REPORT_HEADER, insight.report_rows(reports), out_path)
        return
    lines = []
    for p, r in reports.items():
        top = int(np.argmax(r.token_profile))
        lines += [
            f"[{p}]",
            f"flagged_channels: {' '.join(map(str, r.flagged)) or '-'}",
            f"peak_token: {top}",
            f"peak_token_ratio: {insight.peak_token_ratio(r):.6g}",
            f"token_corr: {r.token_corr:.6g}",
            f"long_tail: {r.long_tail:.6g}" + (" (degenerate)" if r.degenerate else ""),
            f"benign: {'yes' if insight.is_benign(r) else 'no'}",
        ]
    click.echo("\n".join(lines))


@cli.command("bench")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--recipe", "recipe_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--mode", "modes", type=click.Choice(qexec.MODES), multiple=True,
              help="Repeatable; several modes are timed interleaved. Default: the recipe's mode.")
@click.option("--batch", type=click.IntRange(1), default=32, show_default=True)
@click.option("--warmup", type=click.IntRange(0), default=100, show_default=True)
@click.option("--reps", type=click.IntRange(1), default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="CSV file; structured text on stdout otherwise.")
def cmd_bench(model_path, recipe_path, modes, batch, warmup, reps, seed, out_path):
    """Median full-forward latency per activation mode."""
    # benchmarks pin to one thread unless VMQ_THREADS says otherwise
    os.environ.setdefault("VMQ_THREADS", "1")
    _jit.apply_thread_limit()
    model, recipe = _model_and_recipe(model_path, recipe_path)
    modes = list(dict.fromkeys(modes)) or [recipe.mode]
    recipes = {m: recipe if m == recipe.mode else recipe.with_mode(m) for m in modes}
    res = insight.bench_modes(model, recipes, batch, warmup, reps, seed=seed)
    if out_path is not None:
        insight.write_csv(insight.BENCH_HEADER, [r.row() for r in res.values()], out_path)
    else:
        click.echo("\n".join(r.to_text() for r in res.values()), nl=False)


def _fail(kind, message, code):
    click.echo(json.dumps({"error": kind, "message": " ".join(str(message).split())}), err=True)
    return code


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="vmq", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        return _fail("Aborted", "interrupted", 1)
    except click.UsageError as exc:
        return _fail("UsageError", exc.format_message(), 2)
    except click.ClickException as exc:
        return _fail(type(exc).__name__, exc.format_message(), exc.exit_code)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except (core.ContainerError, qexec.RecipeError, jlss.CalibrationError, ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
