"""Command-line workbench driver.

One executable covers the whole workflow: matrix generation, dataset
generation, interferometric calibration, classical optimization, model
training (including the ablation modes), phase prediction, evaluation,
and cross-method comparison.  Every subcommand reads one JSON config
(see `loft.config`), accepts dotted-key overrides such as
``--train.lr 3e-4``, and writes its artifacts plus the resolved config
into a run directory.

Exit codes: 0 success, 2 configuration error, 3 numeric fault.
The LOFT_RUN_DIR environment variable relocates relative run dirs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import classical, core_sim, dataset_io, evalkit, loftgan
from .config import ConfigError, apply_override, parse_override, resolve, write_resolved

COMMANDS = (
    "gen-tm",
    "gen-data",
    "calibrate",
    "optimize",
    "train",
    "predict",
    "evaluate",
    "compare",
    "ablate",
)


def _run_dir(cfg) -> Path:
    base = os.environ.get("LOFT_RUN_DIR", "")
    run = Path(cfg["paths"]["run_dir"])
    if base and not run.is_absolute():
        run = Path(base) / run
    run.mkdir(parents=True, exist_ok=True)
    return run


def _load_or_make_tm(cfg, run):
    path = run / "tm.loft"
    if path.exists():
        return dataset_io.load_tm(path)
    tm = core_sim.gen_tm(cfg["tm"]["n_in"], cfg["tm"]["n_out"], cfg["tm"]["seed"])
    dataset_io.save_tm(tm, path)
    return tm


def _load_or_make_dataset(cfg, run, tm):
    path = run / "dataset.loft"
    if path.exists():
        return dataset_io.load_dataset(path)
    ds = dataset_io.gen_dataset(
        tm, cfg["dataset"]["pairs"], cfg["dataset"]["seed"], cfg["dataset"]["levels"]
    )
    dataset_io.save_dataset(ds, path)
    return ds


def _square_side(n: int, what: str) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise ConfigError(f"{what} must be a perfect square, got {n}")
    return side


def _target_grid(cfg, side: int) -> np.ndarray:
    t = cfg["target"]
    sites = [(t["row"], t["col"])] if t["kind"] == "point" else t["points"]
    if t["kind"] not in ("point", "points"):
        raise ConfigError(f"target.kind must be 'point' or 'points', got {t['kind']!r}")
    grid = np.zeros((side, side))
    for r, c in sites:
        if not (0 <= r < side and 0 <= c < side):
            raise ConfigError(f"target site ({r}, {c}) is outside the {side}x{side} grid")
        grid[r, c] = 1.0
    return grid


def _target_spec(cfg, side: int) -> classical.TargetSpec:
    grid = _target_grid(cfg, side)
    return classical.TargetSpec(weights=grid / grid.sum())


def _target_speckle(cfg, side: int) -> core_sim.SpecklePattern:
    return core_sim.SpecklePattern(values=_target_grid(cfg, side), normalized=True)


def _save_phase(phase, run, stem):
    dataset_io.save_named_tensors(
        run / f"{stem}.loft", {"phase": (phase.values.astype("<f8"), {})}
    )
    dataset_io.export_image(phase.values, run / f"{stem}.pgm")


def _load_phase(path) -> core_sim.PhasePattern:
    blocks = dataset_io.load_named_tensors(path)
    return core_sim.PhasePattern(values=blocks["phase"][0])


def _write_trace(path, objectives):
    with open(path, "w", encoding="utf-8") as f:
        f.write("iteration,objective\n")
        for i, v in enumerate(objectives):
            f.write(f"{i},{float(v)!r}\n")


def _report_to_json(report, path):
    doc = dataclasses.asdict(report)
    doc["row_profile"] = [float(v) for v in report.row_profile]
    doc["col_profile"] = [float(v) for v in report.col_profile]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _report_from_json(path) -> evalkit.FocusReport:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    doc["row_profile"] = np.asarray(doc["row_profile"])
    doc["col_profile"] = np.asarray(doc["col_profile"])
    return evalkit.FocusReport(**doc)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_tm(cfg, run):
    tm = core_sim.gen_tm(cfg["tm"]["n_in"], cfg["tm"]["n_out"], cfg["tm"]["seed"])
    dataset_io.save_tm(tm, run / "tm.loft")
    print(f"wrote {run / 'tm.loft'} ({tm.n_outputs}x{tm.n_inputs}, seed {tm.seed})")


def cmd_gen_data(cfg, run):
    tm = _load_or_make_tm(cfg, run)
    ds = dataset_io.gen_dataset(
        tm, cfg["dataset"]["pairs"], cfg["dataset"]["seed"], cfg["dataset"]["levels"]
    )
    dataset_io.save_dataset(ds, run / "dataset.loft")
    print(f"wrote {run / 'dataset.loft'} ({len(ds)} pairs)")


def cmd_calibrate(cfg, run):
    tm = _load_or_make_tm(cfg, run)
    oracle = lambda p: core_sim.intensity(core_sim.propagate(tm, p), normalize=False)
    est = core_sim.calibrate_tm(
        oracle, tm.n_inputs, tm.n_outputs, cfg["calibrate"]["phase_steps"]
    )
    dataset_io.save_tm(est, run / "tm_estimated.loft")
    num = np.abs(np.sum(est.entries * np.conj(tm.entries), axis=1))
    den = np.linalg.norm(est.entries, axis=1) * np.linalg.norm(tm.entries, axis=1)
    corr = num / den
    with open(run / "calibration.csv", "w", encoding="utf-8") as f:
        f.write("output_mode,row_correlation\n")
        for m, c in enumerate(corr):
            f.write(f"{m},{float(c)!r}\n")
    print(
        f"wrote {run / 'tm_estimated.loft'}; row correlation "
        f"min {corr.min():.6f} mean {corr.mean():.6f}"
    )


def cmd_optimize(cfg, run):
    tm = _load_or_make_tm(cfg, run)
    target = _target_spec(cfg, _square_side(tm.n_outputs, "output mode count"))
    method = cfg["optimize"]["method"]
    if method == "conj":
        phase = classical.phase_conjugate(tm, target)
        objectives = np.asarray([classical.objective(tm, phase, target)])
    elif method == "csa":
        oracle = classical.make_objective_oracle(tm, target)
        result = classical.continuous_sequential(
            oracle,
            tm.n_inputs,
            levels=cfg["optimize"]["levels"],
            sweeps=cfg["optimize"]["sweeps"],
            seed=cfg["optimize"]["seed"],
        )
        phase, objectives = result.phase, result.objectives
    elif method == "ga":
        oracle = classical.make_objective_oracle(tm, target)
        ga = cfg["optimize"]["ga"]
        result = classical.genetic_optimize(
            oracle,
            tm.n_inputs,
            classical.GaConfig(
                population_size=ga["population"],
                generations=ga["generations"],
                mutation_rate=ga["mutation"],
                mutation_decay=ga["decay"],
                elite_fraction=ga["elite"],
                seed=cfg["optimize"]["seed"],
            ),
        )
        phase, objectives = result.phase, result.objectives
    else:
        raise ConfigError(f"optimize.method must be conj, csa or ga, got {method!r}")
    _save_phase(phase, run, f"phase_{method}")
    _write_trace(run / f"trace_{method}.csv", objectives)
    print(f"{method}: objective {objectives[-1]:.4f}; wrote phase_{method}.loft")


def cmd_train(cfg, run, mode=None):
    tm = _load_or_make_tm(cfg, run)
    ds = _load_or_make_dataset(cfg, run, tm)
    mode = mode or cfg["train"]["mode"]
    w = cfg["train"]["weights"]
    model = loftgan.build_model(ds.speckles.shape[1], ds.phases.shape[1], cfg["train"]["seed"])
    tc = loftgan.TrainConfig(
        epochs=cfg["train"]["epochs"],
        batch=cfg["train"]["batch"],
        lr=cfg["train"]["lr"],
        mode=mode,
        seed=cfg["train"]["seed"],
        val_split=cfg["train"]["val_split"],
        optimizer=cfg["train"]["optimizer"],
        weights=loftgan.LossWeights(
            dev=w["dev"], dis=w["dis"], content=w["content"], content_gen=w["content_gen"]
        ),
    )
    result = loftgan.train(model, ds, tc)
    mode = loftgan.normalize_mode(mode)
    loftgan.save_checkpoint(result.model, run / f"model_{mode}.loft")
    loftgan.write_history_csv(result.history, run / f"history_{mode}.csv")
    last = result.history[-1] if result.history else {}
    print(
        f"trained {mode}: {len(result.history)} epochs, "
        f"best val l_dev {result.best_val:.4f} (epoch {result.best_epoch}); "
        f"wrote model_{mode}.loft"
    )
    return result


def cmd_predict(cfg, run, mode=None):
    mode = loftgan.normalize_mode(mode or cfg["train"]["mode"])
    ckpt = cfg["predict"]["checkpoint"] or (run / f"model_{mode}.loft")
    if not Path(ckpt).exists():
        raise ConfigError(f"predict.checkpoint: no checkpoint at {ckpt}")
    model = loftgan.load_checkpoint(ckpt)
    phase = loftgan.predict_phase(
        model,
        _target_speckle(cfg, model.speckle_side),
        quantize_levels=cfg["predict"]["quantize"],
    )
    _save_phase(phase, run, f"phase_{mode}")
    dataset_io.export_image(_target_grid(cfg, model.speckle_side), run / "target.pgm")
    print(f"wrote phase_{mode}.loft / phase_{mode}.pgm")
    return phase


def cmd_evaluate(cfg, run, phase_path=None, label=None):
    tm = _load_or_make_tm(cfg, run)
    label = label or cfg["evaluate"]["label"]
    phase_path = phase_path or cfg["evaluate"]["phase"]
    if phase_path is None:
        mode = loftgan.normalize_mode(cfg["train"]["mode"])
        phase_path = run / f"phase_{mode}.loft"
        label = mode if label == "predicted" else label
    if not Path(phase_path).exists():
        raise ConfigError(f"evaluate.phase: no phase file at {phase_path}")
    phase = _load_phase(phase_path)
    report = evalkit.evaluate(
        tm,
        phase,
        _target_spec(cfg, _square_side(tm.n_outputs, "output mode count")),
        n_random_baseline=cfg["eval"]["baseline_draws"],
        seed=cfg["eval"]["seed"],
        method=label,
    )
    out = run / f"focus_report_{label}.json"
    _report_to_json(report, out)
    print(
        f"{label}: enhancement {report.enhancement:.3f}, "
        f"target mean {report.target_mean_intensity:.4f}; wrote {out.name}"
    )
    return report


def cmd_compare(cfg, run):
    listed = cfg["compare"]["reports"]
    paths = (
        [Path(p) for p in listed]
        if listed
        else sorted(run.glob("focus_report_*.json"))
    )
    if not paths:
        raise ConfigError("compare.reports: no focus reports found")
    reports = [_report_from_json(p) for p in paths]
    out = evalkit.compare(reports, run / "compare")
    print(f"compared {len(reports)} reports -> {out['table']}")


def cmd_ablate(cfg, run):
    reports = []
    for mode in loftgan.MODES:
        cmd_train(cfg, run, mode=mode)
        cmd_predict(cfg, run, mode=mode)
        reports.append(
            cmd_evaluate(cfg, run, phase_path=run / f"phase_{mode}.loft", label=mode)
        )
    out = evalkit.compare(reports, run / "compare")
    print(f"ablation grid complete -> {out['table']}")


# ---------------------------------------------------------------------------


def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="loft",
        description="wavefront-shaping workbench",
        epilog="any --section.key value pair overrides that config entry",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--paper-scale", action="store_true",
                        help="use the full-scale data sizes (slow)")
    parser.add_argument("--threads", type=int, default=1,
                        help="1 (default) forces the serial deterministic mode")
    parser.add_argument("--run-dir", help="shorthand for --paths.run_dir")
    parser.add_argument("--method", help="shorthand for --optimize.method")
    parser.add_argument("--mode", help="shorthand for --train.mode")
    args, extra = parser.parse_known_args(argv)

    overrides = []
    if args.run_dir:
        overrides.append(("paths.run_dir", args.run_dir))
    if args.method:
        overrides.append(("optimize.method", args.method))
    if args.mode:
        overrides.append(("train.mode", args.mode))
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, _, raw = key.partition("=")
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {token!r} is missing a value")
            raw = extra[i + 1]
            i += 2
        overrides.append((key, parse_override(raw)))
    return args, overrides


def _limit_threads(n: int):
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args, overrides = _parse_args(argv)
        _limit_threads(args.threads)
        cfg = resolve(args.config, overrides, paper_scale=args.paper_scale)
        if args.paper_scale:
            print("note: paper-scale run; dataset generation and training take much longer")
        run = _run_dir(cfg)
        write_resolved(cfg, run)
        handler = {
            "gen-tm": cmd_gen_tm,
            "gen-data": cmd_gen_data,
            "calibrate": cmd_calibrate,
            "optimize": cmd_optimize,
            "train": cmd_train,
            "predict": cmd_predict,
            "evaluate": cmd_evaluate,
            "compare": cmd_compare,
            "ablate": cmd_ablate,
        }[args.command]
        handler(cfg, run)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (core_sim.CalibrationError, loftgan.TrainingDivergedError) as e:
        print(f"numeric fault: {e}", file=sys.stderr)
        return 3
    except Exception as e:
        from . import nn

        if isinstance(e, nn.NumericFaultError):
            print(f"numeric fault: {e}", file=sys.stderr)
            return 3
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
