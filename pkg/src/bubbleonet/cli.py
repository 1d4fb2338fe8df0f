"""Command-line entry point.

    bubbleonet generate|train|train2|eval|infer|spectrum --config <path>
               [--seed N] [--threads N] [--set a.b.c=value ...] [...]

Exit codes: 0 success, 1 validation error, 2 runtime/numerics error,
3 I/O error.  Every command is deterministic given (config, seed, thread
count) and records a run_meta.json with enough provenance to replay.

Heavy imports happen after --threads is applied so the BLAS/compiler thread
pools actually honor it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bubbleonet")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run configuration JSON")
        p.add_argument("--seed", type=int, default=None, help="override every seed")
        p.add_argument("--threads", type=int, default=None, help="pin worker/BLAS threads")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override a config field by dotted path (repeatable)",
        )
        return p

    g = common(sub.add_parser("generate", help="solve the sweep and store the corpus"))
    g.add_argument("--allow-failures", action="store_true")
    g.add_argument("--study", action="store_true", help="generate the study corpus instead")
    g.add_argument("--verify", action="store_true", help="residual-check every sample")

    t = common(sub.add_parser("train", help="train the operator network"))
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--mode", choices=["single-step", "two-step"], default=None)
    t.add_argument("--kfold", type=int, default=None)

    t2 = common(sub.add_parser("train2", help="two-step training (trunk, SVD, branch)"))
    t2.add_argument("--epochs", type=int, default=None)

    e = common(sub.add_parser("eval", help="interpolation/extrapolation study"))
    e.add_argument("--checkpoint", default=None, help="checkpoint dir (default model_best)")
    e.add_argument("--no-figures", action="store_true")

    i = common(sub.add_parser("infer", help="map a pressure CSV through the model"))
    i.add_argument("--checkpoint", default=None)
    i.add_argument("--pressure", required=True, help="CSV with t,P columns (SI)")
    i.add_argument("--out", required=True, help="output radius CSV")

    s = common(
        sub.add_parser("spectrum", help="FFT report for a trajectory CSV"),
        config_required=False,  # operates on the trajectory file alone
    )
    s.add_argument("--input", required=True, help="CSV with t,R columns (SI)")
    s.add_argument("--hint", type=float, default=None, help="driving frequency hint (Hz)")
    s.add_argument("--out", default=None, help="output CSV (default <input>_spectrum.csv)")
    return ap


def _apply_threads(n: int | None):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config(args):
    from . import config as cfgmod
    from .errors import ConfigError

    with open(args.config, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfgmod.apply_override(doc, key, value)
    cfg = cfgmod.parse(json.dumps(doc))
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def _write_run_meta(directory: str, cfg, args, t0: float):
    from . import __version__
    from . import config as cfgmod

    os.makedirs(directory, exist_ok=True)
    meta = {
        "command": args.command,
        "config_hash": cfgmod.config_hash(cfg),
        "build_id": f"{__version__}+{cfgmod.config_hash(cfg)[:8]}",
        "seed": cfg.seed,
        "train_seed": cfg.train.seed,
        "threads": args.threads,
        "wall_clock_s": round(time.time() - t0, 3),
    }
    with open(os.path.join(directory, "run_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def cmd_generate(args) -> int:
    from . import datagen as dg
    from . import training as tr

    t0 = time.time()
    cfg = _load_config(args)
    spec = cfg.study if args.study else cfg.doe
    if spec is None:
        from .errors import ConfigError

        raise ConfigError("config has no study table; nothing to generate")
    out_dir = cfg.paths.study_dir if args.study else cfg.paths.dataset_dir
    manifest, samples = dg.generate_corpus(spec, cfg.fluid)
    n_failed = sum(1 for m in manifest.samples if m.status != "ok")
    if len(manifest.ok_ids()) >= 2:
        tr.split_profiles(manifest, cfg.split_ratio, cfg.seed)
    dg.write_dataset(manifest, samples, out_dir)
    if args.verify:
        worst = 0.0
        for sid in manifest.ok_ids():
            worst = max(worst, dg.residual_check(samples[sid], cfg.fluid))
        print(f"residual check: worst mean ||G||^2 = {worst:.3e}")
    split_txt = (
        f"split {len(manifest.split['train'])}/{len(manifest.split['val'])}"
        if manifest.split
        else "unsplit"
    )
    print(
        f"generated {len(manifest.samples)} samples ({n_failed} failed) -> {out_dir}; "
        + split_txt
    )
    _write_run_meta(out_dir, cfg, args, t0)
    if n_failed and not args.allow_failures:
        from .errors import NumericsError

        raise NumericsError(f"{n_failed} samples failed; rerun with --allow-failures to keep going")
    return 0


def _load_training_data(cfg):
    from . import datagen as dg
    from . import training as tr

    manifest, reader = dg.read_dataset(cfg.paths.dataset_dir)
    return tr.TrainingData.from_dataset(manifest, reader)


def cmd_train(args, force_mode=None) -> int:
    import numpy as np

    from . import figures
    from . import training as tr

    t0 = time.time()
    cfg = _load_config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if force_mode is not None:
        cfg.train.mode = force_mode
    elif getattr(args, "mode", None) is not None:
        cfg.train.mode = args.mode
    if getattr(args, "kfold", None) is not None:
        cfg.train.k_fold = args.kfold
    data = _load_training_data(cfg)
    out_dir = cfg.paths.model_dir
    os.makedirs(out_dir, exist_ok=True)

    def log(msg):
        print(msg, flush=True)

    if cfg.train.k_fold:
        best, metrics = tr.kfold_train(
            cfg.train, cfg.network, data, cfg.train.k_fold, out_dir=out_dir, log=log
        )
        with open(os.path.join(out_dir, "kfold_metrics.json"), "w", encoding="utf-8") as fh:
            json.dump(metrics, fh, indent=1)
        result = best
        print(f"best fold val MSE {best.best_val:.4e}")
    elif cfg.train.mode == "two-step":
        result, basis = tr.train_two_step(cfg.train, cfg.network, data, out_dir=out_dir, log=log)
        gap = np.abs(basis.U.T @ basis.U - np.eye(basis.U.shape[1])).max()
        print(
            f"trunk basis: sigma range [{basis.Sigma[-1]:.3e}, {basis.Sigma[0]:.3e}], "
            f"orthonormality gap {gap:.2e}"
        )
    else:
        result = tr.train_single(cfg.train, cfg.network, data, out_dir=out_dir, log=log)
    figures.render_history(result.history, os.path.join(out_dir, "history.png"))
    if result.history:
        last = result.history[-1]
        print(
            f"done: L_data={last['L_data']:.4e} best val MSE={result.best_val:.4e} "
            f"(epoch {result.best_epoch})"
        )
    else:
        print("epochs=0: wrote initialized checkpoint only")
    _write_run_meta(out_dir, cfg, args, t0)
    return 0


def _predictor(cfg, checkpoint_dir):
    """Load a checkpoint and wrap it as predict(p_bar_batch) -> radii."""
    import numpy as np

    from . import network as nw
    from . import training as tr

    params, meta = nw.load_checkpoint(checkpoint_dir)
    n = cfg.doe.n_points
    t_grid = np.linspace(0.0, 1.0, n)
    if params.arch.trunk_input_dim == 2:
        trunk_in, _ = tr.multi_radius_assemble(
            np.asarray(cfg.doe.r0_values) / params.arch.r0_scale, t_grid
        )
    else:
        trunk_in = t_grid[:, None]

    def predict(p_bar_batch):
        R, _ = nw.forward(params, np.asarray(p_bar_batch, dtype=float), trunk_in)
        out = R.data
        if params.arch.trunk_input_dim == 2:
            out = out.reshape(out.shape[0], len(cfg.doe.r0_values), n)
        return out

    return predict, params, meta


def cmd_eval(args) -> int:
    from . import datagen as dg
    from . import figures
    from . import spectral

    t0 = time.time()
    cfg = _load_config(args)
    ckpt = args.checkpoint or os.path.join(cfg.paths.model_dir, "model_best")
    predict, params, _ = _predictor(cfg, ckpt)
    manifest, reader = dg.read_dataset(cfg.paths.study_dir)
    render = None if args.no_figures else figures.render_case
    report = spectral.run_study(
        predict,
        manifest,
        reader,
        train_amp_range=tuple(cfg.doe.amp_range),
        train_freq_range=tuple(cfg.doe.freq_range),
        out_dir=cfg.paths.report_dir,
        render=render,
    )
    agg = report.aggregates
    print(
        f"{agg['n_ok']}/{agg['n_cases']} cases; mean MSE in-distribution "
        f"{agg['mean_mse_in_distribution']:.4e}, extrapolation "
        f"{agg['mean_mse_extrapolation']:.4e} -> {cfg.paths.report_dir}/report.csv"
    )
    _write_run_meta(cfg.paths.report_dir, cfg, args, t0)
    return 0


def _read_csv_columns(path, n_cols_min=2):
    import numpy as np

    from .errors import ValidationError

    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        import csv as _csv

        for row in _csv.reader(fh):
            if not row:
                continue
            try:
                rows.append([float(x) for x in row[:n_cols_min]])
            except ValueError:
                continue  # header line
    if not rows:
        raise ValidationError(f"{path}: no numeric rows found")
    return np.asarray(rows, dtype=float)


def cmd_infer(args) -> int:
    import numpy as np

    from .errors import ResampleHintError

    cfg = _load_config(args)
    ckpt = args.checkpoint or os.path.join(cfg.paths.model_dir, "model_best")
    predict, params, _ = _predictor(cfg, ckpt)
    table = _read_csv_columns(args.pressure)
    t_s, P = table[:, 0], table[:, 1]
    width = params.arch.branch_widths[0]
    if t_s.size != width:
        raise ResampleHintError(
            f"pressure has {t_s.size} samples but the branch input width is {width}; "
            f"resample the signal onto {width} uniform points over the training "
            f"horizon ({cfg.doe.t_max} s) first"
        )
    p_bar = P / cfg.fluid.P0  # pressure scale equals ambient pressure
    out = predict(p_bar[None, :])
    r0s = list(cfg.doe.r0_values)
    header = ["t"]
    cols = [t_s]
    if out.ndim == 3:
        for j, r0 in enumerate(r0s):
            header += [f"R_bar_{j}", f"R_m_{j}"]
            cols += [out[0, j], out[0, j] * r0]
    else:
        header += ["R_bar", "R_m"]
        cols += [out[0], out[0] * r0s[0]]
    import csv as _csv

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = _csv.writer(fh)
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([repr(float(x)) for x in row])
    print(f"wrote {args.out}")
    return 0


def cmd_spectrum(args) -> int:
    import numpy as np

    from . import figures, spectral
    from .errors import ValidationError

    table = _read_csv_columns(args.input)
    t, x = table[:, 0], table[:, 1]
    dts = np.diff(t)
    if np.any(dts <= 0) or not np.allclose(dts, dts[0], rtol=1e-6, atol=0.0):
        raise ValidationError("trajectory time column must be uniform and increasing")
    report = spectral.fft_spectrum(x, float(dts[0]))
    if args.hint is not None:
        natural, driving = spectral.detect_peaks(report, args.hint)
        print(f"natural peak: {natural}, driving peak: {driving}, merged: {report.merged}")
    out = args.out or (os.path.splitext(args.input)[0] + "_spectrum.csv")
    import csv as _csv

    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = _csv.writer(fh)
        w.writerow(["freq", "mag"])
        for f, m in zip(report.freqs, report.mags):
            w.writerow([repr(float(f)), repr(float(m))])
    figures.render_spectrum(report, os.path.splitext(out)[0] + ".png")
    print(f"wrote {out} (resolution {report.resolution:.1f} Hz)")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _apply_threads(args.threads)
    from .errors import DatasetIOError, NumericsError, ValidationError

    try:
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "train2":
            return cmd_train(args, force_mode="two-step")
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "infer":
            return cmd_infer(args)
        if args.command == "spectrum":
            return cmd_spectrum(args)
        raise AssertionError(args.command)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return 2
    except (DatasetIOError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
