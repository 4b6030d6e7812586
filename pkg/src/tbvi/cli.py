"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``snr``, ``plot``. Every command writes
a JSON run manifest into its output directory before doing work, so any
artifact is traceable to the exact resolved configuration that produced
it (and short runs can be replayed from the manifest alone).

Exit codes are a stable contract: 0 success, 2 usage/validation error,
3 numeric failure during computation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import bounds as B
from . import datasets as D
from . import model as M
from . import training as TR
from .tensor import NumericError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

MODEL_PRESETS = {"referential": M.REFERENTIAL, "larger": M.LARGER}


class UsageError(ValueError):
    pass


def _config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_manifest(out_dir: Path, command: str, config: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "config_hash": _config_hash(config),
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "finished_at": None,
        "artifacts": [],
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def finish_manifest(path: Path, artifacts: list[str]) -> None:
    manifest = json.loads(path.read_text())
    manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    manifest["artifacts"] = sorted(set(artifacts))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _check_out_dir(out: Path, force: bool) -> None:
    if (out / "manifest.json").exists() and not force:
        raise UsageError(f"output directory {out} already holds a run; pass --force to overwrite")


def _bound_config(args) -> B.BoundConfig:
    family = args.family
    defaults = B.default_config(family, beta=0.5)
    k = args.K if args.K is not None else defaults.K
    m = args.M if args.M is not None else defaults.M
    l = args.L if args.L is not None else defaults.L
    if args.beta is not None and family != "ciwae":
        raise UsageError(f"--beta only applies to family ciwae, not {family}")
    if args.learn_beta and family != "ciwae":
        raise UsageError("--learn-beta only applies to family ciwae")
    beta = args.beta if args.beta is not None else 0.5
    try:
        return B.BoundConfig(family=family, K=k, M=m, L=l, beta=beta, learnable_beta=args.learn_beta)
    except B.ConfigError as e:
        raise UsageError(str(e)) from e


def cmd_train(args) -> int:
    if args.seed < 0:
        raise UsageError("--seed must be non-negative (it keys counter-based rng streams)")
    bound = _bound_config(args)
    model_cfg = MODEL_PRESETS[args.model]
    epochs = args.epochs if args.epochs is not None else TR.default_epochs(args.dataset)
    out = Path(args.out)
    _check_out_dir(out, args.force)
    config = TR.TrainConfig(
        dataset=args.dataset,
        model=model_cfg,
        bound=bound,
        epochs=epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        data_dir=args.data_dir,
        out_dir=str(out),
        checkpoint_every=args.checkpoint_every,
        eval_every=args.eval_every,
        final_logpx_k=args.final_logpx_k,
    )
    resolved = {
        "dataset": config.dataset,
        "model": asdict(config.model),
        "bound": asdict(config.bound),
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "seed": config.seed,
        "data_dir": config.data_dir,
        "out": str(out),
        "checkpoint_every": config.checkpoint_every,
        "eval_every": config.eval_every,
        "final_logpx_k": config.final_logpx_k,
    }
    manifest = write_manifest(out, "train", resolved)
    result = TR.train(config, resume_from=args.resume)
    finish_manifest(manifest, [str(result.checkpoint_path), str(result.metrics_path)])
    print(f"wrote {result.metrics_path} and {result.checkpoint_path}")
    return EXIT_OK


def train_config_from_manifest(manifest_path) -> TR.TrainConfig:
    """Rebuild the exact TrainConfig a manifest records (replay support)."""
    manifest = json.loads(Path(manifest_path).read_text())
    cfg = manifest["config"]
    return TR.TrainConfig(
        dataset=cfg["dataset"],
        model=M.ModelConfig(**cfg["model"]),
        bound=B.BoundConfig(**cfg["bound"]),
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        data_dir=cfg["data_dir"],
        out_dir=cfg["out"],
        checkpoint_every=cfg["checkpoint_every"],
        eval_every=cfg["eval_every"],
        final_logpx_k=cfg.get("final_logpx_k", 5000),
    )


def cmd_eval(args) -> int:
    from . import metrics as ME

    if args.eval_seed < 0:
        raise UsageError("--eval-seed must be non-negative")
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    header = TR.load_checkpoint(ckpt_path)
    model_cfg = M.ModelConfig(**header["model"])
    params = M.init_params(model_cfg, seed=0)
    for name, t in params.items():
        t.values = header["tensor_data"][f"param/{name}"].copy()

    trained_on = header["train"]["dataset"]
    eval_dataset = args.cross if args.cross else args.dataset
    out = Path(args.out)
    _check_out_dir(out, args.force)
    resolved = {
        "checkpoint": str(ckpt_path),
        "dataset": args.dataset,
        "cross": args.cross,
        "eval_seed": args.eval_seed,
        "k_eval": args.k_eval,
        "logpx_k": args.logpx_k,
        "subset": args.subset,
        "seed": args.eval_seed,
        "out": str(out),
    }
    manifest = write_manifest(out, "eval", resolved)
    eval_set = D.load_imageset(args.data_dir, eval_dataset, "test")
    grid_path = out / "reconstructions.pgm"
    row = ME.cross_dataset_eval(
        params,
        trained_on=trained_on,
        eval_set=eval_set,
        model_id=header["bound"]["family"],
        eval_seed=args.eval_seed,
        k_eval=args.k_eval,
        logpx_k=args.logpx_k,
        subset=args.subset,
        grid_path=grid_path,
    )
    csv_path = out / "metrics_eval.csv"
    ME.write_metric_rows(csv_path, [row])
    finish_manifest(manifest, [str(csv_path), str(grid_path)])
    print(
        f"{row.model_id} trained on {row.dataset_trained}, evaluated on {row.dataset_evaluated}: "
        f"iwae64={row.iwae64:.3f} logpx={row.logpx:.3f} minus_kl={row.minus_kl:.3f} "
        f"ssim={row.ssim_mean:.3f}+-{row.ssim_std:.3f}"
    )
    return EXIT_OK


def cmd_snr(args) -> int:
    from . import gaussian as G
    from . import reporting as R
    from . import snr as S

    if args.seed < 0:
        raise UsageError("--seed must be non-negative")
    m_grid = [int(v) for v in args.M_grid.split(",")]
    k_grid = [int(v) for v in args.K_grid.split(",")]
    families = [f.strip() for f in args.families.split(",")]
    for fam in families:
        if fam not in S.SNR_FAMILIES:
            raise UsageError(f"unknown family {fam!r}")
    fit_ks = [k for k in k_grid if k >= S.SLOPE_FIT_MIN_K]
    if len(fit_ks) < S.MIN_FIT_POINTS and len(m_grid) < S.MIN_FIT_POINTS:
        raise UsageError(
            f"grids too small for any slope fit: need >= {S.MIN_FIT_POINTS} points with "
            f"K >= {S.SLOPE_FIT_MIN_K}, or >= {S.MIN_FIT_POINTS} M points"
        )
    out = Path(args.out)
    _check_out_dir(out, args.force)
    resolved = {
        "families": families,
        "M_grid": m_grid,
        "K_grid": k_grid,
        "samples": args.samples,
        "dim": args.dim,
        "n_items": args.items,
        "seed": args.seed,
        "out": str(out),
    }
    manifest = write_manifest(out, "snr", resolved)
    model = G.make_model(dim=args.dim, n_items=args.items, seed=args.seed)
    report = S.snr_sweep(model, families, m_grid, k_grid, args.samples, seed=args.seed)
    csv_path = out / "snr.csv"
    report.write_csv(csv_path)
    svg_path = R.plot_snr_vs_k(report, out / "snr_vs_k.svg")
    finish_manifest(manifest, [str(csv_path), str(svg_path)])
    print(f"wrote {csv_path} and {svg_path} ({len(report.rows)} rows)")
    return EXIT_OK


def cmd_plot(args) -> int:
    from . import reporting as R

    for path in args.csvs:
        if not Path(path).exists():
            raise UsageError(f"metrics CSV not found: {path}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        for metric in ("iwae64", "logpx"):
            written.append(str(R.plot_metric_curves(args.csvs, metric, out / f"{metric}.svg", window=args.window)))
    except R.CsvFormatError as e:
        raise UsageError(str(e)) from e
    print("wrote " + ", ".join(written))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tbvi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one estimator configuration")
    p_train.add_argument("--dataset", choices=["mnist", "omniglot"], required=True)
    p_train.add_argument("--family", choices=list(B.FAMILIES), required=True)
    p_train.add_argument("--M", type=int, default=None)
    p_train.add_argument("--K", type=int, default=None)
    p_train.add_argument("--L", type=int, default=None)
    p_train.add_argument("--beta", type=float, default=None)
    p_train.add_argument("--learn-beta", action="store_true")
    p_train.add_argument("--model", choices=list(MODEL_PRESETS), default="referential")
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--batch-size", type=int, default=20)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--data-dir", default=None)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--checkpoint-every", type=int, default=50)
    p_train.add_argument("--eval-every", type=int, default=10)
    p_train.add_argument("--final-logpx-k", type=int, default=5000,
                         help="samples for the end-of-training marginal estimate")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")
    p_train.add_argument("--force", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", choices=["mnist", "omniglot"], required=True)
    p_eval.add_argument("--cross", choices=["mnist", "omniglot"], default=None)
    p_eval.add_argument("--eval-seed", type=int, default=0)
    p_eval.add_argument("--k-eval", type=int, default=64)
    p_eval.add_argument("--logpx-k", type=int, default=5000)
    p_eval.add_argument("--subset", type=int, default=None)
    p_eval.add_argument("--data-dir", default=None)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--force", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_snr = sub.add_parser("snr", help="gradient signal-to-noise sweep on the tractable testbed")
    p_snr.add_argument("--families", default="iwae")
    p_snr.add_argument("--M-grid", default="1,4,16")
    p_snr.add_argument("--K-grid", default="4,16,64,256,1024")
    p_snr.add_argument("--samples", type=int, default=2000)
    p_snr.add_argument("--dim", type=int, default=4)
    p_snr.add_argument("--items", type=int, default=8)
    p_snr.add_argument("--seed", type=int, default=0)
    p_snr.add_argument("--out", required=True)
    p_snr.add_argument("--force", action="store_true")
    p_snr.set_defaults(func=cmd_snr)

    p_plot = sub.add_parser("plot", help="render figures from metrics CSVs")
    p_plot.add_argument("csvs", nargs="+")
    p_plot.add_argument("--window", type=int, default=10)
    p_plot.add_argument("--out", required=True)
    p_plot.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (B.ConfigError, D.IdxFormatError, D.IdxLengthError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
