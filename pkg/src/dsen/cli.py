"""Command-line front end: ``dsen {gen,train,eval,sweep,hist,export}``.

Exit codes: 0 success, 1 validation/usage error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from dsen import __version__
from dsen.data import (
    DatasetError,
    SyntheticSpec,
    dataset_fingerprint,
    gen_synthetic,
    load_dataset,
    save_dataset,
    validate_dataset,
)
from dsen.evaluation import (
    EvaluationError,
    best_row,
    default_tau_grid,
    evaluate,
    export_embeddings,
    score_histogram,
    sweep_csv,
    sweep_tau,
)
from dsen.losses import LossWeights, Toggles
from dsen.model import CheckpointError, config_hash, load_checkpoint
from dsen.nnkernel import DimensionError, NonFiniteError
from dsen.training import TrainConfig, TrainingError, train

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("dsen")


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_data(args):
    return load_dataset(args.data, normalize_attributes=getattr(args, "normalize_attributes", False))


def cmd_gen(args) -> int:
    spec = SyntheticSpec(
        n_seen=args.n_seen,
        n_unseen=args.n_unseen,
        attr_dim=args.attr_dim,
        feat_dim=args.feat_dim,
        samples_per_class=args.samples_per_class,
        noise_std=args.noise,
        seed=args.seed,
    )
    ds = gen_synthetic(spec)
    problems = validate_dataset(ds)
    if problems:
        raise DatasetError(args.out, "generated", "; ".join(problems))
    try:
        save_dataset(ds, args.out)
    except OSError as exc:
        raise DatasetError(args.out, "write", str(exc)) from None
    print(f"wrote {ds.n_samples} samples to {args.out}", file=sys.stderr)
    return EXIT_OK


_FLAG_TO_CONFIG = {
    "hidden": "hidden_dim",
    "epochs1": "phase1_epochs",
    "epochs2": "phase2_epochs",
    "batch": "batch_size",
    "seed": "seed",
    "lr1": "phase1_lr",
    "lr2": "phase2_lr",
    "warm_start_epoch": "warm_start_epoch",
    "probe_tau": "probe_tau",
}


def build_config(args) -> TrainConfig:
    """Config file values first, then command-line flags on top."""
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config {args.config}: {exc}") from None
    mode = args.mode or base.pop("mode", None) or "dsen"
    base.pop("mode", None)
    if "toggles" not in base or args.mode:
        base["toggles"] = asdict(Toggles.from_mode(mode))
    weights = dict(base.get("weights", {}))
    for flag, key in (("lambda1", "lambda1"), ("lambda2", "lambda2"), ("alpha", "alpha")):
        if getattr(args, flag) is not None:
            weights[key] = getattr(args, flag)
    base["weights"] = asdict(LossWeights(**weights))
    for flag, key in _FLAG_TO_CONFIG.items():
        if getattr(args, flag) is not None:
            base[key] = getattr(args, flag)
    if args.adapter:
        base["adapter_enabled"] = True
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    config = build_config(args)
    ds = _load_data(args)
    out = Path(args.out)
    model, report = train(ds, config, out_dir=out)
    summary = {
        "final_loss": report.epochs[-1].loss if report.epochs else None,
        "final_terms": report.epochs[-1].terms if report.epochs else {},
        "epochs": len(report.epochs),
    }
    if ds.eval_indices("seen").size and ds.eval_indices("unseen").size:
        rows = sweep_tau(model, ds)
        best = best_row(rows)
        summary["best_tau"] = best.tau
        summary["best"] = {"mca_s": best.mca_s, "mca_t": best.mca_t, "h": best.h}
    manifest = {
        "code_version": __version__,
        "config": config.to_dict(),
        "config_hash": config_hash(config.to_dict()),
        "mode": config.toggles.mode,
        "toggles": list(config.toggles.enabled()),
        "seed": config.seed,
        "dataset": str(Path(args.data)),
        "dataset_fingerprint": dataset_fingerprint(args.data),
        "normalize_attributes": bool(args.normalize_attributes),
        "checkpoint": "model.ckpt",
        "log": "train_log.jsonl",
        "metrics": summary,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"trained {len(report.epochs)} epochs; checkpoint {out / 'model.ckpt'}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    ds = _load_data(args)
    if not args.conventional and args.tau is None:
        raise ValueError("eval needs --tau or --conventional")
    result = evaluate(model, ds, 1.0 if args.conventional else args.tau, conventional=args.conventional)
    _emit(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    model = load_checkpoint(args.model)
    ds = _load_data(args)
    rows = sweep_tau(model, ds, default_tau_grid(args.grid_step))
    _emit(sweep_csv(rows), args.out)
    return EXIT_OK


def cmd_hist(args) -> int:
    model = load_checkpoint(args.model)
    ds = _load_data(args)
    if model.feat_dim != ds.feat_dim:
        raise DimensionError(f"model feat_dim {model.feat_dim} != dataset feat_dim {ds.feat_dim}")
    idx = ds.eval_indices(args.split)
    if idx.size == 0:
        raise ValueError(f"no {args.split}-domain evaluation samples")
    edges = np.round(np.linspace(0.0, 1.0, args.bins + 1), 10)
    _emit(score_histogram(model, ds.features[idx], edges).to_csv(), args.out)
    return EXIT_OK


def cmd_export(args) -> int:
    model = load_checkpoint(args.model)
    ds = _load_data(args)
    if model.attr_dim != ds.attr_dim:
        raise DimensionError(f"model attr_dim {model.attr_dim} != dataset attr_dim {ds.attr_dim}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(model, ds, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsen", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset directory")
    d = SyntheticSpec()
    p.add_argument("--out", required=True)
    p.add_argument("--n-seen", type=int, default=d.n_seen)
    p.add_argument("--n-unseen", type=int, default=d.n_unseen)
    p.add_argument("--attr-dim", type=int, default=d.attr_dim)
    p.add_argument("--feat-dim", type=int, default=d.feat_dim)
    p.add_argument("--samples-per-class", type=int, default=d.samples_per_class)
    p.add_argument("--noise", type=float, default=d.noise_std)
    p.add_argument("--seed", type=int, default=d.seed)
    p.set_defaults(func=cmd_gen)

    def data_arg(p):
        p.add_argument("--data", required=True)
        p.add_argument("--normalize-attributes", action="store_true", help="L2-normalise attribute rows on load")

    p = sub.add_parser("train", help="train a model")
    data_arg(p)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["s2v", "dsp", "ddc", "dsen"])
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--epochs1", type=int)
    p.add_argument("--epochs2", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr1", type=float)
    p.add_argument("--lr2", type=float)
    p.add_argument("--warm-start-epoch", type=int)
    p.add_argument("--probe-tau", type=float)
    p.add_argument("--adapter", action="store_true", help="train a feature adapter in phase 2")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; JSON report on stdout")
    p.add_argument("--model", required=True)
    data_arg(p)
    p.add_argument("--tau", type=float)
    p.add_argument("--conventional", action="store_true")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="evaluate over a tau grid; CSV output")
    p.add_argument("--model", required=True)
    data_arg(p)
    p.add_argument("--grid-step", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("hist", help="histogram of maximum seen-class scores; CSV output")
    p.add_argument("--model", required=True)
    data_arg(p)
    p.add_argument("--split", choices=["seen", "unseen"], default="unseen")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_hist)

    p = sub.add_parser("export", help="export class embeddings as CSV for external t-SNE")
    p.add_argument("--model", required=True)
    data_arg(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, DimensionError, EvaluationError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
