"""Command-line entry point: ``smile-ssl <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import KEY_DOCS, RunConfig, benchmark_config, leaf_keys, load_config
from .data import Dataset, generate_synthetic, load_dataset, save_dataset
from .encoders import load_model
from .errors import DivergenceError, NumericError, SmileError
from .evaluation import (AblationResult, bar_chart_svg, cross_domain_datasets, metrics_csv, evaluate_fold, heatmap_svg, run_ablation,
                         run_cross_domain, run_cross_validation, write_report)
from .gradcheck import gradient_report
from .train import run_training, save_training_checkpoint, write_metrics_csv

log = logging.getLogger("smile_ssl")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 1, 2, 3, 4
GRADCHECK_TOLERANCE = 1e-4

COMMANDS = {
    "gen-data": "generate the synthetic multiview dataset",
    "train": "train on the whole dataset and save a checkpoint",
    "eval": "zero-shot evaluation of a saved checkpoint",
    "cross-val": "subject-independent k-fold cross-validation",
    "cross-domain": "train on the source domain, evaluate on a shifted target domain",
    "ablate": "cross-validate the full objective and each single-loss removal",
    "gradcheck": "compare autodiff gradients of every loss with finite differences",
    "report": "re-render SVG charts from the CSVs in <out>/report",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config_epilog() -> str:
    lines = ["config keys (set with --set key=value; values parse as JSON):"]
    defaults = benchmark_config().to_dict()
    for key in leaf_keys():
        node = defaults
        for part in key.split("."):
            node = node[part]
        lines.append(f"  {key} (default {json.dumps(node)}): {KEY_DOCS.get(key, '')}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smile-ssl", description="Multiview vision-language self-supervised FER toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    epilog = _config_epilog()
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON config file (defaults: the bundled benchmark)")
        p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
        p.add_argument("--out", help="output directory (default $SMILE_SSL_OUT or ./runs)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for folds (default 1)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                       help="override a config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        if name in ("train", "eval", "cross-val", "cross-domain", "ablate"):
            p.add_argument("--data", help="dataset manifest from gen-data (default: generate from config)")
        if name == "eval":
            p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    return parser


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("SMILE_SSL_OUT") or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, cfg: RunConfig) -> Dataset:
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return generate_synthetic(cfg.data)


def _write_run_json(out: Path, args, cfg: RunConfig, datasets: dict[str, Dataset]) -> None:
    record = {
        "command": args.command,
        "version": __version__,
        "seed": args.seed,
        "seeds": {"data": cfg.data.seed, "train": cfg.train.seed},
        "config_file": args.config,
        "overrides": list(args.overrides),
        "jobs": args.jobs,
        "dataset_digest": {k: ds.digest() for k, ds in datasets.items()},
        "oracle_accuracy": {k: ds.oracle_accuracy for k, ds in datasets.items()},
        "config": cfg.to_dict(),
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args, cfg: RunConfig, out: Path) -> int:
    ds = generate_synthetic(cfg.data)
    save_dataset(ds, out / "dataset")
    _write_run_json(out, args, cfg, {"dataset": ds})
    print(f"dataset {len(ds)} samples, oracle accuracy {ds.oracle_accuracy:.4f}, digest {ds.digest()}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    ds = _dataset(args, cfg)
    _write_run_json(out, args, cfg, {"dataset": ds})
    result = run_training(ds, None, cfg.train, checkpoint_dir=out / "checkpoints")
    path = save_training_checkpoint(result, cfg.train, out / "model")
    write_metrics_csv(result.log, out / "train_metrics.csv")
    last = result.log[-1] if result.log else {}
    print(f"trained {result.epoch} epochs, final total loss {last.get('total', float('nan')):.6f}, "
          f"checkpoint {path}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    ds = _dataset(args, cfg)
    model, _, _ = load_model(args.checkpoint)
    _write_run_json(out, args, cfg, {"dataset": ds})
    metrics = evaluate_fold(model, ds, np.arange(len(ds)), model.bank, use_max=cfg.eval.use_max_template)
    write_report(out, "eval", metrics=metrics)
    print(f"zero-shot accuracy {metrics.accuracy:.4f}, macro F1 {metrics.macro_f1:.4f}")
    return EXIT_OK


def cmd_cross_val(args, cfg: RunConfig, out: Path) -> int:
    ds = _dataset(args, cfg)
    _write_run_json(out, args, cfg, {"dataset": ds})
    cv = run_cross_validation(ds, cfg.eval.k, cfg.train, args.jobs, cfg.eval.use_max_template)
    write_report(out, "cross_val", cv=cv)
    print(f"{cfg.eval.k}-fold accuracy {100 * cv.mean_accuracy:.2f} +- {100 * cv.sd_accuracy:.2f}, "
          f"macro F1 {cv.mean_macro_f1:.4f}")
    return EXIT_OK


def cmd_cross_domain(args, cfg: RunConfig, out: Path) -> int:
    source, target, in_domain = cross_domain_datasets(cfg.data, cfg.eval.target_domain_shift,
                                                      cfg.eval.target_noise_sd, cfg.eval.target_seed_offset)
    if getattr(args, "data", None):
        source = load_dataset(args.data)
    _write_run_json(out, args, cfg, {"source": source, "target": target, "in_domain": in_domain})
    res = run_cross_domain(source, target, cfg.eval.class_subset, cfg.train, in_domain,
                           cfg.eval.use_max_template)
    report = out / "report"
    report.mkdir(parents=True, exist_ok=True)
    text = metrics_csv(res.metrics, "cross_domain") + metrics_csv(res.in_domain, "in_domain").split("\n", 1)[1]
    (report / "metrics_cross_domain.csv").write_text(text)
    names = ", ".join(res.metrics.class_names)
    print(f"classes [{names}]: cross-domain accuracy {res.metrics.accuracy:.4f}, "
          f"in-domain accuracy {res.in_domain.accuracy:.4f}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig, out: Path) -> int:
    ds = _dataset(args, cfg)
    _write_run_json(out, args, cfg, {"dataset": ds})
    res = run_ablation(ds, cfg.eval.k, cfg.train, args.jobs, cfg.eval.use_max_template)
    write_report(out, "ablation", ablation=res)
    for name, acc in res.accuracy.items():
        print(f"{name:12s} {100 * acc:.2f}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig, out: Path) -> int:
    _write_run_json(out, args, cfg, {})
    report = gradient_report(args.seed)
    for name, err in report.items():
        print(f"{name:10s} max rel. error {err:.3e}")
    ok = all(err < GRADCHECK_TOLERANCE for err in report.values())
    print("gradcheck passed" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_FAILED


def _read_csv(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def cmd_report(args, cfg: RunConfig, out: Path) -> int:
    report = out / "report"
    if not report.is_dir():
        raise SmileError(f"no report directory under {out}")
    rendered = []
    for path in sorted(report.glob("ablation_*.csv")):
        rows = _read_csv(path)[1:]
        acc = {r[0]: float(r[1]) for r in rows}
        svg = path.with_suffix(".svg")
        svg.write_text(bar_chart_svg(acc, "Ablation: mean CV accuracy (%)"))
        res = AblationResult(acc)
        heat = report / path.name.replace("ablation_", "improvement_matrix_").replace(".csv", ".svg")
        heat.write_text(heatmap_svg(res.names, res.improvement_matrix(), "Accuracy improvement row - column (pp)"))
        rendered += [svg, heat]
    for path in sorted(report.glob("metrics_*.csv")):
        rows = _read_csv(path)
        if rows and rows[0][:2] == ["fold", "n"]:
            acc = {f"fold {r[0]}": float(r[2]) for r in rows[1:] if r[0].isdigit()}
            svg = report / path.name.replace("metrics_", "folds_").replace(".csv", ".svg")
            svg.write_text(bar_chart_svg(acc, "Zero-shot accuracy per fold (%)"))
            rendered.append(svg)
    for p in rendered:
        print(p)
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "cross-val": cmd_cross_val,
    "cross-domain": cmd_cross_domain,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def _fail(category: str, message: str, code: int) -> int:
    print(f"error[{category}]: {message}", file=sys.stderr)
    return code


def dispatch(argv: list[str] | None = None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail("usage", str(exc), EXIT_USAGE)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config, args.overrides).with_seed(args.seed)
        cfg.validate()
        return HANDLERS[args.command](args, cfg, _out_dir(args))
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except DivergenceError as exc:
        return _fail(f"divergence:{exc.component}", str(exc), EXIT_DIVERGENCE)
    except NumericError as exc:
        return _fail("numeric", str(exc), EXIT_DIVERGENCE)
    except (SmileError, ValueError, KeyError, FileNotFoundError) as exc:
        return _fail("validation", str(exc), EXIT_VALIDATION)


def main() -> None:
    sys.exit(dispatch())
