"""Command-line front end: generate, train, report, acceptance."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import acceptance
from .config import ConfigError, RunConfig, load_config
from .datagen import generate_dataset, generate_unseen
from .dataset import read_dataset, write_dataset
from .metrics import MetricsWriter, read_metrics
from .regularizers import WeightLedger
from .report import build_report
from .training import (TrainData, TrainState, continual_unseen, estimate_weights, evaluate, finetune,
                       load_state, run_baseline, run_rebo, save_state, subset_unlabeled,
                       transfer_retrain)

log = logging.getLogger("bilevel_ssl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    return cfg


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out or Path(cfg.output_dir) / "dataset.bspc")
    ds = generate_dataset(cfg.dataset_spec())
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_dataset(ds, out)
    except OSError as e:
        raise UsageError(f"cannot write {out}: {e}") from None
    counts = ds.counts()
    print(json.dumps({"path": str(out), "counts": {c: n for c, n in counts.items() if n}}))
    return EXIT_OK


def _load_data(cfg: RunConfig, path: str | None):
    path = path or cfg.dataset
    if not path:
        raise UsageError("no dataset given (use --dataset or the 'dataset' config key)")
    try:
        ds = read_dataset(path)
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read dataset {path}: {e}") from None
    if (ds.num_classes, ds.num_points) != (cfg.num_classes, cfg.num_points):
        raise UsageError(f"dataset has C={ds.num_classes}, N={ds.num_points} but config expects "
                         f"C={cfg.num_classes}, N={cfg.num_points}")
    return ds


def _ledger_weights(path: str, ids) -> dict[int, float]:
    try:
        weights = dict(WeightLedger.from_csv(path).current)
    except (OSError, KeyError, ValueError) as e:
        raise UsageError(f"cannot read weights file {path}: {e}") from None
    missing = [int(s) for s in ids if int(s) not in weights]
    if missing:
        raise UsageError(f"weights file {path} has no weight for {len(missing)} unlabeled samples, "
                         f"e.g. {missing[:5]}")
    return weights


def _truncate_metrics(path: Path, epoch: int) -> None:
    """Drop rows written after the checkpoint being resumed."""
    rows = [r for r in read_metrics(path) if r.epoch < epoch]
    w = MetricsWriter(path)
    for r in rows:
        w.append(r)
    w.flush()


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.mode:
        cfg.mode = args.mode
    tcfg = cfg.train_config()
    ds = _load_data(cfg, args.dataset)
    data = TrainData.from_dataset(ds, tuple(cfg.unlabeled_cohorts))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    ckpt = out / "checkpoint"
    metrics_path = out / "metrics.csv"

    state: TrainState | None = None
    if args.resume:
        if cfg.mode not in ("baseline", "rebo"):
            raise UsageError("--resume supports the baseline and rebo modes")
        if not (ckpt / "state.json").exists():
            raise UsageError(f"no checkpoint in {ckpt}")
        state = load_state(ckpt, tcfg)
        if metrics_path.exists():
            _truncate_metrics(metrics_path, state.epoch)
        log.info("resuming at epoch %d", state.epoch)

    writer = MetricsWriter(metrics_path, append=args.resume)

    def hook(st: TrainState) -> None:
        writer.flush()
        if cfg.checkpoint_every > 0 and st.epoch % cfg.checkpoint_every == 0:
            save_state(st, ckpt)

    sink = writer.append
    if cfg.mode == "baseline":
        state = run_baseline(tcfg, data, sink, state=state, hook=hook)
    elif cfg.mode == "rebo":
        state = run_rebo(tcfg, data, sink, state=state, hook=hook)
    elif cfg.mode in ("transfer", "finetune"):
        subset = subset_unlabeled(data, cfg.subset_fraction, tcfg.seed)
        if cfg.mode == "transfer" and cfg.weights_file:
            weights = _ledger_weights(cfg.weights_file, data.unlabeled_ids)
        else:
            state = run_rebo(tcfg, subset, sink, hook=hook)
        if cfg.mode == "transfer":
            if not cfg.weights_file:
                weights = estimate_weights(state, data)
            state = transfer_retrain(weights, data, tcfg, _Offset(sink, state))
        else:
            state = finetune(state, data, cfg.finetune_epochs, sink)
    else:  # continual
        state = run_rebo(tcfg, data, sink, hook=hook)
        unseen = generate_unseen(cfg.dataset_spec(), cfg.unseen_count, first_id=len(ds.samples))
        state = continual_unseen(state, data, unseen, cfg.continual_mode, cfg.continual_epochs, sink)
    writer.flush()
    save_state(state, out)

    summary = {
        "mode": cfg.mode,
        "epochs": state.epoch,
        "meta_steps": state.meta_steps,
        "accuracy": evaluate(state.theta, data.test, data.test_labels) if len(data.test) else None,
        "cohort_means": state.ledger.cohort_means(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


class _Offset:
    """Shifts the epoch of records from a second training stage past the first one."""

    def __init__(self, sink, previous: TrainState | None):
        self.sink = sink
        self.offset = previous.epoch if previous is not None else 0

    def __call__(self, rec) -> None:
        rec.epoch += self.offset
        self.sink(rec)


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    try:
        result = build_report(run, args.out, figures=not args.no_figures)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    except ValueError as e:
        raise UsageError(f"cannot build report: {e}") from None
    print(json.dumps({"means": result["means"], "files": result["files"]}, sort_keys=True))
    return EXIT_OK


def cmd_acceptance(args) -> int:
    cfg = acceptance.SuiteConfig(sabotage=args.sabotage)
    if args.seeds:
        cfg.seeds = tuple(args.seeds)
    verdicts = acceptance.run_suite(cfg, args.only, echo=lambda s: print(s, flush=True))
    report = {
        "passed": all(v.passed for v in verdicts),
        "criteria": [{"number": v.number, "name": v.name, "passed": v.passed, "seconds": v.seconds,
                      "detail": acceptance.to_jsonable(v.detail)} for v in verdicts],
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bilevel-ssl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.alpha=0.05 (repeatable)")
        sp.add_argument("--output-dir")

    g = sub.add_parser("generate", help="write a synthetic dataset file")
    common(g)
    g.add_argument("--out", help="dataset path (default: <output_dir>/dataset.bspc)")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train and write checkpoints, metrics and a summary")
    common(t)
    t.add_argument("--dataset")
    t.add_argument("--mode", choices=["baseline", "rebo", "transfer", "finetune", "continual"])
    t.add_argument("--resume", action="store_true", help="continue from <output_dir>/checkpoint")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("report", help="weight histograms, cohort means and figures")
    r.add_argument("run_dir")
    r.add_argument("--out", help="report directory (default: <run_dir>/report)")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(fn=cmd_report)

    a = sub.add_parser("acceptance", help="run the acceptance suite")
    a.add_argument("--only", type=int, nargs="+", help="criterion numbers to run")
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--sabotage", action="store_true", help="force all weights to 1 (negative control)")
    a.add_argument("--json", help="write the verdict JSON here instead of stdout")
    a.set_defaults(fn=cmd_acceptance)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
