"""``cdcnn`` command line: data generation, training, evaluation, sweeps.

Exit codes: 0 success, 1 validation failure, 2 usage or input error.
``CDCNN_JOBS`` sets the default ``--jobs``; ``CDCNN_REPORT_DIR`` is where
relative report paths land.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import evaluation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cnc import NonFiniteLossError, train_full
from .datagen import DatasetFormatError, export_dataset, gen_dataset, import_dataset
from .gradcheck import run_checks
from .model import Network
from .profiles import PROFILES, ProfileError, get_profile

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags or unusable inputs; reported as one line, exit code 2."""


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _default_jobs() -> int:
    raw = os.environ.get("CDCNN_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _report_path(path: str | None, default_name: str) -> Path:
    base = Path(os.environ.get("CDCNN_REPORT_DIR", "."))
    p = Path(path) if path else Path(default_name)
    return p if p.is_absolute() else base / p


def _profile(name: str):
    try:
        return get_profile(name)
    except ProfileError as exc:
        raise UsageError(str(exc)) from exc


def _experiment(profile):
    try:
        return profile.experiment()
    except ProfileError as exc:
        raise UsageError(str(exc)) from exc


def _load_dataset(path: str):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"dataset file {p} not found; create one with `cdcnn gen-data --out {p}`")
    try:
        return import_dataset(p)
    except DatasetFormatError as exc:
        raise UsageError(f"{p}: {exc}") from exc


def _fmt(fmt: str) -> str:
    return "csv" if fmt == "csv" else "json-lines"


def _ext(fmt: str) -> str:
    return "csv" if fmt == "csv" else "jsonl"


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_gen_data(args) -> tuple[int, str]:
    profile = _profile(args.profile)
    gen = profile.gen if args.seed is None else replace(profile.gen, seed=args.seed)
    try:
        ds = gen_dataset(gen)
    except ValueError as exc:
        raise UsageError(f"profile {profile.name!r}: {exc}") from exc
    export_dataset(ds, args.out)
    return EXIT_OK, (f"gen-data: wrote {args.out} ({len(ds.labeled)} labeled, {len(ds.unlabeled)} unlabeled, "
                     f"{len(ds.validation)} validation; seed {gen.seed})")


def cmd_train(args) -> tuple[int, str]:
    profile = _profile(args.profile)
    exp = _experiment(profile)
    ds = _load_dataset(args.data)
    if (ds.config.I, ds.config.J) != (exp.model.I, exp.model.J):
        raise UsageError(f"dataset grid {ds.config.I}x{ds.config.J} does not match profile model grid "
                         f"{exp.model.I}x{exp.model.J}")
    train = exp.train
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    if args.max_rounds is not None:
        train = replace(train, max_rounds=args.max_rounds)
    if args.no_cotrain:
        train = replace(train, max_rounds=0)
    balanced = not args.no_balance
    try:
        params, log = train_full(ds.labeled, ds.labels, ds.unlabeled, exp.model, train, balanced)
    except NonFiniteLossError as exc:
        print(f"train: {exc}; lower learning_rate in the profile", file=sys.stderr)
        return EXIT_FAIL, f"train: failed ({exc})"
    meta = {"train": asdict(train), "profile": profile.name, "data_seed": ds.config.seed}
    save_checkpoint(args.out_checkpoint, params, exp.model, balanced, meta)
    log_path = Path(args.log) if args.log else Path(str(args.out_checkpoint) + ".log.jsonl")
    log.to_jsonl(log_path)
    y = Network(exp.model, "cdcnn", balanced).predict(params, ds.validation.R, ds.validation.U)
    m = evaluation.compute_metrics(y, ds.truth("validation").label, exp.threshold)
    rounds = next((e["rounds"] for e in log.select("phase_end") if e.get("phase") == "cotrain"), 0)
    return EXIT_OK, (f"train: wrote {args.out_checkpoint} (co-training rounds {rounds}; "
                     f"validation F1 {m.f1:.4f})")


def cmd_eval(args) -> tuple[int, str]:
    ds = _load_dataset(args.data)
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint {args.checkpoint} not found; create one with `cdcnn train`")
    try:
        params, model_config, balanced, meta = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    if (ds.config.I, ds.config.J) != (model_config.I, model_config.J):
        raise UsageError(f"checkpoint grid {model_config.I}x{model_config.J} does not match dataset grid "
                         f"{ds.config.I}x{ds.config.J}")
    y = Network(model_config, "cdcnn", balanced).predict(params, ds.validation.R, ds.validation.U)
    truth = ds.truth("validation")
    m = evaluation.compute_metrics(y, truth.label, args.threshold)
    variant = "CD-CNN" if balanced else "NoBal"
    seed = int(meta.get("train", {}).get("seed", 0))
    report = evaluation.AblationReport(
        records=[evaluation.Record.of(variant, seed, ds.config.days, len(ds.labeled), m)],
        config={"gen": ds.config.to_dict(), "checkpoint_meta": meta, "kind": "eval"},
        seeds=[seed],
        calibration={seed: evaluation.calibration_table(y, truth.leaving)},
    )
    path = evaluation.write_report(report, _report_path(args.report, f"eval.{_ext(args.format)}"), _fmt(args.format))
    return EXIT_OK, f"eval: {variant} P={m.precision:.4f} R={m.recall:.4f} F1={m.f1:.4f} -> {path}"


def cmd_ablate(args) -> tuple[int, str]:
    profile = _profile(args.profile)
    exp = _experiment(profile)
    seeds = args.seeds if args.seeds is not None else list(profile.eval.seeds)
    try:
        report = evaluation.run_ablation(exp, seeds, jobs=args.jobs)
    except ValueError as exc:
        raise UsageError(f"ablate: {exc}") from exc
    path = evaluation.write_report(report, _report_path(args.report, f"ablation.{_ext(args.format)}"), _fmt(args.format))
    means = " ".join(f"{v}={report.mean_f1(v):.4f}" for v in evaluation.VARIANTS)
    return EXIT_OK, f"ablate: mean F1 {means} over {len(seeds)} seeds -> {path}"


def cmd_sweep(args) -> tuple[int, str]:
    profile = _profile(args.profile)
    exp = _experiment(profile)
    seeds = args.seeds if args.seeds is not None else list(profile.eval.seeds)
    try:
        if args.axis == "labels":
            points = args.points if args.points is not None else list(profile.eval.label_sizes)
            report = evaluation.sweep_labels(exp, points, seeds, jobs=args.jobs)
            key = "label_size"
        else:
            points = args.points if args.points is not None else list(profile.eval.days_points)
            report = evaluation.sweep_days(exp, points, seeds, jobs=args.jobs)
            key = "days"
    except ValueError as exc:
        raise UsageError(f"sweep: {exc}") from exc
    path = evaluation.write_report(report, _report_path(args.report, f"sweep-{args.axis}.{_ext(args.format)}"),
                                   _fmt(args.format))
    cells = " ".join(f"{p}:{report.mean_f1('CD-CNN', **{key: p}):.4f}" for p in points)
    return EXIT_OK, f"sweep {args.axis}: CD-CNN mean F1 {cells} -> {path}"


def cmd_grad_check(args) -> tuple[int, str]:
    if args.trials < 1:
        raise UsageError("grad-check: --trials must be >= 1")
    results = run_checks(args.trials, seed=args.seed)
    worst = max(results, key=lambda r: r.error)
    ok = worst.error < args.tolerance
    status = "pass" if ok else "FAIL"
    return (EXIT_OK if ok else EXIT_FAIL), (f"grad-check: {status} worst relative error {worst.error:.3e} "
                                            f"({worst.target}) over {len(results)} checks, tolerance {args.tolerance:g}")


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="cdcnn", description="CD-CNN training and evaluation", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    profiles = ", ".join(sorted(PROFILES))

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file", formatter_class=fmt)
    p.add_argument("--profile", default="desk-default", help=f"built-in profile ({profiles}) or JSON file")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--seed", type=int, default=None, help="generator seed (default: the profile's)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run pre-training, co-training and fine-tuning", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset file from gen-data")
    p.add_argument("--profile", default="desk-default", help=f"built-in profile ({profiles}) or JSON file")
    p.add_argument("--out-checkpoint", required=True, help="checkpoint file to write")
    p.add_argument("--max-rounds", type=int, default=None, help="co-training rounds (default: the profile's)")
    p.add_argument("--no-cotrain", action="store_true", help="skip co-training (same as --max-rounds 0)")
    p.add_argument("--no-balance", action="store_true", help="train the NoBal variant")
    p.add_argument("--seed", type=int, default=None, help="trainer seed (default: the profile's)")
    p.add_argument("--log", default=None, help="training log path (default: <checkpoint>.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset's validation split", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--checkpoint", required=True, help="checkpoint file from train")
    p.add_argument("--report", default=None, help="report path (default: eval.<ext> in CDCNN_REPORT_DIR)")
    p.add_argument("--format", choices=("csv", "json-lines"), default="csv", help="report format")
    p.add_argument("--threshold", type=float, default=0.5, help="decision threshold on the sigmoid output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="five-variant ablation over seeds", formatter_class=fmt)
    p.add_argument("--profile", default="desk-default", help=f"built-in profile ({profiles}) or JSON file")
    p.add_argument("--seeds", type=_int_list, default=None, help="comma-separated seeds (default: the profile's)")
    p.add_argument("--report", default=None, help="report path (default: ablation.<ext> in CDCNN_REPORT_DIR)")
    p.add_argument("--format", choices=("csv", "json-lines"), default="csv", help="report format")
    p.add_argument("--jobs", type=int, default=_default_jobs(), help="parallel worker processes (env CDCNN_JOBS)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="label-size or collecting-days sweep", formatter_class=fmt)
    p.add_argument("--profile", default="desk-default", help=f"built-in profile ({profiles}) or JSON file")
    p.add_argument("--axis", choices=("labels", "days"), required=True, help="sweep axis")
    p.add_argument("--points", type=_int_list, default=None, help="comma-separated sweep points (default: the profile's)")
    p.add_argument("--seeds", type=_int_list, default=None, help="comma-separated seeds (default: the profile's)")
    p.add_argument("--report", default=None, help="report path (default: sweep-<axis>.<ext> in CDCNN_REPORT_DIR)")
    p.add_argument("--format", choices=("csv", "json-lines"), default="csv", help="report format")
    p.add_argument("--jobs", type=int, default=_default_jobs(), help="parallel worker processes (env CDCNN_JOBS)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("grad-check", help="compare analytic gradients with finite differences", formatter_class=fmt)
    p.add_argument("--trials", type=int, default=20, help="random configurations per layer and network")
    p.add_argument("--tolerance", type=float, default=1e-4, help="largest accepted relative error")
    p.add_argument("--seed", type=int, default=0, help="seed for the random configurations")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        code, line = args.func(args)
    except UsageError as exc:
        print(f"cdcnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cdcnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(line)
    return code


if __name__ == "__main__":
    sys.exit(main())
