"""``bgforecast`` command line: synth, identify, forecast and ablate.

Every command is a pure function of its arguments, input files and seed.
Experiment outputs go to ``OUT/<command>-<hash>/`` where the hash covers the
full experiment spec and the input data, so different runs never overwrite
each other while reruns reproduce the same directory byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, nn
from .config import dump_config, load_config
from .datamodel import BGForecastError, NumericError
from .evaluation import METRIC_LABELS, METRICS
from .ingest import parse_subject_log
from .protocols import FRACTIONS, ExperimentSpec, run_ablation, run_forecast, \
    run_patient_identification
from .synthcohort import make_cohort, params_to_dict, sample_patient_params, space_mean_glucose, \
    write_cohort

log = logging.getLogger("bgforecast")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or inputs; reported with exit code 2."""


# --- helpers ----------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _cell(v) -> str:
    if v is None:
        return "n.a."
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def load_data_dir(path: str | Path):
    """Parse every subject file (*.csv, *.json) in a directory, ordered by name."""
    root = Path(path)
    if not root.is_dir():
        raise UsageError(f"data directory {root} does not exist")
    files = sorted(p for p in root.iterdir()
                   if p.suffix in (".csv", ".json") and p.stem != "manifest")
    if not files:
        raise UsageError(f"no subject files in {root}")
    cohort = [parse_subject_log(p) for p in files]
    if len(cohort) < 2:
        raise UsageError(f"need at least two subjects, found {len(cohort)} in {root}")
    digest = hashlib.sha256()
    for p in files:
        digest.update(p.name.encode())
        digest.update(p.read_bytes())
    return cohort, digest.hexdigest()


def _manifest(command: str, spec: ExperimentSpec | None, data_digest: str | None,
              extra: dict | None = None) -> dict:
    out = {"command": command, "artifact_version": __version__}
    if spec is not None:
        out.update(spec_hash=spec.spec_hash(), seed=spec.seed, config=dump_config(spec))
    if data_digest is not None:
        out["data_sha256"] = data_digest
    out.update(extra or {})
    return out


def _run_dir(out: str, command: str, spec: ExperimentSpec, data_digest: str) -> Path:
    key = hashlib.sha256(f"{command}|{spec.spec_hash()}|{data_digest}".encode()).hexdigest()[:12]
    path = Path(out) / f"{command}-{key}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def build_spec(args, task: str) -> ExperimentSpec:
    base = ExperimentSpec.paper_scale(task=task) if args.preset == "paper" else ExperimentSpec(task=task)
    if args.config:
        try:
            base = load_config(args.config, base)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        except BGForecastError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    kw = {"task": task}
    if args.seed is not None:
        kw["seed"] = args.seed
    for name in ("ph", "multimodal", "personalize", "fraction"):
        value = getattr(args, name, None)
        if value is None:
            continue
        key = {"ph": "ph_minutes", "personalize": "patient_specific",
               "fraction": "data_fraction"}.get(name, name)
        kw[key] = value == "on" if name in ("multimodal", "personalize") else value
    if args.max_epochs is not None:
        base = replace(base, train=replace(base.train, max_epochs=args.max_epochs))
    try:
        return replace(base, **kw)
    except BGForecastError as exc:
        raise UsageError(str(exc)) from None


# --- commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.subjects < 2:
        raise UsageError("--subjects must be at least 2")
    if args.days < 1:
        raise UsageError("--days must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = sample_patient_params(args.subjects, args.separation, args.seed)
    if args.separation == "well_separated":
        params = space_mean_glucose(params, args.days)
    cohort = make_cohort(args.subjects, args.separation, args.seed, args.days, params=params)
    paths = write_cohort(cohort, out)
    _write_json(out / "manifest.json", _manifest("synth", None, None, {
        "seed": args.seed, "subjects": args.subjects, "days": args.days,
        "separation": args.separation, "files": [p.name for p in paths],
        "patient_params": {c.subject_id: params_to_dict(p) for c, p in zip(cohort, params)},
    }))
    print(f"wrote {len(paths)} subject files to {out}")
    return EXIT_OK


def cmd_identify(args) -> int:
    spec = build_spec(args, "identify")
    cohort, digest = load_data_dir(args.data)
    run = _run_dir(args.out, "identify", spec, digest)
    result = run_patient_identification(cohort, spec, shuffle_labels=args.shuffle_labels)
    result.report.to_json(run / "class_report.json")
    result.report.confusion_csv(run / "confusion.csv")
    result.history.to_csv(run / "history.csv")
    nn.save_checkpoint(result.params, run / "model.json", {"classes": result.class_names})
    _write_json(run / "manifest.json", _manifest("identify", spec, digest, {
        "shuffle_labels": args.shuffle_labels, "split_sizes": list(result.split_sizes)}))
    print(f"accuracy {result.report.accuracy:.4f} -> {run}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    spec = build_spec(args, "forecast")
    cohort, digest = load_data_dir(args.data)
    run = _run_dir(args.out, "forecast", spec, digest)
    result = run_forecast(cohort, spec, jobs=args.jobs)
    folds_dir = run / "folds"
    folds_dir.mkdir(exist_ok=True)
    for sid, fold in sorted(result.folds.items()):
        entry = {"subject_id": sid, "failed": fold.failed, "error": fold.error,
                 "training_subjects": fold.training_subjects,
                 "best_epoch": fold.history.best_epoch if fold.history else None,
                 "independent": fold.report.to_dict() if fold.report else None}
        if sid in result.personalized:
            tuned = result.personalized[sid]
            entry["personalized"] = tuned.report.to_dict()
            entry["fine_tune_windows"] = tuned.n_train_windows
            entry["fine_tune_best_epoch"] = tuned.history.best_epoch
        _write_json(folds_dir / f"{sid}.json", entry)
        if fold.history:
            fold.history.to_csv(folds_dir / f"{sid}_history.csv")
    report = result.report()
    if report is not None:
        report.to_json(run / "report.json")
        report.to_csv(run / "table.csv")
    _write_json(run / "manifest.json", _manifest("forecast", spec, digest, {
        "failed_folds": result.failed}))
    if report is not None:
        agg = report.aggregate
        print("  ".join(f"{METRIC_LABELS[m]}={_cell(getattr(agg, m))}" for m in METRICS) + f" -> {run}")
    if result.failed:
        print(f"failed folds: {', '.join(result.failed)}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_ablate(args) -> int:
    spec = build_spec(args, "forecast")
    cohort, digest = load_data_dir(args.data)
    run = _run_dir(args.out, "ablate", spec, digest)
    result = run_ablation(cohort, spec, jobs=args.jobs)
    _write_csv(run / "ablation.csv", [{k: _cell(v) for k, v in r.items()} for r in result.table()])
    _write_csv(run / "ablation_long.csv",
               [{k: _cell(v) for k, v in r.items()} for r in result.long_rows()])
    _write_json(run / "manifest.json", _manifest("ablate", spec, digest,
                                                 {"fractions": list(FRACTIONS)}))
    print(f"ablation table -> {run / 'ablation.csv'}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------

def _experiment_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="directory of subject CSV/JSON files")
    p.add_argument("--out", required=True, help="parent directory for the run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="INI file with [experiment] and [train] sections")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bgforecast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="simulate a synthetic cohort")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--separation", choices=("well_separated", "overlapping"), default="well_separated")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("identify", help="patient identification experiment")
    _experiment_options(p)
    p.add_argument("--shuffle-labels", action="store_true", dest="shuffle_labels")
    p.set_defaults(func=cmd_identify)

    on_off = ("on", "off")
    for name, func, help_text in (("forecast", cmd_forecast, "LOSOCV forecasting, optionally personalized"),
                                  ("ablate", cmd_ablate, "personalization data-fraction ablation")):
        p = sub.add_parser(name, help=help_text)
        _experiment_options(p)
        p.add_argument("--ph", type=int, choices=(30, 60), default=None)
        p.add_argument("--multimodal", choices=on_off, default=None)
        p.add_argument("--jobs", type=int, default=1)
        if name == "forecast":
            p.add_argument("--personalize", choices=on_off, default=None)
            p.add_argument("--fraction", type=float, choices=FRACTIONS, default=None)
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except NumericError as exc:
        print(f"bgforecast: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except BGForecastError as exc:
        print(f"bgforecast: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
