"""Command-line pipeline: gen | train | calibrate | eval | navigate | ablate.

Every command reads one JSON config (flags override file values, file
values override defaults), derives all randomness from the root seed,
and drops a manifest next to its outputs listing the effective config,
input hashes, and every emitted file. Exit codes: 0 success, 1 usage
error, 2 data error, 3 numeric failure.
"""

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import __version__, experiments
from .anatomy import patients_from_json, patients_to_json
from .conformal import CalibrationTable, min_calibration_size
from .metrics import write_report_csv, write_report_json
from .model import load_checkpoint, save_checkpoint
from .navigation import (parse_paths, path_str, write_error_dump_csv,
                         write_path_report_csv)
from .sampling import load_dataset, save_dataset
from .utils import file_sha256, json_hash
from .validation import DataError, NumericError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            config = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    if not isinstance(config, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return config


def _effective_config(args, overrides=None):
    config = experiments.merge_config(experiments.DEFAULT_CONFIG,
                                      _load_config(args.config))
    config = experiments.merge_config(config, overrides or {})
    if args.seed is not None:
        config["seed"] = args.seed
    return config


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out_dir, stage, config, inputs, outputs):
    """Record everything needed to replay the stage.

    Paths are stored relative to the manifest so identical layouts under
    different roots produce identical bytes.
    """
    input_records = {}
    for name, path in inputs.items():
        input_records[name] = {
            "path": os.path.relpath(path, out_dir),
            "sha256": file_sha256(path),
        }
    manifest = {
        "tool_version": __version__,
        "stage": stage,
        "config": config,
        "root_seed": config["seed"],
        "inputs": input_records,
        "outputs": {name: os.path.relpath(path, out_dir)
                    for name, path in outputs.items()},
        "config_hash": json_hash({
            "config": config,
            "inputs": {name: rec["sha256"] for name, rec in input_records.items()},
        }),
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _parse_alphas(text):
    try:
        alphas = [float(a) for a in str(text).split(",") if a.strip()]
    except ValueError:
        raise UsageError(f"malformed alpha list {text!r}") from None
    if not alphas or any(not 0.0 < a < 1.0 for a in alphas):
        raise UsageError("alphas must be in (0, 1)")
    return alphas


# --- commands ----------------------------------------------------------------

def cmd_gen(args):
    overrides = {}
    if args.patients is not None:
        overrides["anatomy"] = {"n_patients": args.patients}
    if args.samples is not None:
        overrides["sampler"] = {"samples_per_patient": args.samples}
    config = _effective_config(args, overrides)
    out = _out_dir(args)

    patients = experiments.make_patients(config)
    train_p, cal_p, test_p = experiments.make_splits(patients, config)
    train_ds, cal_ds, test_ds = experiments.build_split_datasets(
        train_p, cal_p, test_p, config)

    outputs = {}
    with open(out / "patients.json", "w") as fh:
        json.dump(patients_to_json(patients), fh, sort_keys=True)
        fh.write("\n")
    outputs["patients"] = out / "patients.json"
    with open(out / "splits.json", "w") as fh:
        json.dump({
            "train": [p.id for p in train_p],
            "calibration": [p.id for p in cal_p],
            "test": [p.id for p in test_p],
        }, fh, sort_keys=True)
        fh.write("\n")
    outputs["splits"] = out / "splits.json"
    for name, ds in (("train", train_ds), ("calibration", cal_ds), ("test", test_ds)):
        save_dataset(ds, out / f"{name}.npy")
        outputs[name] = out / f"{name}.npy"
        outputs[f"{name}_manifest"] = out / f"{name}.npy.json"
    _write_manifest(out, "gen", config, {}, outputs)
    return EXIT_OK


def cmd_train(args):
    overrides = {"train": {"epochs": args.epochs}} if args.epochs is not None else {}
    config = _effective_config(args, overrides)
    out = _out_dir(args)
    data_dir = Path(args.data)
    dataset_path = data_dir / "train.npy"
    dataset = load_dataset(dataset_path)

    train_patients = None
    if config["train"]["rebuild_each_epoch"]:
        try:
            with open(data_dir / "patients.json") as fh:
                everyone = patients_from_json(json.load(fh))
            with open(data_dir / "splits.json") as fh:
                split_ids = set(json.load(fh)["train"])
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise DataError(
                f"rebuild_each_epoch needs patients.json and splits.json in {data_dir}: {exc}"
            ) from exc
        train_patients = [p for p in everyone if p.id in split_ids]

    model = experiments.train_model(dataset, config, train_patients=train_patients)
    save_checkpoint(model, out / "checkpoint.json")
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss"])
        for epoch, loss in enumerate(model.loss_curve_, start=1):
            writer.writerow([epoch, repr(loss)])
    _write_manifest(out, "train", config, {"train_dataset": dataset_path},
                    {"checkpoint": out / "checkpoint.json",
                     "loss_curve": out / "loss_curve.csv"})
    return EXIT_OK


def cmd_calibrate(args):
    overrides = {}
    if args.alphas is not None:
        overrides["conformal"] = {"alphas": _parse_alphas(args.alphas)}
    config = _effective_config(args, overrides)
    out = _out_dir(args)
    model = _load_model(args.checkpoint)
    dataset = load_dataset(args.data)

    alphas = config["conformal"]["alphas"]
    needed = max(min_calibration_size(a) for a in alphas)
    if len(dataset) < needed:
        raise DataError(
            f"insufficient calibration samples: {len(dataset)} < {needed} "
            f"required for min alpha {min(alphas)}"
        )

    table, _ = experiments.calibrate_model(model, dataset, config)
    table.save(out / "calibration_table.json")
    _write_manifest(out, "calibrate", config,
                    {"checkpoint": args.checkpoint, "calibration_dataset": args.data},
                    {"calibration_table": out / "calibration_table.json"})
    return EXIT_OK


def cmd_eval(args):
    config = _effective_config(args)
    out = _out_dir(args)
    model = _load_model(args.checkpoint)
    table = _load_table(args.table)
    test_ds = load_dataset(args.data)

    requested = [float(a) for a in config["conformal"]["alphas"]]
    missing = [a for a in requested if a not in table.alphas]
    if missing:
        raise DataError(
            f"alpha mismatch: table calibrated for {list(table.alphas)}, "
            f"request needs {missing}"
        )

    cal_ds = load_dataset(args.cal_data) if args.cal_data else None
    report = experiments.evaluate_model(model, table, test_ds, config,
                                        cal_dataset=cal_ds)
    write_report_csv(report, out / "report.csv")
    write_report_json(report, out / "report.json")
    inputs = {"checkpoint": args.checkpoint, "calibration_table": args.table,
              "test_dataset": args.data}
    if args.cal_data:
        inputs["calibration_dataset"] = args.cal_data
    _write_manifest(out, "eval", config, inputs,
                    {"report_csv": out / "report.csv",
                     "report_json": out / "report.json"})
    return EXIT_OK


def cmd_navigate(args):
    overrides = {"navigation": {}}
    if args.paths is not None:
        try:
            parsed = parse_paths(args.paths)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        overrides["navigation"]["paths"] = [path_str(p) for p in parsed]
    if args.episodes is not None:
        overrides["navigation"]["episodes_per_patient"] = args.episodes
    config = _effective_config(args, overrides)
    out = _out_dir(args)
    if not args.oracle and args.checkpoint is None:
        raise UsageError("navigate needs --checkpoint unless --oracle is set")
    model = None if args.oracle else _load_model(args.checkpoint)
    table = _load_table(args.table) if args.table else None

    try:
        with open(args.patients) as fh:
            patients = patients_from_json(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot load patients {args.patients}: {exc}") from exc
    if args.splits:
        try:
            with open(args.splits) as fh:
                test_ids = set(json.load(fh)["test"])
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"cannot load splits {args.splits}: {exc}") from exc
        patients = [p for p in patients if p.id in test_ids]
    # Path validity is checked before any model call.
    for spec in config["navigation"]["paths"]:
        try:
            parse_paths(spec)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    report = experiments.navigate(model, table, patients, config, oracle=args.oracle)
    write_path_report_csv(report, out / "path_report.csv")
    write_error_dump_csv(report, out / "error_dump.csv")
    inputs = {"patients": args.patients}
    if args.checkpoint:
        inputs["checkpoint"] = args.checkpoint
    if args.table:
        inputs["calibration_table"] = args.table
    if args.splits:
        inputs["splits"] = args.splits
    _write_manifest(out, "navigate", config, inputs,
                    {"path_report": out / "path_report.csv",
                     "error_dump": out / "error_dump.csv"})
    return EXIT_OK


def cmd_ablate(args):
    config = _effective_config(args)
    out = _out_dir(args)
    if args.grid == "lambda":
        grid = experiments.lambda_ablation_grid()
    else:
        grid = experiments.augmentation_ablation_grid()

    patients = experiments.make_patients(config)
    splits = experiments.make_splits(patients, config)
    rows = experiments.ablate(splits, config, grid)

    alphas = sorted(config["conformal"]["alphas"], reverse=True)
    headers = (["variant", "mean_distance_mm", "nll_calibration", "nll_test"]
               + [f"prcp@{round((1 - a) * 100)}" for a in alphas])
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        for label, _, report in rows:
            row = [label, repr(report.mean_distance_mm),
                   repr(report.nll_calibration), repr(report.nll_test)]
            row += [repr(float(report.coverage[a]["overall"])) for a in alphas]
            writer.writerow(row)
    _write_manifest(out, "ablate", config, {}, {"ablation": out / "ablation.csv"})
    return EXIT_OK


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def _load_table(path):
    try:
        return CalibrationTable.load(path)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load calibration table {path}: {exc}") from exc


# --- wiring -------------------------------------------------------------------

def _add_common(parser):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="root seed override")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker budget (execution is deterministic regardless)")


def build_parser():
    parser = _Parser(prog="carmnav",
                     description="uncertainty-aware landmark positioning pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate patients, splits, and datasets")
    _add_common(p)
    p.add_argument("--patients", type=int, default=None, help="number of patients")
    p.add_argument("--samples", type=int, default=None, help="samples per patient")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the displacement regressor")
    _add_common(p)
    p.add_argument("--data", required=True, help="directory containing train.npy")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="build the conformal quantile table")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="calibration dataset (.npy)")
    p.add_argument("--alphas", default=None, help="comma-separated, e.g. 0.1,0.05,0.03")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="evaluate distance, NLL, and coverage")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--table", required=True, help="calibration table JSON")
    p.add_argument("--data", required=True, help="test dataset (.npy)")
    p.add_argument("--cal-data", default=None, help="calibration dataset for NLL")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("navigate", help="run multi-step positioning paths")
    _add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--table", default=None, help="calibration table JSON")
    p.add_argument("--patients", required=True, help="patients JSON file")
    p.add_argument("--splits", default=None, help="splits JSON, restricts to the test split")
    p.add_argument("--paths", default=None, help='e.g. "1;10-1;11-1;11-10-1"')
    p.add_argument("--episodes", type=int, default=None, help="episodes per patient")
    p.add_argument("--oracle", action="store_true",
                   help="use the exact-displacement stub instead of a model")
    p.set_defaults(func=cmd_navigate)

    p = sub.add_parser("ablate", help="run a config sweep and tabulate metrics")
    _add_common(p)
    p.add_argument("--grid", choices=("lambda", "augmentation"), required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"carmnav: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"carmnav: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"carmnav: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"carmnav: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"carmnav: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
