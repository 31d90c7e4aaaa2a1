"""Command-line entry point: ``confrank {gen,train,onepass,eval,sweep}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.

Every command writes a ``manifest.json`` into its output directory before any
work starts and finalises it afterwards.  Passing that manifest back through
``--config`` reruns the command with identical settings.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .exceptions import (
    DataError,
    MissingTeacherError,
    NumericalError,
    SnapshotError,
    UndefinedMetricError,
)
from .features import (
    DriftStreamConfig,
    FieldSchema,
    generate_drift_stream,
    load_csv,
    read_csv_header,
    schema_from_csv,
    temporal_split,
)
from .losses import LossWeights
from .metrics import evaluate
from .models import ArchDescriptor, load_snapshot, predict_logits, save_snapshot
from .pipeline import (
    TrainConfig,
    mean_next_day_auc,
    run_one_pass_experiment,
    train_erm,
    train_standard_with_teacher,
    write_reports_jsonl,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MODES = ("erm", "cr", "rcr", "kd", "rkd")
MODE_DEFAULT_WEIGHTS = {"cr": (0.4, 0.5), "rcr": (0.0, 0.5)}
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _nonneg_float(text) -> float:
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return value


def _pos_int(text) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _nonneg_int(text) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be a non-negative integer, got {text}")
    return value


def _float_list(text) -> list[float]:
    if isinstance(text, list):
        return [float(x) for x in text]
    try:
        values = [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not values or any(not (v >= 0 and math.isfinite(v)) for v in values):
        raise argparse.ArgumentTypeError(f"grid values must be finite and non-negative: {text!r}")
    return values


# (flag, type, default, help); default None means "required" for the data-ish inputs
_COMMON = [("seed", _nonneg_int, 0, "random seed")]
_MODEL = [
    ("arch", str, "deepfm", "lr | fm | deepfm"),
    ("embedding-dim", _pos_int, 8, "FM/DeepFM embedding size"),
    ("hidden-units", _pos_int, 64, "DeepFM hidden layer width"),
    ("hash-dim", _pos_int, 4096, "index space per field used when hashing the CSV"),
    ("batch-size", _pos_int, 256, "mini-batch size"),
    ("learning-rate", float, 0.05, "Adagrad step size"),
    ("phi", str, "logistic", "ranking scoring function: logistic | square"),
    ("kd-alpha", float, 0.5, "KD mixing weight"),
    ("kd-temperature", float, 2.0, "KD temperature"),
    ("rkd-weight", float, 0.5, "weight of the logit RKD term"),
    ("time-unit", str, "day", "timestamp interpretation: day | seconds"),
]
_OBJECTIVE = [
    ("mode", str, "erm", "erm | cr | rcr | kd | rkd"),
    ("lambda-cr", _nonneg_float, None, "weight of the point-wise ranking term"),
    ("lambda-rcr", _nonneg_float, None, "weight of the relational ranking term"),
]

COMMANDS = {
    "gen": [
        ("days", _pos_int, 10, "number of days"),
        ("examples-per-day", _pos_int, 20000, "examples per day"),
        ("drift-rate", _nonneg_float, 0.2, "per-day rotation of the latent model (radians)"),
        ("base-ctr", float, 0.1, "target click rate"),
        ("n-fields", _pos_int, 8, "number of categorical fields"),
        ("cardinality", _pos_int, 400, "raw values per field"),
        ("hash-dim", _pos_int, 4096, "index space per field"),
        ("signal-scale", float, 3.5, "latent logit scale"),
        *_COMMON,
    ],
    "train": [
        ("data", str, None, "CSV dataset"),
        *_OBJECTIVE,
        *_MODEL,
        ("epochs", _pos_int, 10, "maximum epochs"),
        ("delta", float, 1e-4, "stop when validation loss improves by less than this"),
        ("validation-days", _pos_int, 1, "days held out for validation"),
        ("test-days", _pos_int, 1, "days held out for testing"),
        *_COMMON,
    ],
    "onepass": [
        ("data", str, None, "CSV dataset"),
        *_OBJECTIVE,
        *_MODEL,
        ("warmup-days", _pos_int, None, "days used for the initial one-pass model"),
        ("cycle-days", _nonneg_int, None, "serve-then-train cycles"),
        ("baseline", str, None, "also run this mode with the same seed and compare"),
        ("cold-start", _bool, False, "train each successor from a fresh initialisation"),
        ("carry-optimizer-state", _bool, False, "keep Adagrad accumulators across cycles"),
        *_COMMON,
    ],
    "eval": [
        ("snapshot", str, None, "snapshot to evaluate"),
        ("data", str, None, "CSV dataset"),
        ("teacher-snapshot", str, "", "optional reference model for ranking scores"),
        *_COMMON,
    ],
    "sweep": [
        ("data", str, None, "CSV dataset"),
        ("lambda-cr-grid", _float_list, [0.1, 0.4, 1.0, 2.0], "comma-separated weights"),
        ("lambda-rcr-grid", _float_list, [0.1, 0.4, 1.0, 2.0], "comma-separated weights"),
        ("regime", str, "standard", "standard | onepass"),
        *_MODEL,
        ("epochs", _pos_int, 10, "maximum epochs (standard regime)"),
        ("delta", float, 1e-4, "early-stopping threshold (standard regime)"),
        ("validation-days", _pos_int, 1, "validation days (standard regime)"),
        ("test-days", _pos_int, 1, "test days (standard regime)"),
        ("warmup-days", _pos_int, 4, "warmup days (onepass regime)"),
        ("cycle-days", _nonneg_int, 6, "cycles (onepass regime)"),
        *_COMMON,
    ],
}
_REQUIRED = {
    "gen": (),
    "train": ("data",),
    "onepass": ("data", "warmup_days", "cycle_days"),
    "eval": ("snapshot", "data"),
    "sweep": ("data",),
}
_OUT_DEFAULT = {"gen": "out/gen", "train": "out/train", "onepass": "out/onepass", "eval": None, "sweep": "out/sweep"}


def _dest(flag: str) -> str:
    return flag.replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="confrank", description="Confidence-ranking CTR training toolkit.")
    parser.add_argument("--version", action="version", version=f"confrank {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name)
        for flag, typ, default, text in options:
            shown = "required" if default is None and _dest(flag) in _REQUIRED[name] else default
            p.add_argument(f"--{flag}", type=typ, default=None, help=f"{text} (default: {shown})")
        p.add_argument("--config", default=None, help="JSON or key=value file, or a run manifest")
        p.add_argument("--out", default=None, help="output directory")
    return parser


def _read_config(path: str, command: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{p}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            data[key.strip()] = value.strip()
    if not isinstance(data, dict):
        raise UsageError(f"{p}: config must be an object")
    if "command" in data and "config" in data:  # a run manifest
        if data["command"] != command:
            raise UsageError(f"manifest is for '{data['command']}', not '{command}'")
        _verify_inputs(data.get("inputs", {}))
        data = data["config"]
    return {_dest(k): v for k, v in data.items()}


def _verify_inputs(inputs: dict) -> None:
    for path, digest in inputs.items():
        if _sha256(path) != digest:
            raise DataError(f"input {path} changed since the manifest was written")


def resolve_options(args: argparse.Namespace) -> dict:
    """Flags override the config file, which overrides built-in defaults."""
    command = args.command
    options = {_dest(flag): (typ, default) for flag, typ, default, _ in COMMANDS[command]}
    config = _read_config(args.config, command) if args.config else {}
    unknown = sorted(set(config) - set(options))
    if unknown:
        raise UsageError(f"unknown config key(s) for {command}: {unknown}")
    resolved = {}
    for key, (typ, default) in options.items():
        value = getattr(args, key)
        if value is None and key in config:
            raw = config[key]
            try:
                value = typ(raw) if raw is not None else None
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {key}: {exc}") from None
        resolved[key] = default if value is None else value
    missing = [k for k in _REQUIRED[command] if resolved.get(k) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return resolved


def _sha256(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"input file not found: {p}")
    h = hashlib.sha256()
    with p.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    def __init__(self, command: str, options: dict, out_dir: Path | None, inputs: list[str]):
        self.out_dir = out_dir
        self.data = {
            "tool": "confrank",
            "tool_version": __version__,
            "command": command,
            "seed": options.get("seed"),
            "config": options,
            "inputs": {p: _sha256(p) for p in inputs},
            "started_at": _now(),
            "finished_at": None,
            "status": "running",
            "outputs": [],
        }

    def write(self) -> None:
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / MANIFEST_NAME
            path.write_text(json.dumps(self.data, indent=2) + "\n")

    def finish(self, outputs: list[Path]) -> None:
        self.data["outputs"] = [str(p) for p in outputs]
        self.data["finished_at"] = _now()
        self.data["status"] = "complete"
        self.write()


def _objective(mode: str, lambda_cr, lambda_rcr):
    if mode not in MODES:
        raise UsageError(f"--mode must be one of {MODES}, got {mode!r}")
    if mode in MODE_DEFAULT_WEIGHTS:
        d_cr, d_rcr = MODE_DEFAULT_WEIGHTS[mode]
        weights = LossWeights(d_cr if lambda_cr is None else lambda_cr, d_rcr if lambda_rcr is None else lambda_rcr)
        return "cr", weights
    if (lambda_cr or 0) > 0 or (lambda_rcr or 0) > 0:
        raise UsageError(
            f"--lambda-cr/--lambda-rcr need a teacher-based ranking mode (cr or rcr), not {mode}"
        )
    return mode, LossWeights()


def _arch(opts: dict, field_count: int) -> ArchDescriptor:
    try:
        return ArchDescriptor(opts["arch"], field_count, opts["hash_dim"], opts["embedding_dim"], opts["hidden_units"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_config(opts: dict, arch: ArchDescriptor, regime: str, mode: str | None = None, weights=None) -> TrainConfig:
    if mode is None:
        objective, weights = _objective(opts["mode"], opts.get("lambda_cr"), opts.get("lambda_rcr"))
    else:
        objective = mode
    try:
        return TrainConfig(
            arch,
            objective=objective,
            regime=regime,
            weights=weights,
            phi=opts["phi"],
            batch_size=opts["batch_size"],
            learning_rate=opts["learning_rate"],
            epochs=opts.get("epochs", 1),
            delta=opts.get("delta", 1e-4),
            seed=opts["seed"],
            kd_alpha=opts["kd_alpha"],
            kd_temperature=opts["kd_temperature"],
            rkd_weight=opts["rkd_weight"],
            warmup_days=opts.get("warmup_days") or 1,
            cycle_days=opts.get("cycle_days") or 0,
            warm_start=not opts.get("cold_start", False),
            carry_optimizer_state=opts.get("carry_optimizer_state", False),
            time_unit=opts["time_unit"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_data(path: str, hash_dim: int):
    schema = schema_from_csv(path, hash_dim)
    return schema, load_csv(path, schema)


def _out_dir(opts_out, command) -> Path | None:
    out = opts_out if opts_out is not None else _OUT_DEFAULT[command]
    return Path(out) if out is not None else None


def cmd_gen(opts: dict, out: Path) -> list[Path]:
    try:
        cfg = DriftStreamConfig(
            days=opts["days"],
            examples_per_day=opts["examples_per_day"],
            drift_rate=opts["drift_rate"],
            base_ctr=opts["base_ctr"],
            seed=opts["seed"],
            n_fields=opts["n_fields"],
            cardinality=opts["cardinality"],
            hash_dim=opts["hash_dim"],
            signal_scale=opts["signal_scale"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    stream = generate_drift_stream(cfg)
    data_path, meta_path = out / "stream.csv", out / "generator.json"
    stream.to_csv(data_path)
    meta_path.write_text(json.dumps(asdict(cfg), sort_keys=True) + "\n")
    return [data_path, meta_path]


def _train_one(split, config: TrainConfig):
    if config.objective == "erm":
        snapshot = train_erm(split, config)
    else:
        snapshot = train_standard_with_teacher(split, config)
    logits = predict_logits(snapshot, split.test.indices)
    return snapshot, evaluate(logits, split.test.labels)


def cmd_train(opts: dict, out: Path) -> list[Path]:
    objective, weights = _objective(opts["mode"], opts["lambda_cr"], opts["lambda_rcr"])
    schema, examples = _load_data(opts["data"], opts["hash_dim"])
    split = temporal_split(examples, opts["validation_days"], opts["test_days"], opts["time_unit"])
    config = _train_config(opts, _arch(opts, schema.field_count), "standard", objective, weights)
    snapshot, report = _train_one(split, config)
    snap_path, metrics_path = out / "model.snap", out / "metrics.json"
    save_snapshot(snapshot, snap_path)
    metrics_path.write_text(report.to_json() + "\n")
    return [snap_path, metrics_path]


def _timeseries_rows(reports):
    keys = ("auc", "accuracy", "logloss", "pos_mean", "neg_mean", "sample_margin")
    for r in reports:
        m = r.metrics.to_dict()
        yield [r.day, r.served_version, r.produced_version] + [
            "" if m[k] is None else repr(m[k]) for k in keys
        ]


def _write_timeseries(reports, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["day", "served_version", "produced_version", "auc", "accuracy",
                         "logloss", "pos_mean", "neg_mean", "sample_margin"])
        writer.writerows(_timeseries_rows(reports))


def compare_reports(mode: str, reports, baseline: str, baseline_reports) -> dict:
    """Per-day AUC of two paired runs and their differences."""
    days, aucs, base, deltas = [], [], [], []
    for r, b in zip(reports, baseline_reports):
        days.append(r.day)
        aucs.append(r.metrics.auc)
        base.append(b.metrics.auc)
        deltas.append(None if r.metrics.auc is None or b.metrics.auc is None else r.metrics.auc - b.metrics.auc)
    defined = [d for d in deltas if d is not None]
    return {
        "mode": mode,
        "baseline": baseline,
        "days": days,
        "auc": aucs,
        "baseline_auc": base,
        "auc_delta": deltas,
        "mean_auc_delta": float(np.mean(defined)) if defined else None,
    }


def cmd_onepass(opts: dict, out: Path) -> list[Path]:
    schema, examples = _load_data(opts["data"], opts["hash_dim"])
    arch = _arch(opts, schema.field_count)
    config = _train_config(opts, arch, "one_pass")
    run = run_one_pass_experiment(examples, opts["warmup_days"], opts["cycle_days"], config)
    reports_path, series_path, snap_path = out / "reports.jsonl", out / "timeseries.csv", out / "final.snap"
    write_reports_jsonl(run.reports, reports_path)
    _write_timeseries(run.reports, series_path)
    save_snapshot(run.final_snapshot, snap_path)
    outputs = [reports_path, series_path, snap_path]
    if opts["baseline"]:
        base_obj, base_weights = _objective(opts["baseline"], None, None)
        base_cfg = _train_config(opts, arch, "one_pass", base_obj, base_weights)
        base_run = run_one_pass_experiment(examples, opts["warmup_days"], opts["cycle_days"], base_cfg)
        base_path, cmp_path = out / "baseline_reports.jsonl", out / "comparison.json"
        write_reports_jsonl(base_run.reports, base_path)
        summary = compare_reports(opts["mode"], run.reports, opts["baseline"], base_run.reports)
        cmp_path.write_text(json.dumps(summary) + "\n")
        outputs += [base_path, cmp_path]
    return outputs


def cmd_eval(opts: dict, out: Path | None) -> list[Path]:
    snapshot = load_snapshot(_existing(opts["snapshot"]))
    header_fields = [c for c in read_csv_header(opts["data"]) if c not in ("id", "timestamp", "label")]
    if len(header_fields) != snapshot.arch.field_count:
        raise DataError(
            f"snapshot expects {snapshot.arch.field_count} fields, "
            f"{opts['data']} has {len(header_fields)}"
        )
    schema = FieldSchema(tuple(header_fields), snapshot.arch.hash_dim)
    examples = load_csv(opts["data"], schema)
    logits = predict_logits(snapshot, examples.indices)
    teacher_logits = None
    if opts["teacher_snapshot"]:
        teacher = load_snapshot(_existing(opts["teacher_snapshot"]))
        if teacher.arch.field_count != snapshot.arch.field_count or teacher.arch.hash_dim != snapshot.arch.hash_dim:
            raise DataError("teacher snapshot was built for a different feature layout")
        teacher_logits = predict_logits(teacher, examples.indices)
    text = evaluate(logits, examples.labels, teacher_logits).to_json() + "\n"
    sys.stdout.write(text)
    if out is None:
        return []
    path = out / "eval.json"
    path.write_text(text)
    return [path]


def _existing(path: str) -> str:
    if not Path(path).is_file():
        raise DataError(f"file not found: {path}")
    return path


def _sweep_cell(args):
    data, config, regime, warmup, cycles = args
    if regime == "standard":
        return _train_one(data, config)[1].auc
    run = run_one_pass_experiment(data, warmup, cycles, config)
    return mean_next_day_auc(run.reports)


def thread_cap() -> int:
    raw = os.environ.get("CONFRANK_THREADS", "0")
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"CONFRANK_THREADS must be a non-negative integer, got {raw!r}") from None
    if value < 0:
        raise UsageError(f"CONFRANK_THREADS must be a non-negative integer, got {raw!r}")
    return value or (os.cpu_count() or 1)


def cmd_sweep(opts: dict, out: Path) -> list[Path]:
    regime = opts["regime"]
    if regime not in ("standard", "onepass"):
        raise UsageError(f"--regime must be standard or onepass, got {regime!r}")
    schema, examples = _load_data(opts["data"], opts["hash_dim"])
    arch = _arch(opts, schema.field_count)
    if regime == "standard":
        data = temporal_split(examples, opts["validation_days"], opts["test_days"], opts["time_unit"])
    else:
        data = examples
    cells = [(a, b) for a in opts["lambda_cr_grid"] for b in opts["lambda_rcr_grid"]]
    jobs = [
        (data, _train_config(opts, arch, regime.replace("onepass", "one_pass"), "cr", LossWeights(a, b)),
         regime, opts["warmup_days"], opts["cycle_days"])
        for a, b in cells
    ]
    workers = min(thread_cap(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(_sweep_cell, jobs))
    else:
        scores = [_sweep_cell(job) for job in jobs]
    finite = [s if s is not None else -math.inf for s in scores]
    best = int(np.argmax(finite))
    path = out / "sweep.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lambda_cr", "lambda_rcr", "auc", "is_best"])
        for i, ((a, b), s) in enumerate(zip(cells, scores)):
            writer.writerow([repr(a), repr(b), "" if s is None else repr(s), int(i == best)])
    return [path]


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "onepass": cmd_onepass, "eval": cmd_eval, "sweep": cmd_sweep}
_INPUT_KEYS = ("data", "snapshot", "teacher_snapshot")


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        opts = resolve_options(args)
        out = _out_dir(args.out, args.command)
        cap = thread_cap()
        inputs = [opts[k] for k in _INPUT_KEYS if opts.get(k)]
        for path in inputs:
            _existing(path)
        manifest = RunManifest(args.command, opts, out, inputs)
        manifest.write()
        with threadpool_limits(limits=cap):
            outputs = HANDLERS[args.command](opts, out)
        manifest.finish(outputs)
    except UsageError as exc:
        print(f"confrank: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"confrank: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SnapshotError, UndefinedMetricError, MissingTeacherError, OSError) as exc:
        print(f"confrank: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
