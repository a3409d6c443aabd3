"""Command-line entry point: ``ingest``, ``train``, ``evaluate`` and ``compare``.

Every command writes into a run directory (``--out``, or a name derived from
the command under ``$HYBRID_IDS_OUT``, default ``./runs``). The resolved run
configuration is written there before any training starts, together with the
seed and the SHA-256 of the input dataset, so ``--config <run>/run_config.json``
replays a run.

Exit codes: 0 on success, 2 for usage, configuration and data errors, 3 when
training produces non-finite values.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics as M
from .errors import ConfigurationError, HybridIDSError, UsageError
from .models import (
    PRESET_NAMES,
    ModelConfig,
    StackedModel,
    TrainReport,
    build_base_model,
    load_model,
    predict,
    preset,
    save_model,
    train,
    train_stacked,
)
from .pipeline import (
    BINARY_NAMES,
    CLASS_NAMES,
    LABEL_MODES,
    EncodedMatrix,
    PreparedData,
    RawDataset,
    Schema,
    file_sha256,
    fixture_path,
    load_csv,
    prepare,
    save_matrix,
)

OUT_ENV = "HYBRID_IDS_OUT"
DEFAULT_OUT_ROOT = "runs"

TABLE_IV_COLUMNS = ("Epoch", "Accuracy", "Precision", "Recall", "F1-Score", "Training time (s)")
TABLE_V_COLUMNS = ("Model", "Classes", "Accuracy", "Precision", "Recall", "F1-Score")

RUN_CONFIG = "run_config.json"
TRAIN_REPORT = "train_report.json"
MODEL_FILE = "model.hyids"


@dataclass
class RunConfig:
    """Everything needed to replay a command."""

    data: str | None = None
    schema: str | None = None
    fixture: bool = False
    label_mode: str = "binary"
    test_fraction: float = 0.3
    stratified: bool = True
    balance: bool = True
    models: list = field(default_factory=list)  # preset names or ModelConfig dicts
    seed: int = 0
    out: str | None = None

    def dataset_path(self) -> Path:
        if self.fixture:
            return fixture_path()
        if not self.data:
            raise UsageError("no dataset given: pass --data PATH or --fixture")
        return Path(self.data)

    def model_configs(self) -> list[ModelConfig]:
        out = []
        for entry in self.models:
            if isinstance(entry, str):
                out.append(preset(entry, self.label_mode, self.seed))
            elif isinstance(entry, dict):
                cfg = ModelConfig.from_dict(entry)
                out.append(replace(cfg, seed=self.seed).validate())
            else:
                raise ConfigurationError(f"model entry must be a preset name or a config object, got {entry!r}")
        for cfg in out:
            if cfg.label_mode != self.label_mode:
                raise ConfigurationError(f"model {cfg.name or cfg.kind!r} has head {cfg.head!r}, run label mode is {self.label_mode!r}")
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def resolve(args: argparse.Namespace) -> RunConfig:
    """Merge ``--config`` (if any) with explicit command-line flags."""
    base: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            base = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        unknown = sorted(set(base) - set(RunConfig.__dataclass_fields__))
        if unknown:
            raise ConfigurationError(f"{path}: unknown run config keys {unknown}")
    rc = RunConfig(**base)
    if getattr(args, "data", None):
        rc.data, rc.fixture = str(Path(args.data).resolve()), False
    if getattr(args, "fixture", False):
        rc.fixture, rc.data = True, None
    if getattr(args, "schema", None):
        rc.schema = str(Path(args.schema).resolve())
    for name in ("label_mode", "seed", "test_fraction", "out"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(rc, name, value)
    if getattr(args, "no_balance", False):
        rc.balance = False
    if getattr(args, "no_stratify", False):
        rc.stratified = False
    if getattr(args, "preset", None):
        rc.models = list(args.preset)
    if rc.label_mode not in LABEL_MODES:
        raise UsageError(f"unknown label mode {rc.label_mode!r}; expected one of {LABEL_MODES}")
    if "all" in rc.models:
        rc.models = [m for m in rc.models if m != "all"] + [p for p in PRESET_NAMES if p not in rc.models]
    return rc


def run_dir(rc: RunConfig, command: str, label: str) -> Path:
    if rc.out:
        path = Path(rc.out)
    else:
        root = Path(os.environ.get(OUT_ENV) or DEFAULT_OUT_ROOT)
        path = root / f"{command}-{label}-{rc.label_mode}-s{rc.seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_dataset(rc: RunConfig) -> tuple[RawDataset, Path, str]:
    schema = Schema.load(rc.schema)
    path = rc.dataset_path()
    raw = load_csv(path, schema)
    return raw, path, file_sha256(path)


def _prepare(rc: RunConfig, raw: RawDataset) -> PreparedData:
    return prepare(raw, rc.label_mode, rc.test_fraction, rc.seed, rc.stratified, rc.balance)


def _record_run(out: Path, rc: RunConfig, command: str, dataset: Path, checksum: str) -> None:
    _write_json(
        out / RUN_CONFIG,
        {"command": command, "config": rc.to_dict(), "seed": rc.seed, "dataset": str(dataset), "dataset_sha256": checksum},
    )


def _names(label_mode: str) -> tuple[str, ...]:
    return BINARY_NAMES if label_mode == "binary" else CLASS_NAMES


def _classes_label(label_mode: str) -> str:
    return "Binary" if label_mode == "binary" else "Multiclass"


def _pct(x: float | None) -> str:
    return "-" if x is None else f"{100.0 * x:.2f}"


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(rc: RunConfig, echo=print) -> dict:
    raw, path, checksum = load_dataset(rc)
    out = run_dir(rc, "ingest", "fixture" if rc.fixture else path.stem)
    _record_run(out, rc, "ingest", path, checksum)
    prep = _prepare(rc, raw)
    for part, m in (("train", prep.train), ("test", prep.test)):
        save_matrix(out / f"X_{part}.mat", m.X)
        save_matrix(out / f"y_{part}.mat", m.y.reshape(-1, 1).astype(np.float64))
    summary = {
        "dataset": str(path),
        "dataset_sha256": checksum,
        "rows": len(raw),
        "class_counts": raw.class_counts(),
        "feature_width": prep.preprocessor.n_features,
        "feature_names": prep.preprocessor.feature_names(),
        "train_rows": len(prep.train),
        "test_rows": len(prep.test),
        "label_mode": rc.label_mode,
        "seed": rc.seed,
    }
    _write_json(out / "dataset.json", summary)
    echo(f"rows: {len(raw)}")
    for name, n in summary["class_counts"].items():
        echo(f"  {name:<15} {n}")
    echo(f"encoded feature width: {summary['feature_width']}")
    echo(f"train rows (after balancing): {summary['train_rows']}, test rows: {summary['test_rows']}")
    echo(f"wrote {out}")
    return summary


def _fit(cfg: ModelConfig, prep: PreparedData, echo) -> tuple[object, TrainReport]:
    def on_epoch(row):
        echo(f"[{cfg.name or cfg.kind}] epoch {row['epoch']}/{cfg.epochs} loss={row['loss']:.6f} accuracy={row['accuracy']:.4f}")

    if cfg.kind == "stacked":
        model, report = train_stacked(cfg, prep.train, groups=prep.train_index, on_event=lambda m: echo(f"[{cfg.name}] {m}"))
        for row in report.epochs:
            on_epoch(row)
    else:
        model = build_base_model(cfg, prep.train.X.shape[1])
        report = train(model, prep.train, cfg, on_epoch)
    return model, report


def _metadata(rc: RunConfig, checksum: str, report: TrainReport) -> dict:
    # Only deterministic values: the model file must be byte-identical across replays.
    return {
        "label_mode": rc.label_mode,
        "seed": rc.seed,
        "test_fraction": rc.test_fraction,
        "stratified": rc.stratified,
        "balance": rc.balance,
        "dataset_sha256": checksum,
        "final_train_accuracy": report.final_accuracy,
        "epochs": len(report.epochs),
    }


def cmd_train(rc: RunConfig, echo=print) -> dict:
    configs = rc.model_configs()
    if len(configs) != 1:
        raise UsageError(f"train takes exactly one model (--preset or config), got {len(configs)}")
    cfg = configs[0]
    raw, path, checksum = load_dataset(rc)
    out = run_dir(rc, "train", cfg.name or cfg.kind)
    _record_run(out, rc, "train", path, checksum)
    prep = _prepare(rc, raw)
    model, report = _fit(cfg, prep, echo)
    model.preprocessor = prep.preprocessor
    model.metadata = _metadata(rc, checksum, report)
    save_model(model, out / MODEL_FILE)
    (out / TRAIN_REPORT).write_text(report.to_json() + "\n", encoding="utf-8")
    echo(f"final training accuracy: {report.final_accuracy:.6f} ({report.seconds:.1f}s)")
    echo(f"wrote {out / MODEL_FILE}")
    return {"out": str(out), "report": report, "model": model}


def _subset(model, rc: RunConfig, raw: RawDataset, checksum: str, subset: str) -> EncodedMatrix:
    meta = model.metadata or {}
    if subset == "all":
        rows = np.arange(len(raw))
    else:
        if meta.get("dataset_sha256") != checksum:
            raise UsageError(f"--subset {subset} needs the dataset the model was trained on (checksum differs); use --subset all")
        split_rc = replace(
            rc,
            label_mode=meta["label_mode"],
            seed=meta["seed"],
            test_fraction=meta["test_fraction"],
            stratified=meta["stratified"],
            balance=meta["balance"],
        )
        prep = _prepare(split_rc, raw)
        rows = prep.train_index if subset == "train" else prep.test_index
    sub = raw.subset(rows)
    pre = model.preprocessor
    if pre is None:
        raise UsageError("model file carries no preprocessor")
    return EncodedMatrix(pre.transform(sub), sub.targets(rc.label_mode), rc.label_mode, pre.feature_names(), pre)


def write_roc_csv(path: Path, proba: np.ndarray, y: np.ndarray, names) -> None:
    """ROC points as CSV (one-vs-rest per class for multiclass output)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", "fpr", "tpr", "threshold"])
        if proba.shape[1] == 1:
            curves = [(names[1], proba[:, 0], y == 1)]
        else:
            curves = [(names[c], proba[:, c], y == c) for c in range(proba.shape[1])]
        for name, score, pos in curves:
            if pos.all() or not pos.any():
                continue
            for p in M.roc_curve(score, pos.astype(np.int64)):
                w.writerow([name, repr(p.fpr), repr(p.tpr), repr(p.threshold)])


def table_iv(rows: list[dict]) -> str:
    """Fixed-width text table with the Table IV columns, metrics in percent."""
    cells = [list(TABLE_IV_COLUMNS)]
    for r in rows:
        seconds = r.get("seconds")
        cells.append(
            [
                str(r["epoch"]),
                _pct(r["accuracy"]),
                _pct(r["precision"]),
                _pct(r["recall"]),
                _pct(r["f1"]),
                "-" if seconds is None else f"{seconds:.1f}",
            ]
        )
    widths = [max(len(row[i]) for row in cells) for i in range(len(TABLE_IV_COLUMNS))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells) + "\n"


def cmd_evaluate(rc: RunConfig, model_path, subset: str = "test", echo=print) -> M.MetricsReport:
    model_path = Path(model_path)
    if not model_path.is_file():
        raise UsageError(f"model file not found: {model_path}")
    model = load_model(model_path)
    meta = model.metadata or {}
    rc = replace(rc, label_mode=meta.get("label_mode", model.cfg.label_mode))
    raw, path, checksum = load_dataset(rc)
    out = run_dir(rc, "evaluate", f"{model.cfg.name or model.cfg.kind}-{subset}")
    _record_run(out, rc, "evaluate", path, checksum)
    data = _subset(model, rc, raw, checksum, subset)
    proba = predict(model, data.X)
    names = _names(rc.label_mode)
    report = M.metrics_report(data.y, proba, names)
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    write_roc_csv(out / "roc.csv", proba, data.y, names)

    seconds = None
    train_report = model_path.parent / TRAIN_REPORT
    if train_report.is_file():
        seconds = json.loads(train_report.read_text(encoding="utf-8")).get("seconds")
    row = {
        "epoch": meta.get("epochs", model.cfg.epochs),
        "accuracy": report.accuracy,
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "seconds": seconds,
    }
    text = table_iv([row])
    (out / "metrics_table.txt").write_text(text, encoding="utf-8")
    echo(text.rstrip("\n"))
    echo(f"roc_auc: {'-' if report.roc_auc is None else f'{report.roc_auc:.6f}'}")
    for flag in report.flags:
        echo(f"note: {flag}")
    echo(f"wrote {out}")
    return report


def cmd_compare(rc: RunConfig, echo=print) -> list[dict]:
    configs = rc.model_configs()
    if len(configs) < 2:
        raise UsageError(f"compare needs at least two models, got {len(configs)}")
    raw, path, checksum = load_dataset(rc)
    out = run_dir(rc, "compare", f"{len(configs)}models")
    _record_run(out, rc, "compare", path, checksum)
    prep = _prepare(rc, raw)
    names = _names(rc.label_mode)
    rows = []
    for cfg in configs:
        label = cfg.name or cfg.kind
        try:
            model, report = _fit(cfg, prep, echo)
            proba = predict(model, prep.test.X)
        except HybridIDSError as exc:
            exc.args = (f"compare member {label!r} failed: {exc}",)
            raise
        mr = M.metrics_report(prep.test.y, proba, names)
        rows.append({"model": label, "metrics": mr.to_dict(), "train_seconds": report.seconds, "train_accuracy": report.final_accuracy})
        echo(f"[{label}] test accuracy {mr.accuracy:.4f}")
    order = sorted(range(len(rows)), key=lambda i: -rows[i]["metrics"]["accuracy"])
    rows = [rows[i] for i in order]
    classes = _classes_label(rc.label_mode)
    with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TABLE_V_COLUMNS)
        for r in rows:
            m = r["metrics"]
            w.writerow([r["model"], classes, *(f"{100.0 * m[k]:.4f}" for k in ("accuracy", "precision", "recall", "f1"))])
    _write_json(out / "comparison.json", rows)
    echo((out / "comparison.csv").read_text(encoding="utf-8").rstrip("\n"))
    echo(f"wrote {out}")
    return rows


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybrid-ids", description="Hybrid deep-learning botnet detector on UNSW-NB15-style data.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--data", help="UNSW-NB15 partition CSV")
    src.add_argument("--fixture", action="store_true", help="use the bundled 1,000-row synthetic fixture")
    common.add_argument("--schema", help="schema JSON (default: bundled UNSW-NB15 schema)")
    common.add_argument("--config", help="run config JSON; explicit flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help=f"run directory (default: under ${OUT_ENV} or ./{DEFAULT_OUT_ROOT})")
    common.add_argument("--label-mode", choices=LABEL_MODES, dest="label_mode")
    common.add_argument("--test-fraction", type=float, dest="test_fraction")
    common.add_argument("--no-balance", action="store_true", help="skip oversampling of the training split")
    common.add_argument("--no-stratify", action="store_true", help="plain random split instead of per-category")

    sub.add_parser("ingest", parents=[common], help="load, validate and encode a dataset")
    p = sub.add_parser("train", parents=[common], help="train one preset or config")
    p.add_argument("--preset", action="append", help=f"one of: {', '.join(PRESET_NAMES)}")
    p = sub.add_parser("evaluate", parents=[common], help="evaluate a saved model")
    p.add_argument("--model", required=True, help="model file written by train")
    p.add_argument("--subset", choices=("test", "train", "all"), default="test")
    p = sub.add_parser("compare", parents=[common], help="train and evaluate several presets on one split")
    p.add_argument("--preset", action="append", help="repeatable; 'all' adds every preset")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = resolve(args)
        if args.command == "ingest":
            cmd_ingest(rc)
        elif args.command == "train":
            cmd_train(rc)
        elif args.command == "evaluate":
            cmd_evaluate(rc, args.model, args.subset)
        else:
            cmd_compare(rc)
    except HybridIDSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
