"""Batch command-line front end.

Subcommands: synth, prepare, train, evaluate, ensemble, grid, selfcheck.
Every command accepts ``--config`` (flat key = value file), ``--seed`` and
``--out``; command flags and ``--set key=value`` override file values, and
the effective configuration is echoed to ``<out>/effective_config.txt``.
Exit codes: 0 success, 1 unexpected/self-check failure, 2 configuration
error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .config import format_kv, from_kv, read_kv, to_kv
from .data import (
    CLASS_NAMES,
    SPLIT_RATIOS,
    SPLIT_NAMES,
    LabelMap,
    SliceSample,
    load_slices,
    manifest_records,
    read_manifest,
    stratified_split,
    write_manifest,
)
from .ensemble import (
    Prediction,
    fuse_from_files,
    read_ensemble_manifest,
    read_predictions,
    write_predictions,
)
from .errors import ConfigError, DataError, HybridError
from .metrics import build_report, confusion_matrix, emit_report
from .models import ModelConfig, build_model
from .plots import curves_svg
from .synthetic import synth_tree
from .trainer import TrainConfig, Trainer, evaluate, load_checkpoint, save_checkpoint

log = logging.getLogger("hybridad")

OUT_ENV = "HYBRIDAD_OUT"
CACHE_NAME = "slices.npz"
MANIFEST_NAME = "manifest.tsv"


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    command: str
    values: dict[str, str]
    seed: int
    out: Path
    resolved: dict[str, Any] = dataclasses.field(default_factory=dict)

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def get_int(self, key: str, default: int) -> int:
        return _convert(self.values.get(key), int, default, key)

    def get_float(self, key: str, default: float) -> float:
        return _convert(self.values.get(key), float, default, key)

    def get_floats(self, key: str, default: Sequence[float]) -> tuple[float, ...]:
        raw = self.values.get(key)
        if raw is None or raw == "":
            return tuple(default)
        return tuple(_convert(p.strip(), float, None, key) for p in raw.split(","))

    def require(self, key: str) -> str:
        value = self.values.get(key)
        if not value:
            raise ConfigError(f"{self.command}: missing required setting {key!r}")
        return value

    def section(self, prefix: str) -> dict[str, str]:
        return {k: v for k, v in self.values.items() if k.startswith(prefix)}

    def echo(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        items = {"command": self.command, "seed": self.seed, "out": str(self.out)}
        merged = dict(self.values)
        merged.update(self.resolved)
        items.update(sorted(merged.items()))
        path = self.out / "effective_config.txt"
        _write_text(path, format_kv(items))
        return path


def _convert(raw, kind, default, key):
    if raw is None or raw == "":
        return default
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {kind.__name__}") from None


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def model_config(run: RunConfig) -> ModelConfig:
    values = dict(run.section("model."))
    values.setdefault("model.seed", str(run.seed))
    cfg = from_kv(ModelConfig, values, prefix="model.").validate()
    run.resolved.update(to_kv(cfg, "model."))
    return cfg


def train_config(run: RunConfig) -> TrainConfig:
    values = dict(run.section("train."))
    values.setdefault("train.seed", str(run.seed))
    cfg = from_kv(TrainConfig, values, prefix="train.").validate()
    run.resolved.update(to_kv(cfg, "train."))
    return cfg


# ---------------------------------------------------------------------------
# data helpers
# ---------------------------------------------------------------------------

def load_prepared(manifest_path: Path, cache_path: Path | None = None
                  ) -> dict[str, list[SliceSample]]:
    """Rebuild per-split sample lists from a manifest and its slice cache."""
    manifest_path = Path(manifest_path)
    cache_path = cache_path or manifest_path.with_name(CACHE_NAME)
    records = read_manifest(manifest_path)
    try:
        with np.load(cache_path, allow_pickle=False) as cache:
            ids = [str(s) for s in cache["sample_ids"]]
            images = cache["images"]
    except OSError as exc:
        raise DataError(f"cannot read slice cache {cache_path}: {exc}") from exc
    index = {sid: i for i, sid in enumerate(ids)}
    parts: dict[str, list[SliceSample]] = {name: [] for name in SPLIT_NAMES}
    for r in records:
        if r.sample_id not in index:
            raise DataError(f"sample {r.sample_id!r} missing from slice cache {cache_path}")
        parts[r.split].append(SliceSample(images[index[r.sample_id]], r.label, r.source, r.z_index))
    return parts


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(run: RunConfig) -> int:
    """Write a synthetic four-class NIfTI tree."""
    per_class = run.get_int("synth.volumes_per_class", 4)
    z_extent = run.get_int("synth.z_extent", 256)
    size = run.get_int("synth.size", 48)
    if per_class < 1:
        raise ConfigError(f"synth.volumes_per_class must be >= 1, got {per_class}")
    data_dir = run.out / "data"
    try:
        files = synth_tree(data_dir, per_class, z_extent=z_extent, seed=run.seed, size=size)
    except OSError as exc:
        raise DataError(f"cannot write synthetic data under {data_dir}: {exc}") from exc
    run.echo()
    print(f"wrote {len(files)} volumes ({per_class} per class, z extent {z_extent}) to {data_dir}")
    return 0


def cmd_prepare(run: RunConfig) -> int:
    """Slice, resize and split a NIfTI tree."""
    data_dir = Path(run.require("data.data_dir"))
    size = run.get_int("data.image_size", 32)
    z_lo = run.get_int("data.z_lo", 100)
    z_hi = run.get_int("data.z_hi", 160)
    ratios = run.get_floats("data.ratios", SPLIT_RATIOS)
    label_map = LabelMap(CLASS_NAMES)
    samples = load_slices(data_dir, (size, size), z_lo, z_hi, label_map)
    split = stratified_split(samples, ratios, run.seed, num_classes=len(label_map),
                             class_names=label_map.names)
    run.out.mkdir(parents=True, exist_ok=True)
    write_manifest(run.out / MANIFEST_NAME, manifest_records(split))
    np.savez(run.out / CACHE_NAME, images=np.stack([s.image for s in samples]),
             sample_ids=np.array([s.sample_id for s in samples]))
    table = count_table(split, label_map.names)
    _write_text(run.out / "split_counts.txt", table)
    run.echo()
    print(table, end="")
    return 0


def count_table(split, names: Sequence[str]) -> str:
    rows = [f"{'class':<22}{'train':>8}{'val':>8}{'test':>8}"]
    parts = split.parts()
    for label, name in enumerate(names):
        counts = [sum(1 for s in parts[p] if s.label == label) for p in SPLIT_NAMES]
        rows.append(f"{name:<22}" + "".join(f"{c:>8}" for c in counts))
    totals = [len(parts[p]) for p in SPLIT_NAMES]
    rows.append(f"{'total':<22}" + "".join(f"{c:>8}" for c in totals))
    return "\n".join(rows) + "\n"


def _manifest_path(run: RunConfig) -> Path:
    return Path(run.require("data.manifest"))


def cmd_train(run: RunConfig) -> int:
    """Train one model on a prepared split."""
    parts = load_prepared(_manifest_path(run))
    mcfg = model_config(run)
    image_shape = parts["train"][0].image.shape if parts["train"] else None
    if image_shape and image_shape != (mcfg.height, mcfg.width):
        raise ConfigError(f"prepared slices are {image_shape}, model expects "
                          f"{(mcfg.height, mcfg.width)}; set model.input_size")
    tcfg = train_config(run)
    model = build_model(mcfg)
    trainer = Trainer(model, tcfg)
    t0 = time.perf_counter()
    model, history = trainer.fit(parts["train"], parts["val"])
    elapsed = time.perf_counter() - t0
    run.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, trainer, run.out / "checkpoint.bin")
    _write_text(run.out / "history.csv", history.to_csv())
    _write_text(run.out / "curves.svg", curves_svg(history, title=mcfg.family))
    run.echo()
    best = history.records[history.best_epoch]
    print(f"{len(history)} epochs ({history.stop_reason}) in {elapsed:.1f}s; best epoch "
          f"{history.best_epoch}: val_loss {best.val_loss:.4f} val_acc {best.val_acc:.4f}")
    return 0


def cmd_evaluate(run: RunConfig) -> int:
    """Score a checkpoint on one split."""
    split = run.get("eval.split", "test")
    if split not in SPLIT_NAMES:
        raise ConfigError(f"eval.split must be one of {SPLIT_NAMES}, got {split!r}")
    parts = load_prepared(_manifest_path(run))
    model, _ = load_checkpoint(run.require("eval.checkpoint"), num_classes=len(CLASS_NAMES))
    samples = parts[split]
    predictions = evaluate(model, samples, run.get_int("eval.batch_size", 32))
    name = run.get("eval.model_name") or model.config.family
    run.out.mkdir(parents=True, exist_ok=True)
    write_predictions(run.out / f"predictions_{split}.tsv", predictions)
    _emit_reports(run.out, predictions, name)
    run.echo()
    report = build_report(predictions, len(CLASS_NAMES), name, CLASS_NAMES)
    print(emit_report(report, "csv"), end="")
    return 0


def _emit_reports(out: Path, predictions: Sequence[Prediction], name: str) -> None:
    report = build_report(predictions, len(CLASS_NAMES), name, CLASS_NAMES)
    _write_text(out / "report.json", emit_report(report, "json"))
    _write_text(out / "report.csv", emit_report(report, "csv"))
    cm = confusion_matrix(predictions, len(CLASS_NAMES), CLASS_NAMES)
    _write_text(out / "confusion_matrix.csv", cm.to_csv())


def _accuracy(predictions: Sequence[Prediction]) -> float:
    return sum(p.predicted == p.true_label for p in predictions) / len(predictions)


def cmd_ensemble(run: RunConfig) -> int:
    """Average stored member predictions."""
    manifest = Path(run.require("ensemble.manifest"))
    paths, weights = read_ensemble_manifest(manifest)
    override = run.get("ensemble.weights")
    if override:
        weights = list(run.get_floats("ensemble.weights", ()))
    fused = fuse_from_files(paths, weights)
    run.out.mkdir(parents=True, exist_ok=True)
    write_predictions(run.out / "fused_predictions.tsv", fused)
    _emit_reports(run.out, fused, run.get("ensemble.name", "evan_v2"))
    rows = [(Path(os.path.relpath(p, manifest.parent)).as_posix(), _accuracy(read_predictions(p)))
            for p in paths]
    rows.append(("fused", _accuracy(fused)))
    table = "member,accuracy\n" + "".join(f"{n},{a:.4f}\n" for n, a in rows)
    _write_text(run.out / "comparison.csv", table)
    run.echo()
    print(table, end="")
    return 0


GRID_FIELDS = ("lr", "batch_size", "best_val_acc", "best_val_loss", "epochs_run", "status")


def _grid_cell(parts, mcfg: ModelConfig, tcfg: TrainConfig) -> dict[str, Any]:
    row: dict[str, Any] = {"lr": tcfg.lr, "batch_size": tcfg.batch_size}
    try:
        _, history = Trainer(build_model(mcfg), tcfg).fit(parts["train"], parts["val"])
        best = history.records[history.best_epoch]
        row.update(best_val_acc=f"{best.val_acc:.6f}", best_val_loss=f"{best.val_loss:.6f}",
                   epochs_run=len(history), status="ok")
    except HybridError as exc:
        row.update(best_val_acc="", best_val_loss="", epochs_run=0,
                   status=f"error: {type(exc).__name__}: {exc}")
    return row


def cmd_grid(run: RunConfig) -> int:
    """Sweep learning rate x batch size."""
    lrs = run.get_floats("grid.lrs", (1e-3, 1e-4))
    batches = [int(b) for b in run.get_floats("grid.batch_sizes", (16, 32))]
    bad_lr = [lr for lr in lrs if not 1e-6 <= lr <= 1e-3]
    bad_b = [b for b in batches if not 16 <= b <= 64]
    if bad_lr or bad_b:
        raise ConfigError(f"grid values outside lr [1e-6, 1e-3] / batch [16, 64]: {bad_lr} {bad_b}")
    parts = load_prepared(_manifest_path(run))
    mcfg = model_config(run)
    base = train_config(run)
    cells = [dataclasses.replace(base, lr=lr, batch_size=b) for lr in lrs for b in batches]
    workers = run.get_int("grid.workers", 1)
    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        rows = list(pool.map(lambda t: _grid_cell(parts, mcfg, t), cells))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=GRID_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    run.out.mkdir(parents=True, exist_ok=True)
    _write_text(run.out / "grid_summary.csv", buf.getvalue())
    run.echo()
    print(buf.getvalue(), end="")
    return 0


def cmd_selfcheck(run: RunConfig) -> int:
    """Run the built-in correctness checks."""
    from .selfcheck import format_table, run_checks

    faults = [f for f in (run.get("selfcheck.inject_fault") or "").split(",") if f]
    results = run_checks(faults)
    print(format_table(results), end="")
    return 0 if all(r.passed for r in results) else 1


COMMANDS: dict[str, Callable[[RunConfig], int]] = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ensemble": cmd_ensemble,
    "grid": cmd_grid,
    "selfcheck": cmd_selfcheck,
}

# flag -> config key, per command
FLAG_KEYS: dict[str, dict[str, str]] = {
    "synth": {"volumes_per_class": "synth.volumes_per_class", "z_extent": "synth.z_extent",
              "size": "synth.size"},
    "prepare": {"data_dir": "data.data_dir", "image_size": "data.image_size",
                "z_lo": "data.z_lo", "z_hi": "data.z_hi", "ratios": "data.ratios"},
    "train": {"manifest": "data.manifest", "family": "model.family",
              "input_size": "model.input_size", "widths": "model.widths",
              "epochs": "train.epochs", "batch_size": "train.batch_size", "lr": "train.lr",
              "early_stop_patience": "train.early_stop_patience", "augment": "train.augment"},
    "evaluate": {"checkpoint": "eval.checkpoint", "manifest": "data.manifest",
                 "split": "eval.split", "model_name": "eval.model_name"},
    "ensemble": {"manifest": "ensemble.manifest", "weights": "ensemble.weights",
                 "name": "ensemble.name"},
    "grid": {"manifest": "data.manifest", "lrs": "grid.lrs", "batch_sizes": "grid.batch_sizes",
             "family": "model.family", "epochs": "train.epochs", "workers": "grid.workers"},
    "selfcheck": {"inject_fault": "selfcheck.inject_fault"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridad", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in FLAG_KEYS.items():
        p = sub.add_parser(name, help=COMMANDS[name].__doc__)
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--seed", type=int, help="global seed (default 0)")
        p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV}/{name})")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        for flag, key in flags.items():
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, help=f"sets {key}")
    return parser


def resolve_run(args: argparse.Namespace) -> RunConfig:
    values: dict[str, str] = read_kv(args.config) if args.config else {}
    file_seed = values.pop("seed", None)
    file_out = values.pop("out", None)
    values.pop("command", None)
    for flag, key in FLAG_KEYS[args.command].items():
        value = getattr(args, flag)
        if value is not None:
            values[key] = str(value)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    seed = args.seed if args.seed is not None else _convert(file_seed, int, 0, "seed")
    if args.out is not None:
        out = args.out
    elif file_out:
        out = Path(file_out)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / args.command
    return RunConfig(args.command, values, seed, out)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        run = resolve_run(args)
        return COMMANDS[args.command](run)
    except HybridError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
