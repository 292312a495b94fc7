"""Command-line pipeline: generate, train, visualize, finetune, evaluate, report.

Every command takes a JSON experiment config (``--config``) that fully
determines the run; ``--seed`` overrides the config's seed before anything
else happens. Artifacts land in one directory per effective config, named
by a hash of its canonical JSON, so re-running a command with identical
inputs rewrites identical files and different configs never collide.

Exit codes: 0 success, 2 config/validation error, 3 I/O or corruption,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .data import (
    DataFormatError,
    FeatureScaler,
    SyntheticSpec,
    generate,
    load_csv,
    write_csv,
)
from .finetune import FinetuneConfig, finetune, finetune_recall_biased, partition_confusion
from .ioutil import atomic_write_text
from .metrics import MetricReport, evaluate_split
from .model import (
    ArchitectureConfig,
    CorruptCheckpointError,
    TrainingConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .saliency import CLASS_FAILED, CLASS_NAMES, CLASS_PASSED, aggregate, saliency_maps

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    """Experiment config violates its schema; message lists the fields."""


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """One fully resolved run: two runs from the same config are identical."""

    seed: int
    data: object  # SyntheticSpec, or str path to a CSV dataset directory
    architecture: ArchitectureConfig
    training: TrainingConfig
    finetune: FinetuneConfig
    thresholds: object
    out_dir: str

    @property
    def synthetic(self):
        return isinstance(self.data, SyntheticSpec)

    def canonical_dict(self):
        d = {
            "seed": self.seed,
            "data": ({"synthetic": dataclasses.asdict(self.data)} if self.synthetic
                     else {"csv": str(self.data)}),
            "architecture": dataclasses.asdict(self.architecture),
            "training": dataclasses.asdict(self.training),
            "finetune": dataclasses.asdict(self.finetune),
            "thresholds": self.thresholds,
            "out_dir": str(self.out_dir),
        }
        return d

    def canonical_json(self):
        return json.dumps(self.canonical_dict(), sort_keys=True)

    def run_dir(self):
        digest = hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:12]
        return Path(self.out_dir) / f"run-{digest}"


def _build_section(cls, raw, section, errors, **overrides):
    if not isinstance(raw, dict):
        errors.append(f"{section}: expected an object")
        return None
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        errors.append(f"{section}: unknown fields {sorted(unknown)}")
        return None
    try:
        return cls(**{**raw, **overrides})
    except (TypeError, ValueError) as exc:
        errors.append(f"{section}: {exc}")
        return None


def load_config(path, seed_override=None, out_override=None):
    """Parse and validate an experiment config file into ExperimentConfig."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")
    errors = []

    seed = seed_override if seed_override is not None else raw.get("seed", 0)
    if not isinstance(seed, int):
        errors.append("seed: expected an integer")
        seed = 0

    data_raw = raw.get("data")
    data = None
    num_features = None
    num_tasks = None
    if not isinstance(data_raw, dict) or len(data_raw) != 1 or next(iter(data_raw)) not in ("synthetic", "csv"):
        errors.append("data: expected exactly one of {'synthetic': {...}} or {'csv': path}")
    elif "synthetic" in data_raw:
        spec_raw = dict(data_raw["synthetic"]) if isinstance(data_raw["synthetic"], dict) else None
        if spec_raw is None:
            errors.append("data.synthetic: expected an object")
        else:
            spec_raw.setdefault("seed", seed)
            data = _build_section(SyntheticSpec, spec_raw, "data.synthetic", errors)
            if data is not None:
                num_features = data.num_features
                num_tasks = data.num_tasks
    else:
        if not isinstance(data_raw["csv"], str):
            errors.append("data.csv: expected a path string")
        else:
            data = data_raw["csv"]

    arch_raw = dict(raw.get("architecture", {}))
    if num_features is not None:
        arch_raw.setdefault("num_features", num_features)
        arch_raw.setdefault("num_tasks", num_tasks)
    if "num_features" not in arch_raw:
        errors.append("architecture.num_features: required for csv data sources")
        architecture = None
    else:
        architecture = _build_section(ArchitectureConfig, arch_raw, "architecture", errors)
    if (architecture is not None and num_features is not None
            and (architecture.num_features != num_features or architecture.num_tasks != num_tasks)):
        errors.append("architecture: num_features/num_tasks disagree with the synthetic data spec")

    training = _build_section(TrainingConfig, raw.get("training", {}), "training", errors)
    thresholds = raw.get("thresholds", 0.5)
    finetune_cfg = _build_section(FinetuneConfig, raw.get("finetune", {}), "finetune", errors,
                                  thresholds=thresholds)

    out_dir = out_override if out_override is not None else raw.get("out_dir", "runs")
    if not isinstance(out_dir, str):
        errors.append("out_dir: expected a path string")

    known_top = {"seed", "data", "architecture", "training", "finetune", "thresholds", "out_dir"}
    unknown_top = set(raw) - known_top
    if unknown_top:
        errors.append(f"config: unknown fields {sorted(unknown_top)}")

    if errors:
        raise ConfigError("invalid config: " + "; ".join(errors))
    return ExperimentConfig(
        seed=seed, data=data, architecture=architecture, training=training,
        finetune=finetune_cfg, thresholds=thresholds, out_dir=str(out_dir),
    )


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------

def _write_json(path, payload):
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def _write_run_log(run_dir, command, seconds):
    # wall clock lives outside the deterministic artifacts on purpose
    _write_json(run_dir / f"log_{command}.json",
                {"command": command, "wall_clock_seconds": seconds})


def _dataset_dir(config):
    return config.run_dir() / "dataset"


def _load_dataset(config):
    if config.synthetic:
        source = _dataset_dir(config)
        if not source.is_dir():
            raise FileNotFoundError(
                f"dataset directory {source} not found; run the generate command first"
            )
    else:
        source = Path(config.data)
    return load_csv(source)


def _fmt9(value):
    return format(float(value), ".9g")


def _scaled_splits(config, scaler):
    split = _load_dataset(config)
    if split.num_features != config.architecture.num_features:
        raise ConfigError(
            f"dataset has {split.num_features} features but the architecture expects "
            f"{config.architecture.num_features}"
        )
    if split.num_tasks != config.architecture.num_tasks:
        raise ConfigError(
            f"dataset has {split.num_tasks} tasks but the architecture expects "
            f"{config.architecture.num_tasks}"
        )
    return scaler.transform_split(split)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(config):
    """Draw the synthetic dataset and write its CSV files."""
    if not config.synthetic:
        raise ConfigError("generate requires a synthetic data section; csv data already exists")
    started = time.perf_counter()
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    split = generate(config.data)
    write_csv(split, _dataset_dir(config))
    _write_run_log(run_dir, "generate", time.perf_counter() - started)
    return _dataset_dir(config)


def cmd_train(config):
    """Stage-one training: fit the scaler and the trunk, write a checkpoint."""
    started = time.perf_counter()
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    split = _load_dataset(config)
    scaler = FeatureScaler.fit(split.train)
    split = scaler.transform_split(split)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    params = init_params(config.architecture, rng)
    result = train(params, split, config.training, rng)
    checkpoint = run_dir / "checkpoint.bin"
    save_checkpoint(checkpoint, result.params, scaler)
    trace = io.StringIO()
    trace.write("epoch,mean_loss\n")
    for epoch, loss in enumerate(result.epoch_losses):
        trace.write(f"{epoch},{loss!r}\n")
    atomic_write_text(run_dir / "loss_trace.csv", trace.getvalue())
    _write_run_log(run_dir, "train", time.perf_counter() - started)
    return checkpoint


def _aggregate_rows(aggregates, task):
    rows = []
    for agg in aggregates:
        values = agg.values if agg.values.ndim == 2 else agg.values[None, :]
        for t in range(values.shape[0]):
            t_cell = "" if agg.reduced_time else str(t)
            for f in range(values.shape[1]):
                rows.append((agg.group, task + 1, CLASS_NAMES[agg.class_label], t_cell, f,
                             _fmt9(values[t, f])))
    return rows


def cmd_visualize(config, checkpoint_path, per_sample=False):
    """Export per-class and per-confusion-cell aggregate saliency CSVs."""
    started = time.perf_counter()
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    params, scaler = load_checkpoint(checkpoint_path)
    if scaler is None:
        raise CorruptCheckpointError(f"{checkpoint_path}: checkpoint carries no feature scaler")
    split = _scaled_splits(config, scaler)
    samples = split.test
    num_tasks = params.config.num_tasks

    part = partition_confusion(params, samples, config.thresholds)
    by_class_rows = []
    by_cell_rows = []
    sample_rows = []
    for task in range(num_tasks):
        maps = {cls: saliency_maps(params, samples, task, cls)
                for cls in (CLASS_PASSED, CLASS_FAILED)}
        by_class_rows += _aggregate_rows(
            aggregate(maps[CLASS_PASSED] + maps[CLASS_FAILED], "class"), task
        )
        if task in part.cells:
            cell_of = {}
            for cell, idx in part[task].items():
                for i in idx:
                    cell_of[samples[i].id] = cell
            predicted_failed = {samples[i].id
                                for i in np.concatenate([part[task]["tp"], part[task]["fp"]])}
            # each sample contributes its map toward the class the model predicted
            cell_maps = [
                (maps[CLASS_FAILED][i] if m.sample_id in predicted_failed else maps[CLASS_PASSED][i])
                for i, m in enumerate(maps[CLASS_FAILED])
                if m.sample_id in cell_of
            ]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                aggs = aggregate(cell_maps, "confusion", reduce_time=True, cells=cell_of)
            by_cell_rows += _aggregate_rows(aggs, task)
        if per_sample:
            for cls in (CLASS_PASSED, CLASS_FAILED):
                for m in maps[cls]:
                    for t in range(m.values.shape[0]):
                        for f in range(m.values.shape[1]):
                            sample_rows.append((m.sample_id, task + 1, CLASS_NAMES[cls], t, f,
                                                _fmt9(m.values[t, f])))

    def write_rows(name, header, rows):
        buf = io.StringIO()
        buf.write(header + "\n")
        for row in rows:
            buf.write(",".join(str(c) for c in row) + "\n")
        atomic_write_text(run_dir / name, buf.getvalue())

    write_rows("saliency_by_class.csv", "group,task,class,t,feature_index,value", by_class_rows)
    write_rows("saliency_by_cell.csv", "group,task,class,t,feature_index,value", by_cell_rows)
    if per_sample:
        write_rows("saliency_samples.csv", "sample_id,task,class,t,feature_index,value", sample_rows)
    _write_run_log(run_dir, "visualize", time.perf_counter() - started)
    return run_dir / "saliency_by_class.csv"


def cmd_finetune(config, checkpoint_path):
    """Stage-two loop from a trained checkpoint; writes weights and traces."""
    started = time.perf_counter()
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    params, scaler = load_checkpoint(checkpoint_path)
    if scaler is None:
        raise CorruptCheckpointError(f"{checkpoint_path}: checkpoint carries no feature scaler")
    split = _scaled_splits(config, scaler)
    runner = finetune_recall_biased if config.finetune.selection == "recall" else finetune
    tuned, trace = runner(params, config.finetune, split)
    out_path = run_dir / "finetuned.bin"
    save_checkpoint(out_path, tuned, scaler)

    metrics_buf = io.StringIO()
    metrics_buf.write("round,task,auroc,tpr\n")
    for entry in trace.entries:
        for task in sorted(entry.auroc):
            metrics_buf.write(f"{entry.round},{task + 1},{entry.auroc[task]!r},{entry.tpr[task]!r}\n")
    atomic_write_text(run_dir / "weight_trace_metrics.csv", metrics_buf.getvalue())

    weights_buf = io.StringIO()
    weights_buf.write("round,feature_index,weight\n")
    for entry in trace.entries:
        for f, w in enumerate(entry.weights):
            weights_buf.write(f"{entry.round},{f},{float(w)!r}\n")
    atomic_write_text(run_dir / "weight_trace_weights.csv", weights_buf.getvalue())
    _write_run_log(run_dir, "finetune", time.perf_counter() - started)
    return out_path


def cmd_evaluate(config, checkpoint_path, which="test", out_path=None):
    """Score a checkpoint on one split and write the metric report JSON."""
    started = time.perf_counter()
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    if which not in ("train", "valid", "test"):
        raise ConfigError(f"unknown split {which!r}")
    params, scaler = load_checkpoint(checkpoint_path)
    if scaler is None:
        raise CorruptCheckpointError(f"{checkpoint_path}: checkpoint carries no feature scaler")
    split = _scaled_splits(config, scaler)
    samples = dict(split.items())[which]
    report = evaluate_split(params, samples, config.thresholds)
    payload = {"checkpoint": Path(checkpoint_path).name, "split": which, **report.to_dict()}
    if out_path is None:
        out_path = run_dir / f"eval_{Path(checkpoint_path).stem}_{which}.json"
    _write_json(Path(out_path), payload)
    _write_run_log(run_dir, "evaluate", time.perf_counter() - started)
    return Path(out_path)


def cmd_report(config, baseline_path, finetuned_path, out_path=None):
    """Compare two metric reports task by task into one experiment report."""
    started = time.perf_counter()
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    baseline = MetricReport.from_dict(json.loads(Path(baseline_path).read_text()))
    tuned = MetricReport.from_dict(json.loads(Path(finetuned_path).read_text()))
    if set(baseline.tasks) != set(tuned.tasks):
        raise ConfigError("baseline and finetuned reports cover different tasks")
    for task in sorted(baseline.tasks):
        b, t = baseline.tasks[task], tuned.tasks[task]
        rows.append({
            "task": f"task{task + 1}",
            "baseline": b.to_dict(),
            "finetuned": t.to_dict(),
            "delta_auroc": t.auroc - b.auroc,
            "delta_tpr": t.tpr - b.tpr,
        })
    payload = {
        "config": config.canonical_dict(),
        "tasks": rows,
        "artifacts": {
            "baseline_metrics": str(baseline_path),
            "finetuned_metrics": str(finetuned_path),
            "weight_trace_metrics": str(run_dir / "weight_trace_metrics.csv"),
            "weight_trace_weights": str(run_dir / "weight_trace_weights.csv"),
        },
    }
    if out_path is None:
        out_path = run_dir / "report.json"
    _write_json(Path(out_path), payload)
    _write_run_log(run_dir, "report", time.perf_counter() - started)
    return Path(out_path)


# ---------------------------------------------------------------------------
# argument parsing / dispatch
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="softsense",
        description="Soft-sensing classifier pipeline with attribution-guided fine-tuning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output base directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file to load")

    common(sub.add_parser("generate", help="write the synthetic dataset CSVs"))
    common(sub.add_parser("train", help="stage-one training to a checkpoint"))
    p = sub.add_parser("visualize", help="export aggregate saliency CSVs")
    common(p, checkpoint=True)
    p.add_argument("--per-sample", action="store_true", help="also export per-sample maps")
    common(sub.add_parser("finetune", help="stage-two sensor-weight fine-tuning"),
           checkpoint=True)
    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    common(p, checkpoint=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--report-out", default=None, help="metric report output path")
    p = sub.add_parser("report", help="compare baseline and fine-tuned metric reports")
    common(p)
    p.add_argument("--baseline", required=True, help="baseline metric report JSON")
    p.add_argument("--finetuned", required=True, help="fine-tuned metric report JSON")
    p.add_argument("--report-out", default=None, help="experiment report output path")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, seed_override=args.seed, out_override=args.out)
        if args.command == "generate":
            out = cmd_generate(config)
        elif args.command == "train":
            out = cmd_train(config)
        elif args.command == "visualize":
            out = cmd_visualize(config, args.checkpoint, per_sample=args.per_sample)
        elif args.command == "finetune":
            out = cmd_finetune(config, args.checkpoint)
        elif args.command == "evaluate":
            out = cmd_evaluate(config, args.checkpoint, which=args.split,
                               out_path=args.report_out)
        else:
            out = cmd_report(config, args.baseline, args.finetuned, out_path=args.report_out)
        print(out)
        return EXIT_OK
    except (FileNotFoundError, OSError, DataFormatError, CorruptCheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def entrypoint():
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
