"""Sensor-window datasets: CSV ingestion and a planted-feature generator.

A sample is a 2-time-step window of F sensor readings plus one binary label
per task, where a label may be absent (-1). Datasets live on disk as a
directory of ``train.csv``/``valid.csv``/``test.csv`` files sharing the
header ``id,t,f0..f{F-1},label_task1..label_taskK`` with empty label cells
meaning absent.

The synthetic generator plants, per task, a set of informative features
(mean-shifted on positives in every split) and a shared set of nuisance
features that receive class-correlated shifts on a random subset of the
training samples only. The nuisance features therefore help a model fit the
training split but inject pure noise at validation/test time, which is the
planted target for the fine-tuning stage to suppress.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ioutil import atomic_write_text


class DataFormatError(ValueError):
    """Malformed dataset file or inconsistent dataset contents."""


@dataclass(eq=False)
class SensorSample:
    """One 2-time-step window of sensor readings with per-task labels.

    ``labels`` holds one entry per task: 0, 1, or -1 for absent.
    """

    id: str
    values: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.values.ndim != 2 or self.values.shape[0] != 2:
            raise DataFormatError(f"sample {self.id}: values must have exactly 2 time steps")
        if self.labels.ndim != 1 or not np.isin(self.labels, (-1, 0, 1)).all():
            raise DataFormatError(f"sample {self.id}: labels must be 0, 1 or absent (-1)")
        if not (self.labels >= 0).any():
            raise DataFormatError(f"sample {self.id}: at least one label must be present")

    @property
    def num_features(self):
        return self.values.shape[1]


@dataclass(eq=False)
class DatasetSplit:
    """Train/valid/test sample lists with consistent shape and disjoint ids."""

    train: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        seen = {}
        shape = None
        for name, samples in self.items():
            for s in samples:
                if s.id in seen:
                    raise DataFormatError(f"sample id {s.id!r} appears in both {seen[s.id]} and {name}")
                seen[s.id] = name
                cur = (s.values.shape[1], s.labels.shape[0])
                if shape is None:
                    shape = cur
                elif cur != shape:
                    raise DataFormatError(
                        f"sample {s.id}: shape {cur} disagrees with dataset shape {shape}"
                    )

    def items(self):
        return (("train", self.train), ("valid", self.valid), ("test", self.test))

    def all_samples(self):
        return self.train + self.valid + self.test

    @property
    def num_features(self):
        for _, samples in self.items():
            if samples:
                return samples[0].num_features
        raise ValueError("empty dataset has no feature count")

    @property
    def num_tasks(self):
        for _, samples in self.items():
            if samples:
                return samples[0].labels.shape[0]
        raise ValueError("empty dataset has no task count")

    def counts(self, which):
        """Per-task (n_neg, n_pos) for one of train/valid/test."""
        samples = dict(self.items())[which]
        if not samples:
            return []
        k = samples[0].labels.shape[0]
        out = []
        for task in range(k):
            labels = np.array([s.labels[task] for s in samples])
            out.append((int((labels == 0).sum()), int((labels == 1).sum())))
        return out


def splits_equal(a, b):
    """Exact equality of two datasets, values compared bit-for-bit."""
    for (_, sa), (_, sb) in zip(a.items(), b.items()):
        if len(sa) != len(sb):
            return False
        for x, y in zip(sa, sb):
            if x.id != y.id or not np.array_equal(x.labels, y.labels):
                return False
            if x.values.shape != y.values.shape or x.values.tobytes() != y.values.tobytes():
                return False
    return True


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

SPLIT_FILES = ("train", "valid", "test")


def _expected_header(num_features, num_tasks):
    return (["id", "t"]
            + [f"f{i}" for i in range(num_features)]
            + [f"label_task{j + 1}" for j in range(num_tasks)])


def _parse_header(header, path):
    if len(header) < 4 or header[0] != "id" or header[1] != "t":
        raise DataFormatError(f"{path}: header must start with id,t")
    i = 2
    while i < len(header) and header[i] == f"f{i - 2}":
        i += 1
    num_features = i - 2
    num_tasks = len(header) - i
    if num_features < 1 or num_tasks < 1 or header != _expected_header(num_features, num_tasks):
        raise DataFormatError(f"{path}: header does not match id,t,f0..,label_task1..")
    return num_features, num_tasks


def _parse_file(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: missing header") from None
        num_features, num_tasks = _parse_header(header, path)
        seen = {}
        groups = {}
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataFormatError(f"{path} row {rownum}: expected {len(header)} cells, got {len(row)}")
            sample_id = row[0]
            try:
                t = int(row[1])
            except ValueError:
                raise DataFormatError(f"{path} row {rownum}: non-integer time step {row[1]!r}") from None
            if (sample_id, t) in seen:
                raise DataFormatError(
                    f"{path} row {rownum}: duplicate (id, t) = ({sample_id!r}, {t}), "
                    f"first seen at row {seen[(sample_id, t)]}"
                )
            seen[(sample_id, t)] = rownum
            try:
                values = [float(c) for c in row[2:2 + num_features]]
            except ValueError:
                raise DataFormatError(f"{path} row {rownum}: non-numeric sensor cell") from None
            labels = []
            for cell in row[2 + num_features:]:
                if cell == "":
                    labels.append(-1)
                elif cell in ("0", "1"):
                    labels.append(int(cell))
                else:
                    raise DataFormatError(f"{path} row {rownum}: label cell must be empty, 0 or 1, got {cell!r}")
            groups.setdefault(sample_id, []).append((t, values, labels, rownum))
    samples = []
    for sample_id, rows in groups.items():
        if len(rows) != 2:
            rownums = sorted(r[3] for r in rows)
            raise DataFormatError(
                f"{path}: id {sample_id!r} has {len(rows)} rows (rows {rownums}), expected exactly 2"
            )
        rows.sort(key=lambda r: r[0])
        if rows[0][2] != rows[1][2]:
            raise DataFormatError(f"{path}: id {sample_id!r} rows disagree on labels")
        samples.append(SensorSample(sample_id, np.array([rows[0][1], rows[1][1]]), np.array(rows[0][2])))
    return samples, num_features, num_tasks


def load_csv(path):
    """Load a dataset directory containing train/valid/test CSV files.

    Missing member files yield empty splits; at least one must exist.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    parsed = {}
    shape = None
    found = False
    for name in SPLIT_FILES:
        member = path / f"{name}.csv"
        if not member.exists():
            parsed[name] = []
            continue
        found = True
        samples, nf, nt = _parse_file(member)
        if shape is None:
            shape = (nf, nt)
        elif (nf, nt) != shape:
            raise DataFormatError(f"{member}: header shape {(nf, nt)} disagrees with {shape}")
        parsed[name] = samples
    if not found:
        raise FileNotFoundError(f"no train/valid/test CSV files in {path}")
    return DatasetSplit(parsed["train"], parsed["valid"], parsed["test"])


def write_csv(split, path):
    """Write a dataset directory that ``load_csv`` reparses identically."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    nf = split.num_features
    nt = split.num_tasks
    header = _expected_header(nf, nt)
    for name, samples in split.items():
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for s in samples:
            labels = ["" if v < 0 else str(int(v)) for v in s.labels]
            for t in range(2):
                writer.writerow([s.id, t] + [repr(float(v)) for v in s.values[t]] + labels)
        atomic_write_text(path / f"{name}.csv", buf.getvalue())
    return path


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for an imbalanced multi-task dataset with planted structure.

    Counts are per task and per split as (n_neg, n_pos) pairs. Positives of
    task k shift the features in ``informative[k]`` by ``signal`` at both
    time steps. Training samples additionally receive, with probability
    ``nuisance_fraction``, a class-correlated shift of ``nuisance_signal``
    on the shared ``nuisance`` features.
    """

    num_features: int = 24
    num_tasks: int = 1
    train_counts: tuple = ((2000, 40),)
    valid_counts: tuple = ((500, 10),)
    test_counts: tuple = ((500, 10),)
    informative: tuple = ((0, 1, 2, 3),)
    nuisance: tuple = (8, 9, 10, 11)
    noise_scale: float = 1.0
    signal: float = 1.0
    nuisance_signal: float = 1.5
    nuisance_fraction: float = 0.6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "train_counts", tuple(tuple(c) for c in self.train_counts))
        object.__setattr__(self, "valid_counts", tuple(tuple(c) for c in self.valid_counts))
        object.__setattr__(self, "test_counts", tuple(tuple(c) for c in self.test_counts))
        object.__setattr__(self, "informative", tuple(tuple(s) for s in self.informative))
        object.__setattr__(self, "nuisance", tuple(self.nuisance))
        if self.num_features < 1 or self.num_tasks < 1:
            raise ValueError("num_features and num_tasks must be positive")
        for name in ("train_counts", "valid_counts", "test_counts"):
            counts = getattr(self, name)
            if len(counts) != self.num_tasks:
                raise ValueError(f"{name} must list one (n_neg, n_pos) pair per task")
            for neg, pos in counts:
                if neg < 0 or pos < 0:
                    raise ValueError(f"{name}: counts must be nonnegative")
        for neg, pos in self.valid_counts + self.test_counts:
            if pos < 1:
                raise ValueError("evaluation splits need at least one positive per task")
        if len(self.informative) != self.num_tasks:
            raise ValueError("informative must list one feature set per task")
        info_union = set()
        for feats in self.informative:
            info_union.update(feats)
        all_planted = info_union | set(self.nuisance)
        if info_union & set(self.nuisance):
            raise ValueError("informative and nuisance feature sets must be disjoint")
        if any(f < 0 or f >= self.num_features for f in all_planted):
            raise ValueError("planted feature indices must lie in [0, num_features)")
        if self.noise_scale < 0 or not 0.0 <= self.nuisance_fraction <= 1.0:
            raise ValueError("noise_scale must be >= 0 and nuisance_fraction in [0, 1]")

    def noise_features(self):
        """Features that are neither informative for any task nor nuisance."""
        planted = set(self.nuisance)
        for feats in self.informative:
            planted.update(feats)
        return tuple(f for f in range(self.num_features) if f not in planted)


def generate(spec):
    """Draw a dataset from a :class:`SyntheticSpec`, deterministic in its seed."""
    rng = np.random.default_rng(spec.seed)
    splits = {}
    for split_name, counts in (
        ("train", spec.train_counts),
        ("valid", spec.valid_counts),
        ("test", spec.test_counts),
    ):
        samples = []
        for task in range(spec.num_tasks):
            n_neg, n_pos = counts[task]
            for cls_name, cls, n in (("neg", 0, n_neg), ("pos", 1, n_pos)):
                values = rng.normal(0.0, spec.noise_scale, size=(n, 2, spec.num_features))
                if cls == 1 and spec.informative[task]:
                    values[:, :, list(spec.informative[task])] += spec.signal
                if split_name == "train" and spec.nuisance:
                    hit = rng.random(n) < spec.nuisance_fraction
                    values[np.ix_(np.flatnonzero(hit), [0, 1], list(spec.nuisance))] += (
                        spec.nuisance_signal * (2 * cls - 1)
                    )
                for i in range(n):
                    labels = np.full(spec.num_tasks, -1, dtype=np.int8)
                    labels[task] = cls
                    samples.append(SensorSample(
                        f"{split_name}-t{task + 1}-{cls_name}-{i:05d}", values[i], labels
                    ))
        splits[split_name] = samples
    return DatasetSplit(splits["train"], splits["valid"], splits["test"])


def class_weights(split):
    """Per-task imbalance weight over the train split: n_neg / n_pos."""
    counts = split.counts("train")
    if not counts:
        raise ValueError("class_weights needs a non-empty train split")
    betas = []
    for task, (neg, pos) in enumerate(counts):
        if pos == 0:
            raise ValueError(f"task{task + 1} has no positive training samples")
        betas.append(neg / pos)
    return np.array(betas, dtype=np.float64)


@dataclass
class FeatureScaler:
    """Per-feature standardization fitted on the train split only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, samples):
        if not samples:
            raise ValueError("cannot fit a scaler on an empty sample list")
        stacked = np.stack([s.values for s in samples])
        mean = stacked.mean(axis=(0, 1))
        std = stacked.std(axis=(0, 1))
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean, std)

    def transform(self, samples):
        return [SensorSample(s.id, (s.values - self.mean) / self.std, s.labels.copy())
                for s in samples]

    def transform_split(self, split):
        return DatasetSplit(
            self.transform(split.train),
            self.transform(split.valid),
            self.transform(split.test),
        )
