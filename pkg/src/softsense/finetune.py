"""Stage-two closed loop: update the sensor weights from misclassified samples.

The trained trunk stays frozen. Each round partitions the update split into
TP/FP/TN/FN per task, derives attribution-based weight gradients from the
misclassified populations (FP and FN), and nudges only the sensor-weight
vector. The gradient toward a class for one sample is the elementwise
product of the raw input with the post-weight-layer input gradient, which
on the unprocessed path is exactly the derivative of the class score with
respect to the sensor weights.

Because the two-class score makes the correct-class gradient the exact
negative of the wrong-class gradient, the two update terms always agree in
direction: each surviving feature moves by 2*alpha per population in sign
mode. Sign-mode per-feature steps are therefore 0 or +-2*alpha before the
population weighting.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor
from .metrics import evaluate_split
from .model import as_thresholds, assemble_labels, predict_probabilities
from .saliency import (
    CLASS_FAILED,
    CLASS_PASSED,
    DEFAULT_CLIP,
    _weight_values,
    clip_small,
    standardize,
    weighted_input_gradient_batch,
)

# wrong class is what the model predicted; correct class is the truth
CELL_CLASSES = {
    "fp": (CLASS_FAILED, CLASS_PASSED),
    "fn": (CLASS_PASSED, CLASS_FAILED),
}


@dataclass(frozen=True)
class FinetuneConfig:
    """Knobs for the sensor-weight update loop.

    ``alpha`` is the step magnitude, ``theta`` the clip threshold applied to
    standardized attribution maps, ``gamma_fn``/``gamma_fp`` weight the two
    misclassified populations, and ``selection`` picks the snapshot metric
    (validation AUROC, or validation TPR with an AUROC tiebreak).

    ``update_split`` names the split whose misclassified samples drive the
    update. Held-out misclassifications reflect how the frozen model fails
    on unseen data, which is what the weight layer is meant to repair.
    """

    alpha: float = 0.02
    theta: float = DEFAULT_CLIP
    rounds: int = 20
    gamma_fn: float = 1.0
    gamma_fp: float = 1.0
    thresholds: object = 0.5
    update_mode: str = "sign"
    selection: str = "auroc"
    update_split: str = "valid"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.theta < 0:
            raise ValueError("theta must be nonnegative")
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")
        if self.gamma_fn < 0 or self.gamma_fp < 0 or self.gamma_fn + self.gamma_fp <= 0:
            raise ValueError("population weights must be nonnegative and not both zero")
        if self.update_mode not in ("sign", "scaled"):
            raise ValueError("update_mode must be 'sign' or 'scaled'")
        if self.selection not in ("auroc", "recall"):
            raise ValueError("selection must be 'auroc' or 'recall'")
        if self.update_split not in ("train", "valid"):
            raise ValueError("update_split must be 'train' or 'valid'")


@dataclass
class ConfusionPartition:
    """Per-task disjoint index lists for TP/FP/TN/FN at fixed thresholds."""

    cells: dict

    @property
    def tasks(self):
        return sorted(self.cells)

    def __getitem__(self, task):
        return self.cells[task]


@dataclass
class WeightTraceEntry:
    round: int
    weights: np.ndarray
    auroc: dict
    tpr: dict
    converged: bool = False

    def mean_auroc(self):
        return float(np.mean(list(self.auroc.values())))

    def mean_tpr(self):
        return float(np.mean(list(self.tpr.values())))


@dataclass
class WeightTrace:
    entries: list = field(default_factory=list)
    selected_round: int = 0


def partition_confusion(params, samples, thresholds):
    """Split labeled samples of each task into TP/FP/TN/FN index lists.

    Tasks with no labeled samples are omitted with a warning.
    """
    probs = predict_probabilities(params, samples)
    labels, mask = assemble_labels(samples)
    num_tasks = labels.shape[1]
    thr = as_thresholds(thresholds, num_tasks)
    cells = {}
    for k in range(num_tasks):
        labeled = np.flatnonzero(mask[:, k] == 1)
        if labeled.size == 0:
            warnings.warn(f"task{k + 1} has no labeled samples and was omitted", RuntimeWarning,
                          stacklevel=2)
            continue
        y = labels[labeled, k]
        pred = probs[labeled, k] >= thr[k]
        cells[k] = {
            "tp": labeled[pred & (y == 1)],
            "fp": labeled[pred & (y == 0)],
            "tn": labeled[~pred & (y == 0)],
            "fn": labeled[~pred & (y == 1)],
        }
    return ConfusionPartition(cells)


def weight_gradient(model, samples, task, target_class, theta=DEFAULT_CLIP, preprocess=True):
    """Mean attribution-based sensor-weight gradient over a sample list.

    Per sample the raw quantity is input * d(score)/d(weighted input). With
    ``preprocess`` each per-sample map is standardized, clipped at ``theta``
    and averaged over time; without it the map is summed over time, which
    reproduces the autodiff derivative of the class score with respect to
    the sensor weights exactly.
    """
    if len(samples) == 0:
        raise ValueError("weight_gradient requires at least one sample")
    values = np.stack([np.asarray(getattr(s, "values", s), dtype=np.float64) for s in samples])
    grads = weighted_input_gradient_batch(model, values, task, target_class)
    products = values * grads
    if preprocess:
        per_sample = np.stack([clip_small(standardize(p), theta).mean(axis=0) for p in products])
    else:
        per_sample = products.sum(axis=1)
    return per_sample.mean(axis=0)


def _with_sensor_weights(params, weights):
    w = np.asarray(weights, dtype=np.float64)
    if isinstance(params.sensor_weights, Tensor):
        w = Tensor(w, name="sensor_weights")
    return replace(params, sensor_weights=w)


def _validation_entry(params, config, valid_samples, round_index, converged=False):
    report = evaluate_split(params, valid_samples, config.thresholds)
    return WeightTraceEntry(
        round=round_index,
        weights=_weight_values(params).copy(),
        auroc={k: m.auroc for k, m in report.tasks.items()},
        tpr={k: m.tpr for k, m in report.tasks.items()},
        converged=converged,
    )


def finetune_round(params, config, split, round_index=1):
    """One update round; returns new params and the round's trace entry.

    Misclassified samples come from the configured update split; validation
    metrics are recorded on the valid split. A round with no misclassified
    samples in any task leaves the weights untouched and is flagged as
    converged.
    """
    pool = getattr(split, config.update_split)
    part = partition_confusion(params, pool, config.thresholds)
    per_task = []
    for task in part.tasks:
        deltas = []
        gammas = []
        for cell in ("fp", "fn"):
            gamma = config.gamma_fp if cell == "fp" else config.gamma_fn
            idx = part[task][cell]
            if gamma <= 0.0 or idx.size == 0:
                continue
            population = [pool[i] for i in idx]
            wrong_cls, correct_cls = CELL_CLASSES[cell]
            g_wrong = weight_gradient(params, population, task, wrong_cls, config.theta)
            g_correct = weight_gradient(params, population, task, correct_cls, config.theta)
            if config.update_mode == "sign":
                delta = config.alpha * (np.sign(g_correct) - np.sign(g_wrong))
            else:
                delta = config.alpha * (g_correct - g_wrong)
            deltas.append(delta)
            gammas.append(gamma)
        if deltas:
            per_task.append(np.average(np.stack(deltas), axis=0, weights=gammas))
    converged = not per_task
    if per_task:
        new_weights = np.maximum(params.sensor_weights.data + np.mean(per_task, axis=0), 0.0)
        params = _with_sensor_weights(params, new_weights)
    entry = _validation_entry(params, config, split.valid, round_index, converged)
    return params, entry


def _selection_key(entry, selection):
    if selection == "recall":
        return (entry.mean_tpr(), entry.mean_auroc())
    return (entry.mean_auroc(),)


def finetune(params, config, split):
    """Run the full loop and return the best-validation snapshot plus trace.

    Round 0 is the pre-finetune state and is eligible for selection, so the
    returned weights can never score below the baseline on the validation
    selection metric. The trunk is shared untouched with the input params.
    """
    trace = WeightTrace(entries=[_validation_entry(params, config, split.valid, 0)])
    current = params
    for r in range(1, config.rounds + 1):
        current, entry = finetune_round(current, config, split, round_index=r)
        trace.entries.append(entry)
    best = 0
    best_key = _selection_key(trace.entries[0], config.selection)
    for i, entry in enumerate(trace.entries[1:], start=1):
        key = _selection_key(entry, config.selection)
        if key > best_key:
            best, best_key = i, key
    trace.selected_round = best
    final = _with_sensor_weights(params, trace.entries[best].weights)
    return final, trace


def finetune_recall_biased(params, config, split):
    """Recall-first variant: FN population outweighs FP, snapshots picked by TPR."""
    if not config.gamma_fn >= config.gamma_fp:
        raise ValueError("recall-biased fine-tuning requires gamma_fn >= gamma_fp")
    return finetune(params, replace(config, selection="recall"), split)
