"""Input-gradient attribution maps and their aggregation.

A saliency map is the gradient of a class score with respect to one input
window. With a single sigmoid output per task the two-class score is the
pre-sigmoid logit for the failed class and its negation for the passed
class, so the two per-class maps are exact negatives of each other.
Gradients are taken at the logit rather than the probability: probability
gradients vanish for confidently classified samples and would erase the
attribution signal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor

CLASS_PASSED = 0
CLASS_FAILED = 1
CLASS_NAMES = {CLASS_PASSED: "passed", CLASS_FAILED: "failed"}
CONFUSION_CELLS = ("tp", "fp", "tn", "fn")

STD_FLOOR = 1e-12
DEFAULT_CLIP = 0.05


@dataclass
class SaliencyMap:
    """Gradient of one class score w.r.t. one (T, F) input window."""

    values: np.ndarray
    task: int
    class_label: int
    sample_id: str = ""


@dataclass
class AggregateSaliency:
    """Arithmetic mean of a group of maps, optionally averaged over time."""

    values: np.ndarray
    group: str
    task: int
    class_label: int
    count: int
    reduced_time: bool


def _weight_values(model):
    w = model.sensor_weights
    return w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)


def _sample_values(sample):
    return np.asarray(getattr(sample, "values", sample), dtype=np.float64)


def _class_score_sum(logits, task, class_label):
    if class_label not in (CLASS_PASSED, CLASS_FAILED):
        raise ValueError(f"class must be {CLASS_PASSED} (passed) or {CLASS_FAILED} (failed)")
    if not 0 <= task < logits.shape[1]:
        raise ValueError(f"task {task} out of range for {logits.shape[1]} outputs")
    score = ad.sum_all(ad.take_column(logits, task))
    return score if class_label == CLASS_FAILED else ad.scale(score, -1.0)


def input_gradient_batch(model, values, task, class_label):
    """Per-sample d(class score)/d(input) for a stack of (T, F) windows."""
    values = np.asarray(values, dtype=np.float64)
    x = Tensor(values[:, None, :, :], name="input")
    score = _class_score_sum(model.logits(x), task, class_label)
    g = ad.grad(score, [x])[x][:, 0]
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite input gradient")
    return g


def weighted_input_gradient_batch(model, values, task, class_label):
    """Per-sample gradient taken only past the sensor-weight layer."""
    values = np.asarray(values, dtype=np.float64)
    w = _weight_values(model)
    x1 = Tensor(values[:, None, :, :] * w, name="weighted_input")
    score = _class_score_sum(model.logits_past_weights(x1), task, class_label)
    g = ad.grad(score, [x1])[x1][:, 0]
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite post-weight-layer gradient")
    return g


def saliency(model, sample, task, class_label):
    """Saliency map of one sample toward one class, model frozen in infer mode."""
    values = _sample_values(sample)
    sample_id = getattr(sample, "id", "")
    try:
        g = input_gradient_batch(model, values[None, :, :], task, class_label)[0]
    except NumericError as exc:
        raise NumericError(f"saliency failed for sample {sample_id or '<anonymous>'}") from exc
    return SaliencyMap(values=g, task=task, class_label=class_label, sample_id=sample_id)


def saliency_maps(model, samples, task, class_label):
    """Batched saliency maps; each equals the map computed in isolation."""
    values = np.stack([_sample_values(s) for s in samples])
    grads = input_gradient_batch(model, values, task, class_label)
    return [
        SaliencyMap(values=g, task=task, class_label=class_label,
                    sample_id=getattr(s, "id", ""))
        for s, g in zip(samples, grads)
    ]


def chain_rule_input_gradient(model, sample, task, class_label):
    """Input gradient factored through the sensor-weight layer.

    Computes the gradient with respect to the weighted input and multiplies
    by the sensor weights explicitly; equals the end-to-end saliency map.
    """
    values = _sample_values(sample)
    g1 = weighted_input_gradient_batch(model, values[None, :, :], task, class_label)[0]
    return _weight_values(model) * g1


def standardize(values):
    """Zero-preserving standardization over the nonzero entries.

    Entries exactly equal to 0 stay 0; the rest are centered and scaled by
    the mean and population standard deviation of the nonzero entries. A
    standard deviation below ``STD_FLOOR`` maps every nonzero entry to 0.
    """
    v = np.asarray(values, dtype=np.float64)
    nonzero = v != 0.0
    out = np.zeros_like(v)
    if not nonzero.any():
        return out
    mu = v[nonzero].mean()
    sigma = v[nonzero].std()
    if sigma < STD_FLOOR:
        return out
    out[nonzero] = (v[nonzero] - mu) / sigma
    return out


def clip_small(values, theta):
    """Zero every entry whose magnitude is at most ``theta`` (inclusive)."""
    theta = float(theta)
    if not theta >= 0.0:
        raise ValueError(f"theta must be nonnegative, got {theta}")
    v = np.asarray(values, dtype=np.float64)
    return np.where(np.abs(v) <= theta, 0.0, v)


def aggregate(maps, grouping, reduce_time=False, cells=None):
    """Mean saliency per group, grouped by class or by confusion cell.

    ``grouping`` is "class" or "confusion"; confusion grouping needs
    ``cells`` mapping sample ids to one of tp/fp/tn/fn. Empty groups are
    omitted with a warning. ``reduce_time`` additionally averages over the
    time axis, yielding per-feature vectors.
    """
    maps = list(maps)
    if not maps:
        raise ValueError("aggregate requires at least one map")
    shape = maps[0].values.shape
    for m in maps:
        if m.values.shape != shape:
            raise ValueError("all maps must share one shape")
    if grouping == "class":
        keys = [CLASS_NAMES[m.class_label] for m in maps]
        order = tuple(CLASS_NAMES.values())
    elif grouping == "confusion":
        if cells is None:
            raise ValueError("confusion grouping requires a sample-id -> cell mapping")
        try:
            keys = [cells[m.sample_id] for m in maps]
        except KeyError as exc:
            raise ValueError(f"no confusion cell recorded for sample {exc.args[0]!r}") from exc
        order = CONFUSION_CELLS
    else:
        raise ValueError(f"unknown grouping {grouping!r}")

    out = []
    for group in order:
        members = [m for m, key in zip(maps, keys) if key == group]
        if not members:
            warnings.warn(f"aggregate: group {group!r} is empty and was omitted", RuntimeWarning,
                          stacklevel=2)
            continue
        mean = np.mean([m.values for m in members], axis=0)
        if reduce_time:
            mean = mean.mean(axis=0)
        out.append(AggregateSaliency(
            values=mean,
            group=group,
            task=members[0].task,
            class_label=members[0].class_label,
            count=len(members),
            reduced_time=reduce_time,
        ))
    return out
