"""Planted-nuisance benchmark suite for the directional experiments.

Three tasks at 24 features with 50:1 train imbalance per task. Each task
owns four informative features; four shared nuisance features carry
class-correlated shifts on a random subset of training samples only, so a
trained model leans on them and pays for it at validation/test time. The
remaining eight features are pure noise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import SyntheticSpec, generate
from .finetune import FinetuneConfig, finetune, finetune_recall_biased
from .metrics import evaluate_split
from .model import ArchitectureConfig, TrainingConfig, init_params, train
from .saliency import CLASS_FAILED, aggregate, saliency_maps

NUM_TASKS = 3
NUM_FEATURES = 24


def benchmark_spec(seed, num_tasks=NUM_TASKS):
    informative = tuple(tuple(range(4 * k, 4 * k + 4)) for k in range(num_tasks))
    return SyntheticSpec(
        num_features=NUM_FEATURES,
        num_tasks=num_tasks,
        train_counts=((1000, 20),) * num_tasks,
        valid_counts=((500, 15),) * num_tasks,
        test_counts=((500, 15),) * num_tasks,
        informative=informative,
        nuisance=(12, 13, 14, 15),
        noise_scale=1.0,
        signal=1.0,
        nuisance_signal=1.6,
        nuisance_fraction=0.55,
        seed=seed,
    )


def benchmark_arch(num_tasks=NUM_TASKS):
    return ArchitectureConfig(num_features=NUM_FEATURES, num_tasks=num_tasks)


def benchmark_training():
    return TrainingConfig(epochs=25, batch_size=64, learning_rate=0.02)


def benchmark_finetune():
    return FinetuneConfig(alpha=0.02, theta=0.05, rounds=20, thresholds=0.5)


@dataclass
class SeedOutcome:
    """Everything the directional checks need from one seed."""

    seed: int
    spec: SyntheticSpec
    split: object
    base_params: object
    tuned_params: object
    recall_params: object
    base_test: object
    tuned_test: object
    recall_test: object
    tuned_trace: object
    recall_trace: object


def run_seed(seed, num_tasks=NUM_TASKS, training=None, finetune_cfg=None):
    """Train a baseline and both fine-tuned variants for one seed."""
    spec = benchmark_spec(seed, num_tasks)
    split = generate(spec)
    training = training or benchmark_training()
    finetune_cfg = finetune_cfg or benchmark_finetune()

    rng = np.random.default_rng(np.random.SeedSequence([seed, 2024]))
    params = init_params(benchmark_arch(num_tasks), rng)
    result = train(params, split, training, rng)

    tuned, tuned_trace = finetune(result.params, finetune_cfg, split)
    recall_cfg = replace(finetune_cfg, gamma_fn=4.0, gamma_fp=1.0)
    recall, recall_trace = finetune_recall_biased(result.params, recall_cfg, split)

    thr = finetune_cfg.thresholds
    return SeedOutcome(
        seed=seed,
        spec=spec,
        split=split,
        base_params=result.params,
        tuned_params=tuned,
        recall_params=recall,
        base_test=evaluate_split(result.params, split.test, thr),
        tuned_test=evaluate_split(tuned, split.test, thr),
        recall_test=evaluate_split(recall, split.test, thr),
        tuned_trace=tuned_trace,
        recall_trace=recall_trace,
    )


def run_suite(seeds, num_tasks=NUM_TASKS, training=None, finetune_cfg=None, progress=None):
    outcomes = []
    for seed in seeds:
        outcomes.append(run_seed(seed, num_tasks, training, finetune_cfg))
        if progress is not None:
            progress(outcomes[-1])
    return outcomes


def saliency_feature_ratio(outcome):
    """Informative-to-noise ratio of mean absolute aggregate saliency.

    For each task, aggregates failed-class maps over all test samples,
    reduces over time, and compares mean |value| on the task's informative
    features against the spec's pure-noise features. Returns the mean ratio
    over tasks.
    """
    spec = outcome.spec
    noise_feats = list(spec.noise_features())
    ratios = []
    for task in range(spec.num_tasks):
        maps = saliency_maps(outcome.base_params, outcome.split.test, task, CLASS_FAILED)
        (agg,) = [a for a in aggregate(maps, "class", reduce_time=True)
                  if a.group == "failed"]
        profile = np.abs(agg.values)
        info = profile[list(spec.informative[task])].mean()
        noise = profile[noise_feats].mean()
        ratios.append(info / max(noise, 1e-300))
    return float(np.mean(ratios))


def summarize(outcomes):
    """Per-task directional summary across seeds (AUROC/TPR deltas)."""
    num_tasks = len(outcomes[0].base_test.tasks)
    rows = []
    for task in range(num_tasks):
        base_auroc = np.array([o.base_test.tasks[task].auroc for o in outcomes])
        tuned_auroc = np.array([o.tuned_test.tasks[task].auroc for o in outcomes])
        base_tpr = np.array([o.base_test.tasks[task].tpr for o in outcomes])
        recall_tpr = np.array([o.recall_test.tasks[task].tpr for o in outcomes])
        recall_auroc = np.array([o.recall_test.tasks[task].auroc for o in outcomes])
        rows.append({
            "task": task + 1,
            "auroc_baseline": float(base_auroc.mean()),
            "auroc_finetuned": float(tuned_auroc.mean()),
            "auroc_improved_seeds": int((tuned_auroc >= base_auroc).sum()),
            "auroc_mean_delta": float((tuned_auroc - base_auroc).mean()),
            "tpr_baseline": float(base_tpr.mean()),
            "tpr_recall_finetuned": float(recall_tpr.mean()),
            "tpr_improved_seeds": int((recall_tpr >= base_tpr).sum()),
            "recall_auroc_mean_delta": float((recall_auroc - base_auroc).mean()),
        })
    return rows
