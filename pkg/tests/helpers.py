"""Shared test utilities: small model builders and a full-model FD closure."""

from __future__ import annotations

import numpy as np

from softsense.autodiff import RunningStats, Tensor
from softsense.model import ArchitectureConfig, ModelParams, forward, init_params

PARAM_ORDER = tuple(
    [f"branch{i}_{part}" for i in range(3) for part in ("kernels", "bias", "gamma", "beta")]
    + ["hidden_weight", "hidden_bias", "head_weight", "head_bias", "sensor_weights"]
)


def small_config(num_features=12, num_tasks=1, kernels=2, hidden=6, pool=(1, 2)):
    return ArchitectureConfig(
        num_features=num_features,
        num_tasks=num_tasks,
        kernels_per_branch=kernels,
        hidden_width=hidden,
        pool_window=pool,
    )


def random_params(config, rng, randomize=True):
    """Initialized params, optionally with every tensor and stat perturbed.

    Randomizing biases, batch-norm affine terms, running statistics and the
    sensor weights makes gradient checks exercise the general case rather
    than the zero-bias initialization.
    """
    params = init_params(config, rng)
    if not randomize:
        return params
    k = config.kernels_per_branch
    for i in range(3):
        params.conv_bias[i] = Tensor(rng.normal(0, 0.1, k), name=f"branch{i}_bias")
        params.gamma[i] = Tensor(rng.uniform(0.7, 1.3, k), name=f"branch{i}_gamma")
        params.beta[i] = Tensor(rng.normal(0, 0.1, k), name=f"branch{i}_beta")
        params.bn_stats[i] = RunningStats(rng.normal(0, 0.2, k), rng.uniform(0.5, 1.5, k))
    params.hidden_b = Tensor(rng.normal(0, 0.1, config.hidden_width), name="hidden_bias")
    params.head_b = Tensor(rng.normal(0, 0.1, config.num_tasks), name="head_bias")
    params.sensor_weights = Tensor(rng.uniform(0.5, 1.5, config.num_features),
                                   name="sensor_weights")
    return params


def param_arrays(params):
    """Flat array list in PARAM_ORDER, for feeding the FD closure."""
    named = dict(params.named_arrays())
    return [named[name] for name in PARAM_ORDER]


def rebuild_params(config, stats, arrays):
    """ModelParams from PARAM_ORDER arrays, sharing the given running stats."""
    named = dict(zip(PARAM_ORDER, arrays))
    return ModelParams(
        config=config,
        kernels=[Tensor(named[f"branch{i}_kernels"]) for i in range(3)],
        conv_bias=[Tensor(named[f"branch{i}_bias"]) for i in range(3)],
        gamma=[Tensor(named[f"branch{i}_gamma"]) for i in range(3)],
        beta=[Tensor(named[f"branch{i}_beta"]) for i in range(3)],
        bn_stats=[s.copy() for s in stats],
        hidden_w=Tensor(named["hidden_weight"]),
        hidden_b=Tensor(named["hidden_bias"]),
        head_w=Tensor(named["head_weight"]),
        head_b=Tensor(named["head_bias"]),
        sensor_weights=Tensor(named["sensor_weights"]),
    )


def model_prob_sum(config, stats):
    """Scalar closure over (param arrays..., input array) for FD checks.

    Evaluates the sum of infer-mode probabilities, which exercises every
    layer including the sigmoid head.
    """

    def f(*arrays):
        params = rebuild_params(config, stats, arrays[:-1])
        out = forward(params, arrays[-1], mode="infer")
        return float(out.probabilities.data.sum())

    return f
