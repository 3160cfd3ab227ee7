"""The shipped synthetic benchmark: an 8/4/2 three-level hierarchy with the
domain shift applied to the specific and confounding input blocks.

Used by the acceptance suite and reproducible from the CLI with the configs
under configs/.
"""

from __future__ import annotations

import numpy as np

from .explain import hierarchy_alignment
from .hierarchy import HierarchySpec, build_hierarchy
from .model import partition_channels
from .synthdata import SyntheticDomainConfig, generate_synthetic_domains
from .train import TrainConfig, evaluate, train, weight_sweep

BENCHMARK_CLASS_COUNTS = (8, 4, 2)
BENCHMARK_SAMPLES_PER_CLASS = 100
BENCHMARK_SWEEP_STEP = 0.05


def benchmark_hierarchy() -> HierarchySpec:
    counts = BENCHMARK_CLASS_COUNTS
    maps = [{c: c // 2 for c in range(counts[g])} for g in range(len(counts) - 1)]
    return build_hierarchy(counts, maps)


def benchmark_gen_config(seed: int = 0) -> SyntheticDomainConfig:
    return SyntheticDomainConfig(
        prototype_scales=(1.0, 1.0, 1.0),
        noise_std=0.3,
        shift_scale=2.5,
        shift_offset=2.0,
        shift_blocks=("specific", "confounding"),
        samples_per_class=BENCHMARK_SAMPLES_PER_CLASS,
        seed=seed)


def benchmark_train_config(seed: int = 0, enable_fs: bool = True,
                           enable_cs: bool = True, **overrides) -> TrainConfig:
    return TrainConfig(
        epochs=overrides.pop("epochs", 30),
        seed=seed, enable_fs=enable_fs, enable_cs=enable_cs,
        **overrides)


def run_benchmark(seed: int = 0, enable_fs: bool = True, enable_cs: bool = True,
                  sweep_step: float = BENCHMARK_SWEEP_STEP, epochs: int | None = None) -> dict:
    """Train one configuration and evaluate it on the shifted target domain.

    Configurations with the structured classifier enabled pick their
    inference weights by sweeping the simplex grid on the target (the
    adaptive weighting mechanism); the others evaluate at uniform weights.
    """
    h = benchmark_hierarchy()
    cfg = benchmark_train_config(seed, enable_fs, enable_cs,
                                 **({"epochs": epochs} if epochs is not None else {}))
    partition = partition_channels(cfg.d, cfg.partition_ratio)
    source, target = generate_synthetic_domains(h, partition, benchmark_gen_config(seed))

    ckpt, history = train(cfg, source)
    uniform = evaluate(ckpt, target, lam=(1.0, 1.0, 1.0))
    result = {
        "seed": seed,
        "enable_fs": enable_fs,
        "enable_cs": enable_cs,
        "checkpoint": ckpt,
        "history": history,
        "source_train_acc": history[-1]["fine_train_acc"] if history else float("nan"),
        "uniform_target_acc": uniform["fine_acc"],
        "source_eval_acc": evaluate(ckpt, source, lam=(1.0, 1.0, 1.0))["fine_acc"],
    }
    if enable_cs:
        sweep = weight_sweep(ckpt, target, step=sweep_step)
        result["sweep_best"] = sweep["best"]
        result["target_acc"] = sweep["best"]["fine_acc"]
    else:
        result["sweep_best"] = None
        result["target_acc"] = uniform["fine_acc"]
    fine_weight = ckpt.tensors["classifier0.weight"]
    result["rho_all"] = hierarchy_alignment(fine_weight, partition, h).rho["all"]
    return result
