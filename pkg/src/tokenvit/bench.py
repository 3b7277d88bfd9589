"""In-process throughput benchmark: reorganized vs vanilla forwards."""

from __future__ import annotations

import statistics
import time

from . import model
from .errors import UsageError
from .kernels import Rng
from .model import ModelConfig
from .reorg import ReorgPlan


def _measure(image, w, plan, repeats: int, warmup_iters: int) -> list[float]:
    for _ in range(warmup_iters):
        model.forward(image, w, plan, record_maps=False)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.forward(image, w, plan, record_maps=False)
        samples.append(time.perf_counter() - t0)
    return samples


def _stats(samples: list[float]) -> dict:
    return {
        "samples_s": samples,
        "mean_s": statistics.fmean(samples),
        "stddev_s": statistics.stdev(samples) if len(samples) > 1 else 0.0,
    }


def run_bench(config: ModelConfig, plan: ReorgPlan | None, *, repeats: int,
              warmup_iters: int, seed: int) -> dict:
    """Time `plan` and the vanilla baseline in one process; report the ratio.

    Timing runs serially regardless of any thread setting: interleaved
    forwards would contaminate the very measurement this exists to make.
    """
    if repeats < 3:
        raise UsageError("bench needs at least 3 repeats")
    rng = Rng(seed)
    w = model.init_random(config, rng)
    image = rng.uniform(config.resolution * config.resolution * 3).reshape(
        config.resolution, config.resolution, 3)

    baseline = _stats(_measure(image, w, None, repeats, warmup_iters))
    baseline["keep_rate"] = 1.0
    result = {
        "repeats": repeats,
        "warmup_iters": warmup_iters,
        "seed": seed,
        "resolution": config.resolution,
        "baseline": baseline,
    }
    if plan is not None:
        timed = _stats(_measure(image, w, plan, repeats, warmup_iters))
        timed["keep_rate"] = list(plan.keep_rates)
        timed["locations"] = list(plan.locations)
        timed["fusion"] = plan.fusion
        result["reorganized"] = timed
        result["speedup"] = baseline["mean_s"] / timed["mean_s"]
    else:
        result["speedup"] = 1.0
    return result
