"""Analytic multiply-accumulate model of a (reorganized) forward pass.

Counts matmul MACs only (biases, softmax, norms, activations excluded),
the convention under which the published GMAC figures were produced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig
from .reorg import ReorgPlan

LAYER_COMPONENTS = ("mhsa_qkv", "attn_scores", "attn_apply", "attn_proj", "ffn", "fusion")


@dataclass
class LayerMacs:
    """Per-component MAC counts of one encoder layer."""

    mhsa_qkv: int
    attn_scores: int
    attn_apply: int
    attn_proj: int
    ffn: int
    fusion: int = 0

    @property
    def total(self) -> int:
        return (self.mhsa_qkv + self.attn_scores + self.attn_apply
                + self.attn_proj + self.ffn + self.fusion)


@dataclass
class CostReport:
    """MAC breakdown of a configured forward pass."""

    total_macs: int
    patch_embed_macs: int
    head_macs: int
    per_layer: list[LayerMacs]
    token_counts_per_stage: list[tuple[int, int]]  # (mhsa tokens, ffn tokens)
    config: ModelConfig | None = None
    kappa: float | None = None
    locations: tuple[int, ...] = field(default_factory=tuple)

    @property
    def gmacs(self) -> float:
        return self.total_macs / 1e9

    def reduction_vs(self, baseline: "CostReport") -> float:
        """Percent MACs saved relative to a baseline report."""
        return 100.0 * (1.0 - self.total_macs / baseline.total_macs)


def layer_macs(n: int, d: int, heads: int, mlp_ratio: float) -> LayerMacs:
    """MACs of one encoder layer at n tokens: 3nd^2 + 2n^2 d + nd^2 + 2r nd^2."""
    if n < 1 or d < 1 or heads < 1:
        raise ConfigError("token count, width, and heads must be >= 1")
    hidden = int(round(mlp_ratio * d))
    return LayerMacs(
        mhsa_qkv=3 * n * d * d,
        attn_scores=n * n * d,
        attn_apply=n * n * d,
        attn_proj=n * d * d,
        ffn=2 * n * d * hidden)


def _split_layer(n_mhsa: int, n_ffn: int, d: int, heads: int, mlp_ratio: float,
                 fused_inputs: int) -> LayerMacs:
    at_mhsa = layer_macs(n_mhsa, d, heads, mlp_ratio)
    at_ffn = layer_macs(n_ffn, d, heads, mlp_ratio)
    return LayerMacs(
        mhsa_qkv=at_mhsa.mhsa_qkv,
        attn_scores=at_mhsa.attn_scores,
        attn_apply=at_mhsa.attn_apply,
        attn_proj=at_mhsa.attn_proj,
        ffn=at_ffn.ffn,
        fusion=fused_inputs * d)


def model_macs(config: ModelConfig, plan: ReorgPlan | None = None) -> CostReport:
    """Total MACs of a forward pass, stage-correct across reorganization layers."""
    if plan is not None and plan.locations and plan.locations[-1] > config.depth:
        raise ConfigError(
            f"reorganization location {plan.locations[-1]} beyond depth {config.depth}")
    d = config.dim
    n_img = config.grid * config.grid
    patch_macs = n_img * (3 * config.patch * config.patch) * d
    head_macs = d * config.num_classes

    per_layer: list[LayerMacs] = []
    token_counts: list[tuple[int, int]] = []
    n = n_img + 1
    for layer_idx in range(1, config.depth + 1):
        rate = plan.rate_for(layer_idx) if plan is not None else None
        n_mhsa = n
        fused_inputs = 0
        if rate is not None:
            image_tokens = n - 1
            kept = math.ceil(rate * image_tokens)
            dropped = image_tokens - kept
            if plan.fusion and dropped > 0:
                fused_inputs = dropped
                n = 1 + kept + 1
            else:
                n = 1 + kept
        per_layer.append(_split_layer(n_mhsa, n, d, config.heads, config.mlp_ratio,
                                      fused_inputs))
        token_counts.append((n_mhsa, n))

    total = patch_macs + head_macs + sum(layer.total for layer in per_layer)
    kappa = None
    locations: tuple[int, ...] = ()
    if plan is not None and plan.keep_rates:
        locations = plan.locations
        kappa = plan.keep_rates[0] if len(set(plan.keep_rates)) == 1 else None
    return CostReport(total_macs=total, patch_embed_macs=patch_macs, head_macs=head_macs,
                      per_layer=per_layer, token_counts_per_stage=token_counts,
                      config=config, kappa=kappa, locations=locations)


def sweep(config: ModelConfig, kappas, resolutions, locations, *,
          fusion: bool = True, threads: int = 1) -> list[CostReport]:
    """Cost reports over the (resolution x kappa) cross-product."""
    jobs = [(res, kappa) for res in resolutions for kappa in kappas]

    def run(job):
        res, kappa = job
        cfg = config.with_resolution(res)
        plan = ReorgPlan.uniform(locations, kappa, fusion=fusion)
        return model_macs(cfg, plan)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, jobs))
    return [run(job) for job in jobs]
