"""Pre-norm ViT encoder with optional in-network token reorganization."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import kernels, reorg
from .errors import ConfigError, ShapeError
from .kernels import Rng
from .reorg import ReorgPlan, ScoreSource
from .tokens import (
    CLS_ORIGIN,
    AttentionTrace,
    LayerAttention,
    MaskTrace,
    PatchOrigin,
    TokenSequence,
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters."""

    depth: int
    dim: int
    heads: int
    mlp_ratio: float
    patch: int
    resolution: int
    num_classes: int

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.resolution % self.patch != 0:
            raise ConfigError(
                f"resolution {self.resolution} not divisible by patch {self.patch}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    @property
    def grid(self) -> int:
        return self.resolution // self.patch

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid + 1

    def with_resolution(self, resolution: int) -> "ModelConfig":
        return dataclasses.replace(self, resolution=resolution)


DEIT_S = ModelConfig(depth=12, dim=384, heads=6, mlp_ratio=4.0,
                     patch=16, resolution=224, num_classes=1000)
DEIT_B = ModelConfig(depth=12, dim=768, heads=12, mlp_ratio=4.0,
                     patch=16, resolution=224, num_classes=1000)

PRESETS = {"deit-s": DEIT_S, "deit-b": DEIT_B}


@dataclass
class LayerWeights:
    """One encoder layer's tensors."""

    norm1_gamma: np.ndarray
    norm1_beta: np.ndarray
    q_weight: np.ndarray
    q_bias: np.ndarray
    k_weight: np.ndarray
    k_bias: np.ndarray
    v_weight: np.ndarray
    v_bias: np.ndarray
    proj_weight: np.ndarray
    proj_bias: np.ndarray
    norm2_gamma: np.ndarray
    norm2_beta: np.ndarray
    fc1_weight: np.ndarray
    fc1_bias: np.ndarray
    fc2_weight: np.ndarray
    fc2_bias: np.ndarray


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor a config requires, by name."""
    d, hidden = config.dim, config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "cls_token": (d,),
        "patch_embed.weight": (3 * config.patch * config.patch, d),
        "patch_embed.bias": (d,),
        "pos_embed": (config.num_tokens, d),
        "final_norm.gamma": (d,),
        "final_norm.beta": (d,),
        "head.weight": (d, config.num_classes),
        "head.bias": (config.num_classes,),
    }
    for i in range(config.depth):
        prefix = f"layers.{i}."
        shapes[prefix + "norm1.gamma"] = (d,)
        shapes[prefix + "norm1.beta"] = (d,)
        for name in ("q", "k", "v"):
            shapes[prefix + f"attn.{name}.weight"] = (d, d)
            shapes[prefix + f"attn.{name}.bias"] = (d,)
        shapes[prefix + "attn.proj.weight"] = (d, d)
        shapes[prefix + "attn.proj.bias"] = (d,)
        shapes[prefix + "norm2.gamma"] = (d,)
        shapes[prefix + "norm2.beta"] = (d,)
        shapes[prefix + "ffn.fc1.weight"] = (d, hidden)
        shapes[prefix + "ffn.fc1.bias"] = (hidden,)
        shapes[prefix + "ffn.fc2.weight"] = (hidden, d)
        shapes[prefix + "ffn.fc2.bias"] = (d,)
    return shapes


class WeightSet:
    """Named float64 tensors consistent with a ModelConfig."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
        expected = tensor_shapes(config)
        missing = sorted(set(expected) - set(tensors))
        if missing:
            raise ShapeError(f"missing tensors: {missing[:4]}{'...' if len(missing) > 4 else ''}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ShapeError(
                    f"tensor {name} has shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = {name: np.asarray(tensors[name], dtype=np.float64) for name in expected}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def layer(self, i: int) -> LayerWeights:
        t = self.tensors
        p = f"layers.{i}."
        return LayerWeights(
            norm1_gamma=t[p + "norm1.gamma"], norm1_beta=t[p + "norm1.beta"],
            q_weight=t[p + "attn.q.weight"], q_bias=t[p + "attn.q.bias"],
            k_weight=t[p + "attn.k.weight"], k_bias=t[p + "attn.k.bias"],
            v_weight=t[p + "attn.v.weight"], v_bias=t[p + "attn.v.bias"],
            proj_weight=t[p + "attn.proj.weight"], proj_bias=t[p + "attn.proj.bias"],
            norm2_gamma=t[p + "norm2.gamma"], norm2_beta=t[p + "norm2.beta"],
            fc1_weight=t[p + "ffn.fc1.weight"], fc1_bias=t[p + "ffn.fc1.bias"],
            fc2_weight=t[p + "ffn.fc2.weight"], fc2_bias=t[p + "ffn.fc2.bias"])

    def copy(self) -> "WeightSet":
        return WeightSet(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_random(config: ModelConfig, rng: Rng) -> WeightSet:
    """Truncated-normal(0, 0.02) weights, zero biases, identity norms."""
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(config).items():
        size = int(np.prod(shape))
        if name.endswith(".bias") or name.endswith(".beta"):
            tensors[name] = np.zeros(shape)
        elif name.endswith(".gamma"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = rng.truncated_normal(size, std=0.02).reshape(shape)
    return WeightSet(config, tensors)


def patch_embed(image: np.ndarray, w: WeightSet) -> TokenSequence:
    """Project non-overlapping patches to tokens, prepend CLS, add positions."""
    config = w.config
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (config.resolution, config.resolution, 3):
        raise ShapeError(
            f"image shape {image.shape} does not match resolution {config.resolution}")
    g, p = config.grid, config.patch
    patches = (image.reshape(g, p, g, p, 3)
               .transpose(0, 2, 1, 3, 4)
               .reshape(g * g, p * p * 3))
    projected = kernels.matmul(patches, w["patch_embed.weight"]) + w["patch_embed.bias"]
    tokens = np.concatenate([w["cls_token"].reshape(1, -1), projected], axis=0)
    tokens = tokens + w["pos_embed"]
    origins = (CLS_ORIGIN,) + tuple(PatchOrigin(r, c) for r in range(g) for c in range(g))
    return TokenSequence(tokens, origins)


def mhsa(x: TokenSequence, lw: LayerWeights, heads: int,
         trace: AttentionTrace | None = None) -> TokenSequence:
    """Pre-norm multi-head self-attention block with residual connection."""
    d = x.dim
    if d % heads != 0:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    scale = math.sqrt(dh)
    xn = kernels.layernorm(x.tokens, lw.norm1_gamma, lw.norm1_beta)
    q = kernels.matmul(xn, lw.q_weight) + lw.q_bias
    k = kernels.matmul(xn, lw.k_weight) + lw.k_bias
    v = kernels.matmul(xn, lw.v_weight) + lw.v_bias

    n = x.n
    context = np.empty((n, d))
    keep_maps = trace is not None and trace.record_maps
    maps = np.empty((heads, n, n)) if keep_maps else None
    cls_rows = np.empty((heads, n))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = kernels.matmul(q[:, sl], np.ascontiguousarray(k[:, sl].T)) / scale
        attn = kernels.softmax_rows(scores)
        if keep_maps:
            maps[h] = attn
        cls_rows[h] = attn[0]
        context[:, sl] = kernels.matmul(attn, v[:, sl])
    out = kernels.matmul(context, lw.proj_weight) + lw.proj_bias
    if trace is not None:
        trace.record(LayerAttention(head_cls_rows=cls_rows, head_maps=maps))
    return x.with_tokens(x.tokens + out)


def ffn(x: TokenSequence, lw: LayerWeights) -> TokenSequence:
    """Pre-norm feed-forward block with residual connection."""
    xn = kernels.layernorm(x.tokens, lw.norm2_gamma, lw.norm2_beta)
    hidden = kernels.gelu(kernels.matmul(xn, lw.fc1_weight) + lw.fc1_bias)
    out = kernels.matmul(hidden, lw.fc2_weight) + lw.fc2_bias
    return x.with_tokens(x.tokens + out)


def _validate_plan(config: ModelConfig, plan: ReorgPlan | None) -> None:
    if plan is None:
        return
    if plan.locations and plan.locations[-1] > config.depth:
        raise ConfigError(
            f"reorganization location {plan.locations[-1]} beyond depth {config.depth}")


def encode(tokens: TokenSequence, w: WeightSet, plan: ReorgPlan | None = None, *,
           rng: Rng | None = None, record_maps: bool = True,
           score_source: ScoreSource = ScoreSource.CLS_TO_TOKENS,
           ) -> tuple[np.ndarray, AttentionTrace, MaskTrace]:
    """Run the encoder stack over an embedded token sequence.

    Reorganization (when planned for a layer) runs between that layer's
    attention output and its feed-forward input. Returns the class logits,
    the attention trace, and the reorganization trace.
    """
    config = w.config
    _validate_plan(config, plan)
    trace = AttentionTrace(record_maps=record_maps)
    mask_trace = MaskTrace()
    x = tokens
    for layer_idx in range(1, config.depth + 1):
        lw = w.layer(layer_idx - 1)
        mhsa_n = x.n
        x = mhsa(x, lw, config.heads, trace)
        rate = plan.rate_for(layer_idx) if plan is not None else None
        if rate is not None:
            layer_attn = trace.layers[-1]
            if score_source is ScoreSource.CLS_TO_TOKENS:
                a = reorg.cls_attentiveness(layer_attn)
            else:
                a = reorg.tokens_to_tokens_attentiveness(layer_attn)
            x = reorg.reorganize(x, a, keep_rate=rate, strategy=plan.strategy,
                                 fusion=plan.fusion, rng=rng,
                                 mask_trace=mask_trace, layer=layer_idx)
        trace.token_counts.append((mhsa_n, x.n))
        x = ffn(x, lw)
    cls_row = kernels.layernorm(x.tokens[0:1], w["final_norm.gamma"], w["final_norm.beta"])
    logits = (kernels.matmul(cls_row, w["head.weight"]) + w["head.bias"])[0]
    return logits, trace, mask_trace


def forward(image: np.ndarray, w: WeightSet, plan: ReorgPlan | None = None, *,
            rng: Rng | None = None, record_maps: bool = True,
            score_source: ScoreSource = ScoreSource.CLS_TO_TOKENS,
            ) -> tuple[np.ndarray, AttentionTrace, MaskTrace]:
    """Full forward pass: patch embedding, encoder stack, class logits."""
    return encode(patch_embed(image, w), w, plan, rng=rng, record_maps=record_maps,
                  score_source=score_source)


def interpolate_pos_embed(w: WeightSet, new_resolution: int) -> WeightSet:
    """Re-grid the positional embedding for a new input resolution (bicubic)."""
    config = w.config
    if new_resolution % config.patch != 0:
        raise ConfigError(
            f"resolution {new_resolution} not divisible by patch {config.patch}")
    if new_resolution == config.resolution:
        return w.copy()
    g_old, g_new = config.grid, new_resolution // config.patch
    if g_old < 2:
        raise ConfigError("source grid too small to interpolate")
    pos = w["pos_embed"]
    grid_part = pos[1:].reshape(g_old, g_old, config.dim)
    resized = kernels.bicubic_resize(grid_part, g_new, g_new)
    new_pos = np.concatenate([pos[0:1], resized.reshape(g_new * g_new, config.dim)], axis=0)
    new_config = config.with_resolution(new_resolution)
    tensors = {k: v.copy() for k, v in w.tensors.items()}
    tensors["pos_embed"] = new_pos
    return WeightSet(new_config, tensors)
