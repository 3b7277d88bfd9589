"""Token reorganization: attentiveness scoring, top-k keeping, fusion.

The mechanism runs between the attention and feed-forward halves of an
encoder layer: score every image token by the head-averaged CLS attention,
keep the K = ceil(kappa * (n-1)) highest scorers, and either drop the rest
or fuse them into a single token weighted by their raw scores.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError, ShapeError, UsageError
from .kernels import Rng
from .tokens import FusedOrigin, LayerAttention, MaskTrace, ReorgEvent, TokenSequence

_ROW_SUM_TOL = 1e-9


class SelectionStrategy(enum.Enum):
    TOPK = "topk"
    RANDOM = "random"
    MINK = "mink"


class ScoreSource(enum.Enum):
    CLS_TO_TOKENS = "cls"
    TOKENS_TO_TOKENS = "tokens"


@dataclass(frozen=True)
class AttentivenessVector:
    """Importance score per image token (CLS excluded), length n-1."""

    scores: np.ndarray
    source: ScoreSource


@dataclass(frozen=True)
class WarmupSchedule:
    """Cosine decay of the keep rate from 1 to per-location targets."""

    total_steps: int
    targets: tuple[float, ...]

    def __post_init__(self):
        if self.total_steps < 0:
            raise ConfigError("warmup total_steps must be >= 0")
        for target in self.targets:
            if not 0.0 < target <= 1.0:
                raise ConfigError(f"warmup target {target} outside (0, 1]")


@dataclass(frozen=True)
class ReorgPlan:
    """Where reorganization happens and with what keep rate."""

    locations: tuple[int, ...]
    keep_rates: tuple[float, ...]
    strategy: SelectionStrategy = SelectionStrategy.TOPK
    fusion: bool = True
    schedule: WarmupSchedule | None = None

    def __post_init__(self):
        if len(self.locations) != len(self.keep_rates):
            raise ConfigError("one keep rate per reorganization location required")
        if any(b <= a for a, b in zip(self.locations, self.locations[1:])):
            raise ConfigError("reorganization locations must be strictly increasing")
        if self.locations and self.locations[0] < 1:
            raise ConfigError("reorganization locations are 1-based")
        for rate in self.keep_rates:
            if not 0.0 < rate <= 1.0:
                raise ConfigError(f"keep rate {rate} outside (0, 1]")
        if self.schedule is not None and len(self.schedule.targets) != len(self.locations):
            raise ConfigError("warmup schedule needs one target per location")

    @classmethod
    def uniform(cls, locations, keep_rate: float, *, strategy=SelectionStrategy.TOPK,
                fusion: bool = True, schedule: WarmupSchedule | None = None) -> "ReorgPlan":
        locations = tuple(int(x) for x in locations)
        return cls(locations, (float(keep_rate),) * len(locations),
                   strategy=strategy, fusion=fusion, schedule=schedule)

    def rate_for(self, layer: int) -> float | None:
        for loc, rate in zip(self.locations, self.keep_rates):
            if loc == layer:
                return rate
        return None

    def rates_at(self, step: int) -> tuple[float, ...]:
        """Keep rates after `step` warmup steps (the plain rates if unscheduled)."""
        if self.schedule is None:
            return self.keep_rates
        return tuple(keep_rate_at(self.schedule, step, location=i)
                     for i in range(len(self.locations)))


def _scores_of(a) -> np.ndarray:
    scores = a.scores if isinstance(a, AttentivenessVector) else np.asarray(a, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 1:
        raise ShapeError("attentiveness must be a non-empty vector")
    return scores


def _check_row_stochastic(rows: np.ndarray) -> None:
    sums = rows.sum(axis=-1)
    if not np.all(np.isfinite(rows)) or np.max(np.abs(sums - 1.0)) > _ROW_SUM_TOL:
        raise NumericError("attention rows must each sum to 1")


def cls_attentiveness(trace_layer) -> AttentivenessVector:
    """Head-averaged CLS attention over image tokens (CLS self excluded)."""
    if isinstance(trace_layer, LayerAttention):
        rows = trace_layer.head_cls_rows
    else:
        maps = np.asarray(trace_layer, dtype=np.float64)
        if maps.ndim != 3:
            raise ShapeError("expected per-head attention maps (H, n, n)")
        _check_row_stochastic(maps.reshape(-1, maps.shape[-1]))
        rows = maps[:, 0, :]
    _check_row_stochastic(rows)
    acc = rows[0].copy()
    for h in range(1, rows.shape[0]):
        acc = acc + rows[h]
    return AttentivenessVector(scores=(acc / rows.shape[0])[1:], source=ScoreSource.CLS_TO_TOKENS)


def tokens_to_tokens_attentiveness(trace_layer) -> AttentivenessVector:
    """Column-mean attention (every token votes), head-averaged, CLS dropped."""
    if isinstance(trace_layer, LayerAttention):
        maps = trace_layer.head_maps
        if maps is None:
            raise UsageError("tokens-to-tokens scoring needs recorded attention maps")
    else:
        maps = np.asarray(trace_layer, dtype=np.float64)
    if maps.ndim != 3:
        raise ShapeError("expected per-head attention maps (H, n, n)")
    _check_row_stochastic(maps.reshape(-1, maps.shape[-1]))
    per_head = maps.mean(axis=1)            # (H, n) column means
    acc = per_head[0].copy()
    for h in range(1, per_head.shape[0]):
        acc = acc + per_head[h]
    return AttentivenessVector(scores=(acc / per_head.shape[0])[1:],
                               source=ScoreSource.TOKENS_TO_TOKENS)


def select_tokens(a, kappa: float, strategy: SelectionStrategy = SelectionStrategy.TOPK,
                  rng: Rng | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Split image-token indices into kept and non-kept, K = ceil(kappa*(n-1)).

    TopK keeps the K largest scores in descending-score order (stable ties),
    MinK the K smallest, Random a uniform K-subset in draw order.
    """
    scores = _scores_of(a)
    if not 0.0 < kappa <= 1.0:
        raise ConfigError(f"keep rate {kappa} outside (0, 1]")
    k = math.ceil(kappa * scores.size)
    if strategy is SelectionStrategy.TOPK:
        order = np.argsort(-scores, kind="stable")
    elif strategy is SelectionStrategy.MINK:
        order = np.argsort(scores, kind="stable")
    elif strategy is SelectionStrategy.RANDOM:
        if rng is None:
            raise UsageError("random selection requires an Rng")
        kept = np.array(rng.subset(scores.size, k), dtype=np.int64)
        rest = np.setdiff1d(np.arange(scores.size, dtype=np.int64), kept)
        return kept, rest
    else:
        raise ConfigError(f"unknown selection strategy {strategy!r}")
    return order[:k].astype(np.int64), order[k:].astype(np.int64)


def fuse_inattentive(x, a, non_topk_idx) -> np.ndarray:
    """Weighted sum of the non-kept tokens with their raw scores as weights."""
    tokens = x.tokens if isinstance(x, TokenSequence) else np.asarray(x, dtype=np.float64)
    scores = _scores_of(a)
    idx = np.asarray(non_topk_idx, dtype=np.int64)
    if idx.size == 0:
        raise UsageError("no inattentive tokens to fuse; caller must skip fusion")
    weights = scores[idx].reshape(1, -1)
    gathered = tokens[idx + 1]
    return kernels.matmul(weights, gathered)[0]


def reorganize(x: TokenSequence, a, *, keep_rate: float,
               strategy: SelectionStrategy = SelectionStrategy.TOPK,
               fusion: bool = True, rng: Rng | None = None,
               mask_trace: MaskTrace | None = None, layer: int = 0) -> TokenSequence:
    """Rebuild the sequence as [CLS, kept tokens, fused token (if any)]."""
    if x.n < 2:
        raise ShapeError("reorganize needs at least one image token")
    scores = _scores_of(a)
    if scores.size != x.n - 1:
        raise ShapeError(f"{scores.size} scores for {x.n - 1} image tokens")
    kept_idx, dropped_idx = select_tokens(a, keep_rate, strategy, rng)

    rows = [x.tokens[0:1]]
    origins = [x.origins[0]]
    rows.append(x.tokens[kept_idx + 1])
    kept_origins = tuple(x.origins[i + 1] for i in kept_idx)
    origins.extend(kept_origins)
    dropped_origins = tuple(x.origins[i + 1] for i in dropped_idx)
    if fusion and dropped_idx.size > 0:
        rows.append(fuse_inattentive(x, a, dropped_idx).reshape(1, -1))
        origins.append(FusedOrigin(dropped_origins))

    if mask_trace is not None:
        mask_trace.events.append(ReorgEvent(
            layer=layer, keep_rate=keep_rate, fusion=fusion, strategy=strategy.value,
            kept_indices=tuple(int(i) for i in kept_idx),
            dropped_indices=tuple(int(i) for i in dropped_idx),
            kept_origins=kept_origins, dropped_origins=dropped_origins,
            scores=scores.copy()))
    return TokenSequence(np.concatenate(rows, axis=0), tuple(origins))


def keep_rate_at(schedule: WarmupSchedule, step: int, location: int = 0) -> float:
    """Scheduled keep rate: cosine from 1 at step 0 to the target at total_steps."""
    target = schedule.targets[location]
    if schedule.total_steps == 0 or step >= schedule.total_steps:
        return target
    if step <= 0:
        return 1.0
    phase = math.pi * step / schedule.total_steps
    return target + (1.0 - target) * (1.0 + math.cos(phase)) / 2.0


def plan_locations(depth: int, reorg_layers: int) -> list[int]:
    """Evenly spaced 1-based reorganization layers: [s+1, 2s+1, ...], s = L/(t+1)."""
    if reorg_layers < 1:
        raise ConfigError("need at least one reorganization layer")
    if depth % (reorg_layers + 1) != 0:
        raise ConfigError(
            f"depth {depth} not divisible by {reorg_layers + 1}; supply explicit locations")
    s = depth // (reorg_layers + 1)
    return [s * i + 1 for i in range(1, reorg_layers + 1)]


def ablate_input_tokens(x: TokenSequence, drop) -> TokenSequence:
    """Delete the listed image tokens (sequence indices) before the encoder runs."""
    drop = set(int(i) for i in drop)
    if 0 in drop:
        raise UsageError("cannot drop the CLS token")
    if any(i < 0 or i >= x.n for i in drop):
        raise UsageError("drop index out of range")
    keep = [i for i in range(x.n) if i not in drop]
    return TokenSequence(x.tokens[keep], tuple(x.origins[i] for i in keep))
