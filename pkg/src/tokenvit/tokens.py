"""Token sequences, provenance tracking, and per-forward traces."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class ClsOrigin:
    """Provenance of the classification token."""


@dataclass(frozen=True)
class PatchOrigin:
    """Provenance of an image token: its patch-grid cell."""

    row: int
    col: int


@dataclass(frozen=True)
class FusedOrigin:
    """Provenance of a token produced by fusing other tokens."""

    parts: tuple

    def __post_init__(self):
        if not self.parts:
            raise ShapeError("fused origin requires a non-empty constituent set")


CLS_ORIGIN = ClsOrigin()


def grid_cells(origin) -> tuple[PatchOrigin, ...]:
    """All patch-grid cells an origin traces back to, transitively."""
    if isinstance(origin, PatchOrigin):
        return (origin,)
    if isinstance(origin, FusedOrigin):
        cells: list[PatchOrigin] = []
        for part in origin.parts:
            cells.extend(grid_cells(part))
        return tuple(cells)
    return ()


@dataclass
class TokenSequence:
    """Live token matrix (n x d) with per-token provenance; index 0 is CLS."""

    tokens: np.ndarray
    origins: tuple

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ShapeError("token matrix must be 2-D")
        if len(self.origins) != self.tokens.shape[0]:
            raise ShapeError(
                f"{len(self.origins)} origins for {self.tokens.shape[0]} tokens")
        if not isinstance(self.origins[0], ClsOrigin):
            raise ShapeError("token 0 must be the CLS token")

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: np.ndarray) -> "TokenSequence":
        """Same provenance, new values (shape-preserving ops)."""
        return TokenSequence(tokens, self.origins)


@dataclass
class LayerAttention:
    """Attention record of one encoder layer.

    ``head_cls_rows`` (H x n) is always captured; the full per-head maps
    (H x n x n) are kept only when the trace stores maps.
    """

    head_cls_rows: np.ndarray
    head_maps: np.ndarray | None = None

    @property
    def heads(self) -> int:
        return self.head_cls_rows.shape[0]

    @property
    def n(self) -> int:
        return self.head_cls_rows.shape[1]

    def averaged_cls_row(self) -> np.ndarray:
        """Head-averaged CLS attention row (length n, sums to 1)."""
        acc = self.head_cls_rows[0].copy()
        for h in range(1, self.heads):
            acc = acc + self.head_cls_rows[h]
        return acc / self.heads


class AttentionTrace:
    """Per-layer attention maps and head-averaged CLS rows for one forward."""

    def __init__(self, record_maps: bool = True) -> None:
        self.record_maps = record_maps
        self.layers: list[LayerAttention] = []
        self.token_counts: list[tuple[int, int]] = []

    def record(self, layer: LayerAttention) -> None:
        if not self.record_maps:
            layer = LayerAttention(head_cls_rows=layer.head_cls_rows)
        self.layers.append(layer)

    def averaged_cls_rows(self) -> list[np.ndarray]:
        return [layer.averaged_cls_row() for layer in self.layers]


@dataclass
class ReorgEvent:
    """What one reorganization did: who was kept, who was fused/removed."""

    layer: int
    keep_rate: float
    fusion: bool
    strategy: str
    kept_indices: tuple[int, ...]
    dropped_indices: tuple[int, ...]
    kept_origins: tuple
    dropped_origins: tuple
    scores: np.ndarray


@dataclass
class MaskTrace:
    """Reorganization events of one forward pass, in layer order."""

    events: list[ReorgEvent] = field(default_factory=list)

    def event_for_layer(self, layer: int) -> ReorgEvent | None:
        for event in self.events:
            if event.layer == layer:
                return event
        return None
