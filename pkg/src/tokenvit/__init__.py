"""Vision-transformer inference with attentiveness-guided token reorganization."""

from .cost import CostReport, LayerMacs, layer_macs, model_macs, sweep
from .kernels import (
    MacCounter,
    Rng,
    argsort_desc,
    bicubic_resize,
    count_macs,
    gelu,
    layernorm,
    matmul,
    softmax_rows,
)
from .model import (
    DEIT_B,
    DEIT_S,
    PRESETS,
    ModelConfig,
    WeightSet,
    encode,
    ffn,
    forward,
    init_random,
    interpolate_pos_embed,
    mhsa,
    patch_embed,
)
from .reorg import (
    AttentivenessVector,
    ReorgPlan,
    ScoreSource,
    SelectionStrategy,
    WarmupSchedule,
    ablate_input_tokens,
    cls_attentiveness,
    fuse_inattentive,
    keep_rate_at,
    plan_locations,
    reorganize,
    select_tokens,
    tokens_to_tokens_attentiveness,
)
from .tokens import (
    AttentionTrace,
    ClsOrigin,
    FusedOrigin,
    MaskTrace,
    PatchOrigin,
    TokenSequence,
    grid_cells,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
