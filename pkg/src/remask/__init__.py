"""Masked token-grid generation with fixed, revocable and learned re-masking."""

from .grid import (
    MASK,
    Codebook,
    Condition,
    MaskSchedule,
    TokenGrid,
    apply_keep,
    grid_from_text,
    grid_to_text,
    make_cosine_schedule,
    make_linear_schedule,
    masked_set,
    weighted_sample_without_replacement,
)
from .toyworld import (
    JointTable,
    ToyWorld,
    alignment_score,
    enumerate_joint,
    load_world,
    oracle_cross_attention,
    oracle_frequency_map,
    oracle_predictive,
    sample_true,
)
from .neuralgen import (
    GeneratorOutput,
    NeuralGenerator,
    OracleGenerator,
    self_attention_map,
    train_generator,
)
from .selector import (
    OracleSelector,
    ScoreMap,
    TokenSelector,
    oracle_score,
    selector_auc,
    train_selector,
)
from .sampling import (
    INFINITE,
    Persistent,
    Purity,
    RandomRevoke,
    Strategy,
    Tcts,
    TctsFas,
    Trajectory,
    UniformFixed,
    confidence_map,
    fas_weights,
    generate,
    persistent_weights,
    select_keep,
    switch_strategy_generate,
)
from .tasks import (
    EditRequest,
    edit_mask_free,
    refine_mask_lowest,
    refine_steps,
    upsample_token_map,
    upscale_tiled,
)
from .metrics import (
    alignment_rate,
    diversity_entropy,
    exact_nll,
    resample_count_stats,
)

__all__ = [
    "MASK",
    "Codebook",
    "Condition",
    "MaskSchedule",
    "TokenGrid",
    "apply_keep",
    "grid_from_text",
    "grid_to_text",
    "make_cosine_schedule",
    "make_linear_schedule",
    "masked_set",
    "weighted_sample_without_replacement",
    "JointTable",
    "ToyWorld",
    "alignment_score",
    "enumerate_joint",
    "load_world",
    "oracle_cross_attention",
    "oracle_frequency_map",
    "oracle_predictive",
    "sample_true",
    "GeneratorOutput",
    "NeuralGenerator",
    "OracleGenerator",
    "self_attention_map",
    "train_generator",
    "OracleSelector",
    "ScoreMap",
    "TokenSelector",
    "oracle_score",
    "selector_auc",
    "train_selector",
    "INFINITE",
    "Persistent",
    "Purity",
    "RandomRevoke",
    "Strategy",
    "Tcts",
    "TctsFas",
    "Trajectory",
    "UniformFixed",
    "confidence_map",
    "fas_weights",
    "generate",
    "persistent_weights",
    "select_keep",
    "switch_strategy_generate",
    "EditRequest",
    "edit_mask_free",
    "refine_mask_lowest",
    "refine_steps",
    "upsample_token_map",
    "upscale_tiled",
    "alignment_rate",
    "diversity_entropy",
    "exact_nll",
    "resample_count_stats",
]

__version__ = "0.1.0"
