"""Desk-scale data filtering network lifecycle.

Generate synthetic image-text feature pools, train a small two-tower
contrastive model, use it to filter a large noisy pool at a calibrated
keep-fraction, train a model on the filtered output, and evaluate the loop.
"""

from .evaluation import (
    EvalReport,
    EvalSuite,
    FilteringOutcome,
    build_eval_suite,
    evaluate,
    filtering_performance,
    make_finetune_pool,
    make_shifted_suite,
)
from .filtering import (
    BinaryScorer,
    ClipScorer,
    ConstantScorer,
    FilterConfig,
    FilterReport,
    apply_dfn,
    calibrate_threshold,
    clip_filter,
    score_alignment,
    train_binary_filter,
)
from .model import (
    TwoTowerModel,
    augment,
    contrastive_loss,
    encode_image,
    encode_text,
    init_model,
    interpolate_weights,
    load_model,
    save_model,
    zero_shot_classify,
)
from .records import Record, RecordBatch
from .shards import ShardSet, read_manifest, read_shards, write_shards
from .synth import ConceptSpace, SyntheticSpec, generate_pool, mix_pools, sample_batch
from .train import TrainConfig, TrainResult, finetune, train_clip

__version__ = "0.1.0"

__all__ = [
    "BinaryScorer",
    "ClipScorer",
    "ConceptSpace",
    "ConstantScorer",
    "EvalReport",
    "EvalSuite",
    "FilterConfig",
    "FilterReport",
    "FilteringOutcome",
    "Record",
    "RecordBatch",
    "ShardSet",
    "SyntheticSpec",
    "TrainConfig",
    "TrainResult",
    "TwoTowerModel",
    "apply_dfn",
    "augment",
    "build_eval_suite",
    "calibrate_threshold",
    "clip_filter",
    "contrastive_loss",
    "encode_image",
    "encode_text",
    "evaluate",
    "filtering_performance",
    "finetune",
    "generate_pool",
    "init_model",
    "interpolate_weights",
    "load_model",
    "make_finetune_pool",
    "make_shifted_suite",
    "mix_pools",
    "read_manifest",
    "read_shards",
    "sample_batch",
    "save_model",
    "score_alignment",
    "train_binary_filter",
    "train_clip",
    "write_shards",
    "zero_shot_classify",
]
