"""geomattn: attention-guided re-identification on a numpy autodiff core."""

from geomattn.autodiff import (
    RunningStats,
    Tensor,
    amax,
    batch_norm,
    box_sum2d,
    concat,
    constant,
    conv2d,
    global_avg_pool,
    grad_check,
    l2_normalize,
    linear,
)
from geomattn.acm import AcmConfig, AttentionMask, attention_mask
from geomattn.data import (
    AugmentConfig,
    ReidDataset,
    ReidSample,
    SyntheticSpec,
    generate_synthetic_dataset,
    load_manifest,
    pk_sample_batch,
    rotate_image,
    save_dataset,
)
from geomattn.evaluation import (
    EvalConfig,
    FeatureTable,
    MetricsReport,
    average_precision,
    evaluate,
    evaluate_image_to_image,
    evaluate_image_to_track,
    expected_random_ap,
    extract_features,
    pairwise_distances,
)
from geomattn.losses import (
    LossWeights,
    NonFiniteLossError,
    TripletBatch,
    hard_triplet_loss,
    overall_loss,
    rotation_loss,
    smoothed_ce,
)
from geomattn.model import ArchConfig, BranchOutput, ThreeBranchNet
from geomattn.optim import (
    OptimConfig,
    TrainConfig,
    adam_step,
    lr_multistep,
    lr_warmup_cosine,
    preset,
    train,
)
from geomattn.serialization import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "RunningStats",
    "constant",
    "concat",
    "linear",
    "conv2d",
    "batch_norm",
    "global_avg_pool",
    "box_sum2d",
    "amax",
    "l2_normalize",
    "grad_check",
    "AcmConfig",
    "AttentionMask",
    "attention_mask",
    "ArchConfig",
    "BranchOutput",
    "ThreeBranchNet",
    "LossWeights",
    "NonFiniteLossError",
    "TripletBatch",
    "hard_triplet_loss",
    "smoothed_ce",
    "rotation_loss",
    "overall_loss",
    "SyntheticSpec",
    "AugmentConfig",
    "ReidDataset",
    "ReidSample",
    "generate_synthetic_dataset",
    "save_dataset",
    "load_manifest",
    "pk_sample_batch",
    "rotate_image",
    "OptimConfig",
    "TrainConfig",
    "adam_step",
    "lr_multistep",
    "lr_warmup_cosine",
    "preset",
    "train",
    "EvalConfig",
    "FeatureTable",
    "MetricsReport",
    "pairwise_distances",
    "average_precision",
    "evaluate_image_to_image",
    "evaluate_image_to_track",
    "expected_random_ap",
    "extract_features",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "__version__",
]
