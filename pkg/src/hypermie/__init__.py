"""Hyperbolic generative representation learning for generalized zero-shot
multimodal information extraction, on precomputed embedding bundles."""

from .bottleneck import (
    LatentGaussian,
    contrastive_loss,
    encode_modality,
    gaussian_kl,
    pooled_latent,
    regularization_loss,
)
from .cvae import (
    DecoderParams,
    SyntheticBatch,
    VaeLatent,
    alignment_loss,
    conditional_prototype,
    decode,
    encode_vae,
    synthesize_unseen,
    unseen_ce_loss,
    vae_loss,
)
from .data import (
    Bundle,
    EmbeddedSample,
    GeneratorSpec,
    GzslSplit,
    generate_synthetic_corpus,
    gzsl_split,
    read_bundle,
    read_feature_block,
    write_bundle,
    write_feature_block,
)
from .engine import (
    Checkpoint,
    EvalReport,
    TrainConfig,
    TrainResult,
    calibrated_predict,
    evaluate,
    gradcheck_report,
    load_checkpoint,
    overall_loss,
    save_checkpoint,
    select_gamma,
    train,
)
from .errors import FormatError, HypermieError, NumericsError, ValidationError
from .estimator import HyperbolicGzslClassifier, check_bundle, check_split
from .fusion import (
    PrototypeSet,
    Task,
    cross_modal_attention,
    entity_representation,
    ranking_loss,
    sample_feature,
    similarity_scores,
)
from .lorentz import (
    exp_at_origin,
    lift_to_tangent,
    log_at_origin,
    lorentz_inner,
    lorentz_linear_layer,
    lorentz_linear_transform,
    origin,
)
from .numerics import (
    OptimizerState,
    Parameter,
    ParamStore,
    SeededRng,
    Var,
    evaluate_with_gradients,
    finite_difference_gradient,
    optimizer_step,
    sample_standard_normal,
)

__version__ = "0.1.0"

__all__ = [
    "Bundle",
    "Checkpoint",
    "DecoderParams",
    "EmbeddedSample",
    "EvalReport",
    "FormatError",
    "GeneratorSpec",
    "GzslSplit",
    "HyperbolicGzslClassifier",
    "HypermieError",
    "LatentGaussian",
    "NumericsError",
    "OptimizerState",
    "Parameter",
    "ParamStore",
    "PrototypeSet",
    "SeededRng",
    "SyntheticBatch",
    "Task",
    "TrainConfig",
    "TrainResult",
    "ValidationError",
    "VaeLatent",
    "Var",
    "alignment_loss",
    "calibrated_predict",
    "check_bundle",
    "check_split",
    "conditional_prototype",
    "contrastive_loss",
    "cross_modal_attention",
    "decode",
    "encode_modality",
    "encode_vae",
    "entity_representation",
    "evaluate",
    "evaluate_with_gradients",
    "exp_at_origin",
    "finite_difference_gradient",
    "gaussian_kl",
    "generate_synthetic_corpus",
    "gradcheck_report",
    "gzsl_split",
    "lift_to_tangent",
    "load_checkpoint",
    "log_at_origin",
    "lorentz_inner",
    "lorentz_linear_layer",
    "lorentz_linear_transform",
    "optimizer_step",
    "origin",
    "overall_loss",
    "pooled_latent",
    "ranking_loss",
    "read_bundle",
    "read_feature_block",
    "regularization_loss",
    "sample_feature",
    "sample_standard_normal",
    "save_checkpoint",
    "select_gamma",
    "similarity_scores",
    "synthesize_unseen",
    "train",
    "unseen_ce_loss",
    "vae_loss",
    "write_bundle",
    "write_feature_block",
]
