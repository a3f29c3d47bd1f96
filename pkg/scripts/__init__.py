# =========================
# package init
# =========================

# errors
from .errors import AttnScopeError, DataError, NumericError

# telemetry
from .telemetry import (
    ViewportSample,
    GradePair,
    Session,
    FeatureGrid,
    CohortSummary,
    parse_session_log,
    dump_session_log,
    encode_atnt,
    decode_atnt,
    load_feature_tensor,
    save_feature_tensor,
    validate_cohort,
)

# heatmaps
from .heatmap import (
    GridSpec,
    MagBin,
    Heatmap,
    SampleFilter,
    footprint_weights,
    accumulate,
    temporal_stack,
    magnification_stack,
    normalize,
    resample,
    smooth,
)

# metrics / agreement
from .metrics import Fixations, cc, nss, kld, eval_against_mask
from .analysis import (
    grade_concordance,
    pairwise_attention_agreement,
    pearson_with_p,
    expertise_agreement_report,
)

# models / training
from .models import (
    ProstAttFormerConfig,
    ExpertiseNetConfig,
    ModelParams,
    init_params,
    prostattformer_forward,
    expertisenet_forward,
    ablation_variant,
    linear_probe_config,
)
from .training import (
    HyperParams,
    FoldReport,
    kfold_split,
    train_attention,
    train_expertise,
    build_attention_targets,
    classification_metrics,
    evaluate_attention,
)

# synthetic data
from .synth import ExpertiseProfile, SyntheticSlide, generate_slide, generate_session, generate_cohort

# CLI
from .cli import run


__all__ = [
    "AttnScopeError", "DataError", "NumericError",

    "ViewportSample", "GradePair", "Session", "FeatureGrid", "CohortSummary",
    "parse_session_log", "dump_session_log", "encode_atnt", "decode_atnt",
    "load_feature_tensor", "save_feature_tensor", "validate_cohort",

    "GridSpec", "MagBin", "Heatmap", "SampleFilter", "footprint_weights",
    "accumulate", "temporal_stack", "magnification_stack", "normalize", "resample", "smooth",

    "Fixations", "cc", "nss", "kld", "eval_against_mask",
    "grade_concordance", "pairwise_attention_agreement", "pearson_with_p", "expertise_agreement_report",

    "ProstAttFormerConfig", "ExpertiseNetConfig", "ModelParams", "init_params",
    "prostattformer_forward", "expertisenet_forward", "ablation_variant", "linear_probe_config",

    "HyperParams", "FoldReport", "kfold_split", "train_attention", "train_expertise",
    "build_attention_targets", "classification_metrics", "evaluate_attention",

    "ExpertiseProfile", "SyntheticSlide", "generate_slide", "generate_session", "generate_cohort",

    "run",
]
