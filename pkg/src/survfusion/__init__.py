"""Multimodal survival-risk modeling toolkit.

Attention-based fusion of image-derived, gene-expression, and clinical
features trained with an event-weighted Cox partial-likelihood loss,
plus the classical survival-statistics stack (CoxPH, Kaplan-Meier,
log-rank, concordance index, time-dependent AUC) and a seeded synthetic
cohort harness for desk-scale verification.
"""

from .cox import (
    TIME_SORTED,
    VERBATIM_ALG1,
    CoxModel,
    CoxPHModel,
    HazardRow,
    RiskBatch,
    SurvivalRecord,
    event_weights,
    fit_coxph,
    hazard_table,
    hazard_table_csv,
    hazard_table_text,
    weighted_cox_loss,
    weighted_cox_loss_grad,
)
from .data import (
    FoldSplit,
    PatientBundle,
    SyntheticSpec,
    binarize_clinical,
    load_clinical_csv,
    load_cohort,
    load_gene_matrix,
    make_folds,
    read_feature_file,
    resample_patches,
    synthesize_cohort,
    write_cohort,
    write_feature_file,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    FormatError,
    NumericError,
    RankDeficiencyError,
    ShapeError,
    StratificationError,
    SurvFusionError,
    UndefinedMetricError,
    ValidationError,
)
from .fusion import (
    FusionConfig,
    ModelParams,
    VaeParams,
    co_attention,
    concat_patch_features,
    dual_cross_attention,
    forward,
    init_model_params,
    init_vae_params,
    load_checkpoint,
    parameter_count,
    reparameterize,
    risk_head,
    save_checkpoint,
    self_attention_pool,
    transformer_encode,
    vae_decode,
    vae_encode,
    vae_loss,
)
from .metrics import (
    AucResult,
    KMCurve,
    LogRankResult,
    censoring_weights_ipcw,
    concordance_index,
    kaplan_meier,
    log_rank,
    risk_groups,
    time_dependent_auc,
)
from .tensor import GradTape, Tensor, backward, check_gradients, zero_grad
from .training import (
    EvalReport,
    FoldMetrics,
    FusionRiskEstimator,
    Stage1Config,
    Stage2Config,
    TrainConfig,
    adam_step,
    adamw_step,
    compare_loss_weighting,
    evaluate,
    gradcheck_suite,
    median_threshold,
    predict_risks,
    run_cross_validation,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"
