"""survfuse: multimodal survival learning at desk scale.

A small, fully seeded stack: a tape-based autodiff engine, attention-MIL
over patch-embedding bags, a self-normalizing net over molecular vectors,
gated Kronecker-product fusion, a discrete-time survival likelihood,
integrated-gradients interpretability, and censored-data statistics.
"""

from .autodiff import Tape, Tensor, backward, elementwise, grad_check, matmul, softmax
from .data import Cohort, FeatureMeta, PatientRecord, filter_genes, load_cohort, save_cohort
from .errors import (
    ContractError,
    DataError,
    DegenerateModelError,
    DimensionError,
    DomainError,
    NumericError,
    ParameterError,
    PreconditionError,
    SurvfuseError,
)
from .interpret import (
    AttentionMap,
    AttributionReport,
    PatchCellCounts,
    attention_percentiles,
    integrated_gradients,
    modality_contribution,
    til_fraction,
    til_positive,
    top_attention_patches,
)
from .layers import (
    GateParams,
    GatedAttentionParams,
    LinearLayer,
    SeluConstants,
    alpha_dropout,
    attention_pool,
    gated_attention_scores,
    kron_fusion,
    modality_gate,
    selu,
)
from .models import (
    AmilConfig,
    AmilModel,
    MmfConfig,
    MmfModel,
    SnnConfig,
    SnnModel,
    load_checkpoint,
    risk_score,
    save_checkpoint,
)
from .stats import (
    KmCurve,
    RiskTable,
    bootstrap_ci,
    c_index,
    chi2_sf,
    km_estimator,
    logrank_test,
    risk_groups,
    t_sf,
    two_sample_t,
)
from .survival import (
    SurvivalLabel,
    TimeBins,
    combined_loss,
    discretize,
    hazard_to_survival,
    make_bins,
    nll_loss,
    uncensored_loss,
)
from .training import (
    AdamState,
    EffectWeights,
    TrainConfig,
    adam_step,
    cross_validate,
    gen_synthetic,
    make_folds,
    train,
)

__version__ = "0.1.0"
