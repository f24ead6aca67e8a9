"""Twin-network treatment-effect estimation with factorized MC-Dropout
uncertainty: total predictive variance split into encoder-level
(representation) and head-level (prediction) components."""

__version__ = "0.1.0"

from .errors import DataError, NumericalError, ShapeError
from .nn_core import (
    AdamState,
    DenseLayer,
    DropoutSpec,
    RngStream,
    adam_step,
    dense_forward,
    dropout_mask,
    stack_backward,
    stack_forward,
)
from .twin_model import (
    DropoutMode,
    LabeledDataset,
    TwinNet,
    TwinNetConfig,
    build_twin_net,
    forward,
    load_checkpoint,
    predict_tau,
    save_checkpoint,
    train,
)
from .uncertainty import (
    MCResult,
    UncertaintyBreakdown,
    additivity_report,
    decompose,
    mc_predict,
    write_breakdown_csv,
)
from .datagen import SynthConfig, SyntheticData, generate, ground_truth, ood_flags
from .twins_ingest import (
    BiasConfig,
    CohortSchema,
    CohortTable,
    induce_bias,
    load_cohort,
    pc1,
    standin_cohort,
)
from .evalmetrics import (
    CI,
    EvalReport,
    IntervalSet,
    bootstrap_ci,
    conformal_adjust,
    delta_sigma,
    ensemble_baseline,
    evaluate_breakdown,
    reliability_and_ece,
    rep_threshold_sweep,
    roc_auc,
    spearman,
)

__all__ = [name for name in dir() if not name.startswith("_")]
