"""Neural Cox regression and censoring-aware evaluation for time-to-event data."""

from .cox import cox_nll, cox_nll_and_grad
from .dataset import (
    FeatureSchema,
    Kind,
    Modality,
    Stratum,
    SubjectRecord,
    SurvivalDataset,
    load_csv,
    stratified_split,
    synthesize_cox,
    write_csv,
)
from .errors import DataError, NumericalError, SurvkitError, TrainingDivergence
from .hazard import (
    BaselineHazard,
    StepFunction,
    breslow,
    cumulative_hazard,
    kaplan_meier,
    survival_curve,
    survival_curves,
)
from .metrics import (
    MetricReport,
    brier_score_at,
    c_index,
    c_td_index,
    comparable_pairs,
    integrated_brier,
    paired_t_test,
)
from .model import DEFAULT_CONFIG, CoxMLP, NetworkConfig, TrainReport, predict_risk, train
from .preprocess import ImputePolicy, PreprocessPlan, apply_plan, fit_plan, select_features

__version__ = "0.1.0"
