"""Learning region-graph structured predictors by blending inference sweeps
with gradient steps on a decomposed convex upper bound of the
temperature-extended log-loss."""

from .inference import (
    MessageState,
    compute_beliefs,
    inference_sweep,
    lambda_update,
    marginal_residual,
    mu_message,
)
from .learner import (
    PredictResult,
    TrainerConfig,
    TrainState,
    predict,
    train,
    w_gradient,
    w_step,
)
from .model import (
    CountingNumbers,
    ModelError,
    Region,
    RegionGraph,
    Sample,
    ValidationReport,
    feature_count,
    theta_table,
    validate_model,
)
from .numerics import entropy, eps_log_sum_exp, gibbs_normalize
from .objective import (
    ObjectiveReport,
    dual_objective,
    duality_report,
    exact_loss,
    exact_map,
    exact_marginals,
    moment_mismatch,
    primal_objective,
    region_loss,
)

__version__ = "0.1.0"
