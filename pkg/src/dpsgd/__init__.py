"""Decentralized parallel SGD: simulation, convergence bounds and cost model."""

from .commcost import NetworkModel, busiest_node_messages, crossover_report, per_iteration_time
from .config import ConfigError, RunConfig, load_config, parse_config
from .engine import (
    MetricsTrace,
    StepSchedule,
    TrainingAborted,
    TrainResult,
    TrainState,
    cpsgd_step,
    dpsgd_step,
    eamsgd_step,
    output_model,
    run_training,
)
from .estimators import CentralizedSGD, DecentralizedSGD, ElasticAveragingSGD
from .problems import (
    LogisticProblem,
    QuadraticProblem,
    StochasticProblem,
    estimate_sigma_zeta,
    logistic_problem,
    quadratic_problem,
)
from .theory import (
    StepSizeTooLarge,
    TheoryInputs,
    bounds_table,
    corollary2_rhs,
    corollary2_stepsize,
    d_constants,
    k_thresholds,
    theorem1_rhs,
    theorem4_consensus_rhs,
)
from .topology import (
    WeightMatrix,
    WeightMatrixError,
    build_topology,
    complete_weight_matrix,
    custom_weight_matrix,
    identity_weight_matrix,
    mixing_decay,
    ring_weight_matrix,
    spectral_gap,
)

__version__ = "0.1.0"
