"""fedsim: deterministic federated-optimization simulator.

Implements FedSMOO (dynamic regularization plus a globally corrected
sharpness-aware perturbation) next to FedAvg, FedAdam, SCAFFOLD, FedCM,
FedDyn, FedSAM and MoFedSAM, with heterogeneous data partitioners and
flatness/consistency diagnostics, all reproducible from a single seed.
"""

from .numerics import (
    Batch,
    LogisticRegression,
    MLP,
    ParamVector,
    QuadraticFed,
    finite_diff_grad,
    grad,
    hvp,
    loss,
)
from .sam_core import (
    PerturbState,
    corrected_perturbation,
    dual_mu_update,
    global_perturbation,
    normalize_to_ball,
    vanilla_sam_perturbation,
)
from .partition import (
    LabeledDataset,
    PartitionPlan,
    dirichlet_partition,
    partition_stats,
    pathological_partition,
    quadratic_optimum,
    synth_classification,
    synth_quadratic_federation,
)
from .algorithms import (
    ALGORITHMS,
    COMM_VECTORS,
    Broadcast,
    ClientReturn,
    ClientState,
    DivergenceError,
    HyperParams,
    ServerState,
    baseline_local_round,
    baseline_server_round,
    dual_lambda_update,
    fedsmoo_local_round,
    fedsmoo_server_round,
    local_round,
    server_round,
)
from .engine import (
    ConfigError,
    ExperimentConfig,
    ExperimentSummary,
    RoundMetrics,
    init_world,
    run_experiment,
    run_round,
    sample_active_clients,
)
from .diagnostics import (
    BoundReport,
    FlatnessReport,
    consistency,
    generalization_bound,
    hessian_top_eigenvalue,
    hessian_trace_hutchinson,
    landscape_slice,
    power_iteration,
)

__version__ = "0.1.0"
