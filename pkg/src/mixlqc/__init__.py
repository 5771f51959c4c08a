"""Linear-quadratic control and estimation under combined Gaussian and bounded noise."""

from .controller import (
    CostSpec,
    HorizonCost,
    HorizonMatrices,
    SdpConvergenceError,
    SdpInfeasibleError,
    SdpInstance,
    SdpSolution,
    SolverOptions,
    assemble_cost,
    assemble_lmi_block,
    build_horizon,
    build_sdp,
    certainty_equivalent_control,
    control_step,
    recover_control,
    solve_sdp,
    worst_case_objective,
)
from .ellipsoid import (
    NON_SYMMETRIC_90_10,
    UNIFORM_BALL,
    DegenerateTraceError,
    Ellipsoid,
    affine_image,
    contains,
    minkowski_outer,
    mix_weights,
    psd_sqrt,
    sample,
    symmetrize,
    trace_optimal_p,
    volume,
)
from .filters import (
    QK_CORRECTED,
    QK_LITERAL,
    GainConvergenceError,
    GainFallbackWarning,
    MixedBelief,
    NoiseModel,
    SystemModel,
    esm_step,
    gain,
    kalman_step,
    mixed_step,
    predict,
    update,
)
from .harness import (
    CONTROL_METHODS,
    ESTIMATION_METHODS,
    BenchmarkResult,
    EpisodeResult,
    ExperimentConfig,
    MetricsRow,
    MetricsTable,
    compute_metrics,
    default_config,
    run_benchmark,
    simulate_episode,
)

__version__ = "0.1.0"
