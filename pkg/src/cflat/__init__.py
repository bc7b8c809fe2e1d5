"""Flatness-seeking optimizers for continual learning, with diagnostics.

Public surface: flat-vector numerics (numcore), differentiable objectives
(objective), the optimizer family (optim), the class-incremental harness
(continual), loss-landscape diagnostics (landscape), scoreboard metrics
(metrics), and the experiment CLI (cli).
"""

from .numcore import ParamVector, SeededRng, Segment, axpy, dot, gaussian_fill, norm2
from .objective import (
    Batch,
    LogisticOracle,
    MlpOracle,
    MlpSpec,
    ObjectiveOracle,
    QuadraticOracle,
    make_logreg,
    make_mlp,
    make_quadratic,
)
from .optim import (
    DivergenceError,
    OptimConfig,
    ProxyState,
    StepStats,
    cflat_gradient,
    cflat_step,
    cflatpp_step,
    hybrid_step_plan,
    make_stepper,
    proxy_value,
    rho_schedule,
    sam_perturb,
    sam_step,
    sgd_step,
    train_epochs,
)
from .continual import (
    CLConfig,
    Dataset,
    GpmState,
    MemoryBuffer,
    SyntheticSpec,
    Task,
    TaskStream,
    buffer_update,
    grow_head,
    gpm_cflat_step,
    gpm_extract_basis,
    icarl_loss,
    make_stream,
    replay_loss,
    run_cl_experiment,
    synth_dataset,
    wa_align,
)
from .landscape import (
    FlatnessReport,
    flatness_report,
    hutchinson_trace,
    landscape_slice_2d,
    power_iter_lambda_max,
    r0_bruteforce,
    r1_bruteforce,
    track_sq_grad_norm,
)
from .metrics import (
    average_accuracy,
    bwt,
    cflat_proportion,
    fwt,
    last_accuracy,
    relative_return,
    throughput,
)

__version__ = "0.1.0"
