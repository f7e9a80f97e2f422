"""Learned nonlocal-strain surrogates embedded in finite element analysis.

The package covers the full loop: a damage-mechanics FEM core that
generates ground-truth nonlocal strain fields, a derivative-propagating
network trained against the regularization PDE residual, and a Newton
equilibrium solver that queries the trained network at every Gauss point.
An experiment harness runs the convergence and architecture studies.
"""

__version__ = "0.1.0"

from .elasticity import (
    BoundaryConditions,
    Material,
    MaterialError,
    MazarsParams,
    SingularSystemError,
    StrainTensor2D,
    assemble_stiffness,
    constitutive_matrix,
    equivalent_strain,
    equivalent_strain_batch,
    mazars_damage,
    solve_displacement,
    strain_at_gps,
)
from .geometry import GaussTable, Mesh, MeshError, build_rect_mesh, refine_rect_mesh
from .harness import (
    HarnessError,
    RunConfig,
    SweepSpec,
    data_gen,
    eval_run,
    ifenn_run,
    mesh_gen,
    report,
    run_convergence_study,
    run_cross_mesh_study,
    run_hps_study,
    run_sweep,
    train_run,
)
from .integrated import (
    HelmholtzPredictor,
    IfennDivergenceError,
    IfennError,
    IfennState,
    NetworkPredictor,
    field_table,
    ifenn_assemble,
    ifenn_solve,
)
from .metrics import (
    MetricsError,
    delta_theta,
    l2rse,
    l2rse_report,
    max_strain_report,
    slope_fit,
    trivial_detector,
)
from .net import (
    CheckpointError,
    Network,
    NetworkShape,
    NetError,
    NetEvalError,
    Scaling,
    augmented_backward,
    augmented_forward,
    forward,
    forward_batch,
    forward_with_derivs,
    forward_with_derivs_batch,
    pack_params,
    unpack_params,
    xavier_init,
)
from .nonlocal_ref import (
    HelmholtzSystem,
    NonlocalSolveError,
    Snapshot,
    SnapshotError,
    StepRecord,
    make_snapshot,
    solve_helmholtz,
    staggered_nonlocal_solve,
)
from .optim import (
    AdamConfig,
    AdamResult,
    LbfgsConfig,
    LbfgsResult,
    NonFiniteLossError,
    adam_run,
    lbfgs_run,
)
from .pinn import (
    CollocationError,
    CollocationSet,
    LossBreakdown,
    LossError,
    bc_residual,
    loss,
    loss_gradient,
    pde_residual,
)
