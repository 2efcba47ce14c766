"""Desk-scale laboratory for stochastic evolution equations with singular
monotone drift driven by jump-diffusion semimartingales."""

from monospde.monotone import (
    ConvexPotential,
    ScalarGraph,
    builtin_graph,
    builtin_potential,
    conjugate,
    fill_jumps,
    membership,
    moreau,
    resolvent,
    yosida,
)
from monospde.operators import (
    GridOperator,
    SmoothingFamily,
    build_laplacian_1d,
    op_resolvent,
    op_yosida,
    smoothing_apply,
)
from monospde.noise import (
    ControlPath,
    LipschitzProcess,
    MarkLaw,
    SemimartingalePath,
    SemimartingaleSpec,
    control_process,
    gronwall_bound,
    lambda_functional,
    mp_inequality_audit,
    quadratic_variation,
    sample_ensemble,
    sample_path,
    stochastic_integral,
    stopped_control,
    uniform_grid,
)
from monospde.integrator import (
    AdditiveNoise,
    MultiplicativeNoise,
    SolutionPath,
    StopRule,
    extend_solution,
    solve_limit,
    solve_multiplicative,
    solve_regularized,
)

__version__ = "0.1.0"
