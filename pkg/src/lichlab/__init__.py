"""Numerical laboratory for the conformal constraint system of a scalar-field spacetime on the round 3-sphere."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .grid import (  # noqa: F401
    BallGrid,
    OneFormField,
    ScalarField,
    SymTensorField,
    field_norm,
    make_ball_grid,
    read_field,
    sample_field,
    write_field,
)
from .chart import NORTH, ChartPole, chart_identity_residual, conf_factor, pull_back, stereo_map  # noqa: F401
from .operators import (  # noqa: F401
    Dirichlet,
    LinearSolverConfig,
    Robin,
    adjointness_residual,
    apply_operator,
    scalar_bvp_solve,
    vector_bvp_solve,
)
from .killing import (  # noqa: F401
    CKVParams,
    ckv_eval,
    kernel_convolve,
    kernel_eval,
    killing_project,
    make_killing_basis,
    neumann_green_assemble,
)
from .lichnerowicz import Bubble, bubble_eval, constant_branches, lichnerowicz_solve, pointwise_floor  # noqa: F401
