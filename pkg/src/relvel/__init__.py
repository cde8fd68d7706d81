"""Lattice Boltzmann schemes with relaxation in a moving frame.

Exact polynomial and rational-matrix algebra (``polyalg``), moment bases and
shifting matrices (``moment_basis``), the numerical scheme (``scheme``),
Geier's cascaded collision (``cascaded``) and consistency diagnostics
(``analysis``).
"""

from .cascaded import CascadedOperator, cascaded_collide, matching_relative_scheme
from .moment_basis import (
    check_group_morphism,
    d2q9,
    d2q9_geier_diagonal,
    d2q9_geier_raw,
    d2q9_orthogonal,
    expand_in_basis,
    get_basis,
    shifting_matrix,
    verify_shift_blocks,
)
from .polyalg import Polynomial, RationalMatrix, mat_invert_exact
from .scheme import (
    LatticeState,
    RelaxationRates,
    SchemeDef,
    VelocityFieldPolicy,
    collide,
    make_scheme,
    run,
    step,
)

__all__ = [
    "CascadedOperator", "cascaded_collide", "matching_relative_scheme",
    "check_group_morphism", "d2q9", "d2q9_geier_diagonal", "d2q9_geier_raw", "d2q9_orthogonal",
    "expand_in_basis", "get_basis", "shifting_matrix", "verify_shift_blocks",
    "Polynomial", "RationalMatrix", "mat_invert_exact",
    "LatticeState", "RelaxationRates", "SchemeDef", "VelocityFieldPolicy",
    "collide", "make_scheme", "run", "step",
]

__version__ = "0.1.0"
