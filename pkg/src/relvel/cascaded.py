"""Geier's cascaded D2Q9 collision.

The post-collision state is ``f* = f + M(0)^T g`` where ``M(0)`` is the
orthogonal moment matrix and ``g`` is found by a cascade over raw central
moments ``1, X, Y, X^2, Y^2, XY, XY^2, X^2Y, X^2Y^2`` shifted by the fluid
velocity.  The transfer matrix ``C(u) = M_g(u) M(0)^T`` is block lower
triangular, so ``g_3, g_4`` come from a 2x2 solve and ``g_5 ... g_8`` follow
one at a time.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .moment_basis import d2q9, d2q9_geier_raw
from .scheme import (
    RHO_MIN,
    DensityUnderflowError,
    LatticeState,
    RelaxationRates,
    SchemeDef,
    _matvec,
    make_scheme,
    moments_rho_q,
    stream,
)

# g-blocks of the cascade: conserved rows first, then the 2x2 block, then singletons
CASCADE_BLOCKS = ([0, 1, 2], [3, 4], [5], [6], [7], [8])


class CascadeSingularError(ZeroDivisionError):
    pass


@dataclass
class CascadedOperator:
    """Precomputed pieces of the cascaded collision for a given velocity scale."""

    lam: float = 1.0
    dx: float = 1.0
    equilibrium_rule: object = None

    def __post_init__(self):
        # the raw basis evaluated through the same machinery as the relative scheme
        self._raw = SchemeDef(
            d2q9(Fraction(self.lam), self.dx),
            d2q9_geier_raw(Fraction(self.lam)),
            RelaxationRates((0.0,) * 3 + (1.0,) * 6, 3),
        )
        orth = make_scheme("d2q9-orthogonal", lam=Fraction(self.lam), dx=self.dx)
        self.m0 = orth.m0
        self.v = self._raw.v
        self._eq_scheme = orth

    def equilibrium(self, rho, u):
        if self.equilibrium_rule is not None:
            return self.equilibrium_rule(rho, u, self._eq_scheme)
        return self._eq_scheme.equilibrium(rho, u)

    def raw_moment_matrix(self, u) -> np.ndarray:
        return self._raw.moment_matrix(np.asarray(u, dtype=float))

    def build_c_matrix(self, u) -> np.ndarray:
        """``C(u) = M_g(u) M(0)^T``; shape (9, 9) or (9, 9, *grid)."""
        mg = self.raw_moment_matrix(u)
        m0t = self.m0.T
        out = np.zeros_like(mg)
        for i in range(9):
            for k in range(9):
                acc = mg[i, 0] * m0t[0, k]
                for j in range(1, 9):
                    acc = acc + mg[i, j] * m0t[j, k]
                out[i, k] = acc
        return out


def _rate_vector(rates) -> np.ndarray:
    s = rates.array if isinstance(rates, RelaxationRates) else np.asarray(rates, dtype=float)
    if len(s) == 6:
        s = np.concatenate([np.zeros(3), s])
    if len(s) != 9:
        raise ValueError("cascaded collision needs 9 rates (or the 6 non-conserved ones)")
    return s


def cascaded_collide(f: np.ndarray, rates, op: CascadedOperator | None = None,
                     u_override=None) -> np.ndarray:
    """Cascaded relaxation of one node (shape (9,)) or a grid (9, ...).

    ``rates`` are ``s_0 ... s_8`` in the diagonal moment family
    ``1, X, Y, X^2+Y^2, X^2-Y^2, XY, XY^2, X^2Y, X^2Y^2``; ``s_3`` and
    ``s_4`` enter the raw cascade through ``s+ = (s_3+s_4)/2`` and
    ``s- = (s_3-s_4)/2``.  ``u_override`` replaces the fluid velocity as the
    frame velocity (used to check the fixed-frame limit).
    """
    op = op or CascadedOperator()
    s = _rate_vector(rates)
    f = np.asarray(f, dtype=float)
    rho, q = moments_rho_q(f, op.v)
    bad = rho <= RHO_MIN
    if np.any(bad):
        node = np.argwhere(np.atleast_1d(bad))[0]
        raise DensityUnderflowError(node, np.atleast_1d(rho)[tuple(node)])
    u = q / rho
    feq = op.equilibrium(rho, u)
    frame = u if u_override is None else np.broadcast_to(
        np.asarray(u_override, dtype=float).reshape((-1,) + (1,) * (f.ndim - 1)), u.shape)
    mg = op.raw_moment_matrix(frame)
    c = op.build_c_matrix(frame)
    dm = _matvec(mg, feq) - _matvec(mg, f)

    g = np.zeros_like(f)
    sp, sm = 0.5 * (s[3] + s[4]), 0.5 * (s[3] - s[4])
    r3 = sp * dm[3] + sm * dm[4]
    r4 = sm * dm[3] + sp * dm[4]
    a, b, cc, d = c[3, 3], c[3, 4], c[4, 3], c[4, 4]
    det = a * d - b * cc
    if np.any(det == 0):
        raise CascadeSingularError("2x2 block of C(u) is singular")
    g[3] = (d * r3 - b * r4) / det
    g[4] = (a * r4 - cc * r3) / det
    for k in range(5, 9):
        acc = s[k] * dm[k]
        for j in range(3, k):
            acc = acc - c[k, j] * g[j]
        g[k] = acc / c[k, k]
    return f + _matvec(op.m0.T, g)


def cascaded_step(state: LatticeState, rates, op: CascadedOperator | None = None) -> LatticeState:
    op = op or CascadedOperator(dx=state.dx)
    fstar = cascaded_collide(state.f, rates, op)
    return stream(LatticeState(state.f, state.dx, state.t), fstar=fstar)


@dataclass(frozen=True)
class RelaxationBlock:
    block: tuple[tuple, tuple]
    eigenvalues: tuple
    eigenvectors: tuple
    moments: tuple[str, str] = ("X^2+Y^2", "X^2-Y^2")

    @property
    def s_plus(self):
        return self.block[0][0]

    @property
    def s_minus(self):
        return self.block[0][1]


def diagonalize_relaxation_block(s3, s4) -> RelaxationBlock:
    """The raw-moment block ``[[s+, s-], [s-, s+]]`` and its eigen-decomposition.

    It acts on ``(X^2, Y^2)``; eigenvector ``(1, 1)`` (moment ``X^2+Y^2``)
    has eigenvalue ``s_3`` and ``(1, -1)`` (moment ``X^2-Y^2``) has ``s_4``.
    """
    exact = all(isinstance(x, (int, Fraction)) for x in (s3, s4))
    half = Fraction(1, 2) if exact else 0.5
    sp, sm = half * (s3 + s4), half * (s3 - s4)
    return RelaxationBlock(((sp, sm), (sm, sp)), (sp + sm, sp - sm), ((1, 1), (1, -1)))


def matching_relative_scheme(rates, lam=1, dx=1.0, equilibrium_rule=None) -> SchemeDef:
    """Relative-velocity scheme that the cascaded collision should reproduce."""
    s = _rate_vector(rates)
    return make_scheme("d2q9-geier-diagonal", tuple(s[3:]), lam=lam, dx=dx, policy="fluid",
                       equilibrium_rule=equilibrium_rule)
