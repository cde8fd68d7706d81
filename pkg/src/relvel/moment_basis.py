"""Velocity sets, moment bases, moment and shifting matrices.

The velocity scale ``lam`` is either a number (simulation mode) or the
symbol ``"lam"`` (verification mode).  With a symbolic scale, basis
polynomials live in the ring ``(X, Y, lam)`` and carry negative powers of
``lam``; relative velocities are the symbols ``u1, u2`` (and ``v1, v2``
for the second frame change in the morphism check).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

from .polyalg import (
    Polynomial,
    RationalMatrix,
    mat_invert_exact,
    mat_mul,
    solve_exact,
    union_variables,
)

LAM = "lam"
SPACE = ("X", "Y")

D2Q9_DIRECTIONS = (
    (0, 0), (1, 0), (0, 1), (-1, 0), (0, -1),
    (1, 1), (-1, 1), (-1, -1), (1, -1),
)


def symbolic_scale() -> Polynomial:
    return Polynomial.var((LAM,), LAM)


def symbolic_velocity(prefix: str = "u", d: int = 2) -> tuple[Polynomial, ...]:
    names = tuple(f"{prefix}{i + 1}" for i in range(d))
    return Polynomial.gens(names)


def _scale_vars(lam) -> tuple[str, ...]:
    return lam.variables if isinstance(lam, Polynomial) else ()


@dataclass(frozen=True)
class VelocitySet:
    """Discrete velocities ``v_j = c_j * lam`` with integer directions ``c_j``."""

    directions: tuple[tuple[int, ...], ...]
    lam: object = 1
    dx: object = 1

    def __post_init__(self):
        dirs = tuple(tuple(Fraction(c) for c in cj) for cj in self.directions)
        d = len(dirs[0])
        for cj in dirs:
            if len(cj) != d:
                raise ValueError("all velocities need the same dimension")
            if any(c.denominator != 1 for c in cj):
                raise ValueError(f"direction {cj} does not land on lattice nodes")
        object.__setattr__(self, "directions", tuple(tuple(int(c) for c in cj) for cj in dirs))
        if not isinstance(self.lam, Polynomial):
            object.__setattr__(self, "lam", Fraction(self.lam))

    @property
    def d(self) -> int:
        return len(self.directions[0])

    @property
    def q(self) -> int:
        return len(self.directions)

    @property
    def dt(self):
        # acoustic scaling: the time step is never chosen independently
        return self.dx / self.lam

    @property
    def velocities(self) -> tuple[tuple, ...]:
        return tuple(tuple(c * self.lam for c in cj) for cj in self.directions)

    def numeric(self) -> "VelocitySet":
        if isinstance(self.lam, Polynomial):
            raise ValueError("velocity scale is symbolic")
        return self

    def as_float(self):
        import numpy as np
        return np.array(self.directions, dtype=float) * float(self.lam)


def d2q9(lam=1, dx=1) -> VelocitySet:
    """D2Q9: rest, four axis and four diagonal velocities, in that order."""
    return VelocitySet(D2Q9_DIRECTIONS, lam, dx)


@dataclass(frozen=True)
class MomentBasis:
    name: str
    polynomials: tuple[Polynomial, ...]
    lam: object = 1
    space: tuple[str, ...] = SPACE

    def __post_init__(self):
        d = len(self.space)
        ring = self.polynomials[0].variables
        if any(p.variables != ring for p in self.polynomials):
            raise ValueError("basis polynomials must share one ring")
        if ring[:d] != self.space:
            raise ValueError(f"ring {ring} must start with the space variables {self.space}")
        if self.polynomials[0] != 1:
            raise ValueError("P_0 must be the constant 1")
        for a in range(d):
            if self.polynomials[a + 1] != Polynomial.var(ring, self.space[a]):
                raise ValueError(f"P_{a + 1} must be {self.space[a]}")

    @property
    def ring(self) -> tuple[str, ...]:
        return self.polynomials[0].variables

    @property
    def d(self) -> int:
        return len(self.space)

    @property
    def q(self) -> int:
        return len(self.polynomials)

    @property
    def conserved(self) -> int:
        return self.d + 1

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(p.degree(self.space) for p in self.polynomials)

    def degree_groups(self) -> list[list[int]]:
        """Consecutive runs of equal degree, e.g. [[0], [1, 2], [3, 4, 5], ...]."""
        groups: list[list[int]] = []
        for k, deg in enumerate(self.degrees):
            if groups and self.degrees[groups[-1][0]] == deg:
                groups[-1].append(k)
            else:
                groups.append([k])
        return groups

    def replace(self, k: int, poly: Polynomial, name: str | None = None) -> "MomentBasis":
        polys = list(self.polynomials)
        polys[k] = poly
        return MomentBasis(name or f"{self.name}*", tuple(polys), self.lam, self.space)


def _ring_and_gens(lam):
    ring = SPACE + _scale_vars(lam)
    X, Y = Polynomial.var(ring, "X"), Polynomial.var(ring, "Y")
    L = lam.embed(ring) if isinstance(lam, Polynomial) else Fraction(lam)
    one = Polynomial.constant(ring, 1)
    return ring, one, X, Y, L


def d2q9_orthogonal(lam=1) -> MomentBasis:
    _, one, X, Y, L = _ring_and_gens(lam)
    r2 = X**2 + Y**2
    polys = (
        one, X, Y,
        (3 * r2 - 4 * L**2) / L**2,
        (X**2 - Y**2) / L**2,
        X * Y / L**2,
        X * (3 * r2 - 5 * L**2) / L**3,
        Y * (3 * r2 - 5 * L**2) / L**3,
        (Fraction(9, 2) * r2**2 - Fraction(21, 2) * L**2 * r2 + 4 * L**4) / L**4,
    )
    return MomentBasis("d2q9-orthogonal", polys, lam)


def d2q9_geier_diagonal(lam=1) -> MomentBasis:
    _, one, X, Y, _ = _ring_and_gens(lam)
    polys = (one, X, Y, X**2 + Y**2, X**2 - Y**2, X * Y, X * Y**2, X**2 * Y, X**2 * Y**2)
    return MomentBasis("d2q9-geier-diagonal", polys, lam)


def d2q9_geier_raw(lam=1) -> MomentBasis:
    _, one, X, Y, _ = _ring_and_gens(lam)
    polys = (one, X, Y, X**2, Y**2, X * Y, X * Y**2, X**2 * Y, X**2 * Y**2)
    return MomentBasis("d2q9-geier-raw", polys, lam)


BASES: dict[str, Callable[..., MomentBasis]] = {
    "d2q9-orthogonal": d2q9_orthogonal,
    "d2q9-geier-diagonal": d2q9_geier_diagonal,
    "d2q9-geier-raw": d2q9_geier_raw,
}


def get_basis(name: str, lam=1) -> MomentBasis:
    try:
        return BASES[name](lam)
    except KeyError:
        raise ValueError(f"unknown basis {name!r}; choose from {sorted(BASES)}") from None


# ---------------------------------------------------------------------------
# moment and shifting matrices


def _check_pair(basis: MomentBasis, vs: VelocitySet):
    if basis.d != vs.d or basis.q != vs.q:
        raise ValueError(f"basis is D{basis.d}Q{basis.q} but velocity set is D{vs.d}Q{vs.q}")


def build_moment_matrix(basis: MomentBasis, vs: VelocitySet, u=None) -> RationalMatrix:
    """``M_kj(u) = P_k(v_j - u)``; ``u`` may be None (zero), rational or symbolic."""
    _check_pair(basis, vs)
    d = basis.d
    if u is None:
        u = (0,) * d
    if len(u) != d:
        raise ValueError(f"relative velocity has length {len(u)}, expected {d}")
    extra = [p.variables for p in u if isinstance(p, Polynomial)]
    ring = union_variables(basis.ring[d:], _scale_vars(vs.lam), *extra)
    lift = lambda x: x.embed(ring) if isinstance(x, Polynomial) else Polynomial.constant(ring, Fraction(x))
    rows = []
    for p in basis.polynomials:
        row = []
        for vj in vs.velocities:
            mapping = {basis.space[a]: lift(vj[a]) - lift(u[a]) for a in range(d)}
            row.append(p.substitute(mapping, ring))
        rows.append(row)
    if not ring or all(e.is_constant() for r in rows for e in r):
        return RationalMatrix([[e.constant_value() for e in r] for r in rows])
    return RationalMatrix(rows, ring)


def shifting_matrix(basis: MomentBasis, vs: VelocitySet, u=None, m0_inv: RationalMatrix | None = None
                    ) -> RationalMatrix:
    """``T(u) = M(u) M(0)^{-1}``."""
    if m0_inv is None:
        m0_inv = mat_invert_exact(build_moment_matrix(basis, vs))
    return mat_mul(build_moment_matrix(basis, vs, u), m0_inv)


def _zero_like(m: RationalMatrix):
    return Polynomial(m.variables) if m.symbolic else Fraction(0)


def block_structure(t: RationalMatrix, groups: list[list[int]]) -> tuple[bool, tuple | None]:
    """Check block lower triangularity with identity diagonal blocks."""
    gid = {k: g for g, members in enumerate(groups) for k in members}
    for i in range(t.rows):
        for j in range(t.cols):
            e = t[i, j]
            if gid[j] > gid[i]:
                expected = 0
            elif gid[j] == gid[i]:
                expected = int(i == j)
            else:
                continue
            if not (e == expected):
                return False, (i, j, expected, e)
    return True, None


# ---------------------------------------------------------------------------
# closed-form blocks of the shifting matrix


BLOCK_LAYOUT = {
    # name: (row indices, column indices) inside the 9x9 shifting matrix
    "A": ([1, 2], [0]),
    "B1": ([3, 4, 5], [0]),
    "B2": ([3, 4, 5], [1, 2]),
    "C1": ([6, 7], [0]),
    "C2": ([6, 7], [1, 2]),
    "C3": ([6, 7], [3, 4, 5]),
    "D1": ([8], [0]),
    "D2": ([8], [1, 2]),
    "D3": ([8], [3, 4, 5]),
    "D4": ([8], [6, 7]),
}


def shifting_block_formulas(lam, u, halved_d2: bool = False) -> dict[str, list[list]]:
    """Closed forms of the off-diagonal blocks of T(u) for the orthogonal D2Q9 basis.

    The D2 prefactor is 9/lam^4.  ``halved_d2=True`` swaps in 9/(2 lam^4),
    a tempting slip that breaks T(u+v) = T(u)T(v); the tests use it as a
    negative control.
    """
    u1, u2 = u
    L = lam
    n2 = u1**2 + u2**2
    d2 = Fraction(9, 2) if halved_d2 else Fraction(9)
    return {
        "A": [[-u1], [-u2]],
        "B1": [[3 * n2 / L**2], [(u1**2 - u2**2) / L**2], [u1 * u2 / L**2]],
        "B2": [[-6 * u1 / L**2, -6 * u2 / L**2],
               [-2 * u1 / L**2, 2 * u2 / L**2],
               [-u2 / L**2, -u1 / L**2]],
        "C1": [[-3 * u1 * (n2 + L**2) / L**3], [-3 * u2 * (n2 + L**2) / L**3]],
        "C2": [[3 * (n2 + 2 * u1**2) / L**3, 6 * u1 * u2 / L**3],
               [6 * u1 * u2 / L**3, 3 * (n2 + 2 * u2**2) / L**3]],
        "C3": [[-2 * u1 / L, -3 * u1 / L, -6 * u2 / L],
               [-2 * u2 / L, 3 * u2 / L, -6 * u1 / L]],
        "D1": [[Fraction(9, 2) * (n2**2 + 3 * L**2 * n2) / L**4]],
        "D2": [[-d2 * u1 * (L**2 + 2 * n2) / L**4,
                -d2 * u2 * (L**2 + 2 * n2) / L**4]],
        "D3": [[6 * n2 / L**2, 9 * (u1**2 - u2**2) / L**2, 36 * u1 * u2 / L**2]],
        "D4": [[-6 * u1 / L, -6 * u2 / L]],
    }


@dataclass
class BlockCheck:
    name: str
    passed: bool
    witness: tuple | None = None  # (row, col, expected, actual)


@dataclass
class BlockReport:
    blocks: list[BlockCheck]
    structure_ok: bool
    structure_witness: tuple | None = None

    @property
    def passed(self) -> bool:
        return self.structure_ok and all(b.passed for b in self.blocks)

    def lines(self) -> list[str]:
        out = []
        for b in self.blocks:
            line = f"block {b.name:<3} {'PASS' if b.passed else 'FAIL'}"
            if b.witness:
                i, j, exp, act = b.witness
                line += f"  T[{i},{j}]: expected {exp}, got {act}"
            out.append(line)
        s = "structure   " + ("PASS" if self.structure_ok else f"FAIL {self.structure_witness}")
        out.append(s)
        out.append(f"{sum(b.passed for b in self.blocks)}/{len(self.blocks)} blocks match")
        return out


def verify_shift_blocks(basis: MomentBasis | None = None, vs: VelocitySet | None = None,
                        halved_d2: bool = False) -> BlockReport:
    """Compare the symbolic shifting matrix against the closed-form blocks.

    Entries are compared as exact polynomials in ``(lam, u1, u2)``.
    """
    lam = symbolic_scale()
    basis = basis or d2q9_orthogonal(lam)
    vs = vs or d2q9(lam)
    u = symbolic_velocity("u")
    t = shifting_matrix(basis, vs, u)
    ring = t.variables
    lift = lambda x: x.embed(ring) if isinstance(x, Polynomial) else Polynomial.constant(ring, x)
    L = lift(lam)
    uu = tuple(lift(c) for c in u)
    formulas = shifting_block_formulas(L, uu, halved_d2)
    checks = []
    for name, (rows, cols) in BLOCK_LAYOUT.items():
        witness = None
        for a, i in enumerate(rows):
            for b, j in enumerate(cols):
                exp = lift(formulas[name][a][b])
                if t[i, j] != exp:
                    witness = (i, j, exp, t[i, j])
                    break
            if witness:
                break
        checks.append(BlockCheck(name, witness is None, witness))
    ok, w = block_structure(t, [[0], [1, 2], [3, 4, 5], [6, 7], [8]])
    return BlockReport(checks, ok, w)


# ---------------------------------------------------------------------------
# group morphism


@dataclass
class MorphismResult:
    holds: bool
    commutes: bool
    witness: tuple | None = None  # (identity name, row, col, nonzero polynomial)

    def __bool__(self):
        return self.holds and self.commutes


def symbolic_shifting_matrices(basis: MomentBasis, vs: VelocitySet):
    """Return ``(T(u), T(v), T(u+v))`` with symbolic ``u`` and ``v`` in a common ring."""
    u = symbolic_velocity("u", basis.d)
    v = symbolic_velocity("v", basis.d)
    tu = shifting_matrix(basis, vs, u)
    ring = union_variables(tu.variables, *(x.variables for x in v))
    names_u = [f"u{a + 1}" for a in range(basis.d)]
    names_v = [f"v{a + 1}" for a in range(basis.d)]
    gen = {n: Polynomial.var(ring, n) for n in names_u + names_v}
    tu = tu.substitute({}, ring)
    tv = tu.substitute({nu: gen[nv] for nu, nv in zip(names_u, names_v)}, ring)
    tuv = tu.substitute({nu: gen[nu] + gen[nv] for nu, nv in zip(names_u, names_v)}, ring)
    return tu, tv, tuv


def check_group_morphism(basis: MomentBasis, vs: VelocitySet) -> MorphismResult:
    """Polynomial-identity check of ``T(u+v) = T(u)T(v) = T(v)T(u)``."""
    tu, tv, tuv = symbolic_shifting_matrices(basis, vs)
    prod = mat_mul(tu, tv)
    diff = tuv - prod
    nz = diff.nonzero_entries()
    if nz:
        i, j, e = nz[0]
        return MorphismResult(False, False, ("T(u+v) - T(u)T(v)", i, j, e))
    comm = prod - mat_mul(tv, tu)
    nz = comm.nonzero_entries()
    if nz:
        i, j, e = nz[0]
        return MorphismResult(True, False, ("T(u)T(v) - T(v)T(u)", i, j, e))
    return MorphismResult(True, True)


# ---------------------------------------------------------------------------
# basis expansion


@dataclass
class BasisExpansion:
    basis: MomentBasis
    target: Polynomial
    coefficients: tuple

    def resynthesize(self) -> Polynomial:
        total = Polynomial(self.basis.ring)
        for a, p in zip(self.coefficients, self.basis.polynomials):
            total = total + p * (a.embed(self.basis.ring) if isinstance(a, Polynomial) else a)
        return total


def expand_in_basis(basis: MomentBasis, target: Polynomial) -> BasisExpansion:
    """Exact coefficients ``a_l`` with ``sum_l a_l P_l = target``.

    With a symbolic scale the coefficients are Laurent monomials in ``lam``.
    """
    target = target.embed(basis.ring)
    d = basis.d
    params = basis.ring[d:]

    def split(p: Polynomial) -> dict:
        # group by the space part of the multi-index; the rest is a coefficient
        out: dict[tuple, dict] = {}
        for e, c in p.terms:
            out.setdefault(e[:d], {})[e[d:]] = c
        return out

    parts = [split(p) for p in basis.polynomials]
    tpart = split(target)
    monos = sorted(set().union(tpart, *parts), key=lambda e: (sum(e), e))

    def coeff(part, mono):
        terms = part.get(mono, {})
        if not params:
            return terms.get((), Fraction(0))
        return Polynomial(params, terms)

    a = RationalMatrix([[coeff(part, m) for part in parts] for m in monos],
                       params if params else None)
    b = [coeff(tpart, m) for m in monos]
    try:
        sol = solve_exact(a, b)
    except ValueError as exc:
        raise ValueError(f"{target} is not in the span of basis {basis.name}") from exc
    if params:
        sol = [x.constant_value() if x.is_constant() else x for x in sol]
    return BasisExpansion(basis, target, tuple(sol))
