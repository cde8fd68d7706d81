"""Exact multivariate polynomials and matrices over the rationals.

Coefficients are :class:`fractions.Fraction`.  Exponents are integers; they
are non-negative for ordinary polynomials, but a variable may carry negative
exponents (Laurent monomials), which is how the velocity scale ``lam`` is
kept symbolic in expressions such as ``(X**2 - Y**2) / lam**2``.

Polynomials are immutable.  Terms are kept in graded lexicographic order so
that equality and hashing are structural.
"""

from __future__ import annotations

from fractions import Fraction
from numbers import Rational as _RationalABC
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

Rational = Fraction
Scalar = Union[int, Fraction]


class VariableMismatchError(ValueError):
    """Operands live in polynomial rings with different variable lists."""


class SingularMatrixError(ZeroDivisionError):
    """Raised when exact elimination finds no usable pivot."""

    def __init__(self, pivot_index: int, message: str | None = None):
        self.pivot_index = pivot_index
        super().__init__(message or f"matrix is singular: no pivot in column {pivot_index}")


def _as_fraction(c) -> Fraction:
    if isinstance(c, Fraction):
        return c
    if isinstance(c, (int, _RationalABC)):
        return Fraction(c)
    if isinstance(c, float):
        return Fraction(c)
    raise TypeError(f"cannot use {type(c).__name__} as an exact coefficient")


def _grlex_key(exps: tuple[int, ...]):
    return (sum(exps), exps)


class Polynomial:
    """Sparse polynomial over an ordered list of variables."""

    __slots__ = ("variables", "_terms", "_hash")

    def __init__(self, variables: Sequence[str], terms: Mapping[tuple, Scalar] | None = None):
        variables = tuple(variables)
        if len(set(variables)) != len(variables):
            raise ValueError(f"duplicate variable names in {variables}")
        n = len(variables)
        acc: dict[tuple[int, ...], Fraction] = {}
        for exps, c in (terms or {}).items():
            exps = tuple(int(e) for e in exps)
            if len(exps) != n:
                raise ValueError(f"multi-index {exps} has length {len(exps)}, expected {n}")
            acc[exps] = acc.get(exps, Fraction(0)) + _as_fraction(c)
        items = sorted(((e, c) for e, c in acc.items() if c != 0),
                       key=lambda t: _grlex_key(t[0]), reverse=True)
        self.variables = variables
        self._terms = tuple(items)
        self._hash = None

    # construction helpers -------------------------------------------------

    @classmethod
    def constant(cls, variables: Sequence[str], c: Scalar) -> "Polynomial":
        variables = tuple(variables)
        return cls(variables, {(0,) * len(variables): c})

    @classmethod
    def var(cls, variables: Sequence[str], name: str) -> "Polynomial":
        variables = tuple(variables)
        exps = tuple(1 if v == name else 0 for v in variables)
        if name not in variables:
            raise ValueError(f"{name!r} is not one of {variables}")
        return cls(variables, {exps: 1})

    @classmethod
    def gens(cls, variables: Sequence[str]) -> tuple["Polynomial", ...]:
        return tuple(cls.var(variables, v) for v in variables)

    # inspection -----------------------------------------------------------

    @property
    def terms(self) -> tuple[tuple[tuple[int, ...], Fraction], ...]:
        return self._terms

    def as_dict(self) -> dict[tuple[int, ...], Fraction]:
        return dict(self._terms)

    def coefficient(self, exps: Sequence[int]) -> Fraction:
        exps = tuple(exps)
        for e, c in self._terms:
            if e == exps:
                return c
        return Fraction(0)

    def is_zero(self) -> bool:
        return not self._terms

    def is_constant(self) -> bool:
        return not self._terms or (len(self._terms) == 1 and not any(self._terms[0][0]))

    def is_monomial(self) -> bool:
        return len(self._terms) == 1

    def constant_value(self) -> Fraction:
        if not self.is_constant():
            raise ValueError(f"{self} is not constant")
        return self._terms[0][1] if self._terms else Fraction(0)

    def degree(self, variables: Iterable[str] | None = None) -> int:
        """Total degree, optionally counting only the named variables."""
        if not self._terms:
            return -1
        if variables is None:
            idx = range(len(self.variables))
        else:
            idx = [self.variables.index(v) for v in variables]
        return max(sum(e[i] for i in idx) for e, _ in self._terms)

    def used_variables(self) -> tuple[str, ...]:
        return tuple(v for i, v in enumerate(self.variables)
                     if any(e[i] for e, _ in self._terms))

    # ring plumbing --------------------------------------------------------

    def embed(self, variables: Sequence[str]) -> "Polynomial":
        """Same polynomial viewed in a ring with a superset of variables."""
        variables = tuple(variables)
        if variables == self.variables:
            return self
        pos = []
        for v in self.variables:
            if v not in variables:
                if any(e[self.variables.index(v)] for e, _ in self._terms):
                    raise VariableMismatchError(f"variable {v!r} missing from {variables}")
                pos.append(None)
            else:
                pos.append(variables.index(v))
        out = {}
        for e, c in self._terms:
            new = [0] * len(variables)
            for i, p in enumerate(pos):
                if p is not None:
                    new[p] = e[i]
            out[tuple(new)] = c
        return Polynomial(variables, out)

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if other.variables != self.variables:
                raise VariableMismatchError(
                    f"variable lists differ: {self.variables} vs {other.variables}")
            return other
        return Polynomial.constant(self.variables, _as_fraction(other))

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        try:
            other = self._coerce(other)
        except TypeError:
            return NotImplemented
        acc = dict(self._terms)
        for e, c in other._terms:
            acc[e] = acc.get(e, 0) + c
        return Polynomial(self.variables, acc)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.variables, {e: -c for e, c in self._terms})

    def __sub__(self, other):
        try:
            other = self._coerce(other)
        except TypeError:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Polynomial):
            other = self._coerce(other)
            acc: dict[tuple[int, ...], Fraction] = {}
            for e1, c1 in self._terms:
                for e2, c2 in other._terms:
                    e = tuple(a + b for a, b in zip(e1, e2))
                    acc[e] = acc.get(e, 0) + c1 * c2
            return Polynomial(self.variables, acc)
        try:
            c = _as_fraction(other)
        except TypeError:
            return NotImplemented
        return Polynomial(self.variables, {e: c * k for e, k in self._terms})

    __rmul__ = __mul__

    def inverse(self) -> "Polynomial":
        """Inverse of a single Laurent monomial."""
        if not self.is_monomial():
            raise ZeroDivisionError(f"{self} is not an invertible monomial")
        (e, c), = self._terms
        return Polynomial(self.variables, {tuple(-a for a in e): 1 / c})

    def __truediv__(self, other):
        if isinstance(other, Polynomial):
            return self * self._coerce(other).inverse()
        try:
            c = _as_fraction(other)
        except TypeError:
            return NotImplemented
        return self * (1 / c)

    def __rtruediv__(self, other):
        return self.inverse() * other

    def __pow__(self, n: int):
        if not isinstance(n, int):
            return NotImplemented
        if n < 0:
            return self.inverse() ** (-n)
        result = Polynomial.constant(self.variables, 1)
        base = self
        while n:
            if n & 1:
                result = result * base
            base = base * base
            n >>= 1
        return result

    def __eq__(self, other):
        if isinstance(other, Polynomial):
            return self.variables == other.variables and self._terms == other._terms
        try:
            c = _as_fraction(other)
        except TypeError:
            return NotImplemented
        return self.is_constant() and self.constant_value() == c

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.variables, self._terms))
        return self._hash

    # calculus / substitution ---------------------------------------------

    def partial(self, axis: int | str) -> "Polynomial":
        i = self.variables.index(axis) if isinstance(axis, str) else axis
        out = {}
        for e, c in self._terms:
            if e[i]:
                ne = list(e)
                ne[i] -= 1
                out[tuple(ne)] = c * e[i]
        return Polynomial(self.variables, out)

    def substitute(self, mapping: Mapping[str, object],
                   variables: Sequence[str] | None = None) -> "Polynomial":
        """Compose: replace each mapped variable by a polynomial or scalar.

        The result lives in ``variables`` (default: the unmapped variables of
        ``self`` followed by any new variables the replacements bring in).
        """
        if variables is None:
            variables = [v for v in self.variables if v not in mapping]
            for val in mapping.values():
                if isinstance(val, Polynomial):
                    variables += [v for v in val.variables if v not in variables]
        variables = tuple(variables)
        images = []
        for v in self.variables:
            val = mapping.get(v, None)
            if val is None:
                images.append(Polynomial.var(variables, v))
            elif isinstance(val, Polynomial):
                images.append(val.embed(variables))
            else:
                images.append(Polynomial.constant(variables, _as_fraction(val)))
        cache: dict[tuple[int, int], Polynomial] = {}

        def power(i, k):
            key = (i, k)
            if key not in cache:
                cache[key] = images[i] ** k
            return cache[key]

        total = Polynomial(variables)
        for e, c in self._terms:
            term = Polynomial.constant(variables, c)
            for i, k in enumerate(e):
                if k:
                    term = term * power(i, k)
            total = total + term
        return total

    def evaluate(self, point: Sequence):
        """Value at ``point`` (one entry per variable).

        Exact for rational inputs; also accepts floats or numpy arrays, in
        which case ordinary floating-point arithmetic is used.
        """
        if len(point) != len(self.variables):
            raise ValueError(f"point has length {len(point)}, expected {len(self.variables)}")
        exact = all(isinstance(x, (int, Fraction)) for x in point)
        total = Fraction(0) if exact else 0.0
        for e, c in self._terms:
            term = c if exact else float(c)
            for x, k in zip(point, e):
                if k:
                    term = term * (x ** k if k > 0 else (1 / x) ** (-k))
            total = total + term
        return total

    # display --------------------------------------------------------------

    def __repr__(self):
        return f"Polynomial({self.variables}, {str(self)!r})"

    def __str__(self):
        if not self._terms:
            return "0"
        parts = []
        for e, c in self._terms:
            mono = "*".join(v if k == 1 else f"{v}^{k}"
                            for v, k in zip(self.variables, e) if k)
            if not mono:
                parts.append(str(c))
            elif c == 1:
                parts.append(mono)
            elif c == -1:
                parts.append("-" + mono)
            else:
                parts.append(f"{c}*{mono}")
        return " + ".join(parts).replace("+ -", "- ")


def union_variables(*lists: Sequence[str]) -> tuple[str, ...]:
    out: list[str] = []
    for lst in lists:
        for v in lst:
            if v not in out:
                out.append(v)
    return tuple(out)


def poly_add(p: Polynomial, q: Polynomial) -> Polynomial:
    return p + p._coerce(q)


def poly_mul(p: Polynomial, q: Polynomial) -> Polynomial:
    return p * p._coerce(q)


def poly_shift(p: Polynomial, offset: Sequence, axes: Sequence[str] | None = None) -> Polynomial:
    """``p(X_1 - offset_1, ..., X_d - offset_d)`` expanded exactly.

    ``axes`` names the shifted variables and defaults to the first
    ``len(offset)`` variables of ``p``.  Symbolic offsets may bring new
    variables; they are appended to the ring.
    """
    if axes is None:
        axes = p.variables[:len(offset)]
    if len(axes) != len(offset):
        raise ValueError(f"offset has length {len(offset)}, expected {len(axes)}")
    for a in axes:
        if a not in p.variables:
            raise ValueError(f"{a!r} is not a variable of {p.variables}")
    ring = union_variables(p.variables, *(o.variables for o in offset if isinstance(o, Polynomial)))
    mapping = {}
    for a, o in zip(axes, offset):
        x = Polynomial.var(ring, a)
        mapping[a] = x - (o.embed(ring) if isinstance(o, Polynomial) else _as_fraction(o))
    return p.substitute(mapping, ring)


def poly_eval(p: Polynomial, point: Sequence) -> Fraction:
    return p.evaluate(point)


def poly_partial(p: Polynomial, axis: int | str) -> Polynomial:
    return p.partial(axis)


# ---------------------------------------------------------------------------
# matrices


def _is_zero(x) -> bool:
    return x.is_zero() if isinstance(x, Polynomial) else x == 0


def _invertible(x) -> bool:
    if isinstance(x, Polynomial):
        return x.is_monomial()
    return x != 0


def _inv(x):
    return x.inverse() if isinstance(x, Polynomial) else 1 / x


class RationalMatrix:
    """Dense matrix with exact entries.

    In numeric mode every entry is a Fraction.  In symbolic mode every entry
    is a :class:`Polynomial` over the shared ``variables`` list.
    """

    __slots__ = ("rows", "cols", "entries", "variables")

    def __init__(self, entries: Sequence[Sequence], variables: Sequence[str] | None = None):
        rows = [list(r) for r in entries]
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise ValueError("matrix must be rectangular and non-empty")
        if variables is None:
            found = [e.variables for r in rows for e in r if isinstance(e, Polynomial)]
            variables = union_variables(*found) if found else None
        if variables is None:
            rows = [[_as_fraction(e) for e in r] for r in rows]
        else:
            variables = tuple(variables)
            rows = [[e.embed(variables) if isinstance(e, Polynomial)
                     else Polynomial.constant(variables, _as_fraction(e)) for e in r]
                    for r in rows]
        self.rows = len(rows)
        self.cols = len(rows[0])
        self.entries = tuple(tuple(r) for r in rows)
        self.variables = variables

    @property
    def symbolic(self) -> bool:
        return self.variables is not None

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @classmethod
    def identity(cls, n: int) -> "RationalMatrix":
        return cls([[Fraction(int(i == j)) for j in range(n)] for i in range(n)])

    def __getitem__(self, idx):
        i, j = idx
        return self.entries[i][j]

    def row(self, i: int) -> tuple:
        return self.entries[i]

    def transpose(self) -> "RationalMatrix":
        return RationalMatrix([list(c) for c in zip(*self.entries)], self.variables)

    T = property(transpose)

    def block(self, rows: Sequence[int], cols: Sequence[int]) -> "RationalMatrix":
        return RationalMatrix([[self.entries[i][j] for j in cols] for i in rows], self.variables)

    def map(self, fn) -> "RationalMatrix":
        return RationalMatrix([[fn(e) for e in r] for r in self.entries])

    def substitute(self, mapping, variables=None) -> "RationalMatrix":
        if not self.symbolic:
            return self
        out = [[e.substitute(mapping, variables) for e in r] for r in self.entries]
        if all(e.is_constant() for r in out for e in r):
            return RationalMatrix([[e.constant_value() for e in r] for r in out])
        return RationalMatrix(out)

    def is_zero(self) -> bool:
        return all(_is_zero(e) for r in self.entries for e in r)

    def nonzero_entries(self):
        return [(i, j, e) for i, r in enumerate(self.entries) for j, e in enumerate(r)
                if not _is_zero(e)]

    def __sub__(self, other: "RationalMatrix") -> "RationalMatrix":
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        ring = _matrix_ring(self, other)
        a, b = _lift(self, ring), _lift(other, ring)
        return RationalMatrix([[x - y for x, y in zip(r, s)] for r, s in zip(a, b)], ring)

    def __add__(self, other: "RationalMatrix") -> "RationalMatrix":
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        ring = _matrix_ring(self, other)
        a, b = _lift(self, ring), _lift(other, ring)
        return RationalMatrix([[x + y for x, y in zip(r, s)] for r, s in zip(a, b)], ring)

    def __matmul__(self, other: "RationalMatrix") -> "RationalMatrix":
        return mat_mul(self, other)

    def __eq__(self, other):
        if not isinstance(other, RationalMatrix):
            return NotImplemented
        return self.shape == other.shape and (self - other).is_zero()

    __hash__ = None

    def to_numpy(self) -> np.ndarray:
        if self.symbolic:
            raise ValueError("symbolic matrix has no numeric value; substitute first")
        return np.array([[float(e) for e in r] for r in self.entries])

    def __repr__(self):
        body = "\n".join("  [" + ", ".join(str(e) for e in r) + "]" for r in self.entries)
        return f"RationalMatrix({self.rows}x{self.cols},\n{body})"


def _matrix_ring(*mats: RationalMatrix):
    rings = [m.variables for m in mats if m.variables is not None]
    return union_variables(*rings) if rings else None


def _lift(m: RationalMatrix, ring):
    if ring is None or m.variables == ring:
        return m.entries
    return [[e.embed(ring) if isinstance(e, Polynomial) else Polynomial.constant(ring, e)
             for e in r] for r in m.entries]


def mat_mul(a: RationalMatrix, b: RationalMatrix) -> RationalMatrix:
    if a.cols != b.rows:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ring = _matrix_ring(a, b)
    A, B = _lift(a, ring), _lift(b, ring)
    Bt = list(zip(*B))
    zero = Fraction(0) if ring is None else Polynomial(ring)
    out = []
    for r in A:
        row = []
        for c in Bt:
            acc = zero
            for x, y in zip(r, c):
                if not _is_zero(x) and not _is_zero(y):
                    acc = acc + x * y
            row.append(acc)
        out.append(row)
    return RationalMatrix(out, ring)


def _row_reduce(rows: list[list], ncols: int):
    """Gauss-Jordan in place on the first ``ncols`` columns; returns pivot columns."""
    pivots = []
    r = 0
    nrows = len(rows)
    for c in range(ncols):
        p = next((i for i in range(r, nrows) if not _is_zero(rows[i][c])), None)
        if p is None:
            continue
        if not _invertible(rows[p][c]):
            p = next((i for i in range(r, nrows) if _invertible(rows[i][c])), None)
            if p is None:
                raise SingularMatrixError(c, f"no invertible pivot in column {c}")
        rows[r], rows[p] = rows[p], rows[r]
        inv = _inv(rows[r][c])
        rows[r] = [x * inv for x in rows[r]]
        for i in range(nrows):
            if i != r and not _is_zero(rows[i][c]):
                f = rows[i][c]
                rows[i] = [x - f * y for x, y in zip(rows[i], rows[r])]
        pivots.append(c)
        r += 1
        if r == nrows:
            break
    return pivots


def mat_invert_exact(m: RationalMatrix) -> RationalMatrix:
    """Exact inverse by Gauss-Jordan elimination (first usable pivot).

    Symbolic matrices are accepted as long as every pivot met is a single
    Laurent monomial, which holds for moment matrices whose rows are
    homogeneous in the velocity scale.
    """
    if m.rows != m.cols:
        raise ValueError(f"matrix is not square: {m.shape}")
    n = m.rows
    one = Fraction(1) if not m.symbolic else Polynomial.constant(m.variables, 1)
    zero = Fraction(0) if not m.symbolic else Polynomial(m.variables)
    rows = [list(m.entries[i]) + [one if i == j else zero for j in range(n)] for i in range(n)]
    pivots = _row_reduce(rows, n)
    if len(pivots) < n:
        missing = next(c for c in range(n) if c not in pivots)
        raise SingularMatrixError(missing)
    return RationalMatrix([r[n:] for r in rows], m.variables)


def solve_exact(a: RationalMatrix, b: Sequence) -> list:
    """Unique exact solution of ``a x = b`` for a possibly overdetermined system.

    Raises ``ValueError`` if the system is inconsistent and
    :class:`SingularMatrixError` if the solution is not unique.
    """
    if len(b) != a.rows:
        raise ValueError(f"right-hand side has length {len(b)}, expected {a.rows}")
    ring = a.variables
    if ring is None:
        rhs = [_as_fraction(x) if not isinstance(x, Polynomial) else x for x in b]
        if any(isinstance(x, Polynomial) for x in rhs):
            ring = union_variables(*(x.variables for x in rhs if isinstance(x, Polynomial)))
    if ring is not None:
        lift = lambda x: x.embed(ring) if isinstance(x, Polynomial) else Polynomial.constant(ring, x)
        rows = [[lift(x) for x in r] + [lift(y)] for r, y in zip(a.entries, b)]
    else:
        rows = [list(r) + [_as_fraction(y)] for r, y in zip(a.entries, b)]
    pivots = _row_reduce(rows, a.cols)
    for r in rows[len(pivots):]:
        if not _is_zero(r[-1]):
            raise ValueError("system is inconsistent: right-hand side is outside the column span")
    if len(pivots) < a.cols:
        missing = next(c for c in range(a.cols) if c not in pivots)
        raise SingularMatrixError(missing, "solution is not unique")
    return [rows[i][-1] for i in range(a.cols)]
