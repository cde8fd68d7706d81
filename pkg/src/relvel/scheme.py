"""DdQq lattice Boltzmann scheme with relaxation in a moving frame.

Distributions are stored as arrays of shape ``(q, n1, ..., nd)``.  Per-node
matrices are stored with the two matrix indices first, ``(q, q, n1, ...)``,
so that slicing a row or column is cheap.  Small matrix-vector products are
written as explicit accumulations over the moment index; this fixes the
floating-point summation order and makes results independent of how the
grid is split between workers.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .moment_basis import (
    MomentBasis,
    VelocitySet,
    build_moment_matrix,
    d2q9,
    get_basis,
    symbolic_velocity,
)
from .polyalg import RationalMatrix, mat_invert_exact, solve_exact

RHO_MIN = 1e-12
WORKERS_ENV = "RELVEL_WORKERS"


class DensityUnderflowError(FloatingPointError):
    def __init__(self, node, rho):
        self.node = tuple(int(i) for i in node)
        self.rho = float(rho)
        super().__init__(f"density {self.rho:.3e} below {RHO_MIN:g} at node {self.node}")


class InstabilityError(FloatingPointError):
    def __init__(self, step):
        self.step = step
        super().__init__(f"non-finite distribution detected at step {step}")


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class RelaxationRates:
    """One rate per moment; conserved moments have rate exactly 0."""

    values: tuple[float, ...]
    n_conserved: int

    def __post_init__(self):
        vals = tuple(float(s) for s in self.values)
        object.__setattr__(self, "values", vals)
        for k, s in enumerate(vals):
            if k < self.n_conserved:
                if s != 0.0:
                    raise ValueError(f"rate s_{k} of a conserved moment must be 0, got {s}")
            elif not 0.0 < s < 2.0:
                raise ValueError(f"rate s_{k} = {s} outside the open interval (0, 2)")

    @classmethod
    def from_nonconserved(cls, rates: Sequence[float], d: int = 2) -> "RelaxationRates":
        return cls((0.0,) * (d + 1) + tuple(rates), d + 1)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.values)

    @property
    def sigma(self) -> np.ndarray:
        """``1/s_k - 1/2`` for non-conserved moments, NaN for conserved ones."""
        s = self.array
        out = np.full_like(s, np.nan)
        out[self.n_conserved:] = 1.0 / s[self.n_conserved:] - 0.5
        return out

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class VelocityFieldPolicy:
    """How the relative velocity field is chosen at each collision."""

    kind: str = "zero"
    value: tuple[float, ...] | None = None
    function: Callable | None = None

    KINDS = ("zero", "constant", "fluid", "prescribed")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "constant" and self.value is None:
            raise ValueError("constant policy needs a value")
        if self.kind == "prescribed" and self.function is None:
            raise ValueError("prescribed policy needs a function of (x, t)")

    @classmethod
    def parse(cls, text: str) -> "VelocityFieldPolicy":
        text = text.strip()
        if text in ("zero", "fluid"):
            return cls(text)
        if text.startswith("constant:"):
            vals = tuple(float(x) for x in text.split(":", 1)[1].split(","))
            return cls("constant", vals)
        raise ValueError(f"cannot parse policy {text!r}; use zero, fluid or constant:cx,cy")

    def __str__(self):
        if self.kind == "constant":
            return "constant:" + ",".join(repr(v) for v in self.value)
        return self.kind

    @property
    def is_uniform(self) -> bool:
        return self.kind in ("zero", "constant")


# ---------------------------------------------------------------------------
# equilibrium


def lattice_weights(vs: VelocitySet) -> tuple[Fraction, ...]:
    """Weights of the second-order polynomial equilibrium, from moment constraints.

    One unknown per speed shell.  The constraints are normalisation,
    ``sum w vx^2 = lam^2/3`` and ``sum w vx^2 vy^2 = lam^4/9``; the remaining
    isotropy condition ``sum w vx^4 = lam^4/3`` is checked afterwards.
    """
    if vs.d != 2:
        raise NotImplementedError("weights are derived for two-dimensional sets only")
    shells = sorted({sum(c * c for c in cj) for cj in vs.directions})
    if len(shells) != 3:
        raise ValueError("expected three speed shells (rest, axis, diagonal)")
    members = [[j for j, cj in enumerate(vs.directions) if sum(c * c for c in cj) == r] for r in shells]
    c = vs.directions

    def shell_sum(fn):
        return [sum(Fraction(fn(c[j])) for j in m) for m in members]

    a = RationalMatrix([
        shell_sum(lambda cj: 1),
        shell_sum(lambda cj: cj[0] ** 2),
        shell_sum(lambda cj: cj[0] ** 2 * cj[1] ** 2),
    ])
    w_shell = solve_exact(a, [Fraction(1), Fraction(1, 3), Fraction(1, 9)])
    check = sum(w * s for w, s in zip(w_shell, shell_sum(lambda cj: cj[0] ** 4)))
    if check != Fraction(1, 3):
        raise ValueError("velocity set does not admit an isotropic second-order equilibrium")
    w = [Fraction(0)] * vs.q
    for ws, m in zip(w_shell, members):
        for j in m:
            w[j] = ws
    return tuple(w)


def polynomial_equilibrium(rho, u, velocities: np.ndarray, weights: np.ndarray, cs2: float):
    """``w_j rho (1 + v.u/cs2 + (v.u)^2/(2 cs2^2) - |u|^2/(2 cs2))``."""
    rho = np.asarray(rho, dtype=float)
    u = np.asarray(u, dtype=float)
    usq = sum(u[a] ** 2 for a in range(u.shape[0]))
    out = np.empty((len(weights),) + rho.shape)
    for j, (vj, wj) in enumerate(zip(velocities, weights)):
        vu = sum(vj[a] * u[a] for a in range(u.shape[0]))
        out[j] = wj * rho * (1.0 + vu / cs2 + 0.5 * vu * vu / (cs2 * cs2) - 0.5 * usq / cs2)
    return out


# ---------------------------------------------------------------------------
# scheme definition


def _matvec(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``y_k = sum_j m[k, j] x[j]`` with a fixed summation order."""
    q = m.shape[0]
    out = np.empty((q,) + np.broadcast_shapes(m.shape[2:], x.shape[1:]))
    for k in range(q):
        acc = m[k, 0] * x[0]
        for j in range(1, m.shape[1]):
            acc = acc + m[k, j] * x[j]
        out[k] = acc
    return out


@dataclass
class SchemeDef:
    """One DdQq scheme with relative velocities (numeric mode)."""

    velocity_set: VelocitySet
    basis: MomentBasis
    rates: RelaxationRates
    policy: VelocityFieldPolicy = field(default_factory=VelocityFieldPolicy)
    equilibrium_rule: Callable | None = None
    # derived
    weights: tuple = field(init=False)
    m0: np.ndarray = field(init=False, repr=False)
    m0_inv: np.ndarray = field(init=False, repr=False)
    inverse_check: float = field(init=False)

    def __post_init__(self):
        vs, basis = self.velocity_set, self.basis
        if vs.d != basis.d or vs.q != basis.q or len(self.rates) != vs.q:
            raise ValueError("velocity set, basis and rates disagree on d or q")
        if self.rates.n_conserved != vs.d + 1:
            raise ValueError("rates must mark exactly d+1 conserved moments")
        self.lam = float(vs.lam)
        self.dx = float(vs.dx)
        self.dt = self.dx / self.lam
        self.v = vs.as_float()  # (q, d)
        self.weights = lattice_weights(vs)
        self.w = np.array([float(x) for x in self.weights])
        self.cs2 = float(sum(w * c[0] ** 2 for w, c in zip(self.weights, vs.directions)) * vs.lam ** 2)
        m0 = build_moment_matrix(basis, vs)
        self.m0 = m0.to_numpy()
        self.m0_inv = mat_invert_exact(m0).to_numpy()
        # P_k(v_j - u) as polynomials in u; evaluated per node from monomials
        mu = build_moment_matrix(basis, vs, symbolic_velocity("u", vs.d))
        exps = sorted({e for r in mu.entries for p in r for e, _ in p.terms}, key=lambda e: (sum(e), e))
        index = {e: i for i, e in enumerate(exps)}
        coef = np.zeros((vs.q, vs.q, len(exps)))
        for k, r in enumerate(mu.entries):
            for j, p in enumerate(r):
                for e, c in p.terms:
                    coef[k, j, index[e]] = float(c)
        self._exps = exps
        self._coef = coef
        self._uniform_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        self.inverse_check = self._validate_inverse()

    def _validate_inverse(self) -> float:
        u = (self.velocity_set.lam / 10, -self.velocity_set.lam / 20)[: self.velocity_set.d]
        exact = mat_invert_exact(build_moment_matrix(self.basis, self.velocity_set, u)).to_numpy()
        numeric = np.linalg.inv(self.moment_matrix(np.array([float(x) for x in u])))
        err = float(np.max(np.abs(numeric - exact)) / np.max(np.abs(exact)))
        if err > 1e-12:
            raise ArithmeticError(f"numeric inverse of M(u) off by {err:.2e} at sample u")
        return err

    # -- derived views ----------------------------------------------------

    @property
    def d(self) -> int:
        return self.velocity_set.d

    @property
    def q(self) -> int:
        return self.velocity_set.q

    @property
    def s(self) -> np.ndarray:
        return self.rates.array

    def with_policy(self, policy: VelocityFieldPolicy) -> "SchemeDef":
        return SchemeDef(self.velocity_set, self.basis, self.rates, policy, self.equilibrium_rule)

    def equilibrium(self, rho, u) -> np.ndarray:
        if self.equilibrium_rule is not None:
            return self.equilibrium_rule(rho, u, self)
        return polynomial_equilibrium(rho, u, self.v, self.w, self.cs2)

    def moment_matrix(self, u: np.ndarray) -> np.ndarray:
        """Numeric ``M(u)``: shape (q, q) for a constant u, (q, q, *grid) for a field."""
        u = np.asarray(u, dtype=float)
        mono = []
        for e in self._exps:
            term = np.ones(u.shape[1:])
            for a, k in enumerate(e):
                if k:
                    term = term * u[a] ** k
            mono.append(term)
        out = np.zeros((self.q, self.q) + u.shape[1:])
        expand = (slice(None), slice(None)) + (None,) * (u.ndim - 1)
        for i, m in enumerate(mono):
            out = out + self._coef[(slice(None), slice(None), i)][expand] * m
        return out

    def uniform_matrices(self, u: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
        key = tuple(float(x) for x in u)
        if key not in self._uniform_cache:
            if not any(key):
                self._uniform_cache[key] = (self.m0, self.m0_inv)
            else:
                m = self.moment_matrix(np.array(key))
                self._uniform_cache[key] = (m, np.linalg.inv(m))
        return self._uniform_cache[key]

    def matrices(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            return self.uniform_matrices(u)
        m = self.moment_matrix(u)
        inv = np.moveaxis(np.linalg.inv(np.moveaxis(m, (0, 1), (-2, -1))), (-2, -1), (0, 1))
        return m, inv


def make_scheme(basis: str = "d2q9-orthogonal", rates: Sequence[float] | RelaxationRates = (1.0,) * 6,
                lam=1, dx=1.0, policy: VelocityFieldPolicy | str = "zero",
                equilibrium_rule=None) -> SchemeDef:
    vs = d2q9(lam, dx)
    b = get_basis(basis, vs.lam)
    if not isinstance(rates, RelaxationRates):
        rates = RelaxationRates.from_nonconserved(rates, vs.d)
    if isinstance(policy, str):
        policy = VelocityFieldPolicy.parse(policy)
    return SchemeDef(vs, b, rates, policy, equilibrium_rule)


# ---------------------------------------------------------------------------
# state


@dataclass
class LatticeState:
    f: np.ndarray
    dx: float
    t: int = 0

    @property
    def q(self) -> int:
        return self.f.shape[0]

    @property
    def extents(self) -> tuple[int, ...]:
        return self.f.shape[1:]

    def copy(self) -> "LatticeState":
        return LatticeState(self.f.copy(), self.dx, self.t)

    def node_coordinates(self) -> list[np.ndarray]:
        """Node centres ``(i + 1/2) dx`` along each axis, as broadcastable grids."""
        axes = [(np.arange(n) + 0.5) * self.dx for n in self.extents]
        return np.meshgrid(*axes, indexing="ij")


@dataclass
class MacroFields:
    rho: np.ndarray
    q: np.ndarray

    @property
    def u(self) -> np.ndarray:
        return self.q / self.rho


def moments_rho_q(f: np.ndarray, v: np.ndarray):
    rho = f[0].copy()
    for j in range(1, f.shape[0]):
        rho = rho + f[j]
    q = np.empty((v.shape[1],) + f.shape[1:])
    for a in range(v.shape[1]):
        acc = v[0, a] * f[0]
        for j in range(1, f.shape[0]):
            acc = acc + v[j, a] * f[j]
        q[a] = acc
    return rho, q


def macro_fields(state: LatticeState, scheme: SchemeDef) -> MacroFields:
    rho, q = moments_rho_q(state.f, scheme.v)
    return MacroFields(rho, q)


def equilibrium(rho, u, scheme: SchemeDef) -> np.ndarray:
    if np.any(np.asarray(rho) <= 0):
        raise ValueError("equilibrium needs a positive density")
    return scheme.equilibrium(rho, u)


def compute_moments(f: np.ndarray, u, scheme: SchemeDef) -> np.ndarray:
    """``m(u) = M(u) f`` for one node or a whole grid."""
    m, _ = scheme.matrices(np.asarray(u, dtype=float))
    return _matvec(m, np.asarray(f, dtype=float))


def relax_moments(m: np.ndarray, meq: np.ndarray, rates) -> np.ndarray:
    s = rates.array if isinstance(rates, RelaxationRates) else np.asarray(rates, dtype=float)
    if len(s) != len(m) or len(meq) != len(m):
        raise ValueError("moment vectors and rates must have equal length")
    s = s.reshape((-1,) + (1,) * (np.ndim(m) - 1))
    return m + s * (meq - m)


def relative_velocity(f: np.ndarray, scheme: SchemeDef, t_phys: float = 0.0, coords=None,
                      rho=None, q=None) -> np.ndarray:
    """Relative velocity for a grid of distributions, per the scheme's policy."""
    pol = scheme.policy
    if pol.kind == "zero":
        return np.zeros(scheme.d)
    if pol.kind == "constant":
        return np.array(pol.value, dtype=float)
    if pol.kind == "fluid":
        if rho is None:
            rho, q = moments_rho_q(f, scheme.v)
        bad = rho <= RHO_MIN
        if np.any(bad):
            node = np.argwhere(bad)[0]
            raise DensityUnderflowError(node, rho[tuple(node)])
        return q / rho
    return np.asarray(pol.function(coords, t_phys), dtype=float)


def collide(f: np.ndarray, scheme: SchemeDef, u) -> np.ndarray:
    """Post-collision distributions ``M(u)^{-1} [m(u) + S (m_eq(u) - m(u))]``."""
    f = np.asarray(f, dtype=float)
    u = np.asarray(u, dtype=float)
    rho, q = moments_rho_q(f, scheme.v)
    feq = scheme.equilibrium(rho, q / rho)
    m, inv = scheme.matrices(u)
    mom = _matvec(m, f)
    meq = _matvec(m, feq)
    mstar = relax_moments(mom, meq, scheme.rates)
    return _matvec(inv, mstar)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def collide_grid(state: LatticeState, scheme: SchemeDef, workers: int | None = None) -> np.ndarray:
    """Collision at every node, evaluating the relative velocity per policy."""
    f = state.f
    t_phys = state.t * scheme.dt
    coords = state.node_coordinates() if scheme.policy.kind == "prescribed" else None
    u = relative_velocity(f, scheme, t_phys, coords)
    workers = workers or _workers()
    n = f.shape[1]
    if workers == 1 or n < 2 * workers:
        return collide(f, scheme, u)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    out = np.empty_like(f)

    def work(i):
        sl = slice(bounds[i], bounds[i + 1])
        uu = u if u.ndim == 1 else u[:, sl]
        out[:, sl] = collide(f[:, sl], scheme, uu)

    with ThreadPoolExecutor(workers) as ex:
        list(ex.map(work, range(workers)))
    return out


def stream_populations(fstar: np.ndarray, directions) -> np.ndarray:
    """Periodic transport ``f_j(x + c_j) <- f*_j(x)`` into a fresh buffer."""
    out = np.empty_like(fstar)
    axes = tuple(range(fstar.ndim - 1))
    for j, cj in enumerate(directions):
        out[j] = np.roll(fstar[j], shift=tuple(cj), axis=axes)
    return out


def stream(state: LatticeState, scheme: SchemeDef | None = None, fstar: np.ndarray | None = None
           ) -> LatticeState:
    directions = scheme.velocity_set.directions if scheme is not None else _default_dirs(state.q)
    src = state.f if fstar is None else fstar
    return LatticeState(stream_populations(src, directions), state.dx, state.t + 1)


def _default_dirs(q):
    if q != 9:
        raise ValueError("pass the scheme to stream a non-D2Q9 state")
    return d2q9().directions


def step(state: LatticeState, scheme: SchemeDef, workers: int | None = None) -> LatticeState:
    fstar = collide_grid(state, scheme, workers)
    return stream(state, scheme, fstar)


def run(state: LatticeState, scheme: SchemeDef, steps: int, callback=None, step_fn=None
        ) -> LatticeState:
    step_fn = step_fn or step
    for _ in range(steps):
        state = step_fn(state, scheme)
        if not np.all(np.isfinite(state.f)):
            raise InstabilityError(state.t)
        if callback is not None:
            callback(state)
    return state


def equilibrium_state(scheme: SchemeDef, rho, u, t: int = 0) -> LatticeState:
    return LatticeState(equilibrium(rho, u, scheme), scheme.dx, t)


# ---------------------------------------------------------------------------
# output formats

def write_state_dump(path, state: LatticeState) -> None:
    """Binary dump: int32 d, int32 q, int32 extents[d], float64 dx, int64 t,
    then f as float64 in row-major (n1, ..., nd, q) order, little-endian."""
    d = state.f.ndim - 1
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", d, state.q))
        fh.write(struct.pack(f"<{d}i", *state.extents))
        fh.write(struct.pack("<dq", float(state.dx), int(state.t)))
        fh.write(np.ascontiguousarray(np.moveaxis(state.f, 0, -1), dtype="<f8").tobytes())


def read_state_dump(path) -> LatticeState:
    with open(path, "rb") as fh:
        data = fh.read()
    d, q = struct.unpack_from("<ii", data, 0)
    off = 8
    extents = struct.unpack_from(f"<{d}i", data, off)
    off += 4 * d
    dx, t = struct.unpack_from("<dq", data, off)
    off += 16
    arr = np.frombuffer(data, dtype="<f8", offset=off)
    expected = int(np.prod(extents)) * q
    if arr.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {arr.size}")
    f = np.moveaxis(arr.reshape(tuple(extents) + (q,)), -1, 0).astype(float)
    return LatticeState(f, dx, t)


def write_fields_csv(path, state: LatticeState, scheme: SchemeDef) -> None:
    fields = macro_fields(state, scheme)
    x, y = state.node_coordinates()
    u = fields.u
    cols = np.column_stack([x.ravel(), y.ravel(), fields.rho.ravel(), u[0].ravel(), u[1].ravel()])
    np.savetxt(path, cols, delimiter=",", header="x,y,rho,u1,u2", comments="", fmt="%.17g")
