"""Consistency diagnostics: conservation defaults, momentum velocity tensors,
finite-difference residuals of the equivalent equations, viscosity fits and
refinement slopes.

All finite differences are periodic.  Space derivatives use the fourth-order
centred stencil; time derivatives use centred differences over three or five
consecutive snapshots (second or fourth order).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .moment_basis import MomentBasis, VelocitySet, build_moment_matrix
from .polyalg import mat_invert_exact
from .scheme import (
    LatticeState,
    SchemeDef,
    VelocityFieldPolicy,
    _matvec,
    moments_rho_q,
    relative_velocity,
    run,
)


class GridMismatchError(ValueError):
    pass


class UnstableRunError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# finite differences


def ddx(field: np.ndarray, axis: int, dx: float) -> np.ndarray:
    """Fourth-order centred derivative along spatial ``axis`` (counted from the end)."""
    ax = field.ndim - 2 + axis if axis >= 0 else axis
    p1 = np.roll(field, -1, axis=ax)
    m1 = np.roll(field, 1, axis=ax)
    p2 = np.roll(field, -2, axis=ax)
    m2 = np.roll(field, 2, axis=ax)
    return (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * dx)


def ddt(series: Sequence[np.ndarray], dt: float) -> np.ndarray:
    """Centred time derivative at the middle of 3 or 5 equally spaced samples."""
    if len(series) == 3:
        return (series[2] - series[0]) / (2.0 * dt)
    if len(series) == 5:
        return (8.0 * (series[3] - series[1]) - (series[4] - series[0])) / (12.0 * dt)
    raise ValueError("need 3 or 5 consecutive snapshots")


def _check_history(history: Sequence[LatticeState]):
    if len(history) not in (3, 5):
        raise ValueError("history must hold 3 or 5 consecutive states")
    shape, dx = history[0].f.shape, history[0].dx
    for a, b in zip(history, history[1:]):
        if b.f.shape != shape or b.dx != dx:
            raise GridMismatchError("snapshots live on different grids")
        if b.t != a.t + 1:
            raise GridMismatchError("snapshots are not consecutive in time")


@dataclass
class _Snapshots:
    """Macroscopic fields and reconstructed equilibria for a history window."""

    rho: list
    q: list
    feq: list

    @classmethod
    def build(cls, history, scheme):
        rho, q, feq = [], [], []
        for st in history:
            r, m = moments_rho_q(st.f, scheme.v)
            rho.append(r)
            q.append(m)
            feq.append(scheme.equilibrium(r, m / r))
        return cls(rho, q, feq)

    @property
    def center(self) -> int:
        return len(self.rho) // 2


def _dt_feq(snaps: _Snapshots, scheme: SchemeDef) -> np.ndarray:
    """``d_t^j f_j^eq`` for every population at the centre snapshot."""
    c = snaps.center
    out = ddt(snaps.feq, scheme.dt)
    feq = snaps.feq[c]
    for j in range(scheme.q):
        for a in range(scheme.d):
            if scheme.v[j, a] != 0.0:
                out[j] = out[j] + scheme.v[j, a] * ddx(feq[j], a, scheme.dx)
    return out


def particular_derivative(history: Sequence[LatticeState], scheme: SchemeDef,
                          j: int | None = None, node: tuple | None = None):
    """Estimate of ``(d_t + v_j . grad) f_j^eq`` at the centre of ``history``.

    Returns the full ``(q, *grid)`` field, one population's grid or a single
    value depending on which of ``j`` and ``node`` are given.
    """
    _check_history(history)
    out = _dt_feq(_Snapshots.build(history, scheme), scheme)
    if j is not None:
        out = out[j]
        if node is not None:
            out = out[tuple(node)]
    return out


# ---------------------------------------------------------------------------
# momentum flux and momentum velocity tensor


def momentum_flux(fields_or_feq, scheme: SchemeDef) -> np.ndarray:
    """``F^{ab} = sum_j v_j^a v_j^b f_j^eq``; shape (d, d, *grid)."""
    if hasattr(fields_or_feq, "rho"):
        feq = scheme.equilibrium(fields_or_feq.rho, fields_or_feq.u)
    else:
        feq = np.asarray(fields_or_feq)
    d = scheme.d
    out = np.empty((d, d) + feq.shape[1:])
    for a in range(d):
        for b in range(a, d):
            acc = scheme.v[0, a] * scheme.v[0, b] * feq[0]
            for j in range(1, scheme.q):
                acc = acc + scheme.v[j, a] * scheme.v[j, b] * feq[j]
            out[a, b] = acc
            out[b, a] = acc
    return out


@dataclass
class LambdaTensor:
    """``Lambda_l^{ab}(u)`` indexed as ``values[l][a][b]`` with a, b in 0..d-1."""

    values: np.ndarray  # object array of Fractions (exact) or floats, shape (q, d, d) [+ grid]
    u: tuple
    exact: bool

    def __getitem__(self, idx):
        return self.values[idx]


def lambda_tensor(basis: MomentBasis, vs: VelocitySet, u, mode: str = "exact") -> LambdaTensor:
    """Momentum velocity tensor with the modified matrix ``M~`` (rows 1..d are ``v_j^a``).

    For moment rows ``k = a, p = b`` this is ``sum_j v_j^a v_j^b M^{-1}_jl(u)``.
    """
    d, q = vs.d, vs.q
    if mode == "exact":
        minv = mat_invert_exact(build_moment_matrix(basis, vs, tuple(Fraction(x) for x in u)))
        vel = vs.velocities
        vals = np.empty((q, d, d), dtype=object)
        for l in range(q):
            for a in range(d):
                for b in range(d):
                    vals[l, a, b] = sum((vel[j][a] * vel[j][b] * minv[j, l] for j in range(q)),
                                        Fraction(0))
        return LambdaTensor(vals, tuple(Fraction(x) for x in u), True)
    if mode != "numeric":
        raise ValueError("mode must be 'exact' or 'numeric'")
    from .scheme import SchemeDef, RelaxationRates
    sch = basis if isinstance(basis, SchemeDef) else SchemeDef(
        vs, basis, RelaxationRates((0.0,) * (d + 1) + (1.0,) * (q - d - 1), d + 1))
    _, minv = sch.matrices(np.asarray(u, dtype=float))
    return LambdaTensor(_lambda_numeric(sch, minv), tuple(np.asarray(u, dtype=float).ravel()[:d]), False)


def _lambda_numeric(scheme: SchemeDef, minv: np.ndarray) -> np.ndarray:
    d, q = scheme.d, scheme.q
    out = np.empty((q, d, d) + minv.shape[2:])
    for l in range(q):
        for a in range(d):
            for b in range(d):
                acc = scheme.v[0, a] * scheme.v[0, b] * minv[0, l]
                for j in range(1, q):
                    acc = acc + scheme.v[j, a] * scheme.v[j, b] * minv[j, l]
                out[l, a, b] = acc
    return out


def full_lambda_tensor(basis: MomentBasis, vs: VelocitySet, u) -> np.ndarray:
    """All ``Lambda_l^{kp}(u)`` for ``0 <= k, l, p < q`` in exact arithmetic."""
    d, q = vs.d, vs.q
    u = tuple(Fraction(x) for x in u)
    m = build_moment_matrix(basis, vs, u)
    minv = mat_invert_exact(m)
    vel = vs.velocities
    mt = [[vel[j][k - 1] if 1 <= k <= d else m[k, j] for j in range(q)] for k in range(q)]
    out = np.empty((q, q, q), dtype=object)
    for k in range(q):
        for p in range(q):
            prod = [mt[k][j] * mt[p][j] for j in range(q)]
            for l in range(q):
                out[l, k, p] = sum((prod[j] * minv[j, l] for j in range(q)), Fraction(0))
    return out


# ---------------------------------------------------------------------------
# conservation defaults and off-equilibrium residuals


def _frame_velocity(history, scheme, u):
    c = history[len(history) // 2]
    if u is None:
        coords = c.node_coordinates() if scheme.policy.kind == "prescribed" else None
        return relative_velocity(c.f, scheme, c.t * scheme.dt, coords)
    if isinstance(u, VelocityFieldPolicy):
        return relative_velocity(c.f, scheme.with_policy(u), c.t * scheme.dt, c.node_coordinates())
    return np.asarray(u, dtype=float)


@dataclass
class ConservationDefault:
    theta: np.ndarray  # (q, *grid)
    u: np.ndarray

    def max_abs(self) -> np.ndarray:
        return np.abs(self.theta).reshape(self.theta.shape[0], -1).max(axis=1)


def conservation_default(history: Sequence[LatticeState], scheme: SchemeDef, u=None
                         ) -> ConservationDefault:
    """``theta_k(u) = sum_j M_kj(u) d_t^j f_j^eq`` at the centre snapshot.

    ``u`` is a constant vector, a field, a policy, or None for the scheme's
    own policy evaluated on the centre state.
    """
    _check_history(history)
    uu = _frame_velocity(history, scheme, u)
    dtf = _dt_feq(_Snapshots.build(history, scheme), scheme)
    m, _ = scheme.matrices(uu)
    return ConservationDefault(_matvec(m, dtf), uu)


@dataclass
class OffEquilibriumReport:
    residual: np.ndarray      # max_x |m_k - m_k^eq + (dt/s_k) theta_k|, per k
    departure: np.ndarray     # max_x |m_k - m_k^eq|
    theta: np.ndarray         # max_x |theta_k|
    population_departure: float  # max_{x,j} |f_j - f_j^eq|


def offequilibrium_check(history: Sequence[LatticeState], scheme: SchemeDef, u=None
                         ) -> OffEquilibriumReport:
    """Norms of the second-order transition residual for every moment ``k > d``."""
    _check_history(history)
    snaps = _Snapshots.build(history, scheme)
    uu = _frame_velocity(history, scheme, u)
    m, _ = scheme.matrices(uu)
    c = snaps.center
    f = history[c].f
    theta = _matvec(m, _dt_feq(snaps, scheme))
    mom = _matvec(m, f)
    meq = _matvec(m, snaps.feq[c])
    nc = scheme.rates.n_conserved
    s = scheme.s
    res = np.zeros(scheme.q)
    dep = np.zeros(scheme.q)
    for k in range(nc, scheme.q):
        dep[k] = np.abs(mom[k] - meq[k]).max()
        res[k] = np.abs(mom[k] - meq[k] + scheme.dt / s[k] * theta[k]).max()
    th = np.abs(theta).reshape(scheme.q, -1).max(axis=1)
    return OffEquilibriumReport(res, dep, th, float(np.abs(f - snaps.feq[c]).max()))


@dataclass
class SecondOrderResidual:
    mass: float                 # max |d_t rho + div q|
    momentum_first_order: float   # max |d_t q + div F| (no correction)
    momentum_shifted: float     # with sigma Lambda(u) theta(u) correction
    momentum_fixed: float       # with the u = 0 form
    shifted_minus_fixed: float  # max |correction(u) - correction(0)|
    fields: dict = field(default_factory=dict, repr=False)


def residual_second_order(history: Sequence[LatticeState], scheme: SchemeDef, u=None
                          ) -> SecondOrderResidual:
    """Residuals of the second-order mass and momentum equivalent equations.

    Needs five consecutive snapshots: time derivatives are then fourth order
    and do not pollute the O(dt^2) quantity being measured.
    """
    _check_history(history)
    if len(history) != 5:
        raise ValueError("second-order residuals need five consecutive snapshots")
    snaps = _Snapshots.build(history, scheme)
    c, dx, dt, d = snaps.center, scheme.dx, scheme.dt, scheme.d
    uu = _frame_velocity(history, scheme, u)

    mass = ddt(snaps.rho, dt)
    for b in range(d):
        mass = mass + ddx(snaps.q[c][b], b, dx)

    flux = momentum_flux(snaps.feq[c], scheme)
    mom = ddt(snaps.q, dt)
    for a in range(d):
        for b in range(d):
            mom[a] = mom[a] + ddx(flux[a, b], b, dx)

    dtf = _dt_feq(snaps, scheme)
    m_u, inv_u = scheme.matrices(uu)
    theta_u = _matvec(m_u, dtf)
    lam_u = _lambda_numeric(scheme, inv_u)
    theta_0 = _matvec(scheme.m0, dtf)
    lam_0 = _lambda_numeric(scheme, scheme.m0_inv)
    sigma = scheme.rates.sigma
    nc = scheme.rates.n_conserved

    corr_u = np.zeros_like(mom)
    corr_0 = np.zeros_like(mom)
    for a in range(d):
        for b in range(d):
            for l in range(nc, scheme.q):
                corr_u[a] = corr_u[a] + sigma[l] * ddx(lam_u[l, a, b] * theta_u[l], b, dx)
                corr_0[a] = corr_0[a] + sigma[l] * lam_0[l, a, b] * ddx(theta_0[l], b, dx)
    corr_u *= dt
    corr_0 *= dt
    return SecondOrderResidual(
        float(np.abs(mass).max()),
        float(np.abs(mom).max()),
        float(np.abs(mom - corr_u).max()),
        float(np.abs(mom - corr_0).max()),
        float(np.abs(corr_u - corr_0).max()),
        {"mass": mass, "momentum": mom, "correction_shifted": corr_u, "correction_fixed": corr_0},
    )


# ---------------------------------------------------------------------------
# viscosity, convergence, policy comparison


@dataclass
class ShearWaveRun:
    times: np.ndarray
    amplitudes: np.ndarray
    wavenumber: float


@dataclass
class ViscosityFit:
    nu: float
    amplitude0: float
    max_log_residual: float


def shear_wave_amplitude(state: LatticeState, scheme: SchemeDef, length: float = 1.0) -> float:
    """Fourier amplitude of ``u_x`` on ``sin(2 pi y / L)``."""
    rho, q = moments_rho_q(state.f, scheme.v)
    ux = (q[0] / rho).mean(axis=0)
    y = (np.arange(ux.size) + 0.5) * state.dx
    return float(2.0 * np.mean(ux * np.sin(2 * np.pi * y / length)))


def run_shear_wave(scheme: SchemeDef, n: int, steps: int, sample_every: int = 10,
                   u0: float = 0.005, length: float = 1.0, skip: int = 0) -> ShearWaveRun:
    from .presets import shear_wave

    state = shear_wave(scheme, n, u0, length)
    times, amps = [], []

    def record(st):
        if st.t >= skip and st.t % sample_every == 0:
            times.append(st.t * scheme.dt)
            amps.append(shear_wave_amplitude(st, scheme, length))

    record(state)
    run(state, scheme, steps, callback=record)
    return ShearWaveRun(np.array(times), np.array(amps), 2 * np.pi / length)


def measure_viscosity(wave: ShearWaveRun) -> ViscosityFit:
    """Fit ``A(t) = A0 exp(-nu k^2 t)`` by least squares on ``log A``."""
    a = wave.amplitudes
    if np.any(a <= 0) or np.any(np.diff(a) >= 0) or not np.all(np.isfinite(a)):
        raise UnstableRunError("shear-wave amplitude is not monotonically decaying")
    slope, intercept = np.polyfit(wave.times, np.log(a), 1)
    fit = intercept + slope * wave.times
    return ViscosityFit(-slope / wave.wavenumber ** 2, float(np.exp(intercept)),
                        float(np.abs(fit - np.log(a)).max()))


def predicted_viscosity(scheme_or_lam, s: float, dx: float | None = None) -> float:
    """``(lam/3)(1/s - 1/2) dx`` for the polynomial equilibrium."""
    if isinstance(scheme_or_lam, SchemeDef):
        lam, dx = scheme_or_lam.lam, scheme_or_lam.dx
    else:
        lam = float(scheme_or_lam)
    return lam / 3.0 * (1.0 / s - 0.5) * dx


def convergence_order(dxs: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of ``log(error)`` against ``log(dx)``."""
    dxs = np.asarray(dxs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if dxs.size < 3 or dxs.size != errors.size:
        raise ValueError("need at least three (dx, error) pairs")
    if np.any(errors <= 0) or np.any(dxs <= 0):
        raise ValueError("errors and spacings must be positive")
    return float(np.polyfit(np.log(dxs), np.log(errors), 1)[0])


@dataclass
class PolicyComparison:
    resolutions: list
    differences: list
    slope: float


def fields_at_time(scheme: SchemeDef, state: LatticeState, t_final: float, step_fn=None):
    from .presets import steps_for_time

    state = run(state, scheme, steps_for_time(scheme, t_final), step_fn=step_fn)
    rho, q = moments_rho_q(state.f, scheme.v)
    return rho, q / rho


def compare_policies(scheme_factory: Callable[[int, VelocityFieldPolicy], SchemeDef],
                     policy_a: VelocityFieldPolicy, policy_b: VelocityFieldPolicy,
                     initial: Callable[[SchemeDef, int], LatticeState],
                     resolutions: Sequence[int], t_final: float) -> PolicyComparison:
    """Max-norm difference of ``(rho, u)`` at ``t_final`` between two policies."""
    diffs = []
    for n in resolutions:
        sa, sb = scheme_factory(n, policy_a), scheme_factory(n, policy_b)
        ra, ua = fields_at_time(sa, initial(sa, n), t_final)
        rb, ub = fields_at_time(sb, initial(sb, n), t_final)
        diffs.append(float(max(np.abs(ra - rb).max(), np.abs(ua - ub).max())))
    dxs = [1.0 / n for n in resolutions]
    slope = convergence_order(dxs, diffs) if len(resolutions) >= 3 and min(diffs) > 0 else float("nan")
    return PolicyComparison(list(resolutions), diffs, slope)


# ---------------------------------------------------------------------------
# report


@dataclass
class DiagnosticsReport:
    rows: list = field(default_factory=list)      # (quantity, resolution, value)
    slopes: dict = field(default_factory=dict)    # quantity -> {"slope", "resolutions"}
    extra: dict = field(default_factory=dict)

    def add(self, quantity: str, resolution, value: float):
        self.rows.append((quantity, resolution, float(value)))

    def series(self, quantity: str):
        pts = [(r, v) for q, r, v in self.rows if q == quantity]
        return [p[0] for p in pts], [p[1] for p in pts]

    def fit(self, quantity: str, lengths: dict | None = None) -> float:
        res, vals = self.series(quantity)
        dxs = [lengths[r] if lengths else 1.0 / r for r in res]
        slope = convergence_order(dxs, vals)
        self.slopes[quantity] = {"slope": slope, "resolutions": list(res)}
        return slope

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "resolution", "value"])
            for q, r, v in self.rows:
                w.writerow([q, r, repr(v)])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump({"slopes": self.slopes, **self.extra}, fh, indent=2, sort_keys=True)


def record_history(rep: DiagnosticsReport, n, hist, sch: SchemeDef, u=None) -> None:
    """Append every residual available from a 3- or 5-state history at resolution ``n``."""
    nc = sch.rates.n_conserved
    if len(hist) == 5:
        r2 = residual_second_order(hist, sch, u)
        rep.add("mass_residual", n, r2.mass)
        rep.add("momentum_first_order_residual", n, r2.momentum_first_order)
        rep.add("momentum_residual_shifted", n, r2.momentum_shifted)
        rep.add("momentum_residual_fixed", n, r2.momentum_fixed)
        rep.add("momentum_correction_gap", n, r2.shifted_minus_fixed)
    th = conservation_default(hist, sch, u)
    th0 = conservation_default(hist, sch, np.zeros(sch.d))
    rep.add("theta_mass", n, np.abs(th.theta[0]).max())
    rep.add("theta_momentum", n, np.abs(th.theta[1:nc]).max())
    rep.add("theta_conserved", n, np.abs(th.theta[:nc]).max())
    second = [k for k, deg in enumerate(sch.basis.degrees) if deg == 2]
    rep.add("theta_second_order_shift", n, np.abs(th.theta[second] - th0.theta[second]).max())
    off = offequilibrium_check(hist, sch, u)
    rep.add("offequilibrium_residual", n, off.residual[nc:].max())
    rep.add("offequilibrium_departure", n, off.departure[nc:].max())
    for k in range(nc, sch.q):
        rep.add(f"offequilibrium_residual_{k}", n, off.residual[k])


def fit_all(rep: DiagnosticsReport, lengths: dict | None = None) -> DiagnosticsReport:
    """Fit a slope for every quantity with three or more positive values."""
    for q in sorted({q for q, _, _ in rep.rows}):
        res, vals = rep.series(q)
        if len(res) >= 3 and min(vals) > 0:
            rep.fit(q, lengths)
        else:
            rep.slopes[q] = {"slope": None, "resolutions": list(res)}
    return rep


def refinement_diagnostics(histories: dict, schemes: dict, u=None) -> DiagnosticsReport:
    """Evaluate every residual on a set of histories keyed by resolution."""
    rep = DiagnosticsReport()
    for n in sorted(histories):
        record_history(rep, n, histories[n], schemes[n], u)
    return fit_all(rep, {n: schemes[n].dx for n in schemes})
