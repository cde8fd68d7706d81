"""Run orchestration, verification checks and refinement studies."""

from __future__ import annotations

import csv
import glob
import json
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .analysis import (
    DiagnosticsReport,
    fields_at_time,
    fit_all,
    full_lambda_tensor,
    predicted_viscosity,
    record_history,
)
from .cascaded import CascadedOperator, cascaded_collide, cascaded_step, matching_relative_scheme
from .config import RunConfig
from .moment_basis import (
    build_moment_matrix,
    check_group_morphism,
    d2q9,
    get_basis,
    symbolic_scale,
    verify_shift_blocks,
)
from .presets import (
    TaylorGreen,
    history_around,
    node_grid,
    perturbed_uniform,
    shear_wave,
    steps_for_time,
    uniform,
)
from .scheme import (
    LatticeState,
    SchemeDef,
    VelocityFieldPolicy,
    collide,
    collide_grid,
    make_scheme,
    moments_rho_q,
    read_state_dump,
    relative_velocity,
    run,
    stream,
    write_fields_csv,
    write_state_dump,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    lines: list = field(default_factory=list)
    value: float | None = None
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# runs


def scheme_for(cfg: RunConfig) -> SchemeDef:
    if cfg.scheme == "cascaded":
        return matching_relative_scheme(cfg.rates, lam=Fraction(cfg.lam), dx=cfg.dx)
    return make_scheme(cfg.basis, cfg.rates, lam=Fraction(cfg.lam), dx=cfg.dx, policy=cfg.policy)


def step_function(cfg: RunConfig):
    if cfg.scheme != "cascaded":
        return None
    op = CascadedOperator(lam=cfg.lam, dx=cfg.dx)
    rates = cfg.rates
    return lambda state, scheme: cascaded_step(state, rates, op)


def initial_state(cfg: RunConfig, scheme: SchemeDef) -> LatticeState:
    p, n = dict(cfg.preset), cfg.grid[0]
    name = p.pop("name")
    lam = scheme.lam
    if name == "uniform":
        return uniform(scheme, n, p["rho0"], tuple(c * lam for c in p["u"]))
    if name == "shear-wave":
        return shear_wave(scheme, n, p["u0"] * lam, p["length"])
    if name == "taylor-green":
        return TaylorGreen(p["u0"] * lam, p["length"], density=p["density"]).initial_state(scheme, n)
    if name == "perturbed-uniform":
        return perturbed_uniform(scheme, n, cfg.seed, p["amplitude"], tuple(c * lam for c in p["u"]))
    raise ValueError(f"unknown preset {name!r}")


OBSERVABLES = ("step", "t", "mass", "momentum_x", "momentum_y", "kinetic_energy", "max_speed")


def observables(state: LatticeState, scheme: SchemeDef) -> list:
    rho, q = moments_rho_q(state.f, scheme.v)
    u = q / rho
    cell = state.dx ** state.f[0].ndim
    return [state.t, state.t * scheme.dt, rho.sum() * cell, q[0].sum() * cell, q[1].sum() * cell,
            0.5 * (rho * (u ** 2).sum(axis=0)).sum() * cell, np.sqrt((u ** 2).sum(axis=0)).max()]


def _fmt(x):
    return str(x) if isinstance(x, (int, np.integer)) else repr(float(x))


def run_experiment(cfg: RunConfig, log=None) -> LatticeState:
    """Execute a run and write its artifacts into ``cfg.out``.

    Writes ``config.json``, ``observables.csv``, periodic ``fields_*.csv`` and
    ``state_*.bin`` snapshots, and binary dumps of the last ``dump_last``
    consecutive states.  Raises InstabilityError on NaN.
    """
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    scheme = scheme_for(cfg)
    step_fn = step_function(cfg)
    state = initial_state(cfg, scheme)
    obs_path = os.path.join(cfg.out, "observables.csv")
    first_dump = cfg.steps - cfg.dump_last + 1

    with open(obs_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OBSERVABLES)

        def emit(st):
            if st.t % cfg.observe_every == 0 or st.t == cfg.steps:
                writer.writerow([_fmt(x) for x in observables(st, scheme)])
            snap = cfg.snapshot_every and st.t % cfg.snapshot_every == 0
            if snap:
                write_fields_csv(os.path.join(cfg.out, f"fields_{st.t:06d}.csv"), st, scheme)
            if snap or (cfg.dump_last and st.t >= first_dump):
                write_state_dump(os.path.join(cfg.out, f"state_{st.t:06d}.bin"), st)
            if log and cfg.steps >= 10 and st.t % max(1, cfg.steps // 10) == 0:
                log(f"step {st.t}/{cfg.steps}")

        emit(state)
        state = run(state, scheme, cfg.steps, callback=emit, step_fn=step_fn)
    return state


# ---------------------------------------------------------------------------
# verification


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        res.lines.append(f"elapsed {res.seconds:.2f} s")
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def verify_blocks() -> CheckResult:
    rep = verify_shift_blocks()
    return CheckResult("blocks", rep.passed, rep.lines())


@_timed
def verify_morphism(basis: str = "d2q9-orthogonal") -> CheckResult:
    lam = symbolic_scale()
    res = check_group_morphism(get_basis(basis, lam), d2q9(lam))
    lines = [f"basis {basis}",
             f"T(u+v) = T(u)T(v): {'PASS' if res.holds else 'FAIL'}",
             f"T(u)T(v) = T(v)T(u): {'PASS' if res.commutes else 'FAIL'}"]
    if res.witness:
        name, i, j, e = res.witness
        lines.append(f"witness {name} [{i},{j}] = {e}")
    return CheckResult("morphism", bool(res), lines)


def random_states(n: int, seed: int, lam: float = 1.0, rho_range=(0.5, 2.0), umax: float = 0.3,
                  noise: float = 0.1):
    """``n`` D2Q9 populations (shape (9, n)) with prescribed ``rho`` and ``|u| <= umax lam``.

    A random non-equilibrium part is added in the non-conserved moments so
    that ``rho`` and ``q`` are exactly those drawn.
    """
    rng = np.random.default_rng(seed)
    sch = make_scheme(lam=Fraction(lam))
    rho = rng.uniform(*rho_range, n)
    r = umax * lam * np.sqrt(rng.uniform(0, 1, n))
    ang = rng.uniform(0, 2 * np.pi, n)
    u = np.array([r * np.cos(ang), r * np.sin(ang)])
    feq = sch.equilibrium(rho, u)
    m_neq = np.zeros((9, n))
    m_neq[3:] = noise * rho * rng.standard_normal((6, n))
    return feq + sch.m0_inv @ m_neq, rho, u


@_timed
def verify_cascaded(samples: int = 1000, seed: int = 0, rates=(1.3, 0.7, 1.1, 1.6, 1.2, 1.8),
                    tol: float = 1e-12) -> CheckResult:
    f, _, _ = random_states(samples, seed)
    casc = cascaded_collide(f, rates)
    rel_scheme = matching_relative_scheme(rates)
    rel = collide(f, rel_scheme, relative_velocity(f, rel_scheme))
    dev = float(np.abs(casc - rel).max())
    return CheckResult("cascaded", dev <= tol,
                       [f"{samples} states, rates {list(rates)}",
                        f"max |cascaded - relative| = {dev:.3e} (tolerance {tol:g})"], dev)


def random_rational_velocity(rng, den: int = 97, bound=Fraction(3, 10)):
    while True:
        u = tuple(Fraction(int(rng.integers(-den, den + 1)), den) * bound for _ in range(2))
        if sum(c * c for c in u) <= bound * bound:
            return u


@dataclass
class LambdaIdentities:
    independence: bool
    vanishing: bool
    reconstruction: bool
    witness: tuple | None = None

    @property
    def passed(self):
        return self.independence and self.vanishing and self.reconstruction


def check_lambda_identities(basis_name: str, u, lam=1) -> LambdaIdentities:
    """Exact checks of the three momentum-velocity-tensor identities at ``u``."""
    vs = d2q9(lam)
    basis = get_basis(basis_name, lam)
    d, q = vs.d, vs.q
    lam_u = full_lambda_tensor(basis, vs, u)
    lam_0 = full_lambda_tensor(basis, vs, (0,) * d)
    m_u = build_moment_matrix(basis, vs, tuple(Fraction(c) for c in u))
    vel = vs.velocities
    deg = basis.degrees
    ok = [True, True, True]
    witness = None
    for a in range(1, d + 1):
        for b in range(1, d + 1):
            for l in range(q):
                if l not in (0, a, b) and lam_u[l, a, b] != lam_0[l, a, b]:
                    ok[0] = False
                    witness = witness or ("independence", l, a, b, lam_u[l, a, b], lam_0[l, a, b])
                if deg[l] >= 3 and lam_u[l, a, b] != 0:
                    ok[1] = False
                    witness = witness or ("vanishing", l, a, b, lam_u[l, a, b])
            for p in range(q):
                lhs = sum((lam_u[l, a, b] * m_u[l, p] for l in range(q)), Fraction(0))
                if lhs != vel[p][a - 1] * vel[p][b - 1]:
                    ok[2] = False
                    witness = witness or ("reconstruction", p, a, b, lhs)
    return LambdaIdentities(*ok, witness)


@_timed
def verify_lambda(samples: int = 10, seed: int = 0, basis: str = "d2q9-orthogonal") -> CheckResult:
    rng = np.random.default_rng(seed)
    lines, passed = [f"basis {basis}"], True
    for _ in range(samples):
        u = random_rational_velocity(rng)
        res = check_lambda_identities(basis, u)
        passed &= res.passed
        lines.append(f"u = ({u[0]}, {u[1]}): {'PASS' if res.passed else 'FAIL ' + str(res.witness)}")
    return CheckResult("lambda", passed, lines)


def conservation_deviation(state: LatticeState, scheme: SchemeDef, steps: int, step_fn=None):
    """Largest per-collision mass and momentum deviations over ``steps`` steps.

    Mass is relative to ``rho``; momentum is relative to ``|q| + rho lam``.
    """
    worst_m, worst_q = 0.0, 0.0
    for _ in range(steps):
        rho, q = moments_rho_q(state.f, scheme.v)
        if step_fn is None:
            fstar = collide_grid(state, scheme)
        else:
            fstar = cascaded_collide(state.f, scheme.rates, CascadedOperator(scheme.lam, scheme.dx))
        r2, q2 = moments_rho_q(fstar, scheme.v)
        worst_m = max(worst_m, float((np.abs(r2 - rho) / rho).max()))
        scale = np.sqrt((q ** 2).sum(axis=0)) + rho * scheme.lam
        worst_q = max(worst_q, float((np.abs(q2 - q) / scale).max()))
        state = stream(state, scheme, fstar)
    return worst_m, worst_q


DEFAULT_POLICIES = ("zero", "constant:0.1,0", "constant:-0.07,0.12", "fluid")


@_timed
def verify_conservation(n: int = 64, steps: int = 100, seed: int = 0, basis: str = "d2q9-orthogonal",
                        policies=DEFAULT_POLICIES, tol: float = 1e-13) -> CheckResult:
    lines, passed, worst = [], True, 0.0
    rates = (1.3, 0.7, 1.1, 1.6, 1.2, 1.8)
    for pol in policies:
        sch = make_scheme(basis, rates, dx=1.0 / n, policy=pol)
        st = perturbed_uniform(sch, n, seed)
        dm, dq = conservation_deviation(st, sch, steps)
        ok = dm <= tol and dq <= tol
        passed &= ok
        worst = max(worst, dm, dq)
        lines.append(f"policy {pol:<22} mass {dm:.2e}  momentum {dq:.2e}  {'PASS' if ok else 'FAIL'}")
    return CheckResult("conservation", passed, lines, worst)


VERIFY = {
    "blocks": verify_blocks,
    "morphism": verify_morphism,
    "cascaded": verify_cascaded,
    "lambda": verify_lambda,
    "conservation": verify_conservation,
}


# ---------------------------------------------------------------------------
# diagnostics from histories


def load_run_dir(path):
    """Config, scheme and the last consecutive dumped states of a run directory."""
    from .config import validate

    with open(os.path.join(path, "config.json")) as fh:
        cfg = validate(json.load(fh))
    files = sorted(glob.glob(os.path.join(path, "state_*.bin")))
    states = [read_state_dump(f) for f in files]
    tail = []
    for st in reversed(states):
        if tail and st.t != tail[0].t - 1:
            break
        tail.insert(0, st)
    if len(tail) >= 5:
        tail = tail[-5:]
    elif len(tail) >= 3:
        tail = tail[-3:]
    else:
        raise ValueError(f"{path}: need at least three consecutive state dumps")
    return cfg, scheme_for(cfg), tail


def analyze_dirs(paths) -> DiagnosticsReport:
    rep = DiagnosticsReport()
    lengths = {}
    for p in paths:
        cfg, sch, hist = load_run_dir(p)
        n = cfg.grid[0]
        lengths[n] = cfg.dx
        record_history(rep, n, hist, sch)
    fit_all(rep, lengths)
    return rep


# ---------------------------------------------------------------------------
# refinement studies


def taylor_green_error(state: LatticeState, scheme: SchemeDef, tg: TaylorGreen, s_shear: float) -> float:
    """Max-norm velocity error against the decaying analytic vortex."""
    rho, q = moments_rho_q(state.f, scheme.v)
    x, y = node_grid(state.f.shape[1], scheme.dx)
    nu = predicted_viscosity(scheme, s_shear)
    _, ua = tg.fields(x, y, state.t * scheme.dt, nu, scheme.cs2)
    return float(np.abs(q / rho - ua).max())


def convergence_study(grids, t_final: float, rates, basis="d2q9-orthogonal", policy="zero",
                      compare: str | None = None, tg: TaylorGreen | None = None) -> DiagnosticsReport:
    """Taylor-Green refinement study at a fixed physical time.

    Records the analytic velocity error, every equivalent-equation residual
    at ``t_final`` and, with ``compare``, the field difference to a second policy.
    """
    tg = tg or TaylorGreen()
    rep = DiagnosticsReport(extra={"time": t_final, "policy": policy, "compare": compare,
                                   "rates": list(rates), "basis": basis, "u0": tg.u0,
                                   "density": tg.density})
    lengths = {}

    for n in grids:
        sch = make_scheme(basis, rates, dx=tg.length / n, policy=policy)
        lengths[n] = sch.dx
        hist = history_around(sch, tg.initial_state(sch, n), steps_for_time(sch, t_final))
        record_history(rep, n, hist, sch)
        rep.add("velocity_error", n, taylor_green_error(hist[2], sch, tg, rates[1]))
        if compare is not None:
            other = sch.with_policy(VelocityFieldPolicy.parse(compare))
            ra, ua = fields_at_time(other, tg.initial_state(other, n), t_final)
            rb, q = moments_rho_q(hist[2].f, sch.v)
            diff = max(np.abs(ra - rb).max(), np.abs(ua - q / rb).max())
            rep.add("policy_difference", n, diff)
    fit_all(rep, lengths)
    return rep
