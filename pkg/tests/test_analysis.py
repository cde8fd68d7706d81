import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relvel.analysis import (
    DiagnosticsReport,
    GridMismatchError,
    ShearWaveRun,
    UnstableRunError,
    compare_policies,
    conservation_default,
    convergence_order,
    ddt,
    ddx,
    lambda_tensor,
    measure_viscosity,
    momentum_flux,
    offequilibrium_check,
    particular_derivative,
    predicted_viscosity,
    residual_second_order,
    run_shear_wave,
)
from relvel.experiments import check_lambda_identities, convergence_study, random_rational_velocity
from relvel.moment_basis import BASES, d2q9, d2q9_orthogonal
from relvel.presets import TaylorGreen, node_grid, taylor_green, uniform
from relvel.scheme import LatticeState, MacroFields, VelocityFieldPolicy, make_scheme

RATES = (1.2, 1.2, 1.2, 1.5, 1.5, 1.4)
PLAIN = make_scheme()
finite = dict(allow_nan=False, allow_infinity=False)


def steady_history(sch, n, width=3, rho0=1.0, u0=(0.03, -0.01)):
    base = uniform(sch, n, rho0, u0)
    return [LatticeState(base.f.copy(), base.dx, t) for t in range(width)]


def advected_history(sch, n, c, u0=(0.02, 0.01), width=3):
    """Equilibria whose density is carried rigidly at velocity ``c``."""
    x, y = node_grid(n, sch.dx)
    out = []
    for t in range(width):
        phase = 2 * np.pi * ((x - c[0] * t * sch.dt) + 2 * (y - c[1] * t * sch.dt))
        rho = 1 + 0.1 * np.sin(phase)
        u = np.array(u0)[:, None, None] * np.ones((1, n, n))
        out.append(LatticeState(sch.equilibrium(rho, u), sch.dx, t))
    return out


# -- finite differences ---------------------------------------------------------


def test_ddx_is_fourth_order():
    errs = []
    for n in (16, 32, 64):
        x = (np.arange(n) + 0.5) / n
        f = np.sin(2 * np.pi * x)[:, None] * np.ones((1, 3))
        errs.append(np.abs(ddx(f, 0, 1 / n) - 2 * np.pi * np.cos(2 * np.pi * x)[:, None]).max())
    assert convergence_order([1 / 16, 1 / 32, 1 / 64], errs) == pytest.approx(4.0, abs=0.2)


def test_ddt_exact_on_polynomials():
    t = np.arange(5) * 0.1
    quad = [np.array(1 + 2 * s + 3 * s * s) for s in t[1:4]]
    assert ddt(quad, 0.1) == pytest.approx(2 + 6 * t[2])
    quart = [np.array(s ** 4 - s ** 3) for s in t]
    assert ddt(quart, 0.1) == pytest.approx(4 * t[2] ** 3 - 3 * t[2] ** 2)
    with pytest.raises(ValueError):
        ddt(quad[:2], 0.1)


# -- momentum flux ------------------------------------------------------------------


def test_flux_at_rest():
    for lam in (1, Fraction(3, 2)):
        sch = make_scheme(lam=lam)
        flux = momentum_flux(MacroFields(np.ones(1), np.zeros((2, 1))), sch)
        assert np.allclose(flux[..., 0], float(lam) ** 2 / 3 * np.eye(2), rtol=1e-15, atol=0)


@given(st.floats(0.3, 3, **finite), st.floats(-0.3, 0.3, **finite), st.floats(-0.3, 0.3, **finite))
@settings(max_examples=50, deadline=None)
def test_flux_closed_form(rho, a, b):
    u = np.array([a, b])
    flux = momentum_flux(MacroFields(np.array(rho), rho * u), PLAIN)
    closed = rho * (np.eye(2) / 3 + np.outer(u, u))
    assert np.abs(flux - closed).max() <= 1e-14 * np.abs(closed).max()
    assert flux[0, 1] == flux[1, 0]


# -- particular derivative and conservation defaults ------------------------------------


def test_particular_derivative_vanishes_on_steady_uniform_state():
    sch = make_scheme(dx=1 / 8)
    hist = steady_history(sch, 8)
    assert np.abs(particular_derivative(hist, sch)).max() < 1e-14
    assert np.abs(conservation_default(hist, sch).theta).max() < 1e-14
    assert particular_derivative(hist, sch, 5, (1, 2)) == pytest.approx(0, abs=1e-14)


def test_particular_derivative_on_field_carried_along_velocity():
    # population j moves with v_j, so d_t^j vanishes up to truncation
    j = 5
    errs, scale = [], 0.0
    for n in (16, 32, 64):
        sch = make_scheme(dx=1 / n)
        errs.append(np.abs(particular_derivative(advected_history(sch, n, sch.v[j]), sch, j)).max())
        scale = np.abs(particular_derivative(advected_history(sch, n, (0, 0)), sch, j)).max()
    assert errs[-1] < 0.02 * scale
    assert convergence_order([1 / 16, 1 / 32, 1 / 64], errs) == pytest.approx(2.0, abs=0.3)


def test_particular_derivative_on_frozen_field_is_transport_term():
    n = 64
    sch = make_scheme(dx=1 / n)
    hist = advected_history(sch, n, (0.0, 0.0))
    f = hist[1].f
    for j in range(9):
        expected = sch.v[j, 0] * ddx(f[j], 0, sch.dx) + sch.v[j, 1] * ddx(f[j], 1, sch.dx)
        assert np.abs(particular_derivative(hist, sch, j) - expected).max() < 1e-12


def test_history_validation():
    sch = make_scheme(dx=1 / 8)
    hist = steady_history(sch, 8)
    with pytest.raises(ValueError):
        particular_derivative(hist[:2], sch)
    bad = [hist[0], hist[1], LatticeState(hist[2].f, hist[2].dx, 7)]
    with pytest.raises(GridMismatchError):
        conservation_default(bad, sch)
    other = uniform(make_scheme(dx=1 / 4), 4)
    with pytest.raises(GridMismatchError):
        particular_derivative([hist[0], hist[1], LatticeState(other.f, other.dx, 2)], sch)
    with pytest.raises(ValueError):
        residual_second_order(hist, sch)


def test_offequilibrium_vanishes_at_uniform_equilibrium():
    sch = make_scheme(rates=RATES, dx=1 / 8, policy="fluid")
    rep = offequilibrium_check(steady_history(sch, 8), sch)
    assert rep.residual.max() < 1e-14 and rep.departure.max() < 1e-14
    assert rep.population_departure < 1e-15


def test_second_order_residuals_vanish_on_steady_state():
    sch = make_scheme(rates=RATES, dx=1 / 8)
    r = residual_second_order(steady_history(sch, 8, width=5), sch, VelocityFieldPolicy.parse("fluid"))
    assert max(r.mass, r.momentum_first_order, r.momentum_shifted, r.momentum_fixed) < 1e-14


# -- momentum velocity tensor -------------------------------------------------------------


def test_lambda_examples(rng):
    lam = Fraction(3, 2)
    basis, vs = d2q9_orthogonal(lam), d2q9(lam)
    for _ in range(5):
        u = random_rational_velocity(rng)
        t = lambda_tensor(basis, vs, u)
        assert t.exact
        assert t[3][0][0] == lam ** 2 / 6
        for l in (6, 7, 8):
            assert all(t[l][a][b] == 0 for a in range(2) for b in range(2))


def test_lambda_numeric_agrees_with_exact():
    u = (Fraction(1, 10), Fraction(-3, 20))
    basis, vs = d2q9_orthogonal(), d2q9()
    exact = lambda_tensor(basis, vs, u).values.astype(float)
    num = lambda_tensor(basis, vs, [float(c) for c in u], mode="numeric").values
    assert np.abs(exact - num).max() < 1e-14
    with pytest.raises(ValueError):
        lambda_tensor(basis, vs, u, mode="symbolic")


@pytest.mark.parametrize("name", sorted(BASES))
def test_lambda_identities_every_basis(name, rng):
    for _ in range(3):
        res = check_lambda_identities(name, random_rational_velocity(rng))
        assert res.passed, res.witness


# -- viscosity -----------------------------------------------------------------------------


def _nu(s, n=32, policy="zero"):
    sch = make_scheme(rates=(s, s, s, 1.5, 1.5, 1.4), dx=1 / n, policy=policy)
    return measure_viscosity(run_shear_wave(sch, n, 2 * n, n // 16)).nu, sch


def test_viscosity_matches_prediction():
    nu, sch = _nu(1.0, 64)
    assert predicted_viscosity(sch, 1.0) == pytest.approx(sch.dx / 6)
    assert nu == pytest.approx(sch.dx / 6, rel=0.02)


def test_viscosity_doubles_with_sigma():
    nu1, _ = _nu(1.0)
    nu2, _ = _nu(2 / 3)
    assert nu2 / nu1 == pytest.approx(2.0, rel=0.02)


def test_viscosity_independent_of_policy():
    nz, sch = _nu(1.0, policy="zero")
    nf, _ = _nu(1.0, policy="fluid")
    assert abs(nf - nz) <= 1e-3 * nz


def test_viscosity_rejects_growing_amplitude():
    wave = ShearWaveRun(np.arange(4.0), np.array([1.0, 0.9, 0.95, 0.8]), 2 * np.pi)
    with pytest.raises(UnstableRunError):
        measure_viscosity(wave)


# -- convergence and policy comparison --------------------------------------------------------


@given(st.floats(1e-3, 1e3, **finite), st.floats(0.5, 4.0, **finite))
@settings(max_examples=40, deadline=None)
def test_convergence_order_exact_on_power_laws(c, p):
    dxs = [1 / 16, 1 / 32, 1 / 64, 1 / 128]
    assert abs(convergence_order(dxs, [c * h ** p for h in dxs]) - p) <= 1e-12


def test_convergence_order_errors():
    with pytest.raises(ValueError):
        convergence_order([0.1, 0.05], [1, 0.5])
    with pytest.raises(ValueError):
        convergence_order([0.1, 0.05, 0.025], [1, 0, 0.5])


def test_same_policy_difference_is_zero():
    factory = lambda n, pol: make_scheme(rates=RATES, dx=1 / n, policy=pol)
    zero = VelocityFieldPolicy("zero")
    res = compare_policies(factory, zero, zero, lambda sch, n: taylor_green(sch, n), (8, 16, 32), 0.25)
    assert res.differences == [0.0, 0.0, 0.0]
    assert np.isnan(res.slope)


def test_taylor_green_velocity_error_is_second_order():
    rep = convergence_study((32, 64, 128), 0.5, (1.2,) * 6, tg=TaylorGreen(0.001))
    assert rep.slopes["velocity_error"]["slope"] == pytest.approx(2.0, abs=0.2)


# -- report ----------------------------------------------------------------------------------


def test_report_outputs(tmp_path):
    rep = DiagnosticsReport(extra={"note": 1})
    for n in (16, 32, 64):
        rep.add("err", n, 3.0 / n ** 2)
    assert rep.fit("err") == pytest.approx(2.0, abs=1e-12)
    rep.write_csv(tmp_path / "d.csv")
    rep.write_json(tmp_path / "d.json")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "quantity,resolution,value" and len(lines) == 4
    doc = json.loads((tmp_path / "d.json").read_text())
    assert doc["slopes"]["err"]["resolutions"] == [16, 32, 64] and doc["note"] == 1
