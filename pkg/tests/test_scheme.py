import os
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import reference_equilibrium, reference_mrt_step
from relvel.moment_basis import d2q9, shifting_matrix, d2q9_orthogonal
from relvel.presets import perturbed_uniform, taylor_green, uniform
from relvel.scheme import (
    DensityUnderflowError,
    InstabilityError,
    LatticeState,
    RelaxationRates,
    VelocityFieldPolicy,
    collide,
    collide_grid,
    compute_moments,
    equilibrium,
    equilibrium_state,
    lattice_weights,
    macro_fields,
    make_scheme,
    read_state_dump,
    relax_moments,
    run,
    step,
    stream,
    write_fields_csv,
    write_state_dump,
)

RATES = (1.3, 0.7, 1.1, 1.6, 1.2, 1.8)
finite = dict(allow_nan=False, allow_infinity=False)
velocity = st.tuples(st.floats(-0.3, 0.3, **finite), st.floats(-0.3, 0.3, **finite))
PLAIN = make_scheme()
RELAXING = make_scheme(rates=RATES)
UNIT = make_scheme(rates=(1.0,) * 6)


def random_population(rng, n=1, amplitude=0.05):
    sch = PLAIN
    rho = rng.uniform(0.5, 2.0, n)
    u = rng.uniform(-0.2, 0.2, (2, n))
    f = sch.equilibrium(rho, u)
    return f * (1 + amplitude * rng.standard_normal(f.shape))


# -- rates and policies ----------------------------------------------------------


def test_rates_validation():
    with pytest.raises(ValueError):
        RelaxationRates.from_nonconserved((2.5, 1, 1, 1, 1, 1))
    with pytest.raises(ValueError):
        RelaxationRates.from_nonconserved((0.0, 1, 1, 1, 1, 1))
    with pytest.raises(ValueError):
        RelaxationRates((0.1,) + (0.0,) * 2 + (1.0,) * 6, 3)
    r = RelaxationRates.from_nonconserved((1.0, 0.8, 1.0, 1.0, 1.0, 1.0))
    assert r.sigma[4] == pytest.approx(0.75)
    assert np.all(np.isnan(r.sigma[:3]))


def test_policy_parsing():
    assert VelocityFieldPolicy.parse("zero").kind == "zero"
    p = VelocityFieldPolicy.parse("constant:0.1,-0.2")
    assert p.value == (0.1, -0.2) and str(p) == "constant:0.1,-0.2"
    with pytest.raises(ValueError):
        VelocityFieldPolicy.parse("moving")
    with pytest.raises(ValueError):
        VelocityFieldPolicy("prescribed")


# -- equilibrium -------------------------------------------------------------------


def test_weights_derived_exactly():
    assert lattice_weights(d2q9()) == (Fraction(4, 9),) + (Fraction(1, 9),) * 4 + (Fraction(1, 36),) * 4


@pytest.mark.parametrize("lam", [Fraction(1), Fraction(3, 2)])
def test_weight_moments(lam):
    vs = d2q9(lam)
    w = lattice_weights(vs)
    v = vs.velocities
    assert sum(w) == 1
    assert all(sum(wj * vj[a] for wj, vj in zip(w, v)) == 0 for a in range(2))
    for a in range(2):
        for b in range(2):
            second = sum(wj * vj[a] * vj[b] for wj, vj in zip(w, v))
            assert second == (lam ** 2 / 3 if a == b else 0)


@given(st.floats(0.2, 3.0, **finite), velocity)
@settings(max_examples=50, deadline=None)
def test_equilibrium_conserves(rho, u):
    sch = PLAIN
    feq = equilibrium(np.array(rho), np.array(u), sch)
    assert feq.sum() == pytest.approx(rho, rel=1e-14)
    q = sch.v.T @ feq
    assert np.allclose(q, rho * np.array(u), rtol=0, atol=1e-14 * rho)


def test_equilibrium_matches_reference_formula(rng):
    sch = make_scheme(lam=Fraction(3, 2))
    rho = rng.uniform(0.5, 2, (4, 4))
    u = rng.uniform(-0.3, 0.3, (2, 4, 4))
    assert np.abs(sch.equilibrium(rho, u) - reference_equilibrium(rho, u, 1.5)).max() < 1e-15


def test_equilibrium_rejects_nonpositive_density():
    with pytest.raises(ValueError):
        equilibrium(np.array([1.0, 0.0]), np.zeros((2, 2)), make_scheme())


# -- moments and relaxation --------------------------------------------------------


def test_moments_of_rest_particle():
    f = np.zeros(9)
    f[0] = 1
    m = compute_moments(f, np.zeros(2), make_scheme())
    assert m.tolist() == [1, 0, 0, -4, 0, 0, 0, 0, 4]


def test_shifted_moments(rng):
    sch = make_scheme()
    f = random_population(rng)[:, 0]
    u = np.array([0.13, -0.07])
    m = compute_moments(f, u, sch)
    rho, q = f.sum(), sch.v.T @ f
    assert m[0] == pytest.approx(rho, abs=1e-15)
    assert m[1] == pytest.approx(q[0] - u[0] * rho, abs=1e-15)


def test_shifted_moments_equal_shift_times_fixed(rng):
    sch = make_scheme()
    f = random_population(rng)[:, 0]
    u = (Fraction(3, 25), Fraction(-1, 10))
    t = shifting_matrix(d2q9_orthogonal(), d2q9(), u).to_numpy()
    direct = compute_moments(f, np.array([float(c) for c in u]), sch)
    assert np.abs(direct - t @ compute_moments(f, np.zeros(2), sch)).max() < 1e-13


def test_relax_moments_examples():
    rates = RelaxationRates.from_nonconserved((1.5, 1.0, 1.0, 1.0, 1.0, 1.0))
    m = np.array([1.0, 0.1, 0.2, 2.0, 5.0, 1.0, 1.0, 1.0, 1.0])
    meq = np.array([1.0, 0.1, 0.2, 1.0, 3.0, 0.0, 0.0, 0.0, 0.0])
    out = relax_moments(m, meq, rates)
    assert out[3] == pytest.approx(0.5)
    assert out[4] == 3.0
    assert np.all(out[:3] == m[:3])


# -- collision ----------------------------------------------------------------------


@given(velocity, st.integers(0, 2 ** 32 - 1))
@settings(max_examples=40, deadline=None)
def test_collision_conserves_for_any_frame(u, seed):
    rng = np.random.default_rng(seed)
    sch = RELAXING
    f = random_population(rng, 8)
    fs = collide(f, sch, np.array(u))
    rho, rho2 = f.sum(axis=0), fs.sum(axis=0)
    q, q2 = sch.v.T @ f, sch.v.T @ fs
    assert np.all(np.abs(rho2 - rho) <= 1e-13 * rho)
    scale = np.sqrt((q ** 2).sum(axis=0)) + rho * sch.lam
    assert np.all(np.abs(q2 - q) <= 1e-13 * scale)


@given(velocity)
@settings(max_examples=20, deadline=None)
def test_unit_rates_project_onto_equilibrium(u):
    sch = UNIT
    f = random_population(np.random.default_rng(1), 4)
    rho, q = f.sum(axis=0), sch.v.T @ f
    fs = collide(f, sch, np.array(u))
    assert np.abs(fs - sch.equilibrium(rho, q / rho)).max() < 1e-14


def test_fixed_frame_is_classical_mrt(rng):
    sch = make_scheme(rates=RATES, dx=1 / 16)
    state = perturbed_uniform(sch, 16, seed=3)
    ours = step(state, sch).f
    ref = reference_mrt_step(state.f, RATES)
    assert np.abs(ours - ref).max() <= 1e-14 * np.abs(ref).max()


def test_fluid_policy_guards_density():
    sch = make_scheme(policy="fluid")
    f = np.full((9, 2, 2), 1 / 9)
    f[:, 1, 0] = 0.0
    with pytest.raises(DensityUnderflowError) as err:
        collide_grid(LatticeState(f, 0.5), sch)
    assert err.value.node == (1, 0)


def test_prescribed_policy_sees_coordinates_and_time():
    seen = []

    def field(coords, t):
        seen.append(t)
        x, y = coords
        return np.array([0.05 * np.sin(2 * np.pi * y), np.zeros_like(x)])

    sch = make_scheme(rates=RATES, dx=1 / 8, policy=VelocityFieldPolicy("prescribed", function=field))
    state = perturbed_uniform(sch, 8)
    out = run(state, sch, 2)
    assert seen == [0.0, sch.dt]
    assert abs(out.f.sum() - state.f.sum()) < 1e-13 * state.f.sum()


def test_equilibrium_is_fixed_point():
    for pol in ("zero", "constant:0.1,0", "fluid"):
        sch = make_scheme(rates=RATES, policy=pol)
        state = uniform(sch, 6, 1.2, (0.05, -0.02))
        assert np.abs(step(state, sch).f - state.f).max() < 1e-15


def test_results_independent_of_worker_count():
    sch = make_scheme(rates=RATES, dx=1 / 32, policy="fluid")
    state = perturbed_uniform(sch, 32, seed=5)
    one = collide_grid(state, sch, workers=1)
    four = collide_grid(state, sch, workers=4)
    assert np.array_equal(one, four)


# -- streaming --------------------------------------------------------------------------


def test_stream_moves_impulse_along_each_velocity():
    sch = make_scheme()
    for j, c in enumerate(sch.velocity_set.directions):
        f = np.zeros((9, 5, 5))
        f[j, 2, 2] = 1.0
        out = stream(LatticeState(f, 0.2), sch).f
        assert out[j, (2 + c[0]) % 5, (2 + c[1]) % 5] == 1.0
        assert out.sum() == 1.0
        twice = stream(stream(LatticeState(f, 0.2), sch), sch).f
        assert twice[j, (2 + 2 * c[0]) % 5, (2 + 2 * c[1]) % 5] == 1.0


def test_stream_preserves_uniform_state_and_mass(rng):
    sch = make_scheme()
    f = np.broadcast_to(rng.uniform(size=(9, 1, 1)), (9, 4, 4)).copy()
    assert np.array_equal(stream(LatticeState(f, 0.25), sch).f, f)
    g = rng.uniform(size=(9, 7, 5))
    out = stream(LatticeState(g, 0.25), sch)
    assert out.t == 1
    assert np.array_equal(np.sort(out.f.ravel()), np.sort(g.ravel()))


# -- macroscopic fields ---------------------------------------------------------------


def test_macro_fields_of_equilibrium(rng):
    sch = make_scheme()
    rho = rng.uniform(0.5, 2, (4, 4))
    u = rng.uniform(-0.2, 0.2, (2, 4, 4))
    mf = macro_fields(equilibrium_state(sch, rho, u), sch)
    assert np.allclose(mf.rho, rho, rtol=1e-15)
    assert np.allclose(mf.u, u, atol=1e-15)


def test_macro_fields_translation_equivariant(rng):
    sch = make_scheme()
    f = rng.uniform(0.05, 0.2, (9, 6, 6))
    shifted = np.roll(f, (2, -1), axis=(1, 2))
    a = macro_fields(LatticeState(f, 1.0), sch)
    b = macro_fields(LatticeState(shifted, 1.0), sch)
    assert np.array_equal(np.roll(a.rho, (2, -1), axis=(0, 1)), b.rho)


def test_nan_raises_with_step_index():
    sch = make_scheme()
    state = uniform(sch, 4)

    def poisoned(st, sc):
        out = step(st, sc)
        if out.t == 3:
            out.f[0, 0, 0] = np.nan
        return out

    with pytest.raises(InstabilityError) as err:
        run(state, sch, 10, step_fn=poisoned)
    assert err.value.step == 3


# -- near-equilibrium on smooth flows ------------------------------------------------------


def test_departure_from_equilibrium_is_first_order():
    from relvel.analysis import convergence_order

    errs, dxs = [], []
    for n in (16, 32, 64):
        sch = make_scheme(rates=(1.2, 1.2, 1.2, 1.5, 1.5, 1.4), dx=1 / n)
        state = run(taylor_green(sch, n), sch, n // 4)
        mf = macro_fields(state, sch)
        errs.append(np.abs(state.f - sch.equilibrium(mf.rho, mf.u)).max())
        dxs.append(1 / n)
    assert convergence_order(dxs, errs) == pytest.approx(1.0, abs=0.3)


# -- output formats --------------------------------------------------------------------------


def test_state_dump_roundtrip_and_layout(tmp_path, rng):
    f = rng.uniform(size=(9, 3, 4))
    state = LatticeState(f, 0.125, 17)
    path = tmp_path / "s.bin"
    write_state_dump(path, state)
    raw = path.read_bytes()
    assert len(raw) == 4 * 4 + 8 + 8 + 9 * 12 * 8
    header = np.frombuffer(raw[:16], dtype="<i4")
    assert header.tolist() == [2, 9, 3, 4]
    first = np.frombuffer(raw[32:32 + 9 * 8], dtype="<f8")
    assert np.array_equal(first, f[:, 0, 0])
    back = read_state_dump(path)
    assert back.t == 17 and back.dx == 0.125 and np.array_equal(back.f, f)


def test_fields_csv(tmp_path):
    sch = make_scheme(dx=0.5)
    state = uniform(sch, 2, 1.0, (0.1, 0.0))
    path = tmp_path / "f.csv"
    write_fields_csv(path, state, sch)
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,rho,u1,u2"
    assert len(lines) == 5
    x, y, rho, u1, u2 = map(float, lines[1].split(","))
    assert (x, y) == (0.25, 0.25) and rho == pytest.approx(1.0) and u1 == pytest.approx(0.1)
    assert os.path.getsize(path) > 0
