"""Analytic initial conditions and reference solutions on the periodic unit box."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scheme import LatticeState, SchemeDef, equilibrium_state, run


def node_grid(n: int, dx: float, d: int = 2):
    axes = [(np.arange(n) + 0.5) * dx for _ in range(d)]
    return np.meshgrid(*axes, indexing="ij")


def uniform(scheme: SchemeDef, n: int, rho0: float = 1.0, u0=(0.0, 0.0)) -> LatticeState:
    rho = np.full((n, n), rho0)
    u = np.array(u0, dtype=float)[:, None, None] * np.ones((1, n, n))
    return equilibrium_state(scheme, rho, u)


def shear_wave(scheme: SchemeDef, n: int, u0: float = 0.005, length: float = 1.0) -> LatticeState:
    """``u = (u0 sin(2 pi y / L), 0)`` at uniform density."""
    x, y = node_grid(n, scheme.dx)
    k = 2 * np.pi / length
    u = np.array([u0 * np.sin(k * y), np.zeros_like(y)])
    return equilibrium_state(scheme, np.ones_like(x), u)


@dataclass(frozen=True)
class TaylorGreen:
    """Decaying Taylor-Green vortex on the periodic box ``[0, L]^2``.

    ``density="pressure"`` starts from the incompressible pressure field;
    ``density="uniform"`` starts at ``rho0`` everywhere, which launches weak
    acoustic waves on top of the vortex.
    """

    u0: float = 0.005
    length: float = 1.0
    rho0: float = 1.0
    density: str = "pressure"

    def __post_init__(self):
        if self.density not in ("pressure", "uniform"):
            raise ValueError("density must be 'pressure' or 'uniform'")

    @property
    def k(self) -> float:
        return 2 * np.pi / self.length

    def fields(self, x, y, t: float, nu: float, cs2: float):
        """Incompressible solution; density carries the pressure as ``rho0 + p/cs2``."""
        k = self.k
        decay = np.exp(-2 * nu * k * k * t)
        u = self.u0 * np.sin(k * x) * np.cos(k * y) * decay
        v = -self.u0 * np.cos(k * x) * np.sin(k * y) * decay
        p = 0.25 * self.rho0 * self.u0 ** 2 * (np.cos(2 * k * x) + np.cos(2 * k * y)) * decay ** 2
        return self.rho0 + p / cs2, np.array([u, v])

    def initial_state(self, scheme: SchemeDef, n: int) -> LatticeState:
        x, y = node_grid(n, scheme.dx)
        rho, u = self.fields(x, y, 0.0, 0.0, scheme.cs2)
        if self.density == "uniform":
            rho = np.full_like(rho, self.rho0)
        return equilibrium_state(scheme, rho, u)


def taylor_green(scheme: SchemeDef, n: int, u0: float = 0.005, length: float = 1.0,
                 density: str = "pressure") -> LatticeState:
    return TaylorGreen(u0, length, density=density).initial_state(scheme, n)


# Taylor-Green set-up used for the equivalent-equation residual studies.  The
# vortex alone is a steady Euler flow, so its time derivatives are O(dt) and
# the O(dt^2) residual coefficients nearly vanish; the acoustic content of the
# uniform-density start keeps them generic.
RESIDUAL_STUDY = TaylorGreen(u0=0.02, density="uniform")
RESIDUAL_TIME = 0.5
RESIDUAL_RATES = (1.2, 1.2, 1.2, 1.5, 1.5, 1.4)
RESIDUAL_GRIDS = (32, 64, 128)


def perturbed_uniform(scheme: SchemeDef, n: int, seed: int = 0, amplitude: float = 0.05,
                      u0=(0.05, -0.03)) -> LatticeState:
    """Equilibrium at ``(1, u0)`` plus a seeded random non-equilibrium part."""
    rng = np.random.default_rng(seed)
    state = uniform(scheme, n, 1.0, u0)
    proj = scheme.m0_inv @ np.diag([0.0] * (scheme.d + 1) + [1.0] * (scheme.q - scheme.d - 1)) @ scheme.m0
    noise = amplitude * rng.standard_normal(state.f.shape) * state.f
    state.f = state.f + np.einsum("ij,j...->i...", proj, noise)
    return state


PRESETS = {
    "uniform": uniform,
    "shear-wave": shear_wave,
    "taylor-green": taylor_green,
    "perturbed-uniform": perturbed_uniform,
}


def steps_for_time(scheme: SchemeDef, t_final: float) -> int:
    n = t_final / scheme.dt
    steps = int(round(n))
    if abs(steps - n) > 1e-9 * max(1.0, n):
        raise ValueError(f"physical time {t_final} is not a whole number of steps of {scheme.dt}")
    return steps


def history_around(scheme: SchemeDef, state: LatticeState, center_step: int, width: int = 5,
                   step_fn=None) -> list[LatticeState]:
    """Consecutive states centred on ``center_step`` (counting from ``state``)."""
    half = width // 2
    if center_step < half:
        raise ValueError("not enough steps before the centre")
    state = run(state, scheme, center_step - half, step_fn=step_fn)
    out = [state]
    for _ in range(width - 1):
        state = run(state, scheme, 1, step_fn=step_fn)
        out.append(state)
    return out
