"""Run configuration: JSON documents and command-line flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .moment_basis import BASES
from .scheme import VelocityFieldPolicy

SCHEMES = ("relative", "cascaded")

PRESET_PARAMS = {
    "uniform": {"rho0": 1.0, "u": [0.0, 0.0]},
    "shear-wave": {"u0": 0.005, "length": 1.0},
    "taylor-green": {"u0": 0.005, "length": 1.0, "density": "pressure"},
    "perturbed-uniform": {"amplitude": 0.05, "u": [0.05, -0.03]},
}

DEFAULTS = {
    "scheme": "relative",
    "basis": "d2q9-orthogonal",
    "grid": [64, 64],
    "dx": None,
    "lam": 1.0,
    "rates": [1.2, 1.2, 1.2, 1.5, 1.5, 1.4],
    "policy": "zero",
    "preset": {"name": "taylor-green"},
    "steps": 100,
    "observe_every": 1,
    "snapshot_every": 0,
    "dump_last": 5,
    "out": "out",
    "seed": 0,
}


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class RunConfig:
    scheme: str
    basis: str
    grid: tuple[int, int]
    dx: float
    lam: float
    rates: tuple[float, ...]
    policy: str
    preset: dict
    steps: int
    observe_every: int
    snapshot_every: int
    dump_last: int
    out: str
    seed: int
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def dt(self) -> float:
        return self.dx / self.lam

    @property
    def length(self) -> float:
        return self.grid[0] * self.dx

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        d["grid"] = list(self.grid)
        d["rates"] = list(self.rates)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _int(path, value, minimum=0):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(path, f"must be >= {minimum}")
    return value


def _num(path, value, positive=True):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if positive and not value > 0:
        raise ConfigError(path, "must be > 0")
    return float(value)


def _vector(path, value, d=2):
    if not isinstance(value, (list, tuple)) or len(value) != d:
        raise ConfigError(path, f"expected a list of {d} numbers")
    return [_num(f"{path}[{i}]", v, positive=False) for i, v in enumerate(value)]


def _check_keys(path, doc, allowed):
    for k in doc:
        if k not in allowed:
            prefix = f"{path}." if path else ""
            raise ConfigError(prefix + k, "unknown key")


def _preset(doc) -> dict:
    if isinstance(doc, str):
        doc = {"name": doc}
    if not isinstance(doc, dict):
        raise ConfigError("preset", "expected an object with a 'name'")
    name = doc.get("name")
    if name not in PRESET_PARAMS:
        raise ConfigError("preset.name", f"unknown preset {name!r}; choose from {sorted(PRESET_PARAMS)}")
    defaults = PRESET_PARAMS[name]
    _check_keys("preset", doc, {"name", *defaults})
    out = {"name": name}
    for key, default in defaults.items():
        value = doc.get(key, default)
        path = f"preset.{key}"
        if key == "u":
            out[key] = _vector(path, value)
        elif key == "density":
            if value not in ("pressure", "uniform"):
                raise ConfigError(path, "must be 'pressure' or 'uniform'")
            out[key] = value
        else:
            out[key] = _num(path, value)
    return out


def validate(doc: dict) -> RunConfig:
    """Validate a raw document (already merged with defaults) into a RunConfig."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    _check_keys("", doc, DEFAULTS)
    merged = {**DEFAULTS, **doc}
    if "dt" in doc:
        raise ConfigError("dt", "time step is derived as dx / lam and cannot be set")

    scheme = merged["scheme"]
    if scheme not in SCHEMES:
        raise ConfigError("scheme", f"unknown scheme {scheme!r}; choose from {list(SCHEMES)}")
    basis = merged["basis"]
    if basis not in BASES:
        raise ConfigError("basis", f"unknown basis {basis!r}; choose from {sorted(BASES)}")

    grid = merged["grid"]
    if isinstance(grid, str):
        grid = parse_grid(grid, "grid")
    if not isinstance(grid, (list, tuple)) or len(grid) != 2:
        raise ConfigError("grid", "expected two extents")
    grid = tuple(_int(f"grid[{i}]", g, 4) for i, g in enumerate(grid))
    if grid[0] != grid[1]:
        raise ConfigError("grid", "presets live on a square periodic box; extents must be equal")

    lam = _num("lam", merged["lam"])
    preset = _preset(merged["preset"])
    length = preset.get("length", 1.0)
    dx = merged["dx"]
    dx = length / grid[0] if dx is None else _num("dx", dx)
    if abs(grid[0] * dx - length) > 1e-12 * length:
        raise ConfigError("dx", f"grid * dx = {grid[0] * dx} must equal the periodic length {length}")

    rates = merged["rates"]
    if not isinstance(rates, (list, tuple)) or len(rates) != 6:
        raise ConfigError("rates", "expected six rates s3..s8")
    rates = tuple(_num(f"rates[{i}]", r, positive=False) for i, r in enumerate(rates))
    for i, r in enumerate(rates):
        if not 0.0 < r < 2.0:
            raise ConfigError(f"rates[{i}]", f"relaxation rate {r} outside the open interval (0, 2)")

    policy = merged["policy"]
    if not isinstance(policy, str):
        raise ConfigError("policy", "expected 'zero', 'fluid' or 'constant:cx,cy'")
    try:
        pol = VelocityFieldPolicy.parse(policy)
    except ValueError as exc:
        raise ConfigError("policy", str(exc)) from None
    if scheme == "cascaded" and pol.kind != "fluid":
        raise ConfigError("policy", "the cascaded scheme always shifts by the fluid velocity")

    cfg = RunConfig(
        scheme=scheme, basis=basis, grid=grid, dx=dx, lam=lam, rates=rates,
        policy=str(pol), preset=preset,
        steps=_int("steps", merged["steps"]),
        observe_every=_int("observe_every", merged["observe_every"], 1),
        snapshot_every=_int("snapshot_every", merged["snapshot_every"]),
        dump_last=_int("dump_last", merged["dump_last"]),
        out=str(merged["out"]),
        seed=_int("seed", merged["seed"]),
    )
    if cfg.dump_last > cfg.steps + 1:
        raise ConfigError("dump_last", "cannot dump more states than the run produces")
    return cfg


def parse_grid(text: str, path: str = "--grid") -> list[int]:
    parts = text.lower().split("x")
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise ConfigError(path, f"expected NxN, got {text!r}") from None


def parse_rates(text: str) -> list[float]:
    try:
        return [float(Fraction(p)) for p in text.split(",")]
    except ValueError:
        raise ConfigError("--rates", f"expected s3,...,s8, got {text!r}") from None


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from None


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read an optional JSON file, apply flag overrides, validate."""
    doc = load_config(path) if path else {}
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = v
    return validate(doc)
