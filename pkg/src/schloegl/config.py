"""Scenario configuration: YAML schema, validation and round-tripping.

A scenario file looks like::

    name: rhc_target0_Cu30
    profile: desk
    grid: {n_nodes: 251, length: 1.0, nu: 0.1}
    reaction: {zeta: [-1.0, 0.0, 2.0]}
    actuators: {M: 4, r: 0.1}
    target: {kind: zero}
    initial_error: -4+8*cos(2*pi*x**2)
    controller: {kind: rhc, C_u: 30.0, T_rh: 1.0, delta_rh: 0.5, M1: 20}
    time: {T: 15.0, dt: 0.001}
    output: {directory: runs/rhc_target0_Cu30, snapshot_every: 0.01}

Keys are exactly the dataclass fields below; unknown keys are rejected.
``grid.n_nodes`` and ``time.dt`` may be omitted, in which case the
``profile`` (``desk`` or ``paper``) supplies them.
"""
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import expr
from .errors import ConfigurationError
from .ocp import OptimizerOptions

PROFILES = {
    "desk": {"n_nodes": 251, "dt": 1e-3},
    "paper": {"n_nodes": 1001, "dt": 1e-4},
}
CONTROLLERS = ("free", "explicit", "rhc")
TARGET_KINDS = ("zero", "separable_sin_cos", "custom")


@dataclass
class GridConfig:
    n_nodes: int = None
    length: float = 1.0
    nu: float = 0.1


@dataclass
class ReactionConfig:
    zeta: list = field(default_factory=lambda: [-1.0, 0.0, 2.0])


@dataclass
class ActuatorConfig:
    M: int = 4
    r: float = 0.1


@dataclass
class TargetConfig:
    kind: str = "zero"
    expression: str = None
    amplitude: float = 1.0
    omega: float = 3.0
    wavenumber: int = 1


@dataclass
class ControllerConfig:
    kind: str = "free"
    lam: float = None
    C_u: float = None
    norm_kind: str = "linf"
    variant: str = "oblique"
    T_rh: float = 1.0
    delta_rh: float = 0.5
    M1: int = 20
    state_weight: float = 1.0
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)


@dataclass
class TimeConfig:
    T: float = 15.0
    dt: float = None


@dataclass
class OutputConfig:
    directory: str = None
    snapshot_every: float = 0.01
    snapshot_format: str = "npz"


@dataclass
class ForcingConfig:
    """Persistent bound check on the manufactured forcing over windows of length ``tau_h``."""

    tau_h: float = 1.0
    C_h: float = None


@dataclass
class ScenarioConfig:
    name: str
    initial_error: str
    profile: str = "desk"
    grid: GridConfig = field(default_factory=GridConfig)
    reaction: ReactionConfig = field(default_factory=ReactionConfig)
    actuators: ActuatorConfig = field(default_factory=ActuatorConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    forcing: ForcingConfig = field(default_factory=ForcingConfig)

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------
    def validate(self):
        if not isinstance(self.name, str) or not self.name:
            raise ConfigurationError("name must be a nonempty string")
        if self.profile not in PROFILES:
            raise ConfigurationError(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")
        prof = PROFILES[self.profile]
        if self.grid.n_nodes is None:
            self.grid.n_nodes = prof["n_nodes"]
        if self.time.dt is None:
            self.time.dt = prof["dt"]
        if self.output.directory is None:
            self.output.directory = f"runs/{self.name}"

        g = self.grid
        _require(isinstance(g.n_nodes, int) and g.n_nodes >= 3, "grid.n_nodes must be an integer >= 3")
        _positive("grid.length", g.length)
        _positive("grid.nu", g.nu)
        _require(len(self.reaction.zeta) == 3 and all(_finite(v) for v in self.reaction.zeta),
                 "reaction.zeta needs three finite roots")
        _require(isinstance(self.actuators.M, int) and self.actuators.M >= 1,
                 "actuators.M must be a positive integer")
        _require(_finite(self.actuators.r) and 0 < self.actuators.r < 1, "actuators.r must lie in (0, 1)")

        t = self.target
        _require(t.kind in TARGET_KINDS, f"target.kind must be one of {TARGET_KINDS}")
        if t.kind == "custom":
            _require(isinstance(t.expression, str), "target.expression is required for a custom target")
            expr.parse(t.expression)
        expr.parse(self.initial_error)

        _positive("time.T", self.time.T)
        _positive("time.dt", self.time.dt)
        n = round(self.time.T / self.time.dt)
        _require(abs(n * self.time.dt - self.time.T) <= 1e-9 * self.time.T,
                 f"time.T={self.time.T} is not a multiple of time.dt={self.time.dt}")

        c = self.controller
        _require(c.kind in CONTROLLERS, f"controller.kind must be one of {CONTROLLERS}")
        _require(c.norm_kind in ("linf", "l2"), "controller.norm_kind must be 'linf' or 'l2'")
        _require(c.variant in ("oblique", "orthogonal"), "controller.variant must be 'oblique' or 'orthogonal'")
        _require(isinstance(c.M1, int) and 1 <= c.M1 <= g.n_nodes, "controller.M1 must lie in [1, n_nodes]")
        if c.kind == "explicit":
            _require(c.lam is not None, "controller.lam is required for the explicit feedback")
            _require(_finite(c.lam) and c.lam >= 0, "controller.lam must be nonnegative")
        if c.kind in ("explicit", "rhc"):
            _require(c.C_u is not None, f"controller.C_u is required for the {c.kind} controller")
            _require(c.C_u == math.inf or (_finite(c.C_u) and c.C_u > 0),
                     "controller.C_u must be positive")
        if c.kind == "rhc":
            _positive("controller.T_rh", c.T_rh)
            _positive("controller.delta_rh", c.delta_rh)
            _positive("controller.state_weight", c.state_weight)
            _require(c.delta_rh <= c.T_rh, "controller.delta_rh must not exceed controller.T_rh")
            for name, step in (("T", self.time.T), ("T_rh", c.T_rh), ("delta_rh", c.delta_rh)):
                k = round(step / self.time.dt)
                _require(abs(k * self.time.dt - step) <= 1e-9 * step,
                         f"{name}={step} is not a multiple of time.dt={self.time.dt}")
            k = round(self.time.T / c.delta_rh)
            _require(abs(k * c.delta_rh - self.time.T) <= 1e-9 * self.time.T,
                     "time.T must be a multiple of controller.delta_rh")
            o = c.optimizer
            _require(isinstance(o.max_iters, int) and o.max_iters >= 1, "optimizer.max_iters must be >= 1")
            _positive("optimizer.tol", o.tol)
            _require(0 < o.tau_min <= o.tau0 <= o.tau_max, "optimizer needs 0 < tau_min <= tau0 <= tau_max")

        out = self.output
        _require(out.snapshot_every is None or (_finite(out.snapshot_every) and out.snapshot_every >= 0),
                 "output.snapshot_every must be nonnegative")
        _require(out.snapshot_format in ("npz", "json", "none"),
                 "output.snapshot_format must be 'npz', 'json' or 'none'")
        _positive("forcing.tau_h", self.forcing.tau_h)
        _require(self.forcing.C_h is None or (_finite(self.forcing.C_h) and self.forcing.C_h >= 0),
                 "forcing.C_h must be nonnegative")

    def with_profile(self, profile):
        """Copy with grid resolution and time step taken from ``profile``."""
        if profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {profile!r}")
        d = self.to_dict()
        d["profile"] = profile
        d["grid"]["n_nodes"] = PROFILES[profile]["n_nodes"]
        d["time"]["dt"] = PROFILES[profile]["dt"]
        return ScenarioConfig.from_dict(d)

    # ------------------------------------------------------------------
    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigurationError("scenario must be a mapping")
        data = dict(data)
        sections = {
            "grid": GridConfig, "reaction": ReactionConfig, "actuators": ActuatorConfig,
            "target": TargetConfig, "controller": ControllerConfig, "time": TimeConfig,
            "output": OutputConfig, "forcing": ForcingConfig,
        }
        _check_keys("scenario", data, {f.name for f in dataclasses.fields(cls)})
        for key in ("name", "initial_error"):
            if key not in data:
                raise ConfigurationError(f"missing required key {key!r}")
        kwargs = {"name": data["name"], "initial_error": str(data["initial_error"])}
        if "profile" in data:
            kwargs["profile"] = data["profile"]
        for key, klass in sections.items():
            section = data.get(key) or {}
            if not isinstance(section, dict):
                raise ConfigurationError(f"section {key!r} must be a mapping")
            section = dict(section)
            _check_keys(key, section, {f.name for f in dataclasses.fields(klass)})
            if key == "controller" and "optimizer" in section:
                opt = section["optimizer"] or {}
                _check_keys("controller.optimizer", opt,
                            {f.name for f in dataclasses.fields(OptimizerOptions)})
                section["optimizer"] = OptimizerOptions(**_numbers(opt))
            kwargs[key] = klass(**_numbers(section))
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML: {exc}") from exc
        return cls.from_dict(data)

    def dumps(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def dump(self, path):
        Path(path).write_text(self.dumps())


def _require(cond, message):
    if not cond:
        raise ConfigurationError(message)


def _finite(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _positive(name, v):
    _require(_finite(v) and v > 0, f"{name} must be a positive number, got {v!r}")


def _check_keys(where, data, allowed):
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {unknown}; allowed: {sorted(allowed)}")


def _numbers(section):
    """Accept YAML strings such as ``1e-3`` or ``inf`` where numbers are expected."""
    out = {}
    for k, v in section.items():
        if isinstance(v, str) and k not in ("kind", "expression", "norm_kind", "variant",
                                            "directory", "snapshot_format"):
            try:
                v = float(v)
            except ValueError:
                pass
        if isinstance(v, float) and v.is_integer() and k in ("n_nodes", "M", "M1", "wavenumber",
                                                             "max_iters", "max_rejections"):
            v = int(v)
        out[k] = v
    return out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def bundled_scenarios():
    """Names of the scenario files shipped with the package."""
    from importlib import resources
    root = resources.files("schloegl") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def bundled_path(name):
    from importlib import resources
    path = resources.files("schloegl") / "scenarios" / f"{name}.yaml"
    if not path.is_file():
        raise ConfigurationError(f"no bundled scenario {name!r}; available: {bundled_scenarios()}")
    return Path(str(path))
