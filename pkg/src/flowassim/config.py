"""Scenario configuration: a strict TOML schema mapped onto frozen dataclasses.

Every table and key is checked; unknown keys are errors so a typo in an
experiment definition cannot silently fall back to a default.  Stations
along the channel can be given directly (``station``), as an angle into
the bend (``bend_angle``), or as a distance past the end of the bend
(``after_bend``).
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .mesh import ChannelKind, ChannelSpec, bend_station

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "StationSpec",
    "GeometryConfig",
    "DiscretizationConfig",
    "PhysicsConfig",
    "InflowConfig",
    "NoiseConfig",
    "ObservationConfig",
    "AssimilationConfig",
    "NewtonConfig",
    "SweepConfig",
    "ComparatorConfig",
    "ScenarioConfig",
    "load_config",
    "parse_config",
    "apply_overrides",
]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StationSpec:
    """Exactly one of ``station``, ``bend_angle`` (degrees) or ``after_bend`` (m)."""

    station: float | None = None
    bend_angle: float | None = None
    after_bend: float | None = None

    def __post_init__(self):
        given = [v is not None for v in (self.station, self.bend_angle, self.after_bend)]
        if sum(given) != 1:
            raise ConfigError("a station needs exactly one of station, bend_angle, after_bend")

    def resolve(self, spec: ChannelSpec) -> float:
        if self.station is not None:
            return float(self.station)
        if spec.kind is not ChannelKind.CURVED:
            raise ConfigError("bend_angle/after_bend stations need a curved channel")
        if self.bend_angle is not None:
            return bend_station(spec, self.bend_angle)
        return bend_station(spec, spec.bend_angle_deg) + self.after_bend


@dataclass(frozen=True)
class GeometryConfig:
    kind: str = "straight"
    length: float = 5.0
    half_height: float = 0.5
    bend_angle_deg: float = 90.0
    bend_radius: float = 1.5
    downstream_length: float = 2.5
    truncation: StationSpec | None = None

    def channel(self) -> ChannelSpec:
        spec = ChannelSpec(length=self.length, half_height=self.half_height, kind=self.kind,
                           bend_angle_deg=self.bend_angle_deg, bend_radius=self.bend_radius,
                           downstream_length=self.downstream_length)
        if self.truncation is None:
            return spec
        return dataclasses.replace(spec, truncation_x=self.truncation.resolve(spec))


@dataclass(frozen=True)
class DiscretizationConfig:
    family: str = "P2P1"
    h: float = 0.05
    ground_truth_h: float | None = None
    stabilization: bool = False
    pressure_scale: float = 1.0
    convection: bool = True

    def __post_init__(self):
        if self.family not in ("P2P1", "P1P1"):
            raise ConfigError(f"unknown element family {self.family!r}")
        if not self.h > 0:
            raise ConfigError("h must be positive")
        if self.ground_truth_h is not None and self.ground_truth_h > self.h:
            raise ConfigError("ground-truth mesh must be at least as fine as the working mesh")

    @property
    def truth_h(self) -> float:
        return self.h if self.ground_truth_h is None else self.ground_truth_h


@dataclass(frozen=True)
class PhysicsConfig:
    """Give either ``nu`` (m^2/s) or ``reynolds`` (mean inflow speed times width over nu)."""

    nu: float | None = None
    reynolds: float | None = None
    mu: float = 1.0

    def __post_init__(self):
        if (self.nu is None) == (self.reynolds is None):
            raise ConfigError("physics needs exactly one of nu, reynolds")
        if self.nu is not None and not self.nu > 0:
            raise ConfigError("nu must be positive")
        if self.reynolds is not None and not self.reynolds > 0:
            raise ConfigError("reynolds must be positive")
        if not self.mu > 0:
            raise ConfigError("mu must be positive")


@dataclass(frozen=True)
class InflowConfig:
    """Ground-truth inflow: parabolic, normal to the inlet, by peak speed or flow rate."""

    profile: str = "parabolic"
    peak: float | None = None
    flow_rate: float | None = None

    def __post_init__(self):
        if self.profile != "parabolic":
            raise ConfigError(f"unknown inflow profile {self.profile!r}")
        if (self.peak is None) == (self.flow_rate is None):
            raise ConfigError("inflow needs exactly one of peak, flow_rate")

    def peak_speed(self, half_height: float) -> float:
        if self.peak is not None:
            return float(self.peak)
        # flow rate per unit depth over the width 2H; peak = 3/2 mean
        return 1.5 * self.flow_rate / (2 * half_height)


@dataclass(frozen=True)
class NoiseConfig:
    enabled: bool = False
    level: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.enabled and self.seed is None:
            raise ConfigError("noise.seed is mandatory when noise is enabled")
        if self.level < 0:
            raise ConfigError("noise level must be nonnegative")


@dataclass(frozen=True)
class ObservationConfig:
    sections: tuple = ()
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if not self.sections:
            raise ConfigError("at least one observation section is required")


@dataclass(frozen=True)
class AssimilationConfig:
    control: str = "dirichlet"
    beta1: float = 0.5
    beta2: float = 2.5e-5
    beta2_ladder: tuple = ()
    tol: float = 1e-6
    max_iter: int = 500
    hessian_init: str = "scaled"

    def __post_init__(self):
        if self.control not in ("dirichlet", "neumann"):
            raise ConfigError(f"unknown control kind {self.control!r}")
        if self.hessian_init not in ("scaled", "metric"):
            raise ConfigError(f"unknown hessian_init {self.hessian_init!r}")
        if self.beta1 < 0 or self.beta2 < 0 or not (self.beta1 > 0 or self.beta2 > 0):
            raise ConfigError("weights must be nonnegative and not both zero")
        if not self.tol > 0 or self.max_iter < 1:
            raise ConfigError("optimizer tolerance and iteration limit must be positive")


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-10
    max_iter: int = 50


@dataclass(frozen=True)
class SweepConfig:
    """``axis`` is beta2, reynolds, h or sections; ``values`` the sweep points.

    For ``sections`` each value is a list of indices into the observation
    sections.  ``reference_h`` is the reference mesh of an ``h`` sweep.
    """

    axis: str = "beta2"
    values: tuple = ()
    reference_h: float | None = None
    workers: int = 1

    def __post_init__(self):
        if self.axis not in ("beta2", "reynolds", "h", "sections"):
            raise ConfigError(f"unknown sweep axis {self.axis!r}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")


@dataclass(frozen=True)
class ComparatorConfig:
    enabled: bool = False
    # wall edges closer than this to the inlet (centerline distance) are left
    # out of the WSS comparison
    inlet_exclusion: float = 1.0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    geometry: GeometryConfig
    discretization: DiscretizationConfig
    physics: PhysicsConfig
    inflow: InflowConfig
    observations: ObservationConfig
    assimilation: AssimilationConfig = field(default_factory=AssimilationConfig)
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    sweep: SweepConfig | None = None
    comparator: ComparatorConfig = field(default_factory=ComparatorConfig)
    output_dir: str = "out"
    schema_version: int = SCHEMA_VERSION

    @property
    def channel(self) -> ChannelSpec:
        return self.geometry.channel()

    @property
    def nu(self) -> float:
        """Kinematic viscosity; from the Reynolds number via mean speed 2/3 peak and width 2H."""
        if self.physics.nu is not None:
            return float(self.physics.nu)
        mean = 2.0 / 3.0 * self.inflow.peak_speed(self.geometry.half_height)
        return mean * 2 * self.geometry.half_height / self.physics.reynolds

    def section_stations(self) -> list:
        spec = self.channel
        return [s.resolve(spec) for s in self.observations.sections]


_TYPES = {float: (int, float), int: (int,), str: (str,), bool: (bool,)}


def _coerce(name, value, typ):
    if typ in _TYPES:
        ok = isinstance(value, _TYPES[typ]) and not (typ is not bool and isinstance(value, bool))
        if not ok:
            raise ConfigError(f"{name}: expected {typ.__name__}, got {type(value).__name__}")
        return typ(value)
    return value


def _build(cls, data, where, hints):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = hints[key](f"{where}.{key}", value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _scalar(typ, optional=False):
    def conv(name, value):
        return _coerce(name, value, typ)
    return conv


def _float_list(name, value):
    if not isinstance(value, list):
        raise ConfigError(f"{name}: expected a list")
    return tuple(_coerce(f"{name}[{i}]", v, float) for i, v in enumerate(value))


def _station(name, value):
    return _build(StationSpec, value, name, {k: _scalar(float) for k in ("station", "bend_angle", "after_bend")})


def _station_list(name, value):
    if not isinstance(value, list):
        raise ConfigError(f"{name}: expected a list of station tables")
    return tuple(_station(f"{name}[{i}]", v) for i, v in enumerate(value))


def _sweep_values(name, value):
    if not isinstance(value, list):
        raise ConfigError(f"{name}: expected a list")
    out = []
    for i, v in enumerate(value):
        if isinstance(v, list):
            out.append(tuple(_coerce(f"{name}[{i}]", x, int) for x in v))
        else:
            out.append(_coerce(f"{name}[{i}]", v, float))
    return tuple(out)


_HINTS = {
    GeometryConfig: dict(kind=_scalar(str), length=_scalar(float), half_height=_scalar(float),
                         bend_angle_deg=_scalar(float), bend_radius=_scalar(float),
                         downstream_length=_scalar(float), truncation=_station),
    DiscretizationConfig: dict(family=_scalar(str), h=_scalar(float), ground_truth_h=_scalar(float),
                               stabilization=_scalar(bool), pressure_scale=_scalar(float),
                               convection=_scalar(bool)),
    PhysicsConfig: dict(nu=_scalar(float), reynolds=_scalar(float), mu=_scalar(float)),
    InflowConfig: dict(profile=_scalar(str), peak=_scalar(float), flow_rate=_scalar(float)),
    NoiseConfig: dict(enabled=_scalar(bool), level=_scalar(float), seed=_scalar(int)),
    AssimilationConfig: dict(control=_scalar(str), beta1=_scalar(float), beta2=_scalar(float),
                             beta2_ladder=_float_list, tol=_scalar(float), max_iter=_scalar(int),
                             hessian_init=_scalar(str)),
    NewtonConfig: dict(tol=_scalar(float), max_iter=_scalar(int)),
    SweepConfig: dict(axis=_scalar(str), values=_sweep_values, reference_h=_scalar(float),
                      workers=_scalar(int)),
    ComparatorConfig: dict(enabled=_scalar(bool), inlet_exclusion=_scalar(float)),
}


def _table(cls):
    return lambda name, value: _build(cls, value, name, _HINTS[cls])


def _observations(name, value):
    return _build(ObservationConfig, value, name,
                  dict(sections=_station_list, noise=_table(NoiseConfig)))


_TOP = dict(
    name=_scalar(str), output_dir=_scalar(str), schema_version=_scalar(int),
    geometry=_table(GeometryConfig), discretization=_table(DiscretizationConfig),
    physics=_table(PhysicsConfig), inflow=_table(InflowConfig), observations=_observations,
    assimilation=_table(AssimilationConfig), newton=_table(NewtonConfig),
    sweep=_table(SweepConfig), comparator=_table(ComparatorConfig),
)


def parse_config(data: dict) -> ScenarioConfig:
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    for required in ("name", "geometry", "discretization", "physics", "inflow", "observations"):
        if required not in data:
            raise ConfigError(f"missing [{required}]" if required != "name" else "missing name")
    try:
        cfg = _build(ScenarioConfig, data, "config", _TOP)
        cfg.section_stations()  # validates geometry, truncation and stations
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data)


def apply_overrides(cfg: ScenarioConfig, **overrides) -> ScenarioConfig:
    """Return a copy with dotted-path overrides, e.g. ``{"assimilation.beta2": 1e-5}``.

    ``None`` values are ignored so CLI flags that were not given leave the
    file's value in place.
    """
    for path, value in overrides.items():
        if value is None:
            continue
        parts = path.split(".")
        cfg = _replace_path(cfg, parts, value)
    return cfg


def _replace_path(obj, parts, value):
    name = parts[0]
    if not any(f.name == name for f in dataclasses.fields(obj)):
        raise ConfigError(f"unknown override {'.'.join(parts)}")
    if len(parts) == 1:
        try:
            return dataclasses.replace(obj, **{name: value})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return dataclasses.replace(obj, **{name: _replace_path(getattr(obj, name), parts[1:], value)})
