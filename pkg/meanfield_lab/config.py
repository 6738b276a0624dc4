"""
Experiment configuration.

A TOML file of flat sections is parsed with tomllib and validated against
dataclass schemas with a strict key whitelist. Physical quantities carry
their unit in the key name. Builders turn validated sections into model,
integrator, law and grid objects.
"""

import logging
import math
import tomllib
import typing
from dataclasses import MISSING, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from meanfield_lab.errors import ConfigError, ModelError
from meanfield_lab.kernels import ExternalForce, Mollifier, create_potential, create_rank_kernel
from meanfield_lab.laws import InitialLaw, create_law
from meanfield_lab.model import (
    AgentParams, AlignmentParams, ChemistryParams, ModelKind, ModelSpec, keller_segel_model,
)
from meanfield_lab.particles import IntegratorConfig, ReplicaPlan
from meanfield_lab.utils import hash_bytes

logger = logging.getLogger(__name__)


class Experiment(str, Enum):
    PARTICLES = "particles"
    VLASOV = "vlasov"
    EULER = "euler"
    KELLER_SEGEL = "keller_segel"
    COMPARE_PV = "compare_pv"
    COMPARE_VE = "compare_ve"
    RATE_STUDY = "rate_study"
    EPS_SWEEP = "eps_sweep"
    KS_LIMIT = "ks_limit"


REQUIRED_SECTIONS: Dict[Experiment, Tuple[str, ...]] = {
    Experiment.PARTICLES: ("model", "law", "replicas", "integrator"),
    Experiment.VLASOV: ("model", "law", "grid"),
    Experiment.EULER: ("model", "law", "hydro"),
    Experiment.KELLER_SEGEL: ("chemistry", "law", "keller_segel"),
    Experiment.COMPARE_PV: ("model", "law", "replicas", "integrator", "grid"),
    Experiment.COMPARE_VE: ("model", "law", "grid", "hydro"),
    Experiment.RATE_STUDY: ("model", "law", "integrator", "grid", "rate_study"),
    Experiment.EPS_SWEEP: ("model", "law", "grid", "hydro", "eps_sweep"),
    Experiment.KS_LIMIT: ("chemistry", "law", "hydro", "keller_segel", "ks_limit"),
}

# config key -> constructor argument, per catalogue entry
POTENTIAL_KEYS = {
    "harmonic": {"strength_rate2": "strength"},
    "morse": {"depth_energy": "depth", "length": "length"},
    "gaussian_bump": {"amplitude_energy": "amplitude", "length": "length"},
    "dirac_mollifier": {"radius_length": "radius", "coupling": "coupling"},
    "tabulated": {"radii_length": "radii", "slopes_rate2": "slopes"},
}
RANK_KERNEL_KEYS = {
    "clamped_linear": {"strength_rate": "strength", "cutoff": "cutoff", "floor_rate": "floor"},
    "smooth_step": {"strength_rate": "strength", "floor_rate": "floor"},
}
LAW_KEYS = {
    "gaussian": {"mean_x_length": "mean_x", "std_x_length": "std_x",
                 "mean_v_speed": "mean_v", "std_v_speed": "std_v"},
    "uniform_box": {"x_min_length": "x_min", "x_max_length": "x_max",
                    "v_min_speed": "v_min", "v_max_speed": "v_max"},
    "two_cluster": {"separation_length": "separation", "std_x_length": "std_x",
                    "velocity_offset_speed": "velocity_offset", "std_v_speed": "std_v"},
}


# ---------------------------------------------------------------------------
# Section schemas
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunSection:
    experiment: str
    seed: int
    output_dir: str = "results"
    workers: Optional[int] = None


@dataclass(frozen=True)
class ModelSection:
    kind: str
    dim: int = 1
    two_body_sign: int = -1
    sign_convention: int = -1
    friction: bool = False
    mass_scale_eps: float = 1.0


@dataclass(frozen=True)
class AlignmentSection:
    coupling_rate: float = 1.0
    radius_length: float = 1.0
    beta: float = 0.5


@dataclass(frozen=True)
class ChemistrySection:
    eta: float = 1.0
    kappa_rate: float = 1.0
    diffusivity_area_rate: float = 1.0
    chi_radius_length: float = 0.25


@dataclass(frozen=True)
class ExternalForceSection:
    kind: str = "none"
    vector_accel: Optional[List[float]] = None
    stiffness_rate2: float = 0.0


@dataclass(frozen=True)
class AgentSection:
    weights: str = "uniform"
    confidence_radius: float = 1.0
    neighbours: int = 1
    leader_weight: float = 1.0


@dataclass(frozen=True)
class IntegratorSection:
    dt_time: float
    t_final_time: float
    scheme: str = "rk4"
    chem_substeps: int = 1
    boundary: str = "free"
    box_lower: float = 0.0
    box_length: float = 1.0
    chem_nodes: int = 64


@dataclass(frozen=True)
class ReplicasSection:
    replicas: int
    n_particles: int
    mass: float = 1.0


@dataclass(frozen=True)
class GridSection:
    """Phase-space grid of the kinetic solver."""
    n_x: int
    n_v: int
    x_min_length: float
    x_max_length: float
    v_min_speed: float
    v_max_speed: float
    dt_time: float
    t_final_time: float
    include_decay: bool = True


@dataclass(frozen=True)
class HydroSection:
    n_x: int
    x_min_length: float
    x_max_length: float
    dt_time: float
    t_final_time: float
    eps_scaling: float = 1.0
    eps_p_pressure: float = 0.0
    chem_scheme: str = "explicit"
    velocity_profile: str = "law"
    velocity_amplitude_speed: float = 0.0
    sigma_v_speed: Optional[float] = None
    scaled: bool = False


@dataclass(frozen=True)
class KellerSegelSection:
    n_x: int
    x_min_length: float
    x_max_length: float
    dt_time: float
    t_final_time: float
    drift: str = "gradient"
    coefficient: Optional[float] = None


@dataclass(frozen=True)
class RateStudySection:
    n_values: List[int]
    time: float
    replicas: int
    marginal_order: int = 1
    n_ref: int = 2000
    projections: int = 256
    subtract_noise_floor: bool = True


@dataclass(frozen=True)
class EpsSweepSection:
    eps_p_values: List[float]


@dataclass(frozen=True)
class KsLimitSection:
    eps_values: List[float]
    width_scale: float = 1.0
    dt_time: Optional[float] = None


@dataclass(frozen=True)
class OutputSection:
    snapshot_times: List[float] = field(default_factory=lambda: [0.0])
    write_fields: bool = True


SECTION_SCHEMAS = {
    "run": RunSection,
    "model": ModelSection,
    "alignment": AlignmentSection,
    "chemistry": ChemistrySection,
    "external_force": ExternalForceSection,
    "agent": AgentSection,
    "integrator": IntegratorSection,
    "replicas": ReplicasSection,
    "grid": GridSection,
    "hydro": HydroSection,
    "keller_segel": KellerSegelSection,
    "rate_study": RateStudySection,
    "eps_sweep": EpsSweepSection,
    "ks_limit": KsLimitSection,
    "output": OutputSection,
}
CATALOGUE_SECTIONS = ("potential", "rank_kernel", "law")


def _check_value(value: Any, expected, section: str, key: str) -> Any:
    origin = typing.get_origin(expected)
    if origin is typing.Union:
        options = [t for t in typing.get_args(expected) if t is not type(None)]
        if value is None:
            return None
        return _check_value(value, options[0], section, key)
    if origin in (list, List):
        (item_type,) = typing.get_args(expected)
        if not isinstance(value, list) or not value:
            raise ConfigError(f"'{key}' must be a non-empty list", section)
        return [_check_value(item, item_type, section, key) for item in value]
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{key}' must be true or false", section)
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{key}' must be an integer", section)
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{key}' must be a number", section)
        if not math.isfinite(value):
            raise ConfigError(f"'{key}' must be finite", section)
        return float(value)
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"'{key}' must be a string", section)
        return value
    return value


def parse_section(schema, data: Dict[str, Any], section: str):
    """Build a section dataclass, rejecting unknown keys and missing required keys."""
    if not isinstance(data, dict):
        raise ConfigError("must be a table", section)
    known = {f.name: f for f in fields(schema)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}", section)
    missing = [name for name, f in known.items()
               if name not in data and f.default is MISSING and f.default_factory is MISSING]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}", section)
    hints = typing.get_type_hints(schema)
    values = {name: _check_value(value, hints[name], section, name) for name, value in data.items()}
    return schema(**values)


def parse_catalogue(data: Dict[str, Any], section: str, key_maps: Dict[str, Dict[str, str]]
                    ) -> Tuple[str, Dict[str, Any]]:
    """Validate a ``name = ...`` section against the keys of the named entry."""
    if not isinstance(data, dict) or "name" not in data:
        raise ConfigError("needs a 'name' key", section)
    name = data["name"]
    if name not in key_maps:
        raise ConfigError(f"unknown name '{name}', expected one of {sorted(key_maps)}", section)
    allowed = key_maps[name]
    params = {}
    for key, value in data.items():
        if key == "name":
            continue
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' for '{name}'", section)
        if isinstance(value, bool) or not isinstance(value, (int, float, list)):
            raise ConfigError(f"'{key}' must be numeric", section)
        params[allowed[key]] = value
    return name, params


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Validated configuration of one experiment."""
    run: RunSection
    sections: Dict[str, Any]
    catalogues: Dict[str, Tuple[str, Dict[str, Any]]]
    source_hash: str
    path: Optional[Path] = None

    @property
    def experiment(self) -> Experiment:
        return Experiment(self.run.experiment)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def output_dir(self) -> Path:
        return Path(self.run.output_dir)

    def section(self, name: str):
        if name not in self.sections:
            raise ConfigError("section is missing", name)
        return self.sections[name]

    def has(self, name: str) -> bool:
        return name in self.sections or name in self.catalogues

    @property
    def output(self) -> OutputSection:
        return self.sections.get("output", OutputSection())

    # -- builders ---------------------------------------------------------

    def build_model(self) -> ModelSpec:
        """ModelSpec from [model] plus the optional kernel sections."""
        return _wrap_model_errors("model", lambda: self._model())

    def _model(self) -> ModelSpec:
        m: ModelSection = self.section("model")
        potential = None
        if "potential" in self.catalogues:
            name, params = self.catalogues["potential"]
            potential = create_potential(name, m.dim, **params)
        rank_kernel = None
        if "rank_kernel" in self.catalogues:
            name, params = self.catalogues["rank_kernel"]
            rank_kernel = create_rank_kernel(name, **params)
        alignment = None
        if "alignment" in self.sections:
            a: AlignmentSection = self.sections["alignment"]
            alignment = AlignmentParams(a.coupling_rate, a.radius_length, a.beta)
        chemistry = self.build_chemistry(m.dim) if "chemistry" in self.sections else None
        external = None
        if "external_force" in self.sections:
            e: ExternalForceSection = self.sections["external_force"]
            external = ExternalForce(e.kind, e.vector_accel, e.stiffness_rate2)
        agent = None
        if "agent" in self.sections:
            g: AgentSection = self.sections["agent"]
            agent = AgentParams(g.weights, g.confidence_radius, g.neighbours, g.leader_weight)
        try:
            kind = ModelKind(m.kind)
        except ValueError as e:
            raise ConfigError(f"unknown model kind '{m.kind}'", "model") from e
        return ModelSpec(kind=kind, potential=potential, two_body_sign=m.two_body_sign,
                         alignment=alignment, sign_convention=m.sign_convention,
                         rank_kernel=rank_kernel, chemistry=chemistry, external_force=external,
                         agent=agent, friction=m.friction, mass_scale=m.mass_scale_eps)

    def build_chemistry(self, dim: int = 1) -> ChemistryParams:
        c: ChemistrySection = self.section("chemistry")
        return _wrap_model_errors("chemistry", lambda: ChemistryParams(
            eta=c.eta, kappa=c.kappa_rate, diffusivity=c.diffusivity_area_rate,
            chi=Mollifier(c.chi_radius_length, dim)))

    def build_keller_segel_model(self, eps: float = 1.0, width_scale: float = 1.0) -> ModelSpec:
        """eps-scaled chemotaxis model with the chemistry coefficients of [chemistry]."""
        c: ChemistrySection = self.section("chemistry")
        return _wrap_model_errors("chemistry", lambda: keller_segel_model(
            eps, 1, c.eta, c.kappa_rate, c.diffusivity_area_rate, width_scale))

    def build_law(self) -> InitialLaw:
        if "law" not in self.catalogues:
            raise ConfigError("section is missing", "law")
        name, params = self.catalogues["law"]
        return _wrap_model_errors("law", lambda: create_law(name, **params))

    def build_integrator(self) -> IntegratorConfig:
        i: IntegratorSection = self.section("integrator")
        try:
            return IntegratorConfig(dt=i.dt_time, t_final=i.t_final_time, scheme=i.scheme,
                                    chem_substeps=i.chem_substeps, boundary=i.boundary,
                                    box_lower=i.box_lower, box_length=i.box_length,
                                    chem_nodes=i.chem_nodes)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e), "integrator") from e

    def build_replica_plan(self, n_particles: Optional[int] = None,
                           replicas: Optional[int] = None) -> ReplicaPlan:
        r: ReplicasSection = self.sections.get("replicas")
        dim = self.section("model").dim if "model" in self.sections else 1
        if r is None and (n_particles is None or replicas is None):
            raise ConfigError("section is missing", "replicas")
        return ReplicaPlan(
            replicas=replicas if replicas is not None else r.replicas,
            seed=self.seed, law=self.build_law(),
            n_particles=n_particles if n_particles is not None else r.n_particles,
            dim=dim, mass=r.mass if r is not None else 1.0)


def _wrap_model_errors(section: str, build):
    try:
        return build()
    except ModelError as e:
        raise ConfigError(str(e), section) from e


def _validate_semantics(cfg: ExperimentConfig) -> None:
    exp = cfg.experiment
    for name in REQUIRED_SECTIONS[exp]:
        if not cfg.has(name):
            raise ConfigError(f"required by experiment '{exp.value}' but missing", name)
    if "grid" in cfg.sections:
        g: GridSection = cfg.sections["grid"]
        if g.n_x < 4 or g.n_v < 4:
            raise ConfigError("n_x and n_v must be >= 4", "grid")
        if g.x_max_length <= g.x_min_length or g.v_max_speed <= g.v_min_speed:
            raise ConfigError("grid ranges must be non-empty", "grid")
        if g.dt_time <= 0 or g.t_final_time < 0:
            raise ConfigError("dt_time must be > 0 and t_final_time >= 0", "grid")
    for name in ("hydro", "keller_segel"):
        if name in cfg.sections:
            h = cfg.sections[name]
            if h.n_x < 4 or h.x_max_length <= h.x_min_length:
                raise ConfigError("need n_x >= 4 and a non-empty x range", name)
            if h.dt_time <= 0 or h.t_final_time < 0:
                raise ConfigError("dt_time must be > 0 and t_final_time >= 0", name)
    if "hydro" in cfg.sections:
        h: HydroSection = cfg.sections["hydro"]
        if h.velocity_profile not in ("law", "zero", "constant", "sine"):
            raise ConfigError(f"unknown velocity_profile '{h.velocity_profile}'", "hydro")
        if h.chem_scheme not in ("explicit", "implicit"):
            raise ConfigError(f"unknown chem_scheme '{h.chem_scheme}'", "hydro")
        if not 0 < h.eps_scaling <= 1 or h.eps_p_pressure < 0:
            raise ConfigError("need 0 < eps_scaling <= 1 and eps_p_pressure >= 0", "hydro")
    if "keller_segel" in cfg.sections:
        if cfg.sections["keller_segel"].drift not in ("gradient", "printed"):
            raise ConfigError("drift must be 'gradient' or 'printed'", "keller_segel")
    if "rate_study" in cfg.sections:
        r: RateStudySection = cfg.sections["rate_study"]
        if len(set(r.n_values)) < 4 or min(r.n_values) < 1:
            raise ConfigError("n_values needs at least 4 distinct positive counts", "rate_study")
        if r.marginal_order not in (1, 2):
            raise ConfigError("marginal_order must be 1 or 2", "rate_study")
        if r.replicas < 2 or r.time < 0:
            raise ConfigError("need replicas >= 2 and time >= 0", "rate_study")
    if "eps_sweep" in cfg.sections:
        if any(v < 0 for v in cfg.sections["eps_sweep"].eps_p_values):
            raise ConfigError("eps_p_values must be >= 0", "eps_sweep")
    if "ks_limit" in cfg.sections:
        if any(not 0 < v <= 1 for v in cfg.sections["ks_limit"].eps_values):
            raise ConfigError("eps_values must lie in (0, 1]", "ks_limit")
    if cfg.run.workers is not None and cfg.run.workers < 1:
        raise ConfigError("workers must be >= 1", "run")
    if any(t < 0 for t in cfg.output.snapshot_times):
        raise ConfigError("snapshot_times must be >= 0", "output")
    # build once so kernel and law parameters are checked before any run
    if "model" in cfg.sections:
        cfg.build_model()
    if "law" in cfg.catalogues:
        cfg.build_law()
    if "integrator" in cfg.sections:
        cfg.build_integrator()


def parse_config(data: Dict[str, Any], source_hash: str, path: Optional[Path] = None
                 ) -> ExperimentConfig:
    """
    Validate a parsed TOML document.

    Args:
        data: Top-level TOML tables
        source_hash: SHA256 of the file bytes
        path: Source path, for messages

    Returns:
        ExperimentConfig
    """
    unknown = sorted(set(data) - set(SECTION_SCHEMAS) - set(CATALOGUE_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}", "config")
    if "run" not in data:
        raise ConfigError("section is missing", "run")
    run = parse_section(RunSection, data["run"], "run")
    try:
        Experiment(run.experiment)
    except ValueError as e:
        raise ConfigError(f"unknown experiment '{run.experiment}', expected one of "
                          f"{[x.value for x in Experiment]}", "run") from e
    if not 0 <= run.seed < 2 ** 64:
        raise ConfigError("seed must be a 64-bit unsigned integer", "run")

    sections = {name: parse_section(SECTION_SCHEMAS[name], body, name)
                for name, body in data.items() if name in SECTION_SCHEMAS and name != "run"}
    catalogues = {}
    if "potential" in data:
        catalogues["potential"] = parse_catalogue(data["potential"], "potential", POTENTIAL_KEYS)
    if "rank_kernel" in data:
        catalogues["rank_kernel"] = parse_catalogue(data["rank_kernel"], "rank_kernel",
                                                    RANK_KERNEL_KEYS)
    if "law" in data:
        catalogues["law"] = parse_catalogue(data["law"], "law", LAW_KEYS)

    cfg = ExperimentConfig(run, sections, catalogues, source_hash, path)
    _validate_semantics(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    """
    Read and validate a TOML experiment file.

    Raises:
        ConfigError: Unreadable file, TOML syntax error or schema violation
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}", "config") from e
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"{path}: {e}", "config") from e
    cfg = parse_config(data, hash_bytes(raw), path)
    logger.info(f"Loaded {cfg.experiment.value} config from {path} (sha256 {cfg.source_hash[:12]})")
    return cfg
