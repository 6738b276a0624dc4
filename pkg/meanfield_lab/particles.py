"""
Microscopic simulation: time stepping of the N-particle system coupled to its
chemical field, and seeded replica ensembles for marginal statistics.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from typing import List, Optional, Sequence, Tuple

import numpy as np

from meanfield_lab.errors import (
    CFLViolation, ConfigError, LabError, ModelError, NonFiniteStateError, annotate,
)
from meanfield_lab.laws import InitialLaw
from meanfield_lab.model import (
    Boundary, ChemicalField, ModelKind, ModelSpec, ParticleEnsemble, interaction_forces,
)
from meanfield_lab.utils import parallel_map

logger = logging.getLogger(__name__)

# explicit diffusion limit D dt / dx^2 per spatial dimension
DIFFUSION_CFL = 0.5


class Scheme(str, Enum):
    RK4 = "rk4"
    SEMI_IMPLICIT_EULER = "semi_implicit_euler"


@dataclass(frozen=True)
class IntegratorConfig:
    """Time stepping and domain settings of a particle run."""
    dt: float
    t_final: float
    scheme: Scheme = Scheme.RK4
    chem_substeps: int = 1
    boundary: Boundary = Boundary.FREE
    box_lower: float = 0.0
    box_length: float = 1.0
    chem_nodes: int = 64

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "boundary", Boundary(self.boundary))
        if self.dt <= 0:
            raise ConfigError("dt_time must be > 0", "integrator")
        if self.t_final < 0:
            raise ConfigError("t_final_time must be >= 0", "integrator")
        if self.chem_substeps < 1:
            raise ConfigError("chem_substeps must be >= 1", "integrator")
        if self.box_length <= 0 or self.chem_nodes < 3:
            raise ConfigError("box_length must be > 0 and chem_nodes >= 3", "integrator")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    @property
    def period(self) -> Optional[np.ndarray]:
        if self.boundary == Boundary.PERIODIC:
            return np.array([self.box_length])
        return None

    def initial_field(self, dim: int) -> ChemicalField:
        """Zero chemical field covering the simulation box."""
        boundary = Boundary.NEUMANN if self.boundary == Boundary.NEUMANN else Boundary.PERIODIC
        return ChemicalField.zeros([self.box_lower] * dim, self.box_length, self.chem_nodes,
                                   dim, boundary)


@dataclass(frozen=True)
class ReplicaPlan:
    """M independent runs of N particles drawn i.i.d. from ``law``."""
    replicas: int
    seed: int
    law: InitialLaw
    n_particles: int
    dim: int = 1
    mass: float = 1.0

    def __post_init__(self):
        if self.replicas < 1 or self.n_particles < 1:
            raise ConfigError("replicas and n_particles must be >= 1", "replicas")
        if self.dim not in (1, 2, 3):
            raise ConfigError("dim must be 1, 2 or 3", "replicas")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer", "replicas")


@dataclass
class ReplicaSnapshots:
    """States of all replicas at each snapshot time: arrays (S, M, N, d)."""
    times: List[float]
    positions: np.ndarray
    velocities: np.ndarray
    chem: List[List[Optional[ChemicalField]]] = field(default_factory=list)

    @property
    def replicas(self) -> int:
        return self.positions.shape[1]

    @property
    def n_particles(self) -> int:
        return self.positions.shape[2]

    @property
    def dim(self) -> int:
        return self.positions.shape[3]

    def index_of(self, t: float) -> int:
        times = np.asarray(self.times)
        k = int(np.argmin(np.abs(times - t)))
        if abs(times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"no snapshot at t={t}")
        return k

    def states(self, k: int) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [(self.positions[k, r], self.velocities[k, r]) for r in range(self.replicas)]


def particle_generator(seed: int, replica: int, particle: int) -> np.random.Generator:
    """
    Counter-based generator keyed by (seed, replica, particle).

    The Philox key is derived from (seed, replica) and the particle index
    fills the top word of the 256-bit counter, so each particle owns a
    disjoint substream whose consecutive counters hold its coordinates. The
    draws of particle i do not depend on N, on the other particles or on the
    worker that runs the replica.
    """
    if particle < 0:
        raise ValueError("particle index must be >= 0")
    key = np.random.SeedSequence([seed, replica]).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=particle << 192, key=key))


# ---------------------------------------------------------------------------
# Chemical field
# ---------------------------------------------------------------------------


def laplacian(values: np.ndarray, spacing: float, boundary: Boundary) -> np.ndarray:
    """Second-order five-point (or three-point) Laplacian."""
    if boundary == Boundary.PERIODIC:
        padded = np.pad(values, 1, mode="wrap")
    else:
        padded = np.pad(values, 1, mode="reflect")
    result = -2.0 * values.ndim * values
    for k in range(values.ndim):
        upper = [slice(1, -1)] * values.ndim
        lower = [slice(1, -1)] * values.ndim
        upper[k] = slice(2, None)
        lower[k] = slice(None, -2)
        result = result + padded[tuple(upper)] + padded[tuple(lower)]
    return result / spacing ** 2


def chemical_source(field: ChemicalField, sources: np.ndarray, chi) -> np.ndarray:
    """(1/N) sum_j chi(x - x_j) on the grid nodes."""
    nodes = field.nodes()
    z = field.minimum_image(nodes[:, None, :] - np.atleast_2d(sources)[None, :, :])
    return chi(z).mean(axis=1).reshape(field.values.shape)


def step_chemical(field: ChemicalField, sources: np.ndarray, model: ModelSpec, dt_c: float,
                  source_field: Optional[np.ndarray] = None,
                  time_scale: float = 1.0) -> ChemicalField:
    """
    One explicit step of time_scale * dphi/dt = D lap(phi) - kappa phi + source.

    Args:
        field: Current chemical field
        sources: (N, d) particle positions feeding the source
        model: Model carrying the chemistry parameters
        dt_c: Chemical time step
        source_field: Replaces the mollified particle source when given
        time_scale: eps in the friction variant, else 1

    Returns:
        Advanced chemical field
    """
    chem = model.chemistry
    if chem is None:
        raise ModelError("step_chemical needs a model with chemistry parameters")
    number = chem.diffusivity * dt_c / (time_scale * field.spacing ** 2)
    if number > DIFFUSION_CFL / field.dim:
        raise CFLViolation(f"diffusion number {number:.4g} exceeds {DIFFUSION_CFL / field.dim:.4g}",
                           "integrator")
    if source_field is None:
        source = chemical_source(field, sources, chem.chi)
    else:
        source = np.broadcast_to(np.asarray(source_field, dtype=float), field.values.shape)
    phi = field.values
    rate = chem.diffusivity * laplacian(phi, field.spacing, field.boundary) - chem.kappa * phi + source
    updated = phi + (dt_c / time_scale) * rate
    if not np.all(np.isfinite(updated)):
        raise NonFiniteStateError("chemical field became non-finite")
    return field.with_values(updated)


# ---------------------------------------------------------------------------
# Particle step
# ---------------------------------------------------------------------------


def _derivatives(model: ModelSpec, x: np.ndarray, v: np.ndarray, masses: np.ndarray,
                 chem: Optional[ChemicalField], period) -> Tuple[np.ndarray, np.ndarray]:
    finite = np.isfinite(masses)
    xdot = np.zeros_like(v)
    xdot[finite] = v[finite] / masses[finite, None]
    vdot = interaction_forces(model, x, v, chem=chem, period=period) / model.inertia
    return xdot, vdot


def step_particles(ens: ParticleEnsemble, model: ModelSpec, cfg: IntegratorConfig,
                   step: Optional[int] = None) -> ParticleEnsemble:
    """
    Advance the coupled particle/chemistry system by one dt.

    The chemical field is advanced first by ``chem_substeps`` explicit steps
    with the particles frozen, then the particles move in the updated field
    (first-order operator splitting).

    Args:
        ens: Current ensemble
        model: Interaction law
        cfg: Integrator settings
        step: Step index, reported in errors

    Returns:
        New ensemble
    """
    chem = ens.chem
    if model.chemistry is not None and model.kind == ModelKind.CHEMOTAXIS:
        if chem is None:
            raise ModelError("chemotaxis run needs an initialised chemical field")
        dt_c = cfg.dt / cfg.chem_substeps
        for _ in range(cfg.chem_substeps):
            chem = step_chemical(chem, ens.positions, model, dt_c, time_scale=model.inertia)

    x, v, m, dt, period = ens.positions, ens.velocities, ens.masses, cfg.dt, cfg.period
    if cfg.scheme == Scheme.RK4:
        k1x, k1v = _derivatives(model, x, v, m, chem, period)
        k2x, k2v = _derivatives(model, x + 0.5 * dt * k1x, v + 0.5 * dt * k1v, m, chem, period)
        k3x, k3v = _derivatives(model, x + 0.5 * dt * k2x, v + 0.5 * dt * k2v, m, chem, period)
        k4x, k4v = _derivatives(model, x + dt * k3x, v + dt * k3v, m, chem, period)
        x_new = x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        v_new = v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    else:
        bound = model.lipschitz_bound(float(np.max(np.abs(v))) if v.size else 1.0)
        if dt * bound >= 1.0:
            raise CFLViolation(f"dt * Lipschitz bound = {dt * bound:.4g} >= 1 for semi-implicit Euler",
                               "integrator")
        _, vdot = _derivatives(model, x, v, m, chem, period)
        v_new = v + dt * vdot
        finite = np.isfinite(m)
        x_new = x.copy()
        x_new[finite] = x[finite] + dt * v_new[finite] / m[finite, None]

    if period is not None:
        x_new = cfg.box_lower + np.mod(x_new - cfg.box_lower, cfg.box_length)
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(v_new))):
        raise NonFiniteStateError("particle state became non-finite", step)
    return ParticleEnsemble(x_new, v_new, m, chem)


# ---------------------------------------------------------------------------
# Replicas
# ---------------------------------------------------------------------------


def snapshot_steps(times: Sequence[float], cfg: IntegratorConfig) -> List[int]:
    """Step index of each snapshot time; times must lie on [0, T_final]."""
    steps = []
    for t in times:
        if t < -1e-12 or t > cfg.t_final + 1e-12:
            raise ConfigError(f"snapshot time {t} outside [0, {cfg.t_final}]", "output")
        k = int(round(t / cfg.dt))
        if abs(k * cfg.dt - t) > 1e-9 * max(1.0, t):
            logger.warning(f"Snapshot t={t} is not a multiple of dt, using t={k * cfg.dt}")
        steps.append(k)
    return steps


def initial_ensemble(plan: ReplicaPlan, model: ModelSpec, cfg: IntegratorConfig,
                     replica: int) -> ParticleEnsemble:
    """Sample the initial state of one replica."""
    draws = [plan.law.sample(particle_generator(plan.seed, replica, i), 1, plan.dim)
             for i in range(plan.n_particles)]
    x = np.concatenate([d[0] for d in draws])
    v = np.concatenate([d[1] for d in draws])
    mass = np.inf if model.kind == ModelKind.MULTI_AGENT else plan.mass
    chem = cfg.initial_field(plan.dim) if model.kind == ModelKind.CHEMOTAXIS else None
    if cfg.boundary == Boundary.PERIODIC:
        x = cfg.box_lower + np.mod(x - cfg.box_lower, cfg.box_length)
    return ParticleEnsemble(x, v, np.full(plan.n_particles, mass), chem)


def run_replica(replica: int, plan: ReplicaPlan, model: ModelSpec, cfg: IntegratorConfig,
                steps: Sequence[int]):
    """Run one replica and return its snapshots as (positions, velocities, fields)."""
    ens = initial_ensemble(plan, model, cfg, replica)
    wanted = sorted(set(steps))
    last = wanted[-1] if wanted else 0
    recorded = {}
    try:
        for k in range(last + 1):
            if k in steps:
                recorded[k] = (ens.positions.copy(), ens.velocities.copy(), ens.chem)
            if k < last:
                ens = step_particles(ens, model, cfg, step=k + 1)
    except LabError as e:
        raise annotate(e, f"replica {replica}") from e
    xs = np.stack([recorded[k][0] for k in steps])
    vs = np.stack([recorded[k][1] for k in steps])
    fields = [recorded[k][2] for k in steps]
    return xs, vs, fields


def run_replicas(plan: ReplicaPlan, model: ModelSpec, cfg: IntegratorConfig,
                 snapshot_times: Sequence[float], workers: int = 1,
                 keep_fields: bool = False) -> ReplicaSnapshots:
    """
    Monte-Carlo push-forward of the product initial law.

    Args:
        plan: Replica count, seed and initial law
        model: Interaction law
        cfg: Integrator settings
        snapshot_times: Times in [0, T_final] at which states are kept
        workers: Process count for the replica fan-out
        keep_fields: Also return the chemical field of each snapshot

    Returns:
        ReplicaSnapshots with arrays of shape (S, M, N, d)
    """
    steps = snapshot_steps(snapshot_times, cfg)
    logger.info(f"Running {plan.replicas} replica(s) of N={plan.n_particles}, "
                f"{cfg.n_steps} step(s), {len(steps)} snapshot(s)")
    job = partial(run_replica, plan=plan, model=model, cfg=cfg, steps=steps)
    results = parallel_map(job, range(plan.replicas), workers)
    positions = np.stack([r[0] for r in results], axis=1)
    velocities = np.stack([r[1] for r in results], axis=1)
    fields = [[r[2][s] for r in results] for s in range(len(steps))] if keep_fields else []
    times = [k * cfg.dt for k in steps]
    return ReplicaSnapshots(times, positions, velocities, fields)
