"""
Interaction laws of the microscopic system.

Defines the model description, the particle ensemble, the gridded chemical
field and pure force evaluation. Nothing in this module advances time.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from meanfield_lab.errors import ModelError, NonFiniteStateError
from meanfield_lab.kernels import (
    DiracMollifierPotential, ExternalForce, Mollifier, Potential, RankKernel,
    agent_weight_matrix, krause_kernel, mollifier_width,
)

logger = logging.getLogger(__name__)


class ModelKind(str, Enum):
    TWO_BODY = "two_body"
    CUCKER_SMALE = "cucker_smale"
    TOPOLOGICAL = "topological"
    CHEMOTAXIS = "chemotaxis"
    MULTI_AGENT = "multi_agent"


EXCHANGEABLE_KINDS = (
    ModelKind.TWO_BODY, ModelKind.CUCKER_SMALE, ModelKind.TOPOLOGICAL, ModelKind.CHEMOTAXIS,
)


class Boundary(str, Enum):
    PERIODIC = "periodic"
    NEUMANN = "neumann"
    FREE = "free"


@dataclass(frozen=True)
class AlignmentParams:
    """Cucker-Smale communication weight lambda / (1 + r^2/R^2)^beta."""
    coupling: float = 1.0
    radius: float = 1.0
    beta: float = 0.5

    def weight(self, r: np.ndarray) -> np.ndarray:
        return self.coupling / (1.0 + (r / self.radius) ** 2) ** self.beta

    @property
    def lipschitz(self) -> float:
        # |d/dr weight| is bounded by lambda * beta / R
        return self.coupling * max(self.beta, 1.0) / self.radius


@dataclass(frozen=True)
class ChemistryParams:
    """Coupling of the particles to a self-generated chemical concentration."""
    eta: float = 1.0
    kappa: float = 1.0
    diffusivity: float = 1.0
    chi: Mollifier = field(default_factory=lambda: Mollifier(0.25, 1))


@dataclass(frozen=True)
class AgentParams:
    """Index-dependent multi-agent interaction with a Krause kernel."""
    weights: str = "uniform"
    confidence: float = 1.0
    neighbours: int = 1
    leader_weight: float = 1.0


@dataclass(frozen=True)
class ModelSpec:
    """
    Tagged description of an interaction law and its parameters.

    ``two_body_sign`` multiplies (1/N) sum grad V(x_i - x_j): -1 is the
    Hamiltonian form, +1 the printed form. ``sign_convention`` multiplies
    the alignment sums written with (v_i - v_j): -1 aligns, +1 is the printed
    form. With ``friction`` the force loses -v_i and the integrator applies
    the inertia factor 1/mass_scale.
    """
    kind: ModelKind
    potential: Optional[Potential] = None
    two_body_sign: int = -1
    alignment: Optional[AlignmentParams] = None
    sign_convention: int = -1
    rank_kernel: Optional[RankKernel] = None
    chemistry: Optional[ChemistryParams] = None
    external_force: Optional[ExternalForce] = None
    agent: Optional[AgentParams] = None
    friction: bool = False
    mass_scale: float = 1.0

    def __post_init__(self):
        kind = ModelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.two_body_sign not in (1, -1) or self.sign_convention not in (1, -1):
            raise ModelError("sign conventions must be +1 or -1")
        if kind == ModelKind.TWO_BODY and self.potential is None:
            raise ModelError("two_body model needs a potential")
        if kind == ModelKind.CUCKER_SMALE and self.alignment is None:
            raise ModelError("cucker_smale model needs alignment parameters")
        if kind == ModelKind.TOPOLOGICAL and self.rank_kernel is None:
            raise ModelError("topological model needs a rank kernel")
        if kind == ModelKind.CHEMOTAXIS and self.chemistry is None:
            raise ModelError("chemotaxis model needs chemistry parameters")
        if kind == ModelKind.MULTI_AGENT and self.agent is None:
            raise ModelError("multi_agent model needs agent parameters")
        if self.alignment is not None:
            a = self.alignment
            if a.coupling < 0 or a.radius <= 0 or a.beta < 0:
                raise ModelError("alignment needs lambda >= 0, R > 0, beta >= 0")
        if self.chemistry is not None:
            c = self.chemistry
            if c.eta < 0 or c.kappa < 0 or c.diffusivity < 0:
                raise ModelError("chemistry needs eta, kappa, D >= 0")
        if self.agent is not None and self.agent.confidence <= 0:
            raise ModelError("agent confidence radius must be > 0")
        if not (0.0 < self.mass_scale <= 1.0):
            raise ModelError("mass_scale eps must lie in (0, 1]")

    @property
    def exchangeable(self) -> bool:
        return self.kind in EXCHANGEABLE_KINDS

    @property
    def inertia(self) -> float:
        """Factor multiplying dv/dt; eps in the friction variant."""
        return self.mass_scale if self.friction else 1.0

    def lipschitz_bound(self, velocity_scale: float = 1.0) -> float:
        """Crude Lipschitz bound of the force map, used as a stability guard."""
        bound = 0.0
        if self.potential is not None:
            bound += self.potential.lipschitz
        if self.alignment is not None:
            bound += 2.0 * self.alignment.coupling + self.alignment.lipschitz * velocity_scale
        if self.rank_kernel is not None:
            bound += 2.0 * float(self.rank_kernel(np.array([0.0]))[0])
        if self.agent is not None:
            bound += 2.0
        if self.friction:
            bound += 1.0
        return bound / self.inertia

    def describe(self) -> Dict[str, object]:
        info: Dict[str, object] = {"kind": self.kind.value}
        if self.potential is not None:
            info["potential"] = self.potential.describe()
            info["two_body_sign"] = self.two_body_sign
        if self.alignment is not None:
            info["alignment"] = {"lambda": self.alignment.coupling,
                                 "R": self.alignment.radius, "beta": self.alignment.beta}
            info["sign_convention"] = self.sign_convention
        if self.rank_kernel is not None:
            info["rank_kernel"] = self.rank_kernel.name
        if self.chemistry is not None:
            c = self.chemistry
            info["chemistry"] = {"eta": c.eta, "kappa": c.kappa, "D": c.diffusivity,
                                 "chi_radius": c.chi.radius}
        if self.friction:
            info["friction"] = True
            info["eps"] = self.mass_scale
        return info


def keller_segel_model(eps: float, dim: int = 1, eta: float = 1.0, kappa: float = 1.0,
                       diffusivity: float = 1.0, width_scale: float = 1.0) -> ModelSpec:
    """
    Build the eps-scaled chemotaxis model with friction.

    The short-range potential and the chemical source are Dirac approximations
    of radius width_scale * sqrt(eps).

    Args:
        eps: Mass scaling, m = 1/eps
        dim: Spatial dimension
        eta: Chemical coupling
        kappa: Chemical decay rate
        diffusivity: Chemical diffusivity
        width_scale: Prefactor of the sqrt(eps) width

    Returns:
        ModelSpec of kind chemotaxis with friction
    """
    width = mollifier_width(eps, width_scale)
    return ModelSpec(
        kind=ModelKind.CHEMOTAXIS,
        potential=DiracMollifierPotential(radius=width, dim=dim),
        two_body_sign=1,
        chemistry=ChemistryParams(eta=eta, kappa=kappa, diffusivity=diffusivity,
                                  chi=Mollifier(width, dim)),
        friction=True,
        mass_scale=min(eps, 1.0),
    )


@dataclass(frozen=True)
class ChemicalField:
    """
    Concentration on a regular node lattice.

    Nodes sit at ``lower + k * spacing`` for k = 0..n-1 along each axis. A
    periodic box has length n * spacing, a Neumann box (n - 1) * spacing.
    """
    lower: np.ndarray
    spacing: float
    values: np.ndarray
    boundary: Boundary = Boundary.PERIODIC

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "boundary", Boundary(self.boundary))
        if values.ndim not in (1, 2) or values.ndim != lower.size:
            raise ModelError("chemical field supports d in {1, 2} with matching lower corner")
        if self.boundary == Boundary.FREE:
            raise ModelError("chemical field boundary must be periodic or neumann")
        if self.spacing <= 0:
            raise ModelError("chemical grid spacing must be > 0")
        if not np.all(np.isfinite(values)):
            raise NonFiniteStateError("chemical field has non-finite values")

    @classmethod
    def zeros(cls, lower: Sequence[float], box_length: float, nodes: int, dim: int,
              boundary: Boundary = Boundary.PERIODIC) -> "ChemicalField":
        """Zero field covering a cubic box of side ``box_length``."""
        boundary = Boundary(boundary)
        spacing = box_length / nodes if boundary == Boundary.PERIODIC else box_length / (nodes - 1)
        return cls(np.asarray(lower, dtype=float), spacing, np.zeros((nodes,) * dim), boundary)

    @property
    def dim(self) -> int:
        return self.values.ndim

    @property
    def box_length(self) -> np.ndarray:
        n = np.asarray(self.values.shape, dtype=float)
        if self.boundary == Boundary.PERIODIC:
            return n * self.spacing
        return (n - 1) * self.spacing

    def axes(self):
        return [self.lower[k] + self.spacing * np.arange(n) for k, n in enumerate(self.values.shape)]

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape (n_nodes, d) in C order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def with_values(self, values: np.ndarray) -> "ChemicalField":
        return replace(self, values=values)

    def wrap(self, x: np.ndarray) -> np.ndarray:
        """Map points into the box: periodic wrap or an error outside a closed box."""
        x = np.asarray(x, dtype=float)
        if self.boundary == Boundary.PERIODIC:
            return self.lower + np.mod(x - self.lower, self.box_length)
        upper = self.lower + self.box_length
        tol = 1e-12 * max(1.0, float(np.max(self.box_length)))
        if np.any(x < self.lower - tol) or np.any(x > upper + tol):
            raise ModelError("position outside the non-periodic chemical box")
        return np.clip(x, self.lower, upper)

    def minimum_image(self, z: np.ndarray) -> np.ndarray:
        """Shortest periodic difference vector (identity for a closed box)."""
        if self.boundary != Boundary.PERIODIC:
            return z
        length = self.box_length
        return z - length * np.round(z / length)

    def interpolator(self) -> RegularGridInterpolator:
        """Multilinear interpolant; the periodic case is padded by one wrapped node."""
        axes = self.axes()
        values = self.values
        if self.boundary == Boundary.PERIODIC:
            for k in range(self.dim):
                axes[k] = np.append(axes[k], axes[k][-1] + self.spacing)
                values = np.concatenate([values, np.take(values, [0], axis=k)], axis=k)
        return RegularGridInterpolator(tuple(axes), values, method="linear", bounds_error=False,
                                       fill_value=None)


@dataclass
class ParticleEnsemble:
    """Positions X (N, d), velocities V (N, d), masses m (N,) and an optional field."""
    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    chem: Optional[ChemicalField] = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.velocities = np.atleast_2d(np.asarray(self.velocities, dtype=float))
        masses = np.asarray(self.masses, dtype=float)
        if masses.ndim == 0:
            masses = np.full(self.positions.shape[0], float(masses))
        self.masses = masses
        n, d = self.positions.shape
        if n < 1:
            raise ModelError("ensemble needs N >= 1")
        if d not in (1, 2, 3):
            raise ModelError("spatial dimension must be 1, 2 or 3")
        if self.velocities.shape != (n, d) or self.masses.shape != (n,):
            raise ModelError("positions, velocities and masses have inconsistent shapes")
        if np.any(self.masses <= 0) or np.any(np.isnan(self.masses)):
            raise ModelError("masses must be strictly positive")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocities))):
            raise NonFiniteStateError("ensemble has non-finite coordinates")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.positions.copy(), self.velocities.copy(),
                                self.masses.copy(), self.chem)


# ---------------------------------------------------------------------------
# Force evaluation
# ---------------------------------------------------------------------------


def _rank_matrix(dist: np.ndarray, all_dist_rows: np.ndarray, n: int) -> np.ndarray:
    """M(x_i, |x_i - x_j|) for every (i, j); ties count as inside."""
    ordered = np.sort(all_dist_rows, axis=1)
    counts = np.stack([np.searchsorted(ordered[r], dist[r], side="right")
                       for r in range(dist.shape[0])])
    return counts / n


def interaction_forces(model: ModelSpec, positions: np.ndarray, velocities: np.ndarray,
                       rows: Optional[np.ndarray] = None,
                       chem: Optional[ChemicalField] = None,
                       period: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Right-hand side of dv_i/dt for the particles listed in ``rows``.

    Sums run over all j including j = i, divided by N. With ``period`` set,
    pair differences use the minimum periodic image.

    Args:
        model: Interaction law
        positions: (N, d) positions
        velocities: (N, d) velocities
        rows: Indices to evaluate (default: all)
        chem: Chemical field, required for the chemotaxis kind
        period: Box lengths of a periodic domain, or None for free space

    Returns:
        Array (len(rows), d)
    """
    n, d = positions.shape
    if rows is None:
        rows = np.arange(n)
    xi, vi = positions[rows], velocities[rows]
    z = xi[:, None, :] - positions[None, :, :]
    if period is not None:
        z = z - period * np.round(z / period)
    w = vi[:, None, :] - velocities[None, :, :]
    force = np.zeros((len(rows), d))
    kind = model.kind

    if kind in (ModelKind.TWO_BODY, ModelKind.CHEMOTAXIS) and model.potential is not None:
        force += model.two_body_sign * model.potential.gradient(z).mean(axis=1)

    if kind in (ModelKind.CUCKER_SMALE, ModelKind.CHEMOTAXIS) and model.alignment is not None:
        weight = model.alignment.weight(np.sqrt(np.sum(z * z, axis=-1)))
        force += model.sign_convention * (weight[..., None] * w).mean(axis=1)

    if kind == ModelKind.TOPOLOGICAL:
        dist = np.sqrt(np.sum(z * z, axis=-1))
        rank = _rank_matrix(dist, dist, n)
        weight = model.rank_kernel(rank)
        force += model.sign_convention * (weight[..., None] * w).mean(axis=1)

    if kind == ModelKind.MULTI_AGENT:
        a = model.agent
        weights = agent_weight_matrix(a.weights, n, a.neighbours, a.leader_weight)[rows]
        force += (weights[..., None] * krause_kernel(-w, a.confidence)).mean(axis=1)

    if kind == ModelKind.CHEMOTAXIS:
        if chem is None:
            raise ModelError("chemotaxis force needs the chemical field")
        force += model.chemistry.eta * chem_gradient(chem, xi)

    if model.external_force is not None and model.external_force.active:
        force += model.external_force(xi)

    if model.friction:
        force -= vi
    return force


def eval_force(model: ModelSpec, ens: ParticleEnsemble, i: int) -> np.ndarray:
    """
    Force F_i acting on particle i.

    Args:
        model: Interaction law
        ens: Particle ensemble
        i: Particle index

    Returns:
        Acceleration vector of shape (d,)
    """
    if not 0 <= i < ens.n:
        raise IndexError(f"particle index {i} out of range for N={ens.n}")
    if model.kind == ModelKind.CHEMOTAXIS and ens.chem is None:
        raise ModelError("chemotaxis force needs ens.chem")
    return interaction_forces(model, ens.positions, ens.velocities, np.array([i]), ens.chem)[0]


def rank_function(ens: ParticleEnsemble, i: int, r: float) -> float:
    """M(x_i, r) = (1/N) #{k : |x_k - x_i| <= r}, which includes k = i."""
    if not 0 <= i < ens.n:
        raise IndexError(f"particle index {i} out of range for N={ens.n}")
    if r < 0:
        raise ModelError("rank radius must be >= 0")
    dist = np.sqrt(np.sum((ens.positions - ens.positions[i]) ** 2, axis=1))
    return float(np.count_nonzero(dist <= r)) / ens.n


def chem_gradient(field: ChemicalField, x: np.ndarray) -> np.ndarray:
    """
    Central-difference gradient of the multilinear interpolant at x.

    The stencil half-width equals the grid spacing.

    Args:
        field: Chemical field
        x: Point (d,) or points (n, d)

    Returns:
        Gradient with the same shape as x
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != field.dim:
        raise ModelError(f"points of dimension {pts.shape[1]} on a {field.dim}-d field")
    pts = field.wrap(pts)
    interp = field.interpolator()
    h = field.spacing
    grad = np.empty_like(pts)
    for k in range(field.dim):
        shift = np.zeros(field.dim)
        shift[k] = h
        forward, backward = pts + shift, pts - shift
        if field.boundary == Boundary.PERIODIC:
            forward, backward = field.wrap(forward), field.wrap(backward)
        else:
            upper = field.lower + field.box_length
            forward = np.minimum(forward, upper)
            backward = np.maximum(backward, field.lower)
        span = forward[:, k] - backward[:, k]
        if field.boundary == Boundary.PERIODIC:
            span = np.full(len(pts), 2.0 * h)
        grad[:, k] = np.where(span > 0, (interp(forward) - interp(backward)) / np.where(span > 0, span, 1.0), 0.0)
    return grad[0] if single else grad


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def total_energy(model: ModelSpec, ens: ParticleEnsemble) -> float:
    """Kinetic plus pair energy sum |v|^2/2m + (1/2N) sum V(x_i - x_j)."""
    finite = np.isfinite(ens.masses)
    kinetic = float(np.sum(np.sum(ens.velocities[finite] ** 2, axis=1) / (2.0 * ens.masses[finite])))
    if model.potential is None:
        return kinetic
    z = ens.positions[:, None, :] - ens.positions[None, :, :]
    pair = float(np.sum(model.potential.value(z))) / (2.0 * ens.n)
    return kinetic - model.two_body_sign * pair


def velocity_diameter(velocities: np.ndarray) -> float:
    """max_{i,j} |v_i - v_j|."""
    diff = velocities[:, None, :] - velocities[None, :, :]
    return float(np.sqrt(np.max(np.sum(diff * diff, axis=-1))))


def total_momentum(ens: ParticleEnsemble) -> np.ndarray:
    return ens.velocities.sum(axis=0)
