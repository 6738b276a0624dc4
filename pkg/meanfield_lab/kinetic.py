"""
Mean-field (Vlasov) solver on a 1-d phase-space grid.

The density is stored as cell averages on a periodic x-grid times a truncated
v-grid. Each step is a Strang split of conservative semi-Lagrangian remaps:
cell masses are rebuilt from a cubic spline of the cumulative mass evaluated
at the characteristic feet of the cell edges, so mass telescopes exactly.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from meanfield_lab.errors import CFLViolation, MassDriftError, ModelError, NonFiniteStateError
from meanfield_lab.laws import InitialLaw
from meanfield_lab.model import (
    Boundary, ChemicalField, ModelKind, ModelSpec, chem_gradient,
)
from meanfield_lab.particles import laplacian

logger = logging.getLogger(__name__)

MASS_TOLERANCE = 1e-8
DENSITY_FLOOR = 1e-12


@dataclass(frozen=True)
class PhaseDensity:
    """
    Cell-averaged density rho(x, v), shape (n_x, n_v).

    Cell centres are x_min + (i + 1/2) dx and v_min + (k + 1/2) dv; x is
    periodic with period x_max - x_min. ``chem`` is the chemical field on the
    x cell centres when the model has chemistry.
    """
    x_min: float
    x_max: float
    v_min: float
    v_max: float
    values: np.ndarray
    time: float = 0.0
    chem: Optional[ChemicalField] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 2 or min(values.shape) < 4:
            raise ModelError("phase density needs a 2-d grid with at least 4 cells per axis")
        if self.x_max <= self.x_min or self.v_max <= self.v_min:
            raise ModelError("phase-space box must be non-empty")
        if not np.all(np.isfinite(values)):
            raise NonFiniteStateError("phase density has non-finite values")

    @property
    def n_x(self) -> int:
        return self.values.shape[0]

    @property
    def n_v(self) -> int:
        return self.values.shape[1]

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_x

    @property
    def dv(self) -> float:
        return (self.v_max - self.v_min) / self.n_v

    @property
    def x(self) -> np.ndarray:
        return self.x_min + (np.arange(self.n_x) + 0.5) * self.dx

    @property
    def v(self) -> np.ndarray:
        return self.v_min + (np.arange(self.n_v) + 0.5) * self.dv

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.dx * self.dv)

    def with_values(self, values: np.ndarray, **changes) -> "PhaseDensity":
        return replace(self, values=values, **changes)

    def zero_field(self) -> ChemicalField:
        """Zero chemical field on the x cell centres."""
        return ChemicalField(np.array([self.x_min + 0.5 * self.dx]), self.dx,
                             np.zeros(self.n_x), Boundary.PERIODIC)

    @classmethod
    def from_function(cls, func, n_x: int, n_v: int, x_range: Tuple[float, float],
                      v_range: Tuple[float, float], with_chem: bool = False) -> "PhaseDensity":
        """Sample ``func(x, v)`` at cell centres and renormalise to mass 1."""
        blank = cls(x_range[0], x_range[1], v_range[0], v_range[1], np.zeros((n_x, n_v)))
        values = np.asarray(func(blank.x[:, None], blank.v[None, :]), dtype=float)
        values = np.broadcast_to(values, (n_x, n_v)).copy()
        mass = values.sum() * blank.dx * blank.dv
        if not mass > 0:
            raise ModelError("initial phase density has zero mass on the grid")
        edge = max(values[:, 0].max(), values[:, -1].max())
        if edge > DENSITY_FLOOR * values.max():
            logger.warning(f"Initial density at the velocity boundary is {edge / values.max():.2e} "
                           "of its maximum; widen [v_min, v_max]")
        density = blank.with_values(values / mass)
        if with_chem:
            density = density.with_values(density.values, chem=density.zero_field())
        return density

    @classmethod
    def from_law(cls, law: InitialLaw, n_x: int, n_v: int, x_range: Tuple[float, float],
                 v_range: Tuple[float, float], with_chem: bool = False) -> "PhaseDensity":
        return cls.from_function(law.density, n_x, n_v, x_range, v_range, with_chem)


@dataclass(frozen=True)
class MomentFields:
    """Velocity moments of a phase density on the x cell centres."""
    x: np.ndarray
    density: np.ndarray
    momentum: np.ndarray
    velocity: np.ndarray
    second: np.ndarray


@dataclass(frozen=True)
class ForceField:
    """Self-consistent acceleration F(x, v) = a(x) - b(x) v."""
    a: np.ndarray
    b: np.ndarray

    def values(self, v: np.ndarray) -> np.ndarray:
        return self.a[:, None] - self.b[:, None] * v[None, :]


def moments(rho: PhaseDensity, floor: float = DENSITY_FLOOR) -> MomentFields:
    """
    Density, momentum and velocity by v-quadrature.

    Velocity is momentum / density where density exceeds ``floor`` times its
    maximum, else 0.
    """
    v = rho.v
    density = rho.values.sum(axis=1) * rho.dv
    momentum = (rho.values * v[None, :]).sum(axis=1) * rho.dv
    second = (rho.values * (v ** 2)[None, :]).sum(axis=1) * rho.dv
    threshold = floor * max(float(density.max()), 0.0)
    occupied = density > threshold
    velocity = np.where(occupied, momentum / np.where(occupied, density, 1.0), 0.0)
    return MomentFields(rho.x, density, momentum, velocity, second)


# ---------------------------------------------------------------------------
# Self-consistent force
# ---------------------------------------------------------------------------


def periodic_differences(x: np.ndarray, length: float) -> np.ndarray:
    """Minimum-image differences x_i - x_j on a periodic grid."""
    z = x[:, None] - x[None, :]
    return z - length * np.round(z / length)


def periodic_convolution(x: np.ndarray, dx: float, length: float, density: np.ndarray,
                         kernel) -> np.ndarray:
    """(kernel * density)(x_i) by midpoint quadrature; kernel takes (..., 1) vectors."""
    z = periodic_differences(x, length)
    return (kernel(z[..., None]) * density[None, :]).sum(axis=1) * dx


def _mass_rank(dist: np.ndarray, density: np.ndarray, dx: float) -> np.ndarray:
    """M_rho(x_i, |x_i - x_j|) = mass within distance |x_i - x_j| of x_i."""
    order = np.argsort(dist, axis=1, kind="stable")
    sorted_dist = np.take_along_axis(dist, order, axis=1)
    cumulative = np.cumsum(np.take_along_axis(np.broadcast_to(density * dx, dist.shape), order, axis=1),
                           axis=1)
    rank = np.empty_like(dist)
    for i in range(dist.shape[0]):
        # ties count as inside, so use the last index with distance <= r
        last = np.searchsorted(sorted_dist[i], dist[i], side="right") - 1
        rank[i] = cumulative[i, last]
    return rank


def mean_field_coefficients(x: np.ndarray, dx: float, length: float, density: np.ndarray,
                            momentum: np.ndarray, model: ModelSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pair and external part of the mean-field force as F = a - b v.

    Only the density and momentum of the law enter, so the same coefficients
    drive the kinetic and the hydrodynamic solvers. Pair differences use the
    minimum periodic image.

    Returns:
        Tuple (a, b) on the grid points
    """
    if model.kind == ModelKind.MULTI_AGENT:
        raise ModelError("multi_agent systems have no exchangeable mean-field equation")
    z = periodic_differences(x, length)
    a = np.zeros(len(x))
    b = np.zeros(len(x))

    if model.potential is not None and model.kind in (ModelKind.TWO_BODY, ModelKind.CHEMOTAXIS):
        grad = model.potential.gradient(z[..., None])[..., 0]
        # the two images at half a period cancel
        grad = np.where(np.isclose(np.abs(z), 0.5 * length), 0.0, grad)
        a += model.two_body_sign * (grad * density[None, :]).sum(axis=1) * dx

    weight = None
    if model.alignment is not None and model.kind in (ModelKind.CUCKER_SMALE, ModelKind.CHEMOTAXIS):
        weight = model.alignment.weight(np.abs(z))
    elif model.kind == ModelKind.TOPOLOGICAL:
        weight = model.rank_kernel(_mass_rank(np.abs(z), density, dx))
    if weight is not None:
        s = model.sign_convention
        a -= s * (weight * momentum[None, :]).sum(axis=1) * dx
        b -= s * (weight * density[None, :]).sum(axis=1) * dx

    if model.external_force is not None and model.external_force.active:
        a += model.external_force(x[:, None])[:, 0]
    return a, b


def vlasov_force_field(rho: PhaseDensity, model: ModelSpec,
                       psi: Optional[ChemicalField] = None) -> ForceField:
    """
    Mean-field force by midpoint quadrature over the grid.

    Args:
        rho: Phase density
        model: Interaction law (multi-agent systems have no exchangeable limit)
        psi: Chemical field for the chemotaxis kind (defaults to rho.chem)

    Returns:
        ForceField with per-x coefficients
    """
    mom = moments(rho)
    a, b = mean_field_coefficients(rho.x, rho.dx, rho.length, mom.density, mom.momentum, model)
    if model.kind == ModelKind.CHEMOTAXIS:
        field = psi if psi is not None else rho.chem
        if field is None:
            raise ModelError("chemotaxis force needs the chemical field")
        a = a + model.chemistry.eta * chem_gradient(field, rho.x[:, None])[:, 0]
    if model.friction:
        b = b + 1.0
    return ForceField(a / model.inertia, b / model.inertia)


# ---------------------------------------------------------------------------
# Conservative remaps
# ---------------------------------------------------------------------------


def _evaluate_columns(spline: CubicSpline, edges: np.ndarray, points: np.ndarray) -> np.ndarray:
    """
    Evaluate a multi-column spline at per-column points.

    ``points`` has shape (m, columns); column c is evaluated with the c-th
    spline. Points must lie within [edges[0], edges[-1]].
    """
    h = edges[1] - edges[0]
    n = len(edges) - 1
    idx = np.clip(np.floor((points - edges[0]) / h).astype(int), 0, n - 1)
    t = points - edges[idx]
    cols = np.broadcast_to(np.arange(points.shape[1]), points.shape)
    c = spline.c
    return ((c[0][idx, cols] * t + c[1][idx, cols]) * t + c[2][idx, cols]) * t + c[3][idx, cols]


def remap_periodic(masses: np.ndarray, lower: float, length: float, feet: np.ndarray) -> np.ndarray:
    """
    Remap cell masses along axis 0 of a periodic axis.

    Args:
        masses: (n, columns) cell masses
        lower: Left edge of the axis
        length: Period
        feet: (n + 1, columns) characteristic feet of the cell edges

    Returns:
        New cell masses with exactly the same column totals
    """
    n = masses.shape[0]
    edges = lower + length * np.arange(n + 1) / n
    total = masses.sum(axis=0)
    cumulative = np.vstack([np.zeros((1, masses.shape[1])), np.cumsum(masses, axis=0)])
    # remove the linear trend so the remainder is periodic
    trend = total[None, :] * (edges - lower)[:, None] / length
    periodic_part = cumulative - trend
    periodic_part[-1] = periodic_part[0]
    spline = CubicSpline(edges, periodic_part, axis=0, bc_type="periodic")
    offset = feet - lower
    wraps = np.floor(offset / length)
    wrapped = lower + offset - wraps * length
    values = _evaluate_columns(spline, edges, wrapped) + total[None, :] * (offset / length)
    return np.diff(values, axis=0)


def remap_bounded(masses: np.ndarray, lower: float, upper: float, feet: np.ndarray) -> np.ndarray:
    """
    Remap cell masses along axis 0 of a truncated axis; mass whose feet
    leave [lower, upper] is lost.
    """
    n = masses.shape[0]
    edges = lower + (upper - lower) * np.arange(n + 1) / n
    cumulative = np.vstack([np.zeros((1, masses.shape[1])), np.cumsum(masses, axis=0)])
    spline = CubicSpline(edges, cumulative, axis=0, bc_type="clamped")
    clipped = np.clip(feet, lower, upper)
    values = _evaluate_columns(spline, edges, clipped)
    return np.diff(values, axis=0)


def _advect_x(rho: PhaseDensity, values: np.ndarray, tau: float) -> np.ndarray:
    edges = rho.x_min + rho.dx * np.arange(rho.n_x + 1)
    feet = edges[:, None] - tau * rho.v[None, :]
    masses = remap_periodic(values * rho.dx, rho.x_min, rho.length, feet)
    return masses / rho.dx


def _advect_v(rho: PhaseDensity, values: np.ndarray, force: ForceField, tau: float) -> np.ndarray:
    edges = rho.v_min + rho.dv * np.arange(rho.n_v + 1)
    bt = force.b * tau
    growth = np.exp(bt)
    phi = np.where(np.abs(bt) > 1e-12, np.expm1(bt) / np.where(bt != 0, bt, 1.0), 1.0)
    # backward characteristic of dv/dt = a - b v over time tau
    feet = edges[:, None] * growth[None, :] - (force.a * tau * phi)[None, :]
    masses = remap_bounded(values.T * rho.dv, rho.v_min, rho.v_max, feet)
    return (masses / rho.dv).T


def _positivity(values: np.ndarray, context: str) -> np.ndarray:
    negative = values < 0
    if not negative.any():
        return values
    before = values.sum()
    clipped = np.where(negative, 0.0, values)
    removed = -values[negative].sum()
    logger.warning(f"{context}: clipped {removed:.3e} of negative density")
    return clipped * (before / clipped.sum())


def advance_kinetic_chemistry(rho: PhaseDensity, model: ModelSpec, dt: float,
                              include_decay: bool = True) -> ChemicalField:
    """
    Advance the chemical field with source chi * mu by explicit substeps.

    Args:
        rho: Current phase density, carrying the field in ``rho.chem``
        model: Model with chemistry parameters
        dt: Time to advance
        include_decay: Keep the -kappa psi term

    Returns:
        Advanced field
    """
    chem = model.chemistry
    field = rho.chem if rho.chem is not None else rho.zero_field()
    density = moments(rho).density
    source = periodic_convolution(rho.x, rho.dx, rho.length, density, chem.chi)
    scale = model.inertia
    kappa = chem.kappa if include_decay else 0.0
    substeps = max(1, math.ceil(chem.diffusivity * dt / (0.4 * scale * rho.dx ** 2)))
    h = dt / substeps
    psi = field.values
    for _ in range(substeps):
        psi = psi + (h / scale) * (chem.diffusivity * laplacian(psi, rho.dx, Boundary.PERIODIC)
                                   - kappa * psi + source)
    return field.with_values(psi)


def step_vlasov(rho: PhaseDensity, model: ModelSpec, dt: float,
                include_decay: bool = True) -> PhaseDensity:
    """
    One Strang-split step: half x-advection, full v-advection in the frozen
    force, half x-advection.

    Args:
        rho: Current density
        model: Interaction law
        dt: Time step
        include_decay: Keep -kappa psi in the chemical equation

    Returns:
        Density at time rho.time + dt
    """
    vmax = max(abs(rho.v_min), abs(rho.v_max))
    if vmax * dt / rho.dx > 1.0:
        raise CFLViolation(f"transport number {vmax * dt / rho.dx:.4g} > 1", "vlasov")
    mass_before = rho.mass

    values = _advect_x(rho, rho.values, 0.5 * dt)
    half = rho.with_values(values)
    chem = rho.chem
    if model.kind == ModelKind.CHEMOTAXIS:
        chem = advance_kinetic_chemistry(half, model, dt, include_decay)
        half = half.with_values(values, chem=chem)

    force = vlasov_force_field(half, model)
    fmax = float(np.max(np.abs(force.values(np.array([rho.v_min, rho.v_max])))))
    if fmax * dt / rho.dv > 1.0:
        raise CFLViolation(f"force number {fmax * dt / rho.dv:.4g} > 1", "vlasov")
    values = _advect_v(rho, values, force, dt)
    values = _advect_x(rho, values, 0.5 * dt)

    values = _positivity(values, "step_vlasov")
    if not np.all(np.isfinite(values)):
        raise NonFiniteStateError("phase density became non-finite")
    result = rho.with_values(values, time=rho.time + dt, chem=chem)
    drift = abs(result.mass - mass_before)
    if drift > 1e-12:
        logger.debug(f"Velocity-boundary leakage {drift:.3e} at t={result.time:.4g}")
    if drift > MASS_TOLERANCE:
        raise MassDriftError(f"mass changed by {drift:.3e} in one step at t={result.time:.4g}")
    return result


def run_vlasov(rho: PhaseDensity, model: ModelSpec, dt: float, t_final: float,
               snapshot_times=(), include_decay: bool = True):
    """
    Integrate to ``t_final`` and collect snapshots.

    Returns:
        Tuple (final density, list of (time, density) snapshots)
    """
    n_steps = int(round(t_final / dt))
    wanted = {int(round(t / dt)) for t in snapshot_times}
    snapshots = []
    for k in range(n_steps + 1):
        if k in wanted:
            snapshots.append((k * dt, rho))
        if k < n_steps:
            rho = step_vlasov(rho, model, dt, include_decay)
    return rho, snapshots
