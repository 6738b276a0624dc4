"""
Hydrodynamic solvers on a 1-d periodic grid.

Nonlocal Euler system and its eps-scaled friction variant by a MUSCL-Rusanov
finite-volume scheme with SSP-RK2 time stepping (friction split off and
integrated exactly), the Keller-Segel density
equation with an elliptic chemical potential, and the monokinetic lift of
hydrodynamic data to a phase density.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Tuple

import numpy as np
from numpy.linalg import LinAlgError
from scipy.linalg import solve_circulant

from meanfield_lab.errors import (
    CFLViolation, MassDriftError, ModelError, NonFiniteStateError, SolverConvergenceError,
)
from meanfield_lab.kernels import DiracMollifierPotential
from meanfield_lab.kinetic import (
    MomentFields, PhaseDensity, mean_field_coefficients, periodic_convolution,
)
from meanfield_lab.model import ModelKind, ModelSpec

logger = logging.getLogger(__name__)

HYPERBOLIC_CFL = 0.9
MAX_SUBSTEPS = 100
PARABOLIC_CFL = 0.25
UPWIND_CFL = 0.5
MASS_TOLERANCE = 1e-8
VACUUM_FRACTION = 1e-12
CHEM_SCHEMES = ("explicit", "implicit")
DRIFT_FORMS = ("gradient", "printed")


@dataclass(frozen=True)
class HydroState:
    """
    Density mu, momentum q = mu u and chemical potential psi on cell centres
    x_min + (i + 1/2) dx of a periodic box of the given length.
    """
    x_min: float
    length: float
    mu: np.ndarray
    q: np.ndarray
    psi: Optional[np.ndarray] = None
    eps: float = 1.0
    eps_p: float = 0.0
    time: float = 0.0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        q = np.asarray(self.q, dtype=float)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "q", q)
        if self.psi is not None:
            object.__setattr__(self, "psi", np.asarray(self.psi, dtype=float))
        if mu.ndim != 1 or q.shape != mu.shape or mu.size < 4:
            raise ModelError("hydro state needs matching 1-d mu and q with at least 4 cells")
        if self.psi is not None and self.psi.shape != mu.shape:
            raise ModelError("psi must live on the same grid as mu")
        if self.length <= 0:
            raise ModelError("hydro box length must be > 0")
        if self.eps < 0 or self.eps_p < 0:
            raise ModelError("eps and eps_p must be >= 0")
        if np.any(mu < 0):
            raise ModelError("density must be nonnegative")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(q))):
            raise NonFiniteStateError("hydro state has non-finite values")

    @property
    def n(self) -> int:
        return self.mu.size

    @property
    def dx(self) -> float:
        return self.length / self.n

    @property
    def x(self) -> np.ndarray:
        return self.x_min + (np.arange(self.n) + 0.5) * self.dx

    @property
    def u(self) -> np.ndarray:
        return velocity(self.mu, self.q)

    @property
    def mass(self) -> float:
        return float(self.mu.sum() * self.dx)

    @property
    def total_momentum(self) -> float:
        return float(self.q.sum() * self.dx)

    def with_fields(self, **changes) -> "HydroState":
        return replace(self, **changes)

    @classmethod
    def from_functions(cls, density: Callable, velocity_field: Callable, n: int,
                       x_range: Tuple[float, float], with_psi: bool = False,
                       eps: float = 1.0, eps_p: float = 0.0) -> "HydroState":
        """Sample mu and u at cell centres; mu is renormalised to mass 1."""
        length = x_range[1] - x_range[0]
        x = x_range[0] + (np.arange(n) + 0.5) * length / n
        mu = np.broadcast_to(np.asarray(density(x), dtype=float), (n,)).copy()
        mass = mu.sum() * length / n
        if not mass > 0:
            raise ModelError("initial density has zero mass on the grid")
        mu /= mass
        u = np.broadcast_to(np.asarray(velocity_field(x), dtype=float), (n,))
        psi = np.zeros(n) if with_psi else None
        return cls(x_range[0], length, mu, mu * u, psi, eps, eps_p)

    @classmethod
    def from_moments(cls, fields: MomentFields, length: float, with_psi: bool = False,
                     eps: float = 1.0, eps_p: float = 0.0) -> "HydroState":
        """Hydrodynamic state with the density and momentum of a phase density."""
        dx = length / fields.x.size
        psi = np.zeros(fields.x.size) if with_psi else None
        return cls(float(fields.x[0] - 0.5 * dx), length, fields.density.copy(),
                   fields.momentum.copy(), psi, eps, eps_p)


def velocity(mu: np.ndarray, q: np.ndarray) -> np.ndarray:
    """u = q / mu, with u = 0 in vacuum cells mu < 1e-12 max mu."""
    occupied = mu > VACUUM_FRACTION * max(float(np.max(mu)), 0.0)
    return np.where(occupied, q / np.where(occupied, mu, 1.0), 0.0)


# ---------------------------------------------------------------------------
# Finite-volume Euler
# ---------------------------------------------------------------------------


def _minmod_slopes(values: np.ndarray) -> np.ndarray:
    forward = np.roll(values, -1) - values
    backward = values - np.roll(values, 1)
    return np.where(forward * backward > 0,
                    np.sign(forward) * np.minimum(np.abs(forward), np.abs(backward)), 0.0)


def _wave_speed(u: np.ndarray, mu: np.ndarray, eps_p: float) -> np.ndarray:
    """Spectral radius of the flux Jacobian for the pressure eps_p mu^2/2."""
    return np.abs(u) + np.sqrt(eps_p * np.maximum(mu, 0.0))


def _fluxes(mu: np.ndarray, q: np.ndarray, eps_p: float, dx: float
            ) -> Tuple[np.ndarray, np.ndarray]:
    """Rusanov fluxes at the right face of every cell, MUSCL-minmod reconstruction."""
    dmu, dq = _minmod_slopes(mu), _minmod_slopes(q)
    mu_left, q_left = mu + 0.5 * dmu, q + 0.5 * dq
    mu_right = np.roll(mu - 0.5 * dmu, -1)
    q_right = np.roll(q - 0.5 * dq, -1)
    u_left, u_right = velocity(mu_left, q_left), velocity(mu_right, q_right)

    def physical(m, mom, u):
        return mom, mom * u + 0.5 * eps_p * m ** 2

    f_mu_l, f_q_l = physical(mu_left, q_left, u_left)
    f_mu_r, f_q_r = physical(mu_right, q_right, u_right)
    speed = np.maximum(_wave_speed(u_left, mu_left, eps_p),
                       _wave_speed(u_right, mu_right, eps_p))
    flux_mu = 0.5 * (f_mu_l + f_mu_r) - 0.5 * speed * (mu_right - mu_left)
    flux_q = 0.5 * (f_q_l + f_q_r) - 0.5 * speed * (q_right - q_left)
    return flux_mu, flux_q


def central_gradient(values: np.ndarray, dx: float) -> np.ndarray:
    return (np.roll(values, -1) - np.roll(values, 1)) / (2.0 * dx)


def _force_coefficients(state: HydroState, mu: np.ndarray, q: np.ndarray, model: ModelSpec,
                        psi: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """(g, b) such that the momentum source is mu g - b q."""
    a, b = mean_field_coefficients(state.x, state.dx, state.length, mu, q, model)
    if model.kind == ModelKind.CHEMOTAXIS and psi is not None:
        a = a + model.chemistry.eta * central_gradient(psi, state.dx)
    return a, b


def _momentum_source(state: HydroState, mu: np.ndarray, q: np.ndarray, model: ModelSpec,
                     psi: Optional[np.ndarray]) -> np.ndarray:
    g, b = _force_coefficients(state, mu, q, model, psi)
    return mu * (g - b * velocity(mu, q))


def _rhs(state, mu, q, model, psi, source_weight):
    flux_mu, flux_q = _fluxes(mu, q, state.eps_p, state.dx)
    dmu = -(flux_mu - np.roll(flux_mu, 1)) / state.dx
    dq = -(flux_q - np.roll(flux_q, 1)) / state.dx
    if source_weight:
        dq = dq + source_weight * _momentum_source(state, mu, q, model, psi)
    return dmu, dq


def _relax(state: HydroState, mu: np.ndarray, q: np.ndarray, model: ModelSpec,
           psi: Optional[np.ndarray], eps: float, h: float) -> np.ndarray:
    """
    Exact solution over h of eps dq/dt = mu g - (1 + b) q with mu, g and b frozen.
    """
    g, b = _force_coefficients(state, mu, q, model, psi)
    k = (1.0 + b) / eps
    kh = k * h
    small = np.abs(kh) < 1e-12
    # phi = (1 - exp(-k h)) / k, tending to h as k -> 0
    phi = np.where(small, h, -np.expm1(-kh) / np.where(small, 1.0, k))
    return q * np.exp(-kh) + mu * g * phi / eps


def _ssp_rk2(state, mu0, q0, model, psi, h, source_weight):
    k1_mu, k1_q = _rhs(state, mu0, q0, model, psi, source_weight)
    mu1 = _restore_positivity(mu0 + h * k1_mu, "euler stage")
    q1 = q0 + h * k1_q
    k2_mu, k2_q = _rhs(state, mu1, q1, model, psi, source_weight)
    mu = 0.5 * (mu0 + mu1 + h * k2_mu)
    q = 0.5 * (q0 + q1 + h * k2_q)
    return _restore_positivity(mu, "euler"), q


def _restore_positivity(mu: np.ndarray, context: str) -> np.ndarray:
    negative = mu < 0
    if not negative.any():
        return mu
    total = mu.sum()
    clipped = np.where(negative, 0.0, mu)
    logger.warning(f"{context}: clipped {-mu[negative].sum():.3e} of negative density")
    return clipped * (total / clipped.sum())


# ---------------------------------------------------------------------------
# Chemical potential
# ---------------------------------------------------------------------------


def _periodic_laplacian(values: np.ndarray, dx: float) -> np.ndarray:
    return (np.roll(values, -1) - 2.0 * values + np.roll(values, 1)) / dx ** 2


def hydro_chemical_source(state: HydroState, mu: np.ndarray, model: ModelSpec) -> np.ndarray:
    """chi * mu on the cell centres."""
    return periodic_convolution(state.x, state.dx, state.length, mu, model.chemistry.chi)


def advance_hydro_chemistry(psi: np.ndarray, source: np.ndarray, model: ModelSpec, dt: float,
                            dx: float, time_scale: float = 1.0,
                            scheme: str = "explicit") -> np.ndarray:
    """
    Advance time_scale * dpsi/dt = D lap(psi) - kappa psi + source over dt.

    Args:
        psi: Current potential
        source: Frozen source term
        model: Model with chemistry parameters
        dt: Time to advance
        dx: Grid spacing
        time_scale: eps for the scaled system, else 1
        scheme: ``explicit`` substeps or one ``implicit`` backward-Euler solve

    Returns:
        New potential
    """
    chem = model.chemistry
    if scheme not in CHEM_SCHEMES:
        raise ModelError(f"Unknown chemical scheme '{scheme}', expected one of {CHEM_SCHEMES}")
    if scheme == "implicit":
        n = psi.size
        h = dt / time_scale
        column = np.zeros(n)
        column[0] = 1.0 + h * (chem.kappa + 2.0 * chem.diffusivity / dx ** 2)
        column[1] = column[-1] = -h * chem.diffusivity / dx ** 2
        return solve_circulant(column, psi + h * source)
    # explicit stability: h (2 D / dx^2 + kappa) <= 1 with h = dt / (substeps * time_scale)
    rate = 2.0 * chem.diffusivity / dx ** 2 + chem.kappa
    substeps = max(1, math.ceil(dt * rate / (0.9 * time_scale)))
    h = dt / (substeps * time_scale)
    for _ in range(substeps):
        psi = psi + h * (chem.diffusivity * _periodic_laplacian(psi, dx) - chem.kappa * psi + source)
    return psi


def solve_chemical_potential(mu: np.ndarray, dx: float, kappa: float,
                             diffusivity: float = 1.0, tolerance: float = 1e-8) -> np.ndarray:
    """
    Periodic elliptic solve of (kappa - D lap) psi = mu.

    Raises:
        SolverConvergenceError: Singular operator or residual above tolerance
    """
    n = mu.size
    column = np.zeros(n)
    column[0] = kappa + 2.0 * diffusivity / dx ** 2
    column[1] = column[-1] = -diffusivity / dx ** 2
    try:
        psi = solve_circulant(column, mu, singular="raise")
    except LinAlgError as e:
        raise SolverConvergenceError(f"elliptic operator is singular (kappa={kappa}): {e}") from e
    residual = kappa * psi - diffusivity * _periodic_laplacian(psi, dx) - mu
    scale = max(float(np.max(np.abs(mu))), 1.0)
    if not np.all(np.isfinite(psi)) or np.max(np.abs(residual)) > tolerance * scale:
        raise SolverConvergenceError(
            f"elliptic residual {float(np.max(np.abs(residual))):.3e} exceeds {tolerance:.1e}")
    return psi


# ---------------------------------------------------------------------------
# Euler steps
# ---------------------------------------------------------------------------


def _advance(state: HydroState, model: ModelSpec, dt: float, eps: float, friction: bool,
             chem_scheme: str) -> HydroState:
    if eps <= 0:
        raise ModelError("eps must be > 0 for the scaled Euler system")

    vacuum = int(np.count_nonzero(state.mu <= VACUUM_FRACTION * state.mu.max()))
    if vacuum:
        logger.debug(f"{vacuum} vacuum cell(s) at t={state.time:.4g}, velocity set to zero")

    psi = state.psi
    if model.kind == ModelKind.CHEMOTAXIS:
        if psi is None:
            raise ModelError("chemotaxis hydro run needs psi")
        time_scale = eps if friction else 1.0
        psi = advance_hydro_chemistry(psi, hydro_chemical_source(state, state.mu, model), model,
                                      dt, state.dx, time_scale, chem_scheme)

    # friction: Strang split of the exact relaxation around the flux update;
    # otherwise the source rides in the SSP-RK2 stages
    mu, q = state.mu, state.q
    elapsed, substeps = 0.0, 0
    while dt - elapsed > 1e-12 * dt:
        speed = float(np.max(_wave_speed(velocity(mu, q), mu, state.eps_p)))
        h = dt - elapsed
        if speed > 0:
            h = min(h, HYPERBOLIC_CFL * state.dx / speed)
        substeps += 1
        if substeps > MAX_SUBSTEPS:
            raise CFLViolation(f"hyperbolic limit needs more than {MAX_SUBSTEPS} substeps "
                               f"for dt={dt:.4g} (wave speed {speed:.4g})", "euler")
        if friction:
            q = _relax(state, mu, q, model, psi, eps, 0.5 * h)
            mu, q = _ssp_rk2(state, mu, q, model, psi, h, 0.0)
            q = _relax(state, mu, q, model, psi, eps, 0.5 * h)
        else:
            mu, q = _ssp_rk2(state, mu, q, model, psi, h, 1.0 / eps)
        elapsed += h
    if substeps > 1:
        logger.debug(f"euler step at t={state.time:.4g} split into {substeps} substeps")
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(q))):
        raise NonFiniteStateError(f"hydro state became non-finite at t={state.time + dt:.4g}")

    result = state.with_fields(mu=mu, q=q, psi=psi, time=state.time + dt)
    drift = abs(result.mass - state.mass)
    if drift > MASS_TOLERANCE:
        raise MassDriftError(f"hydro mass changed by {drift:.3e} in one step")
    return result


def step_euler(state: HydroState, model: ModelSpec, dt: float,
               chem_scheme: str = "explicit") -> HydroState:
    """
    One step of the nonlocal Euler system, with the pressure eps_p mu^2/2
    when state.eps_p > 0.

    Args:
        state: Current state
        model: Interaction law
        dt: Time step
        chem_scheme: ``explicit`` or ``implicit`` chemical update

    Returns:
        State at time state.time + dt

    Raises:
        CFLViolation: dt needs more than MAX_SUBSTEPS hyperbolic substeps
    """
    return _advance(state, model, dt, 1.0, False, chem_scheme)


def step_euler_eps(state: HydroState, model: ModelSpec, dt: float,
                   chem_scheme: str = "explicit") -> HydroState:
    """
    One step of the eps-scaled system eps (d_t q + d_x(q u + p)) = mu F - q.

    Friction models relax q exactly over half steps on either side of the
    flux update, which puts no bound on dt / eps; steps beyond the
    hyperbolic CFL are split into substeps. The chemical equation carries
    eps d_t psi.
    """
    return _advance(state, model, dt, state.eps, model.friction, chem_scheme)


def run_hydro(state: HydroState, model: ModelSpec, dt: float, t_final: float,
              snapshot_times=(), scaled: bool = False,
              chem_scheme: str = "explicit") -> Tuple[HydroState, List[Tuple[float, HydroState]]]:
    """Integrate to t_final, collecting (time, state) snapshots."""
    stepper = step_euler_eps if scaled else step_euler
    n_steps = int(round(t_final / dt))
    wanted = {int(round(t / dt)) for t in snapshot_times}
    snapshots = []
    for k in range(n_steps + 1):
        if k in wanted:
            snapshots.append((k * dt, state))
        if k < n_steps:
            state = stepper(state, model, dt, chem_scheme)
    return state, snapshots


# ---------------------------------------------------------------------------
# Keller-Segel
# ---------------------------------------------------------------------------


def diffusion_coefficient(model: ModelSpec) -> float:
    """Coefficient of d_x(mu d_x mu) produced by a Dirac-approximating potential."""
    if isinstance(model.potential, DiracMollifierPotential):
        return model.potential.coupling
    return 1.0


def step_keller_segel(mu: np.ndarray, psi: np.ndarray, model: ModelSpec, dt: float, dx: float,
                      drift: str = "gradient", coefficient: Optional[float] = None
                      ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Explicit upwind step of d_t mu = d_x(c mu d_x mu) - d_x(mu s D(psi)).

    The face velocity is w = -c d_x mu + s D(psi). In the gradient form
    D = d_x and s = eta; in the printed form D is the identity and s = -1.

    Args:
        mu: Density on cell centres of a periodic grid
        psi: Chemical potential driving this step
        model: Chemotaxis model (eta, kappa, D)
        dt: Time step
        dx: Grid spacing
        drift: ``gradient`` or ``printed``
        coefficient: Overrides s

    Returns:
        Tuple (new mu, psi solved from the new mu)
    """
    if drift not in DRIFT_FORMS:
        raise ModelError(f"Unknown drift form '{drift}', expected one of {DRIFT_FORMS}")
    chem = model.chemistry
    if chem is None:
        raise ModelError("keller_segel step needs chemistry parameters")
    c = diffusion_coefficient(model)
    number = c * float(np.max(mu)) * dt / dx ** 2
    if number > PARABOLIC_CFL:
        raise CFLViolation(f"parabolic number {number:.4g} > {PARABOLIC_CFL}", "keller_segel")

    mu_next = np.roll(mu, -1)
    if drift == "gradient":
        s = chem.eta if coefficient is None else coefficient
        drive = (np.roll(psi, -1) - psi) / dx
    else:
        s = -1.0 if coefficient is None else coefficient
        drive = 0.5 * (psi + np.roll(psi, -1))
    w = -c * (mu_next - mu) / dx + s * drive
    upwind = float(np.max(np.abs(w))) * dt / dx
    if upwind > UPWIND_CFL:
        raise CFLViolation(f"upwind number {upwind:.4g} > {UPWIND_CFL}", "keller_segel")
    flux = np.where(w > 0, mu, mu_next) * w
    updated = mu - dt / dx * (flux - np.roll(flux, 1))
    if not np.all(np.isfinite(updated)):
        raise NonFiniteStateError("keller_segel density became non-finite")
    drift_mass = abs(updated.sum() - mu.sum()) * dx
    if drift_mass > MASS_TOLERANCE:
        raise MassDriftError(f"keller_segel mass changed by {drift_mass:.3e}")
    updated = np.maximum(updated, 0.0)
    return updated, solve_chemical_potential(updated, dx, chem.kappa, chem.diffusivity)


def run_keller_segel(mu: np.ndarray, model: ModelSpec, dt: float, dx: float, t_final: float,
                     drift: str = "gradient", coefficient: Optional[float] = None
                     ) -> Tuple[np.ndarray, np.ndarray]:
    """Integrate the density equation to t_final; returns (mu, psi)."""
    chem = model.chemistry
    psi = solve_chemical_potential(mu, dx, chem.kappa, chem.diffusivity)
    for _ in range(int(round(t_final / dt))):
        mu, psi = step_keller_segel(mu, psi, model, dt, dx, drift, coefficient)
    return mu, psi


# ---------------------------------------------------------------------------
# Monokinetic lift
# ---------------------------------------------------------------------------


def monokinetic_init(mu0: np.ndarray, u0: np.ndarray, sigma_v: float,
                     x_range: Tuple[float, float], v_range: Tuple[float, float],
                     n_v: int) -> PhaseDensity:
    """
    Phase density mu0(x) N(v; u0(x), sigma_v^2) on the x-grid of mu0.

    Args:
        mu0: Density on n_x cell centres
        u0: Velocity on the same cells
        sigma_v: Velocity spread, at least one v-cell
        x_range: Periodic x-box
        v_range: Truncated velocity range
        n_v: Number of velocity cells

    Returns:
        PhaseDensity of mass 1
    """
    mu0 = np.asarray(mu0, dtype=float)
    u0 = np.broadcast_to(np.asarray(u0, dtype=float), mu0.shape)
    dv = (v_range[1] - v_range[0]) / n_v
    if sigma_v < dv:
        raise ModelError(f"sigma_v={sigma_v} is below the velocity resolution dv={dv:.4g}")
    v = v_range[0] + (np.arange(n_v) + 0.5) * dv
    profile = np.exp(-0.5 * ((v[None, :] - u0[:, None]) / sigma_v) ** 2)
    # each column carries exactly mu0 after the discrete normalisation
    profile /= profile.sum(axis=1, keepdims=True) * dv
    values = mu0[:, None] * profile
    dx = (x_range[1] - x_range[0]) / mu0.size
    mass = values.sum() * dx * dv
    if not mass > 0:
        raise ModelError("monokinetic density has zero mass")
    return PhaseDensity(x_range[0], x_range[1], v_range[0], v_range[1], values / mass)
