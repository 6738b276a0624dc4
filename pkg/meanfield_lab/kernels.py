"""
Builtin kernel catalogue: interaction potentials, rank kernels, chemical
mollifiers, external forces and agent weight families.

Kernels are selected by name from the configuration so their Lipschitz
constants are known in advance.
"""

import logging
import math
from abc import ABC, abstractmethod
from typing import Dict, List, Optional, Sequence

import numpy as np

from meanfield_lab.errors import ModelError

logger = logging.getLogger(__name__)


def _norm(z: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(z * z, axis=-1))


def raised_cosine(r: np.ndarray, radius: float) -> np.ndarray:
    """Unnormalised C1 bump (1 + cos(pi r / radius)) / 2 on r < radius."""
    r = np.asarray(r, dtype=float)
    inside = r < radius
    return np.where(inside, 0.5 * (1.0 + np.cos(np.pi * np.minimum(r, radius) / radius)), 0.0)


def raised_cosine_slope(r: np.ndarray, radius: float) -> np.ndarray:
    """Radial derivative of :func:`raised_cosine`."""
    r = np.asarray(r, dtype=float)
    inside = r < radius
    return np.where(inside, -0.5 * np.pi / radius * np.sin(np.pi * np.minimum(r, radius) / radius), 0.0)


def raised_cosine_mass(radius: float, dim: int) -> float:
    """Integral of :func:`raised_cosine` over R^dim."""
    if dim == 1:
        return radius
    if dim == 2:
        return radius ** 2 * (np.pi / 2.0 - 2.0 / np.pi)
    if dim == 3:
        return 2.0 * np.pi * radius ** 3 * (1.0 / 3.0 - 2.0 / np.pi ** 2)
    raise ModelError(f"Unsupported dimension {dim}")


# ---------------------------------------------------------------------------
# Interaction potentials V with Lipschitz gradient
# ---------------------------------------------------------------------------


class Potential(ABC):
    """Radially symmetric pair potential V(z)."""

    name = "potential"

    @abstractmethod
    def value(self, z: np.ndarray) -> np.ndarray:
        """V(z) for z of shape (..., d); returns shape (...)."""

    @abstractmethod
    def gradient(self, z: np.ndarray) -> np.ndarray:
        """grad V(z) for z of shape (..., d); returns shape (..., d)."""

    @property
    @abstractmethod
    def lipschitz(self) -> float:
        """Lipschitz constant of the gradient."""

    def describe(self) -> Dict[str, float]:
        return {"name": self.name}


class HarmonicPotential(Potential):
    """V(z) = a |z|^2 / 2."""

    name = "harmonic"

    def __init__(self, strength: float = 1.0):
        if strength < 0:
            raise ModelError("harmonic strength must be >= 0")
        self.strength = strength

    def value(self, z):
        return 0.5 * self.strength * np.sum(z * z, axis=-1)

    def gradient(self, z):
        return self.strength * z

    @property
    def lipschitz(self):
        return self.strength

    def describe(self):
        return {"name": self.name, "strength": self.strength}


class SoftMorsePotential(Potential):
    """Bounded Morse-like well V(z) = D (1 - exp(-|z|^2 / l^2))^2."""

    name = "morse"

    def __init__(self, depth: float = 1.0, length: float = 1.0):
        if depth < 0 or length <= 0:
            raise ModelError("morse needs depth >= 0 and length > 0")
        self.depth = depth
        self.length = length

    def value(self, z):
        s = np.sum(z * z, axis=-1) / self.length ** 2
        return self.depth * (1.0 - np.exp(-s)) ** 2

    def gradient(self, z):
        s = np.sum(z * z, axis=-1) / self.length ** 2
        e = np.exp(-s)
        coef = 4.0 * self.depth * (1.0 - e) * e / self.length ** 2
        return coef[..., None] * z

    @property
    def lipschitz(self):
        # radial second derivative peaks below r = l; bound from a fine sample
        r = np.linspace(0.0, 4.0 * self.length, 4001)
        g = self.gradient(r[:, None])[:, 0]
        return float(np.max(np.abs(np.gradient(g, r))))

    def describe(self):
        return {"name": self.name, "depth": self.depth, "length": self.length}


class GaussianBumpPotential(Potential):
    """V(z) = A exp(-|z|^2 / (2 l^2)); repulsive for A > 0."""

    name = "gaussian_bump"

    def __init__(self, amplitude: float = 1.0, length: float = 1.0):
        if length <= 0:
            raise ModelError("gaussian_bump length must be > 0")
        self.amplitude = amplitude
        self.length = length

    def value(self, z):
        return self.amplitude * np.exp(-0.5 * np.sum(z * z, axis=-1) / self.length ** 2)

    def gradient(self, z):
        e = np.exp(-0.5 * np.sum(z * z, axis=-1) / self.length ** 2)
        return (-self.amplitude * e / self.length ** 2)[..., None] * z

    @property
    def lipschitz(self):
        return abs(self.amplitude) / self.length ** 2

    def describe(self):
        return {"name": self.name, "amplitude": self.amplitude, "length": self.length}


class DiracMollifierPotential(Potential):
    """
    V(z) = -c * chi_w(z), chi_w the unit-mass raised-cosine bump of radius w.

    With the printed (+1) two-body sign this is the short-range repulsion whose
    w -> 0 limit turns the nonlocal force into the gradient of the density.
    """

    name = "dirac_mollifier"

    def __init__(self, radius: float, dim: int = 1, coupling: float = 1.0):
        if radius <= 0:
            raise ModelError("dirac_mollifier radius must be > 0")
        self.radius = radius
        self.dim = dim
        self.coupling = coupling
        self._mass = raised_cosine_mass(radius, dim)

    def value(self, z):
        return -self.coupling * raised_cosine(_norm(z), self.radius) / self._mass

    def gradient(self, z):
        r = _norm(z)
        safe = np.where(r > 0, r, 1.0)
        slope = raised_cosine_slope(r, self.radius) / self._mass
        return (-self.coupling * np.where(r > 0, slope / safe, 0.0))[..., None] * z

    @property
    def lipschitz(self):
        return abs(self.coupling) * 0.5 * (np.pi / self.radius) ** 2 / self._mass

    def describe(self):
        return {"name": self.name, "radius": self.radius, "coupling": self.coupling}


class TabulatedPotential(Potential):
    """Radial force profile g(r) = V'(r) given on a grid, linear in between."""

    name = "tabulated"

    def __init__(self, radii: Sequence[float], slopes: Sequence[float]):
        radii = np.asarray(radii, dtype=float)
        slopes = np.asarray(slopes, dtype=float)
        if radii.ndim != 1 or radii.shape != slopes.shape or radii.size < 2:
            raise ModelError("tabulated potential needs matching radii/slopes of length >= 2")
        if radii[0] != 0.0 or slopes[0] != 0.0:
            raise ModelError("tabulated potential must start at r=0 with zero slope")
        if np.any(np.diff(radii) <= 0):
            raise ModelError("tabulated radii must be strictly increasing")
        self.radii = radii
        self.slopes = slopes
        # V(r) by trapezoid integration of the profile
        increments = 0.5 * (slopes[1:] + slopes[:-1]) * np.diff(radii)
        self._values = np.concatenate([[0.0], np.cumsum(increments)])

    def value(self, z):
        r = _norm(z)
        tail = np.maximum(r - self.radii[-1], 0.0) * self.slopes[-1]
        return np.interp(r, self.radii, self._values) + tail

    def gradient(self, z):
        r = _norm(z)
        safe = np.where(r > 0, r, 1.0)
        g = np.interp(r, self.radii, self.slopes)
        return np.where(r > 0, g / safe, 0.0)[..., None] * z

    @property
    def lipschitz(self):
        slope_changes = np.abs(np.diff(self.slopes) / np.diff(self.radii))
        ratio = np.abs(self.slopes[1:] / self.radii[1:])
        return float(max(slope_changes.max(), ratio.max()))

    def describe(self):
        return {"name": self.name, "points": int(self.radii.size)}


# ---------------------------------------------------------------------------
# Rank kernels K: [0, 1] -> R+, non-increasing
# ---------------------------------------------------------------------------


class RankKernel(ABC):
    """Weight of a neighbour as a function of its rank fraction."""

    name = "rank_kernel"

    @abstractmethod
    def __call__(self, s: np.ndarray) -> np.ndarray:
        pass

    @property
    @abstractmethod
    def lipschitz(self) -> float:
        pass

    def check(self, samples: int = 1001) -> None:
        """Validate finiteness, positivity and monotonicity on a grid of [0, 1]."""
        s = np.linspace(0.0, 1.0, samples)
        k = self(s)
        if not np.all(np.isfinite(k)):
            raise ModelError(f"{self.name}: K must be finite on [0,1]")
        if np.any(k < 0):
            raise ModelError(f"{self.name}: K must be nonnegative")
        if np.any(np.diff(k) > 1e-14):
            raise ModelError(f"{self.name}: K must be non-increasing")


class ClampedLinearKernel(RankKernel):
    """K(s) = floor + k0 * max(0, 1 - s / cutoff)."""

    name = "clamped_linear"

    def __init__(self, strength: float = 1.0, cutoff: float = 1.0, floor: float = 0.0):
        if cutoff <= 0:
            raise ModelError("clamped_linear cutoff must be > 0")
        self.strength = strength
        self.cutoff = cutoff
        self.floor = floor

    def __call__(self, s):
        return self.floor + self.strength * np.maximum(0.0, 1.0 - np.asarray(s) / self.cutoff)

    @property
    def lipschitz(self):
        return abs(self.strength) / self.cutoff


class SmoothStepKernel(RankKernel):
    """K(s) = floor + k0 * (1 - (3 s^2 - 2 s^3))."""

    name = "smooth_step"

    def __init__(self, strength: float = 1.0, floor: float = 0.0):
        self.strength = strength
        self.floor = floor

    def __call__(self, s):
        s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
        return self.floor + self.strength * (1.0 - (3.0 * s ** 2 - 2.0 * s ** 3))

    @property
    def lipschitz(self):
        return 1.5 * abs(self.strength)


# ---------------------------------------------------------------------------
# Chemical source mollifier chi
# ---------------------------------------------------------------------------


class Mollifier:
    """Unit-mass raised-cosine bump of radius ``radius`` in dimension ``dim``."""

    def __init__(self, radius: float, dim: int = 1):
        if radius <= 0:
            raise ModelError("mollifier radius must be > 0")
        self.radius = radius
        self.dim = dim
        self.mass = raised_cosine_mass(radius, dim)
        if not (np.isfinite(self.mass) and self.mass > 0):
            raise ModelError("mollifier must integrate to a positive finite value")

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return raised_cosine(_norm(z), self.radius) / self.mass

    @property
    def lipschitz(self) -> float:
        return 0.5 * np.pi / self.radius / self.mass

    def describe(self) -> Dict[str, float]:
        return {"radius": self.radius, "dim": self.dim}


# ---------------------------------------------------------------------------
# External forces
# ---------------------------------------------------------------------------


class ExternalForce:
    """F_ext(x) from the catalogue: none, constant or harmonic_trap."""

    KINDS = ("none", "constant", "harmonic_trap")

    def __init__(self, kind: str = "none", vector: Optional[Sequence[float]] = None,
                 stiffness: float = 0.0):
        if kind not in self.KINDS:
            raise ModelError(f"Unknown external force '{kind}'")
        self.kind = kind
        self.vector = None if vector is None else np.asarray(vector, dtype=float)
        self.stiffness = stiffness
        if kind == "constant" and self.vector is None:
            raise ModelError("constant external force needs a vector")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.broadcast_to(self.vector[: x.shape[-1]], x.shape).copy()
        if self.kind == "harmonic_trap":
            return -self.stiffness * x
        return np.zeros_like(x)

    @property
    def active(self) -> bool:
        return self.kind != "none"


# ---------------------------------------------------------------------------
# Multi-agent weights and Krause kernel
# ---------------------------------------------------------------------------


AGENT_WEIGHTS = ("uniform", "ring", "leader")


def agent_weight_matrix(family: str, n: int, neighbours: int = 1,
                        leader_weight: float = 1.0) -> np.ndarray:
    """
    Build the index-dependent weight matrix A_ij of a multi-agent system.

    Args:
        family: One of ``uniform``, ``ring`` or ``leader``
        n: Number of agents
        neighbours: Ring half-width k (agents within k indices interact)
        leader_weight: Extra weight of agent 0 for the ``leader`` family

    Returns:
        Array of shape (n, n)
    """
    if family == "uniform":
        return np.ones((n, n))
    if family == "ring":
        idx = np.arange(n)
        gap = np.abs(idx[:, None] - idx[None, :])
        gap = np.minimum(gap, n - gap)
        return (gap <= neighbours).astype(float)
    if family == "leader":
        weights = np.ones((n, n))
        weights[:, 0] += leader_weight
        return weights
    raise ModelError(f"Unknown agent weight family '{family}'")


def krause_kernel(z: np.ndarray, confidence: float) -> np.ndarray:
    """Bounded-confidence opinion kernel sigma(z) = z * bump(|z|)."""
    return raised_cosine(_norm(z), confidence)[..., None] * z


# ---------------------------------------------------------------------------
# Factories
# ---------------------------------------------------------------------------


POTENTIALS = ("harmonic", "morse", "gaussian_bump", "dirac_mollifier", "tabulated")
RANK_KERNELS = ("clamped_linear", "smooth_step")


def create_potential(name: str, dim: int = 1, **params) -> Potential:
    """
    Instantiate a potential from the catalogue.

    Args:
        name: Catalogue name
        dim: Spatial dimension (used by the mollifier normalisation)
        **params: Kernel parameters

    Returns:
        Potential instance
    """
    try:
        if name == "harmonic":
            return HarmonicPotential(**params)
        if name == "morse":
            return SoftMorsePotential(**params)
        if name == "gaussian_bump":
            return GaussianBumpPotential(**params)
        if name == "dirac_mollifier":
            return DiracMollifierPotential(dim=dim, **params)
        if name == "tabulated":
            return TabulatedPotential(**params)
    except TypeError as e:
        raise ModelError(f"Bad parameters for potential '{name}': {e}") from e
    raise ModelError(f"Unknown potential '{name}', expected one of {POTENTIALS}")


def create_rank_kernel(name: str, **params) -> RankKernel:
    """Instantiate and validate a rank kernel K from the catalogue."""
    try:
        if name == "clamped_linear":
            kernel = ClampedLinearKernel(**params)
        elif name == "smooth_step":
            kernel = SmoothStepKernel(**params)
        else:
            raise ModelError(f"Unknown rank kernel '{name}', expected one of {RANK_KERNELS}")
    except TypeError as e:
        raise ModelError(f"Bad parameters for rank kernel '{name}': {e}") from e
    kernel.check()
    return kernel


def mollifier_width(eps: float, scale: float = 1.0) -> float:
    """Radius of the eps-scaled Dirac approximations, proportional to sqrt(eps)."""
    if eps <= 0:
        raise ModelError("eps must be > 0")
    return scale * math.sqrt(eps)


def catalogue() -> Dict[str, List[str]]:
    """Names accepted by the configuration schema."""
    return {
        "potential": list(POTENTIALS),
        "rank_kernel": list(RANK_KERNELS),
        "external_force": list(ExternalForce.KINDS),
        "agent_weights": list(AGENT_WEIGHTS),
    }
