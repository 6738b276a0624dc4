"""
Initial one-particle laws rho^0 on phase space.

Each law can be sampled (particle runs) and evaluated as a density on a
1-d phase-space grid (kinetic runs), so both start from the same rho^0.
"""

import logging
from abc import ABC, abstractmethod
from typing import Dict, Tuple

import numpy as np
from scipy import stats

from meanfield_lab.errors import ModelError

logger = logging.getLogger(__name__)


class InitialLaw(ABC):
    """Product law on (x, v) in R^d x R^d with finite second moment."""

    name = "law"

    @abstractmethod
    def sample(self, rng: np.random.Generator, n: int, dim: int) -> Tuple[np.ndarray, np.ndarray]:
        """Draw n i.i.d. particles; returns positions and velocities of shape (n, dim)."""

    @abstractmethod
    def density(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Phase-space density for d = 1, broadcasting over x and v."""

    @abstractmethod
    def moments(self) -> Dict[str, float]:
        """Mean and variance of the 1-d position and velocity marginals."""

    @abstractmethod
    def position_density(self, x: np.ndarray) -> np.ndarray:
        """Density of the 1-d position marginal."""

    @abstractmethod
    def mean_velocity(self, x: np.ndarray) -> np.ndarray:
        """Conditional mean velocity given the position (0 where the density vanishes)."""


class GaussianLaw(InitialLaw):
    """Independent normal positions and velocities."""

    name = "gaussian"

    def __init__(self, mean_x: float = 0.0, std_x: float = 1.0,
                 mean_v: float = 0.0, std_v: float = 1.0):
        if std_x <= 0 or std_v <= 0:
            raise ModelError("gaussian law needs positive standard deviations")
        self.mean_x, self.std_x = mean_x, std_x
        self.mean_v, self.std_v = mean_v, std_v

    def sample(self, rng, n, dim):
        draws = rng.standard_normal((n, 2 * dim))
        x = self.mean_x + self.std_x * draws[:, :dim]
        v = self.mean_v + self.std_v * draws[:, dim:]
        return x, v

    def density(self, x, v):
        return (stats.norm.pdf(x, self.mean_x, self.std_x)
                * stats.norm.pdf(v, self.mean_v, self.std_v))

    def moments(self):
        return {"mean_x": self.mean_x, "var_x": self.std_x ** 2,
                "mean_v": self.mean_v, "var_v": self.std_v ** 2}

    def position_density(self, x):
        return stats.norm.pdf(x, self.mean_x, self.std_x)

    def mean_velocity(self, x):
        return np.full(np.shape(x), float(self.mean_v))


class UniformBoxLaw(InitialLaw):
    """Uniform positions in [x_min, x_max]^d and velocities in [v_min, v_max]^d."""

    name = "uniform_box"

    def __init__(self, x_min: float = -1.0, x_max: float = 1.0,
                 v_min: float = -1.0, v_max: float = 1.0):
        if x_max <= x_min or v_max <= v_min:
            raise ModelError("uniform_box law needs non-empty ranges")
        self.x_min, self.x_max = x_min, x_max
        self.v_min, self.v_max = v_min, v_max

    def sample(self, rng, n, dim):
        draws = rng.random((n, 2 * dim))
        x = self.x_min + (self.x_max - self.x_min) * draws[:, :dim]
        v = self.v_min + (self.v_max - self.v_min) * draws[:, dim:]
        return x, v

    def density(self, x, v):
        inside_x = (x >= self.x_min) & (x <= self.x_max)
        inside_v = (v >= self.v_min) & (v <= self.v_max)
        area = (self.x_max - self.x_min) * (self.v_max - self.v_min)
        return np.where(inside_x & inside_v, 1.0 / area, 0.0)

    def moments(self):
        lx, lv = self.x_max - self.x_min, self.v_max - self.v_min
        return {"mean_x": 0.5 * (self.x_min + self.x_max), "var_x": lx ** 2 / 12.0,
                "mean_v": 0.5 * (self.v_min + self.v_max), "var_v": lv ** 2 / 12.0}

    def position_density(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.x_min) & (x <= self.x_max)
        return np.where(inside, 1.0 / (self.x_max - self.x_min), 0.0)

    def mean_velocity(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.x_min) & (x <= self.x_max)
        return np.where(inside, 0.5 * (self.v_min + self.v_max), 0.0)


class TwoClusterLaw(InitialLaw):
    """
    Equal-weight mixture of two Gaussian clusters centred at (+-separation/2,
    -+velocity_offset), each with the given spreads.
    """

    name = "two_cluster"

    def __init__(self, separation: float = 2.0, std_x: float = 0.5,
                 velocity_offset: float = 0.5, std_v: float = 0.5):
        if std_x <= 0 or std_v <= 0:
            raise ModelError("two_cluster law needs positive spreads")
        self.separation = separation
        self.std_x = std_x
        self.velocity_offset = velocity_offset
        self.std_v = std_v

    def sample(self, rng, n, dim):
        draws = rng.standard_normal((n, 2 * dim + 1))
        side = np.where(draws[:, -1] < 0.0, -1.0, 1.0)[:, None]
        x = side * 0.5 * self.separation + self.std_x * draws[:, :dim]
        v = -side * self.velocity_offset + self.std_v * draws[:, dim:2 * dim]
        return x, v

    def density(self, x, v):
        half = 0.5 * self.separation
        left = stats.norm.pdf(x, -half, self.std_x) * stats.norm.pdf(v, self.velocity_offset, self.std_v)
        right = stats.norm.pdf(x, half, self.std_x) * stats.norm.pdf(v, -self.velocity_offset, self.std_v)
        return 0.5 * (left + right)

    def moments(self):
        return {"mean_x": 0.0, "var_x": self.std_x ** 2 + 0.25 * self.separation ** 2,
                "mean_v": 0.0, "var_v": self.std_v ** 2 + self.velocity_offset ** 2}

    def position_density(self, x):
        half = 0.5 * self.separation
        return 0.5 * (stats.norm.pdf(x, -half, self.std_x) + stats.norm.pdf(x, half, self.std_x))

    def mean_velocity(self, x):
        half = 0.5 * self.separation
        left = stats.norm.pdf(x, -half, self.std_x)
        right = stats.norm.pdf(x, half, self.std_x)
        total = left + right
        weighted = self.velocity_offset * (left - right)
        return np.where(total > 0, weighted / np.where(total > 0, total, 1.0), 0.0)


LAWS = ("gaussian", "uniform_box", "two_cluster")


def create_law(name: str, **params) -> InitialLaw:
    """Instantiate an initial law from the catalogue."""
    classes = {"gaussian": GaussianLaw, "uniform_box": UniformBoxLaw, "two_cluster": TwoClusterLaw}
    if name not in classes:
        raise ModelError(f"Unknown initial law '{name}', expected one of {LAWS}")
    try:
        return classes[name](**params)
    except TypeError as e:
        raise ModelError(f"Bad parameters for initial law '{name}': {e}") from e
