"""
Optimal-transport metrics between discrete measures.

Marginals of replica ensembles, exact W1/W2 (quantile coupling in 1-d,
network simplex otherwise), the sliced estimator for large or high-dimensional
supports, quantisation of phase densities, propagation-of-chaos errors and
log-log rate fits.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import ot
from scipy import stats
from scipy.spatial.distance import cdist

from meanfield_lab.errors import ModelError, TransportError
from meanfield_lab.kinetic import PhaseDensity
from meanfield_lab.model import ModelKind
from meanfield_lab.particles import ReplicaSnapshots

logger = logging.getLogger(__name__)

EXACT_LIMIT = 4000
MIN_PROJECTIONS = 256
MERGE_TOLERANCE = 1e-12
WEIGHT_TOLERANCE = 1e-12
NETWORK_SIMPLEX_ITERATIONS = 10_000_000


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point cloud: points (n, m), nonnegative weights summing to 1."""
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        weights = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)
        if points.ndim != 2 or weights.shape != (points.shape[0],) or points.shape[0] == 0:
            raise TransportError("measure needs points (n, m) and n weights, n >= 1")
        if not np.all(np.isfinite(points)):
            raise TransportError("measure support has non-finite points")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > WEIGHT_TOLERANCE:
            raise TransportError(f"weights must be >= 0 and sum to 1 (sum={weights.sum():.15g})")

    @classmethod
    def from_points(cls, points, weights: Optional[Sequence[float]] = None) -> "DiscreteMeasure":
        """Measure with equal weights, or the given weights renormalised."""
        points = np.asarray(points, dtype=float)
        n = points.shape[0]
        if weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(weights, dtype=float)
            if np.any(w < 0) or not w.sum() > 0:
                raise TransportError("weights must be nonnegative with positive total")
            w = w / w.sum()
        return cls(points, w)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def merged(self, tolerance: float = MERGE_TOLERANCE) -> "DiscreteMeasure":
        """Merge atoms closer than ``tolerance`` in every coordinate; drop zero weights."""
        keep = self.weights > 0
        points, weights = self.points[keep], self.weights[keep]
        order = np.lexsort(points.T[::-1])
        points, weights = points[order], weights[order]
        new_group = np.ones(len(points), dtype=bool)
        new_group[1:] = np.any(np.abs(np.diff(points, axis=0)) > tolerance, axis=1)
        groups = np.cumsum(new_group) - 1
        merged_weights = np.bincount(groups, weights=weights)
        return DiscreteMeasure(points[new_group], merged_weights / merged_weights.sum())

    def coincides(self, other: "DiscreteMeasure", tolerance: float = MERGE_TOLERANCE) -> bool:
        a, b = self.merged(tolerance), other.merged(tolerance)
        return (a.size == b.size and a.dim == b.dim
                and np.allclose(a.points, b.points, rtol=0.0, atol=tolerance)
                and np.allclose(a.weights, b.weights, rtol=0.0, atol=WEIGHT_TOLERANCE))

    def scaled(self, factor: float) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points * factor, self.weights)


@dataclass(frozen=True)
class DistanceEstimate:
    """Distance value with its standard error; ``estimator`` is exact or sliced."""
    value: float
    stderr: float = 0.0
    estimator: str = "exact"

    def __float__(self) -> float:
        return self.value


@dataclass
class RateFitResult:
    """Log-log least-squares fit distance ~ C N^-alpha."""
    alpha_hat: float
    C_hat: float
    residual: float
    slope_stderr: float
    pairs: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def significance(self) -> Optional[float]:
        """
        How many standard errors the slope lies below zero; None for an exact
        fit of a decreasing sequence, where it is unbounded.
        """
        if self.slope_stderr == 0:
            return None if self.alpha_hat > 0 else 0.0
        return self.alpha_hat / self.slope_stderr

    def to_dict(self) -> dict:
        return {
            "alpha_hat": self.alpha_hat,
            "C_hat": self.C_hat,
            "residual": self.residual,
            "slope_stderr": self.slope_stderr,
            "significance": self.significance,
            "pairs": [[int(n), float(d)] for n, d in self.pairs],
        }


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


def _check_pair(a: DiscreteMeasure, b: DiscreteMeasure) -> None:
    if a.dim != b.dim:
        raise TransportError(f"dimension mismatch: {a.dim} vs {b.dim}")


def quantile_cost(xa: np.ndarray, wa: np.ndarray, xb: np.ndarray, wb: np.ndarray,
                  p: int) -> float:
    """
    Transport cost of the monotone coupling of two weighted 1-d measures.

    Both quantile functions are piecewise constant; the cost integrates
    |F^-1(t) - G^-1(t)|^p over the union of their breakpoints.
    """
    ia, ib = np.argsort(xa, kind="stable"), np.argsort(xb, kind="stable")
    xa, wa, xb, wb = xa[ia], wa[ia], xb[ib], wb[ib]
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    breaks = np.union1d(ca, cb)
    lengths = np.diff(np.concatenate([[0.0], breaks]))
    mids = breaks - 0.5 * lengths
    qa = xa[np.minimum(np.searchsorted(ca, mids, side="right"), len(xa) - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mids, side="right"), len(xb) - 1)]
    return float(np.sum(lengths * np.abs(qa - qb) ** p))


def network_simplex_cost(a: DiscreteMeasure, b: DiscreteMeasure, p: int) -> float:
    """Exact optimal cost with ground cost |x - y|^p by POT's network simplex."""
    if max(a.size, b.size) > EXACT_LIMIT:
        raise TransportError(f"exact solver limited to {EXACT_LIMIT} points, "
                             f"got {a.size} and {b.size}; enable slicing")
    cost = cdist(a.points, b.points, metric="sqeuclidean" if p == 2 else "euclidean")
    return float(ot.emd2(a.weights, b.weights, cost, numItermax=NETWORK_SIMPLEX_ITERATIONS))


def sliced_wasserstein(a: DiscreteMeasure, b: DiscreteMeasure, projections: int = MIN_PROJECTIONS,
                       seed: int = 0, p: int = 2) -> DistanceEstimate:
    """
    Sliced Wasserstein estimate over random unit directions.

    Returns the p-th root of the mean projected cost, with a delta-method
    standard error from the spread across directions.
    """
    _check_pair(a, b)
    if projections < MIN_PROJECTIONS:
        raise TransportError(f"sliced estimator needs at least {MIN_PROJECTIONS} projections")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((projections, a.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    pa, pb = a.points @ directions.T, b.points @ directions.T
    costs = np.array([quantile_cost(pa[:, k], a.weights, pb[:, k], b.weights, p)
                      for k in range(projections)])
    mean_cost = float(costs.mean())
    value = mean_cost ** (1.0 / p)
    cost_stderr = float(costs.std(ddof=1) / math.sqrt(projections))
    stderr = cost_stderr * value / (p * mean_cost) if mean_cost > 0 else 0.0
    return DistanceEstimate(value, stderr, "sliced")


def wasserstein(a: DiscreteMeasure, b: DiscreteMeasure, p: int, sliced: bool = False,
                projections: int = MIN_PROJECTIONS, seed: int = 0) -> DistanceEstimate:
    """
    W_p by the cheapest exact method, or the sliced estimate when the
    supports exceed the exact-solver limit and ``sliced`` is set.
    """
    _check_pair(a, b)
    if a.dim == 1:
        cost = quantile_cost(a.points[:, 0], a.weights, b.points[:, 0], b.weights, p)
        return DistanceEstimate(cost ** (1.0 / p))
    if max(a.size, b.size) > EXACT_LIMIT:
        if not sliced:
            raise TransportError(f"supports of {a.size} and {b.size} points exceed the exact "
                                 f"limit {EXACT_LIMIT}; enable slicing")
        logger.info(f"Using the sliced W{p} estimate for {a.size} x {b.size} points")
        return sliced_wasserstein(a, b, projections, seed, p)
    cost = max(network_simplex_cost(a, b, p), 0.0)
    return DistanceEstimate(cost ** (1.0 / p))


def w2(a: DiscreteMeasure, b: DiscreteMeasure, sliced: bool = False,
       projections: int = MIN_PROJECTIONS, seed: int = 0) -> float:
    """
    Quadratic Wasserstein distance.

    Args:
        a: First measure
        b: Second measure of the same dimension
        sliced: Allow the sliced estimate beyond the exact-solver limit
        projections: Directions of the sliced estimate
        seed: Seed of the projection directions

    Returns:
        W2(a, b)
    """
    return wasserstein(a, b, 2, sliced, projections, seed).value


def w1(a: DiscreteMeasure, b: DiscreteMeasure, sliced: bool = False,
       projections: int = MIN_PROJECTIONS, seed: int = 0) -> float:
    """Wasserstein-1 distance, arguments as for :func:`w2`."""
    return wasserstein(a, b, 1, sliced, projections, seed).value


# ---------------------------------------------------------------------------
# Marginals and references
# ---------------------------------------------------------------------------


def extract_marginal(samples: ReplicaSnapshots, j: int, t: Optional[float] = None,
                     kind: Optional[ModelKind] = None,
                     indices: Optional[Sequence[int]] = None) -> DiscreteMeasure:
    """
    Pool the j-particle blocks of all replicas into an equal-weight measure.

    Points are ordered (x_1..x_j, v_1..v_j) in R^{2dj}.

    Args:
        samples: Replica snapshots
        j: Marginal order, 1 <= j <= N
        t: Snapshot time (default: the only snapshot)
        kind: Model kind; multi-agent systems need explicit ``indices``
        indices: Particle indices to use instead of the first j

    Returns:
        DiscreteMeasure with one atom per replica
    """
    n = samples.n_particles
    if not 1 <= j <= n:
        raise TransportError(f"marginal order j={j} outside [1, {n}]")
    if kind is not None and ModelKind(kind) == ModelKind.MULTI_AGENT and indices is None:
        raise ModelError("multi_agent marginals are index-specific; give the index set explicitly")
    if indices is None:
        chosen = np.arange(j)
    else:
        chosen = np.asarray(indices, dtype=int)
        if chosen.size != j or np.any(chosen < 0) or np.any(chosen >= n):
            raise TransportError(f"need {j} particle indices in [0, {n})")
    if t is None:
        if len(samples.times) != 1:
            raise TransportError("several snapshots present; pass the time t")
        k = 0
    else:
        try:
            k = samples.index_of(t)
        except ValueError as e:
            raise TransportError(str(e)) from e
    x = samples.positions[k][:, chosen, :].reshape(samples.replicas, -1)
    v = samples.velocities[k][:, chosen, :].reshape(samples.replicas, -1)
    return DiscreteMeasure.from_points(np.hstack([x, v]))


def vlasov_reference_measure(rho: PhaseDensity, n: Optional[int] = None, seed: int = 0,
                             mode: str = "grid") -> DiscreteMeasure:
    """
    Quantise a phase density.

    In ``grid`` mode every cell with positive mass becomes an atom at its
    centre. In ``sample`` mode n points are drawn by inverse CDF on the
    flattened grid and spread uniformly inside their cell.

    Args:
        rho: Phase density
        n: Number of samples (sample mode)
        seed: Seed of the sample draws
        mode: ``grid`` or ``sample``

    Returns:
        DiscreteMeasure on R^2
    """
    masses = np.clip(rho.values, 0.0, None).ravel() * rho.dx * rho.dv
    if not masses.sum() > 0:
        raise TransportError("phase density has no mass to quantise")
    xs, vs = np.meshgrid(rho.x, rho.v, indexing="ij")
    if mode == "grid":
        keep = masses > 0
        points = np.column_stack([xs.ravel()[keep], vs.ravel()[keep]])
        return DiscreteMeasure.from_points(points, masses[keep])
    if mode != "sample":
        raise TransportError(f"Unknown quantisation mode '{mode}'")
    if n is None or n < 1:
        raise TransportError("sample mode needs n >= 1")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(masses)
    cdf /= cdf[-1]
    cells = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), cdf.size - 1)
    jitter = rng.random((n, 2)) - 0.5
    points = np.column_stack([xs.ravel()[cells] + jitter[:, 0] * rho.dx,
                              vs.ravel()[cells] + jitter[:, 1] * rho.dv])
    return DiscreteMeasure.from_points(points)


def product_measure(factors: Sequence[DiscreteMeasure], dim: int = 1) -> DiscreteMeasure:
    """
    Tensor product of one-particle measures on (x, v) in R^{2d}, with points
    reordered to (x_1..x_j, v_1..v_j) like :func:`extract_marginal`.
    """
    grid_points = [f.points for f in factors]
    grid_weights = [f.weights for f in factors]
    index = np.stack(np.meshgrid(*[np.arange(f.size) for f in factors], indexing="ij"),
                     axis=-1).reshape(-1, len(factors))
    x_part = np.hstack([grid_points[k][index[:, k], :dim] for k in range(len(factors))])
    v_part = np.hstack([grid_points[k][index[:, k], dim:] for k in range(len(factors))])
    weights = np.prod([grid_weights[k][index[:, k]] for k in range(len(factors))], axis=0)
    return DiscreteMeasure.from_points(np.hstack([x_part, v_part]), weights)


def chaos_error(samples: ReplicaSnapshots, rho_ref: PhaseDensity, j: int,
                t: Optional[float] = None, n_ref: int = 2000, seed: int = 0,
                projections: int = MIN_PROJECTIONS) -> DistanceEstimate:
    """
    W2 between the j-marginal of the replicas and the quantised (rho_ref)^j.

    j = 1 is exact against n_ref sampled reference points; j = 2 uses the
    sliced estimator against the product of two sampled factors.
    """
    if j not in (1, 2):
        raise TransportError(f"chaos error supports j in {{1, 2}}, got {j}")
    if samples.dim != 1:
        raise TransportError("chaos error compares against a 1-d phase density")
    marginal = extract_marginal(samples, j, t)
    if j == 1:
        reference = vlasov_reference_measure(rho_ref, n_ref, seed, mode="sample")
        return wasserstein(marginal, reference, 2, sliced=True, projections=projections, seed=seed)
    per_factor = max(1, int(math.ceil(math.sqrt(n_ref))))
    factors = [vlasov_reference_measure(rho_ref, per_factor, seed + k, mode="sample")
               for k in range(j)]
    reference = product_measure(factors, samples.dim)
    return sliced_wasserstein(marginal, reference, projections, seed)


# ---------------------------------------------------------------------------
# Rates
# ---------------------------------------------------------------------------


def subtract_noise_floor(distance: float, floor: float) -> float:
    """Remove an independent sampling error in quadrature; 0 when below the floor."""
    return math.sqrt(max(distance ** 2 - floor ** 2, 0.0))


def fit_rate(pairs: Sequence[Tuple[int, float]]) -> RateFitResult:
    """
    Least squares of log distance on log N.

    Args:
        pairs: At least four (N, distance) pairs with distance > 0

    Returns:
        RateFitResult with alpha_hat = -slope and C_hat = exp(intercept)
    """
    pairs = [(int(n), float(d)) for n, d in pairs]
    if len(pairs) < 4:
        raise TransportError(f"rate fit needs at least 4 pairs, got {len(pairs)}")
    if any(n <= 0 for n, _ in pairs):
        raise TransportError("particle counts must be positive")
    if any(not d > 0 for _, d in pairs):
        raise TransportError("rate fit needs strictly positive distances")
    log_n = np.log([n for n, _ in pairs])
    log_d = np.log([d for _, d in pairs])
    try:
        fit = stats.linregress(log_n, log_d)
    except ValueError as e:
        raise TransportError(f"rate fit needs at least two distinct N: {e}") from e
    residuals = log_d - (fit.intercept + fit.slope * log_n)
    residual = float(np.sqrt(np.mean(residuals ** 2)))
    logger.info(f"Rate fit over {len(pairs)} points: alpha={-fit.slope:.4f} "
                f"+- {fit.stderr:.4f}, residual={residual:.3e}")
    return RateFitResult(alpha_hat=float(-fit.slope), C_hat=float(np.exp(fit.intercept)),
                         residual=residual, slope_stderr=float(fit.stderr), pairs=pairs)
