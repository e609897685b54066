"""Wasserstein-2 distances between empirical state-action distributions.

The ground cost is the squared Euclidean distance between feature vectors.
Small problems are solved exactly with POT's network simplex (`ot.emd`);
larger ones with POT's log-domain Sinkhorn. Solvers use no randomness.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional
from typing import Tuple

import numpy as np
import ot as pot
from scipy.spatial.distance import cdist

from .exceptions import DimensionMismatchError
from .exceptions import SolverSizeError

EXACT_MAX_ENTRIES = 65536
SINKHORN_EPS_SCALE = 0.005
MARGINAL_TOL = 1e-6
SUBSAMPLE_SEED = 0


@dataclass
class EmpiricalDist:
    points: np.ndarray

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        if self.points.ndim != 2 or len(self.points) < 1:
            raise ValueError("EmpiricalDist needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("EmpiricalDist points must be finite")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(len(self), 1.0 / len(self))


@dataclass
class TransportPlan:
    matrix: np.ndarray
    marginal_error: float
    """L1 violation of both marginals."""
    converged: bool = True


def _dist(x) -> EmpiricalDist:
    return x if isinstance(x, EmpiricalDist) else EmpiricalDist(x)


def cost_matrix(a: EmpiricalDist, b: EmpiricalDist) -> np.ndarray:
    a, b = _dist(a), _dist(b)
    if a.dim != b.dim:
        raise DimensionMismatchError(f"Point dimensions differ: {a.dim} != {b.dim}")
    return cdist(a.points, b.points, metric="sqeuclidean")


def _marginal_error(plan: np.ndarray, wa: np.ndarray, wb: np.ndarray) -> float:
    return float(np.abs(plan.sum(axis=1) - wa).sum() + np.abs(plan.sum(axis=0) - wb).sum())


def emd_exact(a: EmpiricalDist, b: EmpiricalDist) -> Tuple[float, TransportPlan]:
    """Exact W2 and optimal plan."""
    a, b = _dist(a), _dist(b)
    if len(a) * len(b) > EXACT_MAX_ENTRIES:
        raise SolverSizeError(
            f"Exact solver limited to {EXACT_MAX_ENTRIES} plan entries, "
            f"got {len(a)} x {len(b)}"
        )
    cost = cost_matrix(a, b)
    wa, wb = a.weights, b.weights
    plan = pot.emd(wa, wb, cost, numItermax=1_000_000)
    total = max(float(np.sum(plan * cost)), 0.0)
    return float(np.sqrt(total)), TransportPlan(plan, _marginal_error(plan, wa, wb))


def sinkhorn(
    a: EmpiricalDist,
    b: EmpiricalDist,
    eps: Optional[float] = None,
    max_iters: int = 10_000,
    tol: float = MARGINAL_TOL,
) -> Tuple[float, TransportPlan]:
    """Entropic W2 (transport cost of the entropic plan, no debiasing).

    `eps` defaults to 0.005 times the largest cost entry. A plan that misses
    the marginal tolerance is still returned, flagged as not converged.
    """
    a, b = _dist(a), _dist(b)
    cost = cost_matrix(a, b)
    wa, wb = a.weights, b.weights
    scale = float(cost.max())
    if scale == 0.0:
        plan = np.outer(wa, wb)
        return 0.0, TransportPlan(plan, _marginal_error(plan, wa, wb))
    if eps is None:
        eps = SINKHORN_EPS_SCALE * scale
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")

    # POT stops on the L2 column violation; scale it so L1 < tol follows
    plan = pot.sinkhorn(
        wa,
        wb,
        cost,
        eps,
        method="sinkhorn_log",
        numItermax=max_iters,
        stopThr=tol / np.sqrt(len(b)),
        warn=False,
    )
    error = _marginal_error(plan, wa, wb)
    converged = error < tol
    if not converged:
        logging.warning(
            "Sinkhorn did not converge in %d iterations (eps %g): marginal error %g",
            max_iters,
            eps,
            error,
        )
    total = max(float(np.sum(plan * cost)), 0.0)
    return float(np.sqrt(total)), TransportPlan(plan, error, converged)


def subsample(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform subsample without replacement, order preserved."""
    if len(points) <= n:
        return points
    idx = np.sort(rng.choice(len(points), size=n, replace=False))
    return points[idx]


def equalize(
    a: np.ndarray, b: np.ndarray, seed: int = SUBSAMPLE_SEED
) -> Tuple[np.ndarray, np.ndarray]:
    """Subsample the larger set down to the size of the smaller one."""
    rng = np.random.default_rng(seed)
    n = min(len(a), len(b))
    return subsample(a, n, rng), subsample(b, n, rng)


def wasserstein(
    a: np.ndarray,
    b: np.ndarray,
    method: str = "auto",
    eps_scale: float = SINKHORN_EPS_SCALE,
    max_iters: int = 10_000,
    tol: float = MARGINAL_TOL,
) -> Tuple[float, TransportPlan]:
    """W2 between point sets with the chosen solver ('auto', 'exact', 'sinkhorn')."""
    da, db = _dist(a), _dist(b)
    if method == "auto":
        method = "exact" if len(da) * len(db) <= EXACT_MAX_ENTRIES else "sinkhorn"
    if method == "exact":
        return emd_exact(da, db)
    if method == "sinkhorn":
        scale = float(cost_matrix(da, db).max())
        eps = eps_scale * scale if scale > 0 else None
        return sinkhorn(da, db, eps=eps, max_iters=max_iters, tol=tol)
    raise ValueError(f"Unknown method {method!r}, expected auto, exact or sinkhorn")


def fitness(
    policy_samples: np.ndarray, demo_samples: np.ndarray, method: str = "auto"
) -> float:
    """Negative W2 after equalizing sample counts. Higher is better."""
    a = _dist(policy_samples).points
    b = _dist(demo_samples).points
    a, b = equalize(a, b)
    distance, _ = wasserstein(a, b, method=method)
    return -distance
