"""Optimal per-category resampling weights for one client.

A client that resamples its local data with probabilities ``q`` instead of its
natural mix ``p_local`` changes the convergence penalty

    rho(q) = (1 + sum_i (p_i - q_i)^2) * (sum_i q_i * L_i^2),

where ``p`` is the pooled distribution over all clients and ``L_i`` the
client's per-category gradient-curvature estimate. The solver minimizes rho
over the simplex subject to the floors ``q_i >= varpi * p_local_i`` that keep
every category sampled. The water-filling structure: a zero-sum gap vector
(alpha) points from costly categories toward cheap ones, and a non-negative
level (gamma) slides along it; categories pin to their floors as the level
rises. Because the penalty is a product, descent can continue past the first
floor contact (re-solving on the unpinned categories) and may even concentrate
the remaining mass on the cheapest category, so the solver enumerates every
candidate floor pattern and keeps the exact minimizer. compute_gamma_star
still reports the classic first-contact level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import CapacityError, CategoryDistribution

logger = logging.getLogger(__name__)

_DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class AlphaVector:
    """Zero-sum, unit-norm gap factors; all-zero when every curvature is equal."""

    alphas: np.ndarray
    degenerate: bool

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "alphas", alphas)
        if self.degenerate:
            if np.any(alphas != 0.0):
                raise ValueError("degenerate gap factors must be exactly zero")
        else:
            if abs(alphas.sum()) > 1e-9 or abs((alphas**2).sum() - 1.0) > 1e-9:
                raise ValueError("gap factors must be zero-sum with unit norm")


@dataclass(frozen=True)
class SamplingPlan:
    """Resampling probabilities q and the matching per-category weights w.

    ``w_i = q_i / p_local_i`` on supported categories and 0 where the client
    owns no samples. ``clamped`` flags instances whose floors had to be cut
    down to the pooled proportion to stay solvable.
    """

    q: CategoryDistribution
    w: np.ndarray
    gamma_star: float
    varpi: float
    p_local: CategoryDistribution
    clamped: bool = False

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        object.__setattr__(self, "w", w)
        if self.gamma_star < 0.0 or not 0.0 <= self.varpi < 1.0:
            raise ValueError("need gamma_star >= 0 and varpi in [0, 1)")
        pk = self.p_local.probs
        support = pk > 0.0
        if np.any(np.abs(pk[support] * w[support] - self.q.probs[support]) > 1e-9):
            raise ValueError("weights must satisfy q = p_local * w on the support")
        if np.any(w[~support] != 0.0):
            raise ValueError("weights must be zero off the support")


def compute_alpha(l_row: np.ndarray) -> AlphaVector:
    """Normalized gaps between each category's squared curvature and the mean.

    Positive entries mark categories cheaper than average (to be up-sampled),
    negative ones costlier than average. The vector sums to zero and has unit
    norm, except in the degenerate all-equal case where it is identically zero.
    """
    l_row = np.asarray(l_row, dtype=np.float64)
    if l_row.ndim != 1 or l_row.size < 1:
        raise ValueError("need a 1-D curvature row")
    if np.any(l_row < 0.0) or not np.all(np.isfinite(l_row)):
        raise ValueError("curvatures must be finite and non-negative")
    sq = l_row**2
    total = sq.sum()
    if total == 0.0:
        raise ValueError("curvature row must have at least one positive entry")
    gaps = 1.0 - l_row.size * sq / total
    denom = np.sqrt((gaps**2).sum())
    if denom < _DEGENERATE_EPS:
        return AlphaVector(np.zeros(l_row.size), degenerate=True)
    return AlphaVector(gaps / denom, degenerate=False)


def _effective_floors(
    p: np.ndarray, p_local: np.ndarray, varpi: float
) -> tuple[np.ndarray, bool]:
    """Floors varpi * p_local, cut down to p where they would exceed it."""
    floors = varpi * p_local
    over = floors > p
    if over.any():
        logger.warning(
            "floor exceeds pooled proportion for categories %s; clamping",
            np.flatnonzero(over).tolist(),
        )
        floors = np.minimum(floors, p)
    return floors, bool(over.any())


def compute_gamma_star(
    p: CategoryDistribution,
    p_local: CategoryDistribution,
    alpha: AlphaVector,
    varpi: float,
) -> float:
    """Water-filling level: the smallest slack-to-gap ratio among down-weighted
    categories, so that every category stays at or above its floor.

    Returns 0 when no category is down-weighted (degenerate gaps included).
    """
    if not 0.0 <= varpi < 1.0:
        raise ValueError("varpi must lie in [0, 1)")
    if len(p) != len(p_local) or len(p) != alpha.alphas.size:
        raise ValueError("p, p_local and alpha must have equal length")
    floors, _ = _effective_floors(p.probs, p_local.probs, varpi)
    neg = alpha.alphas < 0.0
    if not neg.any():
        return 0.0
    candidates = (p.probs[neg] - floors[neg]) / (-alpha.alphas[neg])
    candidates = candidates[candidates >= 0.0]
    if candidates.size == 0:
        return 0.0
    return float(candidates.min())


def _minimize_rho(p: np.ndarray, floors: np.ndarray, sq: np.ndarray) -> np.ndarray:
    """Exact minimizer of rho over {sum q = 1, q >= floors}.

    The minimum sits either at a stationary point of some face (a subset of
    coordinates pinned to their floors) or at a vertex. On each face the
    stationarity conditions confine q to a line: the mass-shifted pooled mix
    plus t times the curvature-gap direction of the unpinned set; the
    self-consistent levels t solve a quadratic. All faces are enumerated, so
    the cost grows as 2^C; category counts in this domain are small.
    """
    c = p.size
    best_q, best_v = floors.copy(), np.inf

    def consider(q: np.ndarray) -> None:
        nonlocal best_q, best_v
        if np.any(q < floors - 1e-12):
            return
        value = (1.0 + ((q - p) ** 2).sum()) * (q @ sq)
        if value < best_v:
            best_q, best_v = q, value

    for pattern in range(2**c - 1):
        pinned = np.array([(pattern >> j) & 1 for j in range(c)], dtype=bool)
        free = np.flatnonzero(~pinned)
        mass = 1.0 - floors[pinned].sum()
        shift = (mass - p[free].sum()) / free.size
        base = p[free] + shift
        gap = sq[free].mean() - sq[free]
        gap_sq = float(gap @ gap)
        mismatch0 = 1.0 + ((floors[pinned] - p[pinned]) ** 2).sum() + free.size * shift**2
        curvature0 = float(floors[pinned] @ sq[pinned]) + float(base @ sq[free])
        if gap_sq < 1e-24 or free.size == 1:
            q = np.empty(c)
            q[pinned] = floors[pinned]
            q[free] = base
            consider(q)
            continue
        # stationary levels: 2 t * curvature(t) = mismatch(t), a quadratic in t
        disc = curvature0**2 - 3.0 * gap_sq * mismatch0
        if disc < 0.0:
            continue
        root = np.sqrt(disc)
        for t in ((curvature0 - root) / (3.0 * gap_sq), (curvature0 + root) / (3.0 * gap_sq)):
            if t >= 0.0:
                q = np.empty(c)
                q[pinned] = floors[pinned]
                q[free] = base + t * gap
                consider(q)

    slack = 1.0 - floors.sum()
    for j in range(c):
        q = floors.copy()
        q[j] += slack
        consider(q)
    return best_q


def solve_is_weights(
    p: CategoryDistribution,
    p_local: CategoryDistribution,
    l_row: np.ndarray,
    varpi: float = 0.05,
) -> SamplingPlan:
    """Optimal resampling plan for one client.

    ``q`` is the exact penalty minimizer over the floored simplex;
    ``gamma_star`` reports the first-contact water-filling level. Mass
    assigned to categories the client does not own is redistributed
    proportionally over its support, where the weights ``w = q / p_local``
    are then formed.
    """
    p_arr = p.probs
    pk_arr = p_local.probs
    if len(p) != len(p_local):
        raise ValueError("p and p_local must have equal length")
    if np.any(p_arr <= 0.0):
        raise ValueError("pooled distribution must be strictly positive")
    alpha = compute_alpha(l_row)
    gamma_star = compute_gamma_star(p, p_local, alpha, varpi)
    floors, clamped = _effective_floors(p_arr, pk_arr, varpi)
    sq = np.asarray(l_row, dtype=np.float64) ** 2
    q = _minimize_rho(p_arr, floors, sq)

    support = pk_arr > 0.0
    if not support.all():
        q = np.where(support, q, 0.0)
        q = q / q.sum()
    w = np.zeros_like(q)
    w[support] = q[support] / pk_arr[support]
    return SamplingPlan(
        q=CategoryDistribution(q),
        w=w,
        gamma_star=gamma_star,
        varpi=varpi,
        p_local=p_local,
        clamped=clamped,
    )


def uniform_plan(p_local: CategoryDistribution) -> SamplingPlan:
    """The no-resampling plan: unit weights, q equal to the local mix."""
    support = p_local.probs > 0.0
    w = np.where(support, 1.0, 0.0)
    return SamplingPlan(
        q=p_local, w=w, gamma_star=0.0, varpi=0.0, p_local=p_local
    )


def rho(
    q: CategoryDistribution, p: CategoryDistribution, l_row: np.ndarray
) -> float:
    """Convergence penalty of resampling with q against pooled mix p."""
    l_row = np.asarray(l_row, dtype=np.float64)
    if len(q) != len(p) or l_row.size != len(p):
        raise ValueError("q, p and the curvature row must have equal length")
    mismatch = 1.0 + np.sum((p.probs - q.probs) ** 2)
    curvature = np.sum(q.probs * l_row**2)
    return float(mismatch * curvature)


def kkt_partials(
    q: CategoryDistribution, p: CategoryDistribution, l_row: np.ndarray
) -> np.ndarray:
    """Gradient of rho at q: 2(q_j - p_j) * B + L_j^2 * A with A the mismatch
    factor and B the curvature factor. At an optimum the non-floored entries
    are all equal (to the multiplier of the sum-to-one constraint)."""
    l_row = np.asarray(l_row, dtype=np.float64)
    a = 1.0 + np.sum((p.probs - q.probs) ** 2)
    b = np.sum(q.probs * l_row**2)
    return 2.0 * (q.probs - p.probs) * b + l_row**2 * a


@lru_cache(maxsize=8)
def _compositions(total: int, parts: int) -> np.ndarray:
    """All non-negative integer vectors of the given length summing to total.

    Built column by column with ragged-range expansion; the cached table is
    treated as read-only by callers.
    """
    prefix = np.arange(total + 1, dtype=np.int32)[:, None]
    for _ in range(parts - 2):
        remaining = total - prefix.sum(axis=1)
        counts = remaining + 1
        starts = np.cumsum(counts) - counts
        row_of = np.repeat(np.arange(prefix.shape[0]), counts)
        new_col = np.arange(counts.sum(), dtype=np.int32) - starts[row_of]
        prefix = np.hstack([prefix[row_of], new_col[:, None]])
    if parts == 1:
        return np.array([[total]], dtype=np.int32)
    last = (total - prefix.sum(axis=1)).astype(np.int32)
    return np.hstack([prefix, last[:, None]])


def brute_force_rho_min(
    p: CategoryDistribution,
    p_local: CategoryDistribution,
    l_row: np.ndarray,
    varpi: float,
    grid_step: float = 0.005,
) -> tuple[np.ndarray, float]:
    """Exhaustive grid minimizer of rho over the feasible set, as an oracle.

    The grid lives on the residual simplex above the floors, so floor-active
    boundaries are represented exactly. Intended for small category counts
    only; the grid grows combinatorially.
    """
    l_row = np.asarray(l_row, dtype=np.float64)
    c = len(p)
    if c > 5:
        raise CapacityError("grid oracle supports at most 5 categories")
    if not 0.0 < grid_step <= 0.01:
        raise ValueError("grid_step must lie in (0, 0.01]")
    floors, _ = _effective_floors(p.probs, p_local.probs, varpi)
    residual = 1.0 - floors.sum()
    steps = int(round(1.0 / grid_step))
    grid = _compositions(steps, c).astype(np.float64) / steps
    q = floors[None, :] + residual * grid
    mismatch = 1.0 + np.sum((q - p.probs[None, :]) ** 2, axis=1)
    curvature = q @ (l_row**2)
    values = mismatch * curvature
    best = int(values.argmin())
    return q[best], float(values[best])
