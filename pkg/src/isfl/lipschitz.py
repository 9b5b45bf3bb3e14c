"""Per-(client, category) gradient-curvature estimates and SGD noise statistics.

The curvature row for a client measures, per category, the largest ratio of
per-sample gradient change to parameter change between that client's model and
the aggregated one. The sampling-weight solver consumes these rows; the noise
statistics feed diagnostics only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .model import ModelSpec, ParamVector, backward_grad, per_sample_grads

logger = logging.getLogger(__name__)


class ZeroDeviationError(ValueError):
    """Local and aggregated parameters coincide; the curvature ratio is 0/0."""


@dataclass(frozen=True)
class LipschitzMatrix:
    """Client-by-category curvature estimates, tagged with the round they came from."""

    values: np.ndarray
    epoch_tag: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise ValueError("values must be a K x C matrix")
        if not np.all(np.isfinite(values)) or np.any(values < 0.0):
            raise ValueError("entries must be finite and non-negative")


@dataclass(frozen=True)
class GradientStats:
    """Plug-in estimates of minibatch-gradient variance and squared norm bound."""

    sigma2: float
    g2: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma2) and np.isfinite(self.g2)):
            raise ValueError("estimates must be finite")
        if self.sigma2 < 0.0 or self.g2 < 0.0:
            raise ValueError("estimates must be non-negative")


def lipschitz_row_from_grads(
    grads_a: np.ndarray,
    grads_b: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    deviation_norm: float,
) -> np.ndarray:
    """Per-category max of gradient-difference norms over the deviation norm.

    Pure kernel over precomputed per-sample gradient matrices; categories with
    no samples are filled with the mean of the present entries.
    """
    if deviation_norm <= 0.0:
        raise ZeroDeviationError("parameter deviation norm must be positive")
    diff_norms = np.linalg.norm(grads_a - grads_b, axis=1)
    row = np.full(n_classes, np.nan)
    for c in range(n_classes):
        mask = labels == c
        if mask.any():
            row[c] = diff_norms[mask].max() / deviation_norm
    missing = np.isnan(row)
    if missing.all():
        raise ValueError("no samples at all; cannot estimate any category")
    if missing.any():
        logger.warning(
            "categories %s absent from probe; filling with the row mean",
            np.flatnonzero(missing).tolist(),
        )
        row[missing] = row[~missing].mean()
    return row


def estimate_lipschitz(
    spec: ModelSpec,
    local_params: ParamVector,
    global_params: ParamVector,
    probe: Dataset,
) -> np.ndarray:
    """Curvature row for one client from a probe set.

    Costs exactly two per-sample gradient passes over the probe. Raises
    ZeroDeviationError when the two parameter vectors coincide; the caller
    should keep its previous row in that case.
    """
    deviation = (local_params - global_params).norm()
    if deviation == 0.0:
        raise ZeroDeviationError("local and global parameters coincide")
    if not np.isfinite(deviation):
        raise ValueError("parameter deviation is not finite; the run diverged")
    grads_local = per_sample_grads(spec, local_params, probe)
    grads_global = per_sample_grads(spec, global_params, probe)
    if not (np.all(np.isfinite(grads_local)) and np.all(np.isfinite(grads_global))):
        raise ValueError("probe gradients are not finite; the run diverged")
    return lipschitz_row_from_grads(
        grads_local, grads_global, probe.labels, probe.n_classes, deviation
    )


def estimate_sgd_stats(
    spec: ModelSpec,
    params: ParamVector,
    probe: Dataset,
    batch_size: int,
    n_draws: int,
    seed: int = 0,
) -> GradientStats:
    """Empirical minibatch-gradient spread: sigma2 is the mean squared distance
    of draws from their mean, g2 the largest squared draw norm.

    Batches at least as large as the probe collapse to the full set, so the
    variance estimate is exactly zero there.
    """
    if n_draws < 2:
        raise ValueError("need at least two draws")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    rng = np.random.default_rng(seed)
    n = len(probe)
    if batch_size >= n:
        # every draw is the whole probe, so the spread is zero by definition
        full = backward_grad(spec, params, probe).values
        return GradientStats(sigma2=0.0, g2=float(full @ full))
    grads = []
    for _ in range(n_draws):
        idx = np.sort(rng.choice(n, size=batch_size, replace=False))
        grads.append(backward_grad(spec, params, probe.subset(idx)).values)
    stack = np.stack(grads)
    mean = stack.mean(axis=0)
    sigma2 = float(np.mean(np.sum((stack - mean) ** 2, axis=1)))
    g2 = float(np.max(np.sum(stack**2, axis=1)))
    return GradientStats(sigma2=sigma2, g2=g2)
