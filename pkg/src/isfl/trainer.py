"""Client-side local training with category-weighted minibatch sampling.

A sampling plan picks the category first (with its resampling probability) and
then a sample uniformly from that category's local pool, realizing the
weighted-gradient update by sampling rather than by loss re-weighting.
GradNorm-style baselines instead pass per-sample probabilities directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import CategoryDistribution, ClientShard, Dataset
from .isweights import SamplingPlan
from .model import (
    ModelSpec,
    ParamVector,
    backward_grad,
    per_sample_grad_norms,
    sgd_step,
)


@dataclass(frozen=True)
class TrainerConfig:
    batch_size: int = 128
    local_epochs: int = 5
    eta: float = 1e-3
    sampling_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ValueError("batch_size and local_epochs must be >= 1")
        if self.eta < 0.0:
            raise ValueError("eta must be non-negative")
        if not 0.0 < self.sampling_ratio <= 1.0:
            raise ValueError("sampling_ratio must lie in (0, 1]")


def weighted_sample_batch(
    shard: ClientShard, plan: SamplingPlan, batch_size: int, rng: np.random.Generator
) -> Dataset:
    """Draw batch_size samples: category by plan probability, then uniform
    within that category's local pool (with replacement)."""
    q = plan.q.probs
    if q.size != shard.dataset.n_classes:
        raise ValueError("plan and shard category counts differ")
    support = np.flatnonzero(q > 0.0)
    if support.size == 0:
        raise ValueError("sampling plan has empty support")
    for c in support:
        if shard.category_pools[c].size == 0:
            raise ValueError(f"plan assigns mass to category {c} the shard lacks")
    cats = rng.choice(q.size, size=batch_size, p=q)
    picks = np.empty(batch_size, dtype=np.int64)
    for c in np.unique(cats):
        mask = cats == c
        pool = shard.category_pools[c]
        picks[mask] = pool[rng.integers(0, pool.size, size=int(mask.sum()))]
    return shard.dataset.subset(picks)


def _sample_by_weight(
    shard: ClientShard, probs: np.ndarray, batch_size: int, rng: np.random.Generator
) -> Dataset:
    picks = rng.choice(shard.indices, size=batch_size, p=probs)
    return shard.dataset.subset(picks)


def local_train(
    spec: ModelSpec,
    params: ParamVector,
    shard: ClientShard,
    plan: SamplingPlan | np.ndarray,
    cfg: TrainerConfig,
) -> ParamVector:
    """Run the configured local epochs of weighted minibatch SGD.

    Each epoch touches exactly floor(sampling_ratio * len(shard)) samples, in
    batches of cfg.batch_size (last batch possibly smaller). ``plan`` is either
    a category-level SamplingPlan or a per-sample probability vector.
    Deterministic for a given cfg.seed.
    """
    rng = np.random.default_rng(cfg.seed)
    budget = math.floor(cfg.sampling_ratio * len(shard))
    per_sample = isinstance(plan, np.ndarray)
    if per_sample and plan.shape != (len(shard),):
        raise ValueError("per-sample probabilities must match the shard size")
    current = params
    for _ in range(cfg.local_epochs):
        left = budget
        while left > 0:
            take = min(cfg.batch_size, left)
            if per_sample:
                batch = _sample_by_weight(shard, plan, take, rng)
            else:
                batch = weighted_sample_batch(shard, plan, take, rng)
            grad = backward_grad(spec, current, batch)
            if cfg.eta > 0.0:
                current = sgd_step(current, grad, cfg.eta)
            left -= take
    return current


def gradnorm_plan(spec: ModelSpec, params: ParamVector, shard: ClientShard) -> np.ndarray:
    """Per-sample probabilities proportional to gradient norms at ``params``.

    Falls back to uniform when every norm is zero.
    """
    if len(shard) == 0:
        raise ValueError("shard is empty")
    norms = per_sample_grad_norms(spec, params, shard.as_dataset())
    total = norms.sum()
    if total == 0.0:
        return np.full(len(shard), 1.0 / len(shard))
    return norms / total


def rw_plan(shard: ClientShard) -> SamplingPlan:
    """Re-weighting baseline: sample the present categories uniformly."""
    pk = shard.local_distribution.probs
    support = pk > 0.0
    q = np.where(support, 1.0 / support.sum(), 0.0)
    w = np.zeros_like(q)
    w[support] = q[support] / pk[support]
    return SamplingPlan(
        q=CategoryDistribution(q),
        w=w,
        gamma_star=0.0,
        varpi=0.0,
        p_local=shard.local_distribution,
    )
