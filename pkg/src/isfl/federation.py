"""Round-based federated orchestration with pluggable sampling strategies.

Every round: clients train locally under their current sampling plans, the
server takes the weighted parameter average, plans are refreshed according to
the strategy, and the aggregate is broadcast back. Strategies:

  fedavg       unit weights throughout (plain federated averaging)
  rw_is        uniform over each client's present categories (from round 2)
  gradnorm_is  per-sample probabilities proportional to gradient norms
  isfl         curvature-driven optimal category weights via the solver
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass

import numpy as np

from .data import CategoryDistribution, ClientShard, Dataset, global_distribution
from .diagnostics import RoundRecord, RunLog
from .isweights import SamplingPlan, rho, solve_is_weights, uniform_plan
from .lipschitz import ZeroDeviationError, estimate_lipschitz, estimate_sgd_stats
from .model import ModelSpec, ParamVector, evaluate, init_params
from .trainer import TrainerConfig, gradnorm_plan, local_train, rw_plan

logger = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "rw_is", "gradnorm_is", "isfl")

STATS_DRAWS = 8


class RoundFailure(RuntimeError):
    """A module error aborted the run; carries the failing round index."""

    def __init__(self, round_index: int, message: str):
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index


@dataclass(frozen=True)
class FederationConfig:
    model: ModelSpec
    trainer: TrainerConfig
    n_rounds: int = 25
    strategy: str = "fedavg"
    varpi: float = 0.05
    probe_size: int = 500
    pi: tuple[float, ...] | None = None   # defaults to size-proportional
    seed: int = 0

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if not 0.0 <= self.varpi < 1.0:
            raise ValueError("varpi must lie in [0, 1)")
        if self.pi is not None:
            pi = np.asarray(self.pi, dtype=np.float64)
            if np.any(pi < 0.0) or abs(pi.sum() - 1.0) > 1e-9:
                raise ValueError("pi must be non-negative and sum to 1")


@dataclass
class RoundMetrics:
    round_index: int
    train_loss: float
    acc_test: float
    acc_pool: float
    rho_realized: np.ndarray | None
    rho_theory: np.ndarray | None
    seconds: float


def size_proportional_weights(shards: list[ClientShard]) -> np.ndarray:
    sizes = np.array([len(s) for s in shards], dtype=np.float64)
    return sizes / sizes.sum()


def aggregate(params_list: list[ParamVector], pi: np.ndarray) -> ParamVector:
    """Exact convex combination of client parameters."""
    if len(params_list) != len(pi):
        raise ValueError("need one weight per parameter vector")
    layout = params_list[0].layout
    total = np.zeros_like(params_list[0].values)
    for weight, params in zip(pi, params_list):
        if params.layout != layout:
            raise ValueError("parameter layouts do not match")
        total += float(weight) * params.values
    return ParamVector(total, layout)


def derive_seed(master: int, *tags: int) -> int:
    """Stable per-(stage, round, client) child seed."""
    return int(np.random.SeedSequence([master, *tags]).generate_state(1)[0])


def run(
    shards: list[ClientShard],
    cfg: FederationConfig,
    test_set: Dataset,
    probe: Dataset | None = None,
    recorder: RunLog | None = None,
) -> list[RoundMetrics]:
    """Execute the full federated schedule and return per-round metrics.

    ``probe`` (held-out data) is required for the isfl strategy, which
    re-estimates curvature rows on it at every aggregation. When ``recorder``
    is given, per-round diagnostics records are appended to it (isfl only).
    Fully deterministic for a given config and seed.
    """
    if cfg.strategy == "isfl" and probe is None:
        raise ValueError("the isfl strategy needs a probe dataset")
    n_clients = len(shards)
    pi = (
        np.asarray(cfg.pi, dtype=np.float64)
        if cfg.pi is not None
        else size_proportional_weights(shards)
    )
    if pi.size != n_clients:
        raise ValueError("pi length must match the client count")
    p_global = global_distribution(shards)
    p_locals = [s.local_distribution for s in shards]

    if recorder is not None:
        recorder.p = p_global.probs
        recorder.p_local = np.stack([pl.probs for pl in p_locals])
        recorder.pi = pi
        recorder.varpi = cfg.varpi
        recorder.eta = cfg.trainer.eta
        recorder.local_epochs = cfg.trainer.local_epochs

    pool = Dataset(
        np.vstack([s.dataset.features[s.indices] for s in shards]),
        np.concatenate([s.dataset.labels[s.indices] for s in shards]),
        shards[0].dataset.n_classes,
    )

    global_params = init_params(cfg.model, seed=derive_seed(cfg.seed, 0))
    plans: list[SamplingPlan | np.ndarray] = [uniform_plan(pl) for pl in p_locals]
    # curvature matrix in effect during the upcoming round; the all-ones start
    # matches the unit-weight initial plans
    lips = np.ones((n_clients, p_global.probs.size))
    loss_start, _ = evaluate(cfg.model, global_params, pool)

    metrics: list[RoundMetrics] = []
    for rnd in range(1, cfg.n_rounds + 1):
        t0 = time.perf_counter()
        try:
            local_params = []
            for k in range(n_clients):
                child = dataclasses.replace(
                    cfg.trainer, seed=derive_seed(cfg.seed, 1, rnd, k)
                )
                local_params.append(
                    local_train(cfg.model, global_params, shards[k], plans[k], child)
                )

            new_global = aggregate(local_params, pi)

            rho_realized = rho_theory = None
            if cfg.strategy == "isfl":
                # in-effect view of this round: the curvature rows and plans the
                # clients actually trained under, plus the optimum for that same
                # curvature (identical to the plan from round two onward)
                q_used = np.stack([_plan_q(plans[k], p_locals[k]) for k in range(n_clients)])
                if rnd == 1:
                    q_star = np.stack(
                        [
                            solve_is_weights(p_global, p_locals[k], lips[k], cfg.varpi).q.probs
                            for k in range(n_clients)
                        ]
                    )
                else:
                    q_star = q_used
                rho_realized = np.array(
                    [
                        rho(CategoryDistribution(q_used[k]), p_global, lips[k])
                        for k in range(n_clients)
                    ]
                )
                rho_theory = np.array(
                    [
                        rho(CategoryDistribution(q_star[k]), p_global, lips[k])
                        for k in range(n_clients)
                    ]
                )
                if recorder is not None:
                    sigma2 = np.empty(n_clients)
                    g2 = 0.0
                    for k in range(n_clients):
                        stats = estimate_sgd_stats(
                            cfg.model,
                            new_global,
                            shards[k].as_dataset(),
                            cfg.trainer.batch_size,
                            STATS_DRAWS,
                            seed=derive_seed(cfg.seed, 2, rnd, k),
                        )
                        sigma2[k] = stats.sigma2
                        g2 = max(g2, stats.g2)
                    dev2 = np.array(
                        [(local_params[k] - new_global).norm() ** 2 for k in range(n_clients)]
                    )
                    recorder.records.append(
                        RoundRecord(
                            round_index=rnd,
                            lipschitz=lips.copy(),
                            q_used=q_used,
                            q_star=q_star,
                            sigma2=sigma2,
                            g2=g2,
                            dev2=dev2,
                            loss_start=loss_start,
                        )
                    )
                # refresh the curvature estimates and solve next round's plans
                for k in range(n_clients):
                    try:
                        lips[k] = estimate_lipschitz(
                            cfg.model, local_params[k], new_global, probe
                        )
                    except ZeroDeviationError:
                        logger.warning(
                            "round %d client %d: zero deviation, keeping row", rnd, k
                        )
                plans = [
                    solve_is_weights(p_global, p_locals[k], lips[k], cfg.varpi)
                    for k in range(n_clients)
                ]
            elif cfg.strategy == "rw_is":
                plans = [rw_plan(shards[k]) for k in range(n_clients)]
            elif cfg.strategy == "gradnorm_is":
                plans = [
                    gradnorm_plan(cfg.model, new_global, shards[k])
                    for k in range(n_clients)
                ]

            global_params = new_global
            train_loss, acc_pool = evaluate(cfg.model, global_params, pool)
            _, acc_test = evaluate(cfg.model, global_params, test_set)
        except Exception as exc:
            raise RoundFailure(rnd, str(exc)) from exc

        metrics.append(
            RoundMetrics(
                round_index=rnd,
                train_loss=train_loss,
                acc_test=acc_test,
                acc_pool=acc_pool,
                rho_realized=rho_realized,
                rho_theory=rho_theory,
                seconds=time.perf_counter() - t0,
            )
        )
        loss_start = train_loss
    return metrics


def _plan_q(plan: SamplingPlan | np.ndarray, p_local: CategoryDistribution) -> np.ndarray:
    if isinstance(plan, SamplingPlan):
        return plan.q.probs
    return p_local.probs
