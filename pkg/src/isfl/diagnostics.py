"""Convergence-bound components recomputed from run logs.

Per aggregation round the orchestrator records the curvature matrix, the plan
in effect, the freshly solved optimum, noise statistics, and parameter
deviations. Everything here is read-only post-processing over those records:
the noise/aggregation terms (psi, phi), the deviation bound check, and the
penalty trajectories (realized versus theoretical minimum).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CategoryDistribution
from .isweights import rho


@dataclass
class RoundRecord:
    """State logged at one aggregation: fresh curvature, plans, noise, deviations."""

    round_index: int
    lipschitz: np.ndarray          # K x C, estimated at this aggregation
    q_used: np.ndarray             # K x C, plan in effect during the round
    q_star: np.ndarray             # K x C, optimum solved from this curvature
    sigma2: np.ndarray             # per-client variance estimates
    g2: float                      # squared gradient-norm bound estimate
    dev2: np.ndarray               # per-client ||local - aggregated||^2
    loss_start: float              # pooled train loss at round start


@dataclass
class RunLog:
    """Run-level constants plus one record per aggregation round.

    The orchestrator fills the run-level fields when handed an empty log.
    """

    p: np.ndarray | None = None
    p_local: np.ndarray | None = None    # K x C
    pi: np.ndarray | None = None
    varpi: float = 0.0
    eta: float = 0.0
    local_epochs: int = 1
    records: list[RoundRecord] = field(default_factory=list)

    @property
    def n_clients(self) -> int:
        return self.pi.size

    @property
    def n_categories(self) -> int:
        return self.p.size

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            header = {
                "type": "run",
                "p": self.p.tolist(),
                "p_local": self.p_local.tolist(),
                "pi": self.pi.tolist(),
                "varpi": self.varpi,
                "eta": self.eta,
                "local_epochs": self.local_epochs,
            }
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in self.records:
                row = {
                    "type": "round",
                    "epoch_tag": rec.round_index * self.local_epochs,
                    "round": rec.round_index,
                    "lipschitz": rec.lipschitz.tolist(),
                    "q_used": rec.q_used.tolist(),
                    "q_star": rec.q_star.tolist(),
                    "sigma2": rec.sigma2.tolist(),
                    "g2": rec.g2,
                    "dev2": rec.dev2.tolist(),
                    "loss_start": rec.loss_start,
                }
                f.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "RunLog":
        with open(path, "r", encoding="utf-8") as f:
            lines = [json.loads(line) for line in f if line.strip()]
        if not lines or lines[0].get("type") != "run":
            raise ValueError(f"{path}: missing run header record")
        head = lines[0]
        log = cls(
            p=np.asarray(head["p"], dtype=np.float64),
            p_local=np.asarray(head["p_local"], dtype=np.float64),
            pi=np.asarray(head["pi"], dtype=np.float64),
            varpi=float(head["varpi"]),
            eta=float(head["eta"]),
            local_epochs=int(head["local_epochs"]),
        )
        for row in lines[1:]:
            if row.get("type") != "round":
                continue
            log.records.append(
                RoundRecord(
                    round_index=int(row["round"]),
                    lipschitz=np.asarray(row["lipschitz"], dtype=np.float64),
                    q_used=np.asarray(row["q_used"], dtype=np.float64),
                    q_star=np.asarray(row["q_star"], dtype=np.float64),
                    sigma2=np.asarray(row["sigma2"], dtype=np.float64),
                    g2=float(row["g2"]),
                    dev2=np.asarray(row["dev2"], dtype=np.float64),
                    loss_start=float(row["loss_start"]),
                )
            )
        return log


def psi(
    eta: float,
    lbar: float,
    pi: np.ndarray,
    sigma2: np.ndarray,
    g2: np.ndarray,
    n_categories: int,
) -> float:
    """Aggregation-noise term over a window.

    ``sigma2`` is per-epoch-per-client (T x K), ``g2`` per-epoch (T,). Averages
    eta * lbar * sum_k pi_k sigma2_k(t) + 2 * C * g2(t) over the window.
    """
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    g2 = np.atleast_1d(np.asarray(g2, dtype=np.float64))
    if sigma2.shape[0] != g2.size:
        raise ValueError("sigma2 and g2 must cover the same epochs")
    per_epoch = eta * lbar * (sigma2 @ np.asarray(pi)) + 2.0 * n_categories * g2
    return float(per_epoch.mean())


def phi(
    client: int,
    t: int,
    t_c: int,
    sigma2: np.ndarray,
    g2: np.ndarray,
    pi: np.ndarray,
) -> float:
    """Accumulated drift term for one client from the last aggregation to t.

    Sums (K+1) * g2(tau) + sigma2_client(tau) + sum_l pi_l sigma2_l(tau) for
    tau in [t_c, t); zero when t == t_c. Epoch arrays are indexed by tau.
    """
    if t < t_c:
        raise ValueError("t must not precede the last aggregation epoch")
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    g2 = np.atleast_1d(np.asarray(g2, dtype=np.float64))
    pi = np.asarray(pi, dtype=np.float64)
    k = pi.size
    total = 0.0
    for tau in range(t_c, t):
        total += (k + 1) * g2[tau] + sigma2[tau, client] + float(sigma2[tau] @ pi)
    return float(total)


def lemma1_check(
    eta: float, local_epochs: int, measured_dev2: float, phi_k: float
) -> tuple[float, float, bool]:
    """Compare a measured squared deviation against its drift bound.

    Returns (lhs, rhs, holds). Violations are expected occasionally because the
    noise constants are plug-in estimates, so callers log rather than fail.
    """
    rhs = 2.0 * eta**2 * local_epochs * phi_k
    return measured_dev2, rhs, measured_dev2 <= rhs


def _phi_round_end(log: RunLog, rec: RoundRecord) -> np.ndarray:
    """phi for each client at the end of a round, with per-round constants the
    per-epoch sum collapses to local_epochs identical terms."""
    k = log.n_clients
    per_tau = (k + 1) * rec.g2 + rec.sigma2 + float(rec.sigma2 @ log.pi)
    return log.local_epochs * per_tau


def rho_trajectory(log: RunLog) -> list[tuple[float, float]]:
    """Per-round pi-weighted means of rho(plan in effect) and rho(optimum).

    Both are evaluated against the curvature matrix in effect during the
    round, so the realized value can never undercut the theoretical minimum;
    from round two on the plan in effect is itself that optimum.
    """
    if not log.records:
        raise ValueError("run log has no round records")
    p = CategoryDistribution(log.p)
    out = []
    for rec in log.records:
        realized = np.array(
            [
                rho(CategoryDistribution(rec.q_used[k]), p, rec.lipschitz[k])
                for k in range(log.n_clients)
            ]
        )
        theory = np.array(
            [
                rho(CategoryDistribution(rec.q_star[k]), p, rec.lipschitz[k])
                for k in range(log.n_clients)
            ]
        )
        out.append((float(realized @ log.pi), float(theory @ log.pi)))
    return out


def bound_rhs(log: RunLog, rec: RoundRecord, best_loss: float) -> float:
    """Full bound value for one round window, using the best loss seen in the
    run in place of the unknowable optimum. Reported, never asserted."""
    t = log.local_epochs
    lbar_rows = log.pi @ rec.lipschitz           # pi-weighted client rows
    lbar = float(log.p @ lbar_rows)
    psi_val = psi(log.eta, lbar, log.pi, rec.sigma2[None, :], [rec.g2], log.n_categories)
    p = CategoryDistribution(log.p)
    rho_vals = np.array(
        [
            rho(CategoryDistribution(rec.q_used[k]), p, rec.lipschitz[k])
            for k in range(log.n_clients)
        ]
    )
    per_tau = (log.n_clients + 1) * rec.g2 + rec.sigma2 + float(rec.sigma2 @ log.pi)
    phi_sums = per_tau * (t * (t - 1) / 2.0)     # sum of phi over the window
    drift = float(np.sum(log.pi * rho_vals * phi_sums))
    head = 2.0 * max(rec.loss_start - best_loss, 0.0) / (log.eta * t)
    return head + psi_val + (2.0 * log.eta**2 * log.local_epochs / t) * drift


BOUNDS_HEADER = "round,rho_realized,rho_theory,psi,phi_mean,dev_mean,lemma1_pass_rate"


def bounds_rows(log: RunLog) -> list[dict]:
    """One summary row per round for bounds.csv."""
    trajectory = rho_trajectory(log)
    best_loss = min(rec.loss_start for rec in log.records)
    rows = []
    for rec, (realized, theory) in zip(log.records, trajectory):
        lbar = float(log.p @ (log.pi @ rec.lipschitz))
        psi_val = psi(
            log.eta, lbar, log.pi, rec.sigma2[None, :], [rec.g2], log.n_categories
        )
        phis = _phi_round_end(log, rec)
        holds = [
            lemma1_check(log.eta, log.local_epochs, float(rec.dev2[k]), float(phis[k]))[2]
            for k in range(log.n_clients)
        ]
        rows.append(
            {
                "round": rec.round_index,
                "rho_realized": realized,
                "rho_theory": theory,
                "psi": psi_val,
                "phi_mean": float(phis.mean()),
                "dev_mean": float(rec.dev2.mean()),
                "lemma1_pass_rate": float(np.mean(holds)),
                "bound_rhs": bound_rhs(log, rec, best_loss),
            }
        )
    return rows


def write_bounds_csv(log: RunLog, path: str | Path) -> None:
    rows = bounds_rows(log)
    with open(path, "w", encoding="utf-8") as f:
        f.write(BOUNDS_HEADER + "\n")
        for r in rows:
            f.write(
                f"{r['round']},{r['rho_realized']!r},{r['rho_theory']!r},"
                f"{r['psi']!r},{r['phi_mean']!r},{r['dev_mean']!r},"
                f"{r['lemma1_pass_rate']!r}\n"
            )


def write_long_csv(log: RunLog, path: str | Path) -> None:
    """Plot-ready long format: round,series,client,value."""
    rows = bounds_rows(log)
    with open(path, "w", encoding="utf-8") as f:
        f.write("round,series,client,value\n")
        for r in rows:
            for series in (
                "rho_realized",
                "rho_theory",
                "psi",
                "phi_mean",
                "dev_mean",
                "lemma1_pass_rate",
                "bound_rhs",
            ):
                f.write(f"{r['round']},{series},,{r[series]!r}\n")
        for rec in log.records:
            for k in range(log.n_clients):
                f.write(f"{rec.round_index},dev2,{k},{rec.dev2[k]!r}\n")
