"""Adversarial Robustness Score (ARS) and its kappa-escalation search."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .attacks import CWConfig, cw_attack_many
from .classifier import Model


def ars_from_distances(distances: Sequence[float]) -> float:
    """Mean of the ceil(N/2) smallest distances; infinite if any of them is infinite.

    The sum is correctly rounded so the result does not depend on input order.
    """
    d = np.sort(np.asarray(list(distances), dtype=np.float64))
    if d.size == 0:
        raise ValueError("ARS needs at least one sample")
    if np.any(np.isnan(d)) or np.any(d < 0):
        raise ValueError("distances must be non-negative (inf allowed)")
    half = d[: math.ceil(d.size / 2)]
    if np.isinf(half).any():
        return math.inf
    return math.fsum(half) / half.size


@dataclass
class ARSSchedule:
    kappa0: float = 0.25
    growth: float = 2.0
    max_rounds: int = 100
    cw: CWConfig = field(default_factory=CWConfig)

    def validate(self) -> None:
        if not self.kappa0 > 0 or not self.growth > 1 or self.max_rounds < 1:
            raise ValueError("need kappa0 > 0, growth > 1 and max_rounds >= 1")


@dataclass
class RoundRecord:
    round: int
    kappa: float
    attacked: int
    adversarial: int
    candidate_ars: float
    stable: bool


@dataclass
class RobustnessReport:
    ars: float
    n: int
    adversarial_ratio: float
    distances: list  # best distance per sample, inf when never adversarial
    flow_ids: list
    rounds: list  # RoundRecord per round
    iterations: int  # CW gradient iterations summed over samples
    converged: bool  # stopping rule met before max_rounds

    @property
    def kappas(self) -> list:
        return [r.kappa for r in self.rounds]

    def to_dict(self) -> dict:
        def num(v):
            return v if math.isfinite(v) else "inf"

        return {
            "ars": num(self.ars),
            "n": self.n,
            "adversarial_ratio": self.adversarial_ratio,
            "converged": self.converged,
            "iterations": self.iterations,
            "kappa_schedule": self.kappas,
            "samples": [{"flow_id": f, "distance": num(d)} for f, d in zip(self.flow_ids, self.distances)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def rounds_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "kappa", "attacked", "adversarial", "candidate_ars", "stable"])
        for r in self.rounds:
            w.writerow([r.round, repr(r.kappa), r.attacked, r.adversarial, repr(r.candidate_ars), int(r.stable)])
        return buf.getvalue()


def compute_ars(model: Model, flows: Sequence, schedule: ARSSchedule = None) -> RobustnessReport:
    """Escalate CW's kappa until at least half the samples are adversarial and that half is settled.

    Each round attacks only samples without a successful result yet; a found
    distance is kept because kappa does not change where a successful
    sample ends up. The round's stopping test compares the L1 that each
    still-failing sample reached (a lower-bound proxy for its unknown minimal
    distance) with the ceil(N/2)-th smallest successful distance. Samples
    without any editable entry can never change and count as infinitely far.
    """
    schedule = schedule or ARSSchedule()
    schedule.validate()
    flows = list(flows)
    if not flows:
        raise ValueError("ARS needs at least one attack sample")
    N = len(flows)
    need = math.ceil(N / 2)
    best = np.full(N, np.inf)
    reach = np.zeros(N)
    pending = list(range(N))
    rounds, iterations, converged = [], 0, False
    for r in range(schedule.max_rounds):
        kappa = schedule.kappa0 * schedule.growth**r
        cfg = replace(schedule.cw, kappa=kappa)
        results = cw_attack_many(model, [flows[i] for i in pending], cfg)
        for i, res in zip(pending, results):
            iterations += res.iterations
            if res.success:
                best[i] = min(best[i], res.distance)
            elif res.constraints.n_editable == 0:
                reach[i] = np.inf
            else:
                reach[i] = res.achieved_distance
        attacked = len(pending)
        pending = [i for i in pending if not np.isfinite(best[i]) and np.isfinite(reach[i])]
        n_adv = int(np.isfinite(best).sum())
        stable = False
        if n_adv >= need:
            kth = np.sort(best)[need - 1]
            stable = not pending or float(min(reach[i] for i in pending)) >= kth
        rounds.append(RoundRecord(r + 1, kappa, attacked, n_adv, ars_from_distances(best), stable))
        if stable:
            converged = True
            break
        if not pending:
            break
    return RobustnessReport(
        ars=ars_from_distances(best),
        n=N,
        adversarial_ratio=float(np.isfinite(best).mean()),
        distances=best.tolist(),
        flow_ids=[f.flow_id for f in flows],
        rounds=rounds,
        iterations=int(iterations),
        converged=converged,
    )
