"""Constrained gradient attacks (Carlini-Wagner, L-inf PGD, FGSM) against the flow classifier.

All attacks work in normalized feature space and run batched over many
flows. Only packet length and IAT are editable, only on packets the
attacker sends (forward direction, or every packet of a fully controlled
flow), and they may only grow.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from . import lstm
from .classifier import Model, decide, pad_batch
from .flowdata import DIRECTION, FORWARD, Flow, FeatureSchema, apply_normalizer

METHODS = ("cw", "pgd", "fgsm")


@dataclass
class AttackConstraints:
    editable: np.ndarray  # (T, n) bool
    lower: np.ndarray  # (T, n) original normalized values

    @property
    def n_editable(self) -> int:
        return int(self.editable.sum())


def derive_constraints(flow: Flow, schema: FeatureSchema, normalized: np.ndarray) -> AttackConstraints:
    sends = np.ones(len(flow), dtype=bool) if flow.fully_controlled else flow.features[:, DIRECTION] == FORWARD
    feat = np.asarray(schema.manipulable_mask) & np.asarray(schema.active_mask)
    editable = sends[:, None] & feat[None, :]
    if schema.reduction == "attacker_direction_only":
        editable &= ~(flow.features[:, DIRECTION] == FORWARD)[:, None]
    return AttackConstraints(editable, np.array(normalized, dtype=np.float64))


def project_constraints(original: np.ndarray, candidate: np.ndarray, constraints: AttackConstraints) -> np.ndarray:
    """Reset non-editable entries to the original and lift editable ones to at least the original."""
    original = np.asarray(original, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if candidate.shape != original.shape:
        raise ValueError("candidate and original shapes differ")
    return np.where(constraints.editable, np.maximum(candidate, original), original)


@dataclass
class CWConfig:
    kappa: float = 1.0
    delta: float = -0.2
    base_lr: float = 0.01
    base_iterations: int = 1000
    base_kappa: float = 1.0
    max_iterations: int = 16000

    def validate(self) -> None:
        if not self.kappa > 0:
            raise ValueError("kappa must be > 0")
        if self.base_iterations < 1 or self.max_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if not self.base_lr > 0:
            raise ValueError("learning rate must be > 0")

    def schedule(self) -> tuple:
        """(learning rate, iterations) after scaling for large kappa."""
        if self.kappa <= self.base_kappa:
            return self.base_lr, self.base_iterations
        scale = self.kappa / self.base_kappa
        return self.base_lr / scale, min(self.max_iterations, int(math.ceil(self.base_iterations * scale)))


@dataclass
class PGDConfig:
    epsilon: float
    iterations: int = 100
    step: Optional[float] = None  # None -> epsilon / 10
    delta: float = -0.2

    def validate(self) -> None:
        if not 0 <= self.epsilon < math.inf:
            raise ValueError("epsilon must be finite and >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class AdversarialResult:
    flow_id: str
    attack_type: str
    method: str
    success: bool
    distance: float  # L1 in normalized space, inf if unsuccessful
    linf: float  # inf if unsuccessful
    achieved_distance: float  # L1 of the returned iterate, finite even on failure
    achieved_linf: float
    final_logit: float
    original_logit: float
    adversarial: Flow
    normalized: np.ndarray
    iterations: int
    constraints: AttackConstraints = field(repr=False, default=None)

    @property
    def benign_confidence(self) -> float:
        return float(1.0 - expit(self.final_logit))


class _Batch:
    """Padded normalized view of a set of attack flows against one model."""

    def __init__(self, model: Model, flows: Sequence[Flow]):
        for f in flows:
            if f.label != 1:
                raise ValueError(f"flow {f.flow_id!r} is benign; attacks are defined on attack flows")
        self.model = model
        self.flows = list(flows)
        z = [apply_normalizer(model.stats, f, model.schema) for f in flows]
        self.constraints = [derive_constraints(f, model.schema, zi) for f, zi in zip(flows, z)]
        self.z0, self.lengths = pad_batch(z)
        editable = np.zeros(self.z0.shape, dtype=bool)
        for b, c in enumerate(self.constraints):
            editable[b, : c.editable.shape[0]] = c.editable
        self.editable = editable
        self.n = self.z0.shape[2]

    def model_input(self, x: np.ndarray) -> np.ndarray:
        if not self.model.feature_dropout:
            return x
        return np.concatenate([x, np.zeros_like(x)], axis=2)

    def forward(self, x: np.ndarray, idx: np.ndarray) -> lstm.ForwardTrace:
        return lstm.forward(self.model.params, self.model_input(x[idx]), self.lengths[idx])

    def input_grad(self, trace: lstm.ForwardTrace, dlogits: np.ndarray) -> np.ndarray:
        _, dx = lstm.backward(trace, dlogits, need_params=False)
        return dx[:, :, : self.n]

    def project(self, x: np.ndarray, idx: np.ndarray, upper: Optional[np.ndarray] = None) -> np.ndarray:
        lo = self.z0[idx]
        y = np.maximum(x, lo)
        if upper is not None:
            y = np.minimum(y, upper)
        return np.where(self.editable[idx], y, lo)

    def l1(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return np.where(self.editable[idx], np.abs(x - self.z0[idx]), 0.0).sum(axis=(1, 2))

    def linf(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return np.where(self.editable[idx], np.abs(x - self.z0[idx]), 0.0).max(axis=(1, 2))

    def result(self, b: int, x: np.ndarray, method: str, success: bool, final_logit: float,
               original_logit: float, iterations: int) -> AdversarialResult:
        flow = self.flows[b]
        T = self.lengths[b]
        z = x[:T].copy()
        c = self.constraints[b]
        raw = flow.features.copy()
        moved = c.editable & (z > c.lower)
        stats = self.model.stats
        raw_new = z * stats.std + stats.mean
        raw[moved] = np.maximum(flow.features[moved], raw_new[moved])
        idx = np.array([b])
        l1 = float(self.l1(x[None], idx)[0])
        linf = float(self.linf(x[None], idx)[0])
        return AdversarialResult(
            flow_id=flow.flow_id,
            attack_type=flow.attack_type,
            method=method,
            success=bool(success),
            distance=l1 if success else math.inf,
            linf=linf if success else math.inf,
            achieved_distance=l1,
            achieved_linf=linf,
            final_logit=float(final_logit),
            original_logit=float(original_logit),
            adversarial=flow.with_features(raw),
            normalized=z,
            iterations=int(iterations),
            constraints=c,
        )


def _final_dz(trace: lstm.ForwardTrace, scale: np.ndarray) -> np.ndarray:
    dz = np.zeros_like(trace.logits)
    dz[np.arange(trace.batch), trace.lengths - 1] = scale
    return dz


def cw_attack_many(model: Model, flows: Sequence[Flow], config: CWConfig = None,
                   start: Optional[Sequence[np.ndarray]] = None, iterations: Optional[int] = None) -> list:
    """Carlini-Wagner with L1 distance and projection, batched over ``flows``.

    Minimizes ``L1(x, x0) + kappa * max(z_T(x), delta)`` by projected gradient
    descent. On the feasible set the L1 term is linear (every editable entry
    sits at or above its original), so its gradient there is exactly 1.
    The best successful iterate (smallest L1) is returned; a sample whose
    iterate stops changing is frozen, as further steps cannot move it.

    ``start`` warm-starts from given normalized iterates and ``iterations``
    overrides the kappa-derived count; both serve adversarial training.
    """
    config = config or CWConfig()
    config.validate()
    if not flows:
        return []
    batch = _Batch(model, flows)
    lr, n_iter = config.schedule()
    if iterations is not None:
        n_iter = int(iterations)
    B = len(flows)
    x = batch.z0.copy()
    if start is not None:
        for b, s in enumerate(start):
            x[b, : s.shape[0]] = s
        x = batch.project(x, np.arange(B))
    best = x.copy()
    best_dist = np.full(B, np.inf)
    best_logit = np.full(B, np.nan)
    last_logit = np.full(B, np.nan)
    used = np.zeros(B, dtype=np.int64)
    original_logit = batch.forward(batch.z0, np.arange(B)).final_logits()

    active = np.arange(B)
    for it in range(n_iter + 1):
        trace = batch.forward(x, active)
        zT = trace.final_logits()
        last_logit[active] = zT
        dist = batch.l1(x[active], active)
        better = (zT < config.delta) & (dist < best_dist[active])
        for k in np.flatnonzero(better):
            b = active[k]
            best[b], best_dist[b], best_logit[b] = x[b], dist[k], zT[k]
        if it == n_iter:
            break
        hinge = (zT > config.delta).astype(np.float64)
        g = batch.input_grad(trace, _final_dz(trace, config.kappa * hinge))
        xa = x[active]
        step = np.where(batch.editable[active], 1.0 + g, 0.0)
        new = batch.project(xa - lr * step, active)
        moving = np.any(new != xa, axis=(1, 2))
        x[active] = new
        used[active] += 1
        active = active[moving]
        if active.size == 0:
            break

    results = []
    for b in range(B):
        if np.isfinite(best_dist[b]):
            results.append(batch.result(b, best[b], "cw", True, best_logit[b], original_logit[b], used[b]))
        else:
            results.append(batch.result(b, x[b], "cw", False, last_logit[b], original_logit[b], used[b]))
    return results


def cw_attack(model: Model, flow: Flow, config: CWConfig = None) -> AdversarialResult:
    return cw_attack_many(model, [flow], config)[0]


def pgd_attack_many(model: Model, flows: Sequence[Flow], config: PGDConfig) -> list:
    """L-inf bounded PGD ascending the loss under the true (attack) label."""
    config.validate()
    if not flows:
        return []
    batch = _Batch(model, flows)
    B = len(flows)
    idx = np.arange(B)
    step = config.step if config.step is not None else config.epsilon / 10.0
    upper = batch.z0 + config.epsilon
    x = batch.z0.copy()
    best, best_dist = x.copy(), np.full(B, np.inf)
    best_logit = np.full(B, np.nan)
    original_logit = None
    zT = None
    for it in range(config.iterations + 1):
        trace = batch.forward(x, idx)
        zT = trace.final_logits()
        if original_logit is None:
            original_logit = zT.copy()
        dist = batch.l1(x, idx)
        better = (zT < config.delta) & (dist < best_dist)
        best[better], best_dist[better], best_logit[better] = x[better], dist[better], zT[better]
        if it == config.iterations or config.epsilon == 0:
            break
        g = batch.input_grad(trace, lstm.loss_logit_grad(trace, 1.0))
        x = batch.project(x + step * np.sign(g), idx, upper)
    return [
        batch.result(b, best[b], "pgd", True, best_logit[b], original_logit[b], config.iterations)
        if np.isfinite(best_dist[b])
        else batch.result(b, x[b], "pgd", False, zT[b], original_logit[b], config.iterations)
        for b in range(B)
    ]


def pgd_linf_attack(model: Model, flow: Flow, config: PGDConfig) -> AdversarialResult:
    return pgd_attack_many(model, [flow], config)[0]


def fgsm_attack_many(model: Model, flows: Sequence[Flow], epsilon: float, delta: float = -0.2) -> list:
    """One signed-gradient step of size ``epsilon`` on the attack-label loss, then projection."""
    if not 0 <= epsilon < math.inf:
        raise ValueError("epsilon must be finite and >= 0")
    if not flows:
        return []
    batch = _Batch(model, flows)
    idx = np.arange(len(flows))
    trace = batch.forward(batch.z0, idx)
    original_logit = trace.final_logits()
    g = batch.input_grad(trace, lstm.loss_logit_grad(trace, 1.0))
    x = batch.project(batch.z0 + epsilon * np.sign(g), idx)
    zT = batch.forward(x, idx).final_logits()
    return [batch.result(b, x[b], "fgsm", zT[b] < delta, zT[b], original_logit[b], 1) for b in idx]


def fgsm_attack(model: Model, flow: Flow, epsilon: float, delta: float = -0.2) -> AdversarialResult:
    return fgsm_attack_many(model, [flow], epsilon, delta)[0]


def run_attack(model: Model, flows: Sequence[Flow], method: str, config) -> list:
    if method == "cw":
        return cw_attack_many(model, flows, config)
    if method == "pgd":
        return pgd_attack_many(model, flows, config)
    if method == "fgsm":
        eps = config.epsilon if isinstance(config, PGDConfig) else float(config)
        delta = config.delta if isinstance(config, PGDConfig) else -0.2
        return fgsm_attack_many(model, flows, eps, delta)
    raise ValueError(f"unknown attack method {method!r}; expected one of {METHODS}")


def mean_linf(results: Sequence[AdversarialResult]) -> float:
    """Average L-inf distance of successful samples; used to match PGD/FGSM budgets to CW."""
    vals = [r.linf for r in results if r.success]
    return float(np.mean(vals)) if vals else 0.0


# --- evaluation ----------------------------------------------------------------------


def _stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "median": None}
    return {"mean": float(v.mean()), "median": float(np.median(v))}


def summarize(results: Sequence[AdversarialResult]) -> dict:
    """Success and distance statistics.

    ``success_ratio`` counts every success, including flows already past the
    margin (distance 0). ``evasion_ratio`` only counts successes that needed
    a perturbation, over the flows that were not already past the margin.
    """
    n = len(results)
    ok = [r for r in results if r.success]
    already = sum(1 for r in ok if r.distance == 0.0)
    evaded = len(ok) - already
    return {
        "n": n,
        "detection_accuracy_original": float(np.mean([decide(expit(r.original_logit)) for r in results])),
        "detection_accuracy_adversarial": float(np.mean([decide(expit(r.final_logit)) for r in results])),
        "success_ratio": len(ok) / n,
        "already_benign": already,
        "evasion_ratio": evaded / (n - already) if n > already else 0.0,
        "l1": _stats([r.distance for r in ok]),
        "linf": _stats([r.linf for r in ok]),
    }


@dataclass
class AttackEvaluation:
    method: str
    results: list
    per_type: dict
    overall: dict

    def to_json(self) -> str:
        return json.dumps({"method": self.method, "overall": self.overall, "per_type": self.per_type},
                          indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["flow_id", "attack_type", "method", "success", "l1", "linf", "iterations"])
        for r in self.results:
            w.writerow([r.flow_id, r.attack_type, r.method, int(r.success), repr(r.distance), repr(r.linf), r.iterations])
        return buf.getvalue()


def evaluate_attack(model: Model, flows: Sequence[Flow], method: str, config) -> AttackEvaluation:
    """Attack every flow and report success and distance statistics per attack type."""
    flows = [f for f in flows if f.label == 1]
    if not flows:
        raise ValueError("no attack flows to evaluate")
    results = run_attack(model, flows, method, config)
    per_type = {}
    for kind in sorted({r.attack_type for r in results}):
        per_type[kind] = summarize([r for r in results if r.attack_type == kind])
    return AttackEvaluation(method, results, per_type, summarize(results))
