"""Defenses: retraining on reduced features, and adversarial training with ARS tracking."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .attacks import CWConfig, cw_attack_many
from .classifier import Model, TrainConfig, fit_params, flow_accuracy, train
from .flowdata import DataError, Dataset, FeatureSchema, apply_normalizer, canonical_schema
from .robustness import ARSSchedule, RobustnessReport, compute_ars

MODES = ("both_directions", "attacker_direction_only")


def reduce_features(schema: FeatureSchema = None, mode: str = "both_directions") -> FeatureSchema:
    """Schema without the manipulable features (everywhere, or on attacker-sent packets only).

    ``both_directions`` deactivates the features; ``attacker_direction_only``
    keeps the input width and zeroes them on forward packets at encode time.
    """
    schema = schema or canonical_schema()
    if mode not in MODES:
        raise ValueError(f"unknown reduction mode {mode!r}; expected one of {MODES}")
    if schema.reduction != "none":
        raise ValueError("schema is already reduced")
    if mode == "both_directions":
        active = tuple(a and not m for a, m in zip(schema.active_mask, schema.manipulable_mask))
        return replace(schema, active_mask=active, reduction=mode)
    return replace(schema, reduction=mode)


def train_reduced(train_data: Dataset, mode: str, config: TrainConfig = None) -> Model:
    schema = reduce_features(train_data.schema, mode)
    return train(train_data, config, schema=schema)


# --- adversarial training --------------------------------------------------------------


@dataclass
class AdvTrainConfig:
    train: TrainConfig = field(default_factory=TrainConfig)  # baseline training
    cycles: int = 5
    cadence: int = 10  # training epochs between adversarial refreshes
    iterations: int = 10  # CW gradient steps per refresh
    cw: CWConfig = field(default_factory=CWConfig)  # generates the initial counterparts
    ars: ARSSchedule = field(default_factory=ARSSchedule)
    held_out: int = 60  # attack flows set aside for ARS tracking when none are given

    def validate(self) -> None:
        self.train.validate()
        self.cw.validate()
        self.ars.validate()
        if self.cycles < 1 or self.cadence < 1 or self.iterations < 1:
            raise ValueError("cycles, cadence and iterations must be >= 1")
        if self.cadence != self.iterations:
            # one epoch and one refresh iteration are each one gradient pass over their samples
            raise ValueError("budget rule: cadence (training epochs) must equal refresh iterations")
        if self.held_out < 1:
            raise ValueError("held_out must be >= 1")


@dataclass
class CycleRecord:
    cycle: int
    ars: float
    kappa_reached: float
    adversarial_ratio: float
    clean_accuracy: Optional[float]
    training_passes: int
    adversarial_passes: int
    counterparts_adversarial: int


@dataclass
class AdvTrainResult:
    model: Model
    baseline: Model
    trajectory: list  # CycleRecord per cycle, cycle 0 = baseline
    reports: list  # RobustnessReport per cycle
    counterparts: list  # final normalized counterparts, aligned with attack_ids
    attack_ids: list
    held_out_ids: list
    augmented_size: int

    def trajectory_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cycle", "kappa_reached", "ars", "adversarial_ratio", "clean_accuracy",
                    "training_passes", "adversarial_passes", "counterparts_adversarial"])
        for r in self.trajectory:
            acc = "" if r.clean_accuracy is None else repr(r.clean_accuracy)
            w.writerow([r.cycle, repr(r.kappa_reached), repr(r.ars), repr(r.adversarial_ratio), acc,
                        r.training_passes, r.adversarial_passes, r.counterparts_adversarial])
        return buf.getvalue()


def _split_held_out(flows: list, n: int, seed: int) -> tuple:
    attack_idx = [i for i, f in enumerate(flows) if f.label == 1]
    if len(attack_idx) <= n:
        raise DataError("too few attack flows to set aside a held-out ARS set")
    rng = np.random.default_rng(seed)
    chosen = set(int(i) for i in rng.choice(attack_idx, size=n, replace=False))
    keep = [f for i, f in enumerate(flows) if i not in chosen]
    held = [f for i, f in enumerate(flows) if i in chosen]
    return keep, held


def _record(cycle, model, report: RobustnessReport, evaluation, passes, adv_passes, n_adv) -> CycleRecord:
    acc = flow_accuracy(model, evaluation) if evaluation is not None else None
    kappa = report.kappas[-1] if report.rounds else math.nan
    return CycleRecord(cycle, report.ars, kappa, report.adversarial_ratio, acc, passes, adv_passes, n_adv)


def adversarial_training(
    train_data: Dataset,
    config: AdvTrainConfig = None,
    seed: int = 0,
    held_out: Optional[Sequence] = None,
    evaluation: Optional[Dataset] = None,
) -> AdvTrainResult:
    """Alternate training epochs with refreshing one adversarial counterpart per attack flow.

    A baseline model is trained first and CW generates the initial
    counterparts against it; every counterpart is labeled attack. Each cycle
    then trains ``cadence`` epochs on the augmented set and refreshes every
    counterpart with ``iterations`` warm-started CW steps against the current
    model. ARS is measured on ``held_out`` (by default attack flows set aside
    from ``train_data``) before the first cycle and after every cycle, and
    clean flow accuracy on ``evaluation`` when it is given.
    """
    config = config or AdvTrainConfig()
    config.validate()
    flows = list(train_data.flows)
    if not any(f.label == 1 for f in flows):
        raise DataError("adversarial training needs attack flows")
    if held_out is None:
        flows, held_out = _split_held_out(flows, config.held_out, seed)
    held_out = list(held_out)
    data = train_data.subset(flows)
    tcfg = replace(config.train, seed=seed)

    baseline = train(data, tcfg)
    model = Model(baseline.params.copy(), baseline.stats, baseline.schema, baseline.feature_dropout, [])

    attacks = [f for f in flows if f.label == 1]
    results = cw_attack_many(model, attacks, config.cw)
    counterparts = [r.normalized for r in results]

    report = compute_ars(model, held_out, config.ars)
    trajectory = [_record(0, model, report, evaluation, 0, 0, sum(r.success for r in results))]
    reports = [report]

    normalized = [apply_normalizer(model.stats, f, model.schema) for f in flows]
    labels = [f.label for f in flows] + [1] * len(attacks)
    rng = np.random.default_rng(seed + 1)
    adam = None
    for cycle in range(1, config.cycles + 1):
        params, adam, _, _ = fit_params(
            model.params, normalized + counterparts, labels, tcfg, rng, config.cadence, adam=adam
        )
        model = Model(params, model.stats, model.schema, model.feature_dropout, [])
        refreshed = cw_attack_many(
            model, attacks, config.cw, start=counterparts, iterations=config.iterations
        )
        counterparts = [r.normalized for r in refreshed]
        report = compute_ars(model, held_out, config.ars)
        reports.append(report)
        trajectory.append(
            _record(cycle, model, report, evaluation, config.cadence, config.iterations,
                    sum(r.success for r in refreshed))
        )

    model.params.meta.update(
        {"adversarially_trained": True, "adv_train": {"cycles": config.cycles, "cadence": config.cadence,
                                                     "iterations": config.iterations, "seed": seed}}
    )
    return AdvTrainResult(
        model=model,
        baseline=baseline,
        trajectory=trajectory,
        reports=reports,
        counterparts=counterparts,
        attack_ids=[f.flow_id for f in attacks],
        held_out_ids=[f.flow_id for f in held_out],
        augmented_size=len(flows) + len(attacks),
    )
