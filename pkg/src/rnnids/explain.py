"""Feature importance, feature sensitivity and partial-dependence tools.

Every accuracy used here is flow-level accuracy (final-step decision).
Importance tables carry one row per feature active in the model's schema.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .classifier import Model, batched_confidences, decide, flow_accuracy, predict_confidences
from .flowdata import DataError, Dataset, Flow, canonical_schema, matches_class

METHODS = ("weights", "perturbation", "dropout", "mutual_information")
SHARED_TOLERANCE = 1e-4
MIN_MI_PAIRS = 100
DEFAULT_BINS = 16
DEFAULT_GRID = 40


def _flows(data) -> list:
    return list(data.flows) if isinstance(data, Dataset) else list(data)


def _feature_index(model_or_schema, feature) -> int:
    schema = getattr(model_or_schema, "schema", model_or_schema)
    if isinstance(feature, str):
        return schema.index(feature)
    i = int(feature)
    if not 0 <= i < schema.n:
        raise KeyError(f"feature index {i} out of range")
    return i


def _active(model: Model) -> list:
    return [i for i, a in enumerate(model.schema.active_mask) if a]


def _dump(rows: list, header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _json(obj) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, np.generic):
            return clean(v.item())
        return v

    return json.dumps(clean(obj), indent=2, sort_keys=True) + "\n"


# --- importance tables -----------------------------------------------------------------


@dataclass
class ImportanceTable:
    method: str
    features: list  # feature names, one per active feature
    scores: list
    variances: Optional[list] = None  # perturbation only
    base_accuracy: Optional[float] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown importance method {self.method!r}")

    def score(self, feature: str) -> float:
        return self.scores[self.features.index(feature)]

    def ranking(self) -> list:
        return sorted(self.features, key=lambda f: -self.score(f))

    def to_dict(self) -> dict:
        rows = []
        for k, name in enumerate(self.features):
            row = {"feature": name, "score": self.scores[k]}
            if self.variances is not None:
                row["variance"] = self.variances[k]
            rows.append(row)
        return {"method": self.method, "base_accuracy": self.base_accuracy, "features": rows}

    def to_json(self) -> str:
        return _json(self.to_dict())

    def to_csv(self) -> str:
        header = ["feature", "method", "score"] + (["variance"] if self.variances is not None else [])
        rows = []
        for k, name in enumerate(self.features):
            row = [name, self.method, float(self.scores[k])]
            if self.variances is not None:
                row.append(float(self.variances[k]))
            rows.append(row)
        return _dump(rows, header)


def importance_weights(model: Model) -> ImportanceTable:
    """Sum over all input-to-logit paths of the product of absolute weights.

    Each layer contributes a matrix whose (a, u) entry is the sum of
    ``|W|`` over the four gates connecting input ``a`` to unit ``u``.
    Recurrent weights are left out, so this looks at one unrolled step.
    """
    params = model.params
    path = None
    in_dim = params.input_dim
    for W in params.weights:
        H = params.hidden
        Wx = np.abs(W[:in_dim]).reshape(in_dim, 4, H).sum(axis=1)
        path = Wx if path is None else path @ Wx
        in_dim = H
    total = path @ np.abs(params.head_w)
    active = _active(model)
    return ImportanceTable("weights", [model.schema.names[i] for i in active], [float(total[i]) for i in active])


def importance_perturbation(model: Model, data, seed: int = 0) -> ImportanceTable:
    """Accuracy drop when one feature is resampled from its empirical marginal.

    Per-packet features get an independent draw for every packet from the
    pooled packet values; flow-constant features get one draw per flow from
    the per-flow values, so they stay constant along the flow. The variance
    column is the sampling variance of the mean drop over flows.
    """
    flows = _flows(data)
    if not flows:
        raise DataError("importance needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    labels = np.array([f.label for f in flows])
    base_correct = _correct(model, flows, labels)
    constant = model.schema.flow_constant_mask
    pooled = np.concatenate([f.features for f in flows])
    names, scores, variances = [], [], []
    for i in _active(model):
        if constant[i]:
            pool = np.array([f.features[0, i] for f in flows])
            draws = rng.choice(pool, size=len(flows))
            perturbed = [_substitute(f, i, draws[k]) for k, f in enumerate(flows)]
        else:
            perturbed = []
            for f in flows:
                x = f.features.copy()
                x[:, i] = rng.choice(pooled[:, i], size=len(f))
                perturbed.append(f.with_features(x))
        diff = base_correct - _correct(model, perturbed, labels)
        names.append(model.schema.names[i])
        scores.append(float(diff.mean()))
        variances.append(float(diff.var() / len(flows)))
    return ImportanceTable("perturbation", names, scores, variances, float(base_correct.mean()))


def _correct(model: Model, flows: Sequence[Flow], labels: np.ndarray, mask=None) -> np.ndarray:
    confs = predict_confidences(model, flows, mask)
    return (decide(np.array([c[-1] for c in confs])) == labels).astype(np.float64)


def _substitute(flow: Flow, i: int, value: float, step: Optional[int] = None) -> Flow:
    x = flow.features.copy()
    if step is None:
        x[:, i] = value
    else:
        x = x[: step + 1]
        x[step, i] = value
    return flow.with_features(x)


def _require_dropout(model: Model) -> None:
    if not model.feature_dropout:
        raise ValueError("this analysis needs a model trained with feature dropout")


def importance_dropout(model: Model, data) -> ImportanceTable:
    """Accuracy drop when exactly one feature is masked on every packet."""
    _require_dropout(model)
    flows = _flows(data)
    if not flows:
        raise DataError("importance needs a non-empty dataset")
    base = flow_accuracy(model, flows)
    names, scores = [], []
    for i in _active(model):
        names.append(model.schema.names[i])
        scores.append(base - flow_accuracy(model, flows, mask=[i]))
    return ImportanceTable("dropout", names, scores, None, base)


# --- shared information ----------------------------------------------------------------


@dataclass
class SharedInfo:
    feature_i: str
    feature_j: str
    base: float
    acc_without_i: float
    acc_without_j: float
    acc_without_both: float
    score: Optional[float]  # None when undefined

    @property
    def undefined(self) -> bool:
        return self.score is None


def shared_info_from_accuracies(base: float, without_i: float, without_j: float, without_both: float) -> Optional[float]:
    """Pair drop over the sum of single drops; None when that sum is at or below tolerance."""
    den = (base - without_i) + (base - without_j)
    if den <= SHARED_TOLERANCE:
        return None
    return (base - without_both) / den


def shared_info_score(model: Model, data, feature_i, feature_j) -> SharedInfo:
    _require_dropout(model)
    flows = _flows(data)
    i, j = _feature_index(model, feature_i), _feature_index(model, feature_j)
    if i == j:
        raise ValueError("shared information needs two different features")
    base = flow_accuracy(model, flows)
    ai = flow_accuracy(model, flows, mask=[i])
    aj = flow_accuracy(model, flows, mask=[j])
    ab = flow_accuracy(model, flows, mask=[i, j])
    names = model.schema.names
    return SharedInfo(names[i], names[j], base, ai, aj, ab, shared_info_from_accuracies(base, ai, aj, ab))


def shared_info_table(model: Model, data, features: Optional[Sequence] = None) -> list:
    """Scores for every unordered pair of the given (default: all active) features."""
    _require_dropout(model)
    flows = _flows(data)
    idx = [_feature_index(model, f) for f in features] if features is not None else _active(model)
    base = flow_accuracy(model, flows)
    single = {i: flow_accuracy(model, flows, mask=[i]) for i in idx}
    names = model.schema.names
    out = []
    for a, i in enumerate(idx):
        for j in idx[a + 1 :]:
            ab = flow_accuracy(model, flows, mask=[i, j])
            out.append(
                SharedInfo(names[i], names[j], base, single[i], single[j], ab,
                           shared_info_from_accuracies(base, single[i], single[j], ab))
            )
    return out


def shared_info_csv(rows: Sequence[SharedInfo]) -> str:
    header = ["feature_i", "feature_j", "base", "acc_without_i", "acc_without_j", "acc_without_both", "score", "undefined"]
    return _dump(
        [[r.feature_i, r.feature_j, r.base, r.acc_without_i, r.acc_without_j, r.acc_without_both,
          "" if r.score is None else float(r.score), int(r.undefined)] for r in rows],
        header,
    )


# --- mutual information ----------------------------------------------------------------


def mutual_information_from_joint(joint) -> float:
    """Plug-in mutual information in bits of a (possibly unnormalized) joint table."""
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2 or np.any(p < 0) or p.sum() <= 0:
        raise ValueError("joint table must be a non-negative 2-D array with positive mass")
    p = p / p.sum()
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(max(0.0, np.sum(p[nz] * np.log2(p[nz] / (px @ py)[nz]))))


def quantile_bins(values, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Bin index per value using the unique inner quantiles as edges."""
    v = np.asarray(values, dtype=np.float64)
    if bins < 2:
        raise ValueError("need at least 2 bins")
    edges = np.unique(np.quantile(v, np.linspace(0.0, 1.0, bins + 1)[1:-1]))
    return np.searchsorted(edges, v, side="right")


def discrete_mutual_information(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("need two 1-D arrays of equal length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    return mutual_information_from_joint(joint)


def feature_prediction_mi(values, confidences, bins: int = DEFAULT_BINS) -> float:
    """MI in bits between a quantile-binned feature and the prediction binarized at 0.5."""
    values = np.asarray(values, dtype=np.float64).ravel()
    confidences = np.asarray(confidences, dtype=np.float64).ravel()
    if values.shape != confidences.shape:
        raise ValueError("feature values and predictions must pair up")
    if values.size < MIN_MI_PAIRS:
        raise ValueError(f"mutual information needs at least {MIN_MI_PAIRS} pairs, got {values.size}")
    return discrete_mutual_information(quantile_bins(values, bins), decide(confidences).astype(np.int64))


def sensitivity_mutual_information(model: Model, data, bins: int = DEFAULT_BINS) -> ImportanceTable:
    """Per-feature MI between the step-t feature value and the step-t prediction, pooled over steps and flows."""
    flows = _flows(data)
    if not flows:
        raise DataError("mutual information needs a non-empty dataset")
    conf = np.concatenate(predict_confidences(model, flows))
    raw = np.concatenate([f.features for f in flows])
    names, scores = [], []
    for i in _active(model):
        names.append(model.schema.names[i])
        scores.append(feature_prediction_mi(raw[:, i], conf, bins))
    return ImportanceTable("mutual_information", names, scores)


# --- partial dependence ----------------------------------------------------------------


@dataclass
class PDPCurve:
    feature: str
    condition: str
    grid: list  # raw (denormalized) feature values, strictly increasing
    mean: list
    lower: list  # min prediction over the conditional set
    upper: list  # max prediction
    n_flows: int
    step: Optional[int] = None
    trajectories: dict = field(default_factory=dict)  # name -> per-step mean of the feature

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "condition": self.condition,
            "step": self.step,
            "n_flows": self.n_flows,
            "points": [
                {"value": g, "mean": m, "min": lo, "max": hi}
                for g, m, lo, hi in zip(self.grid, self.mean, self.lower, self.upper)
            ],
            "trajectories": self.trajectories,
        }

    def to_json(self) -> str:
        return _json(self.to_dict())

    def to_csv(self) -> str:
        step = "" if self.step is None else self.step
        rows = [
            [self.feature, self.condition, step, float(g), float(m), float(lo), float(hi), self.n_flows]
            for g, m, lo, hi in zip(self.grid, self.mean, self.lower, self.upper)
        ]
        return _dump(rows, ["feature", "condition", "step", "value", "mean", "min", "max", "count"])


def quantile_grid(values, points: int = DEFAULT_GRID) -> np.ndarray:
    """Up to ``points`` quantile-spaced values over the observed range, strictly increasing."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot build a grid from no values")
    return np.unique(np.quantile(v, np.linspace(0.0, 1.0, points)))


def _check_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64).ravel()
    if g.size == 0 or np.any(np.diff(g) <= 0):
        raise ValueError("grid must be non-empty and strictly increasing")
    return g


def _class_flows(data, cls) -> list:
    return [f for f in _flows(data) if matches_class(f, cls)]


def _final_confidences(model: Model, flows: Sequence[Flow]) -> np.ndarray:
    inputs = [model.encode(f) for f in flows]
    return np.array([c[-1] for c in batched_confidences(model.params, inputs)])


def conditional_pdp(model: Model, data, cls, feature, grid=None, points: int = DEFAULT_GRID) -> PDPCurve:
    """Mean flow prediction over class ``cls`` with a flow-constant feature forced to each grid value."""
    i = _feature_index(model, feature)
    if not model.schema.flow_constant_mask[i]:
        raise ValueError(
            f"{model.schema.names[i]!r} varies along the flow; use sequential_pdp for per-packet features"
        )
    flows = _class_flows(data, cls)
    if not flows:
        raise DataError(f"no flows of class {cls!r}")
    g = _check_grid(grid if grid is not None else quantile_grid([f.features[0, i] for f in flows], points))
    mean, lo, hi = [], [], []
    for w in g:
        p = _final_confidences(model, [_substitute(f, i, w) for f in flows])
        mean.append(float(p.mean()))
        lo.append(float(p.min()))
        hi.append(float(p.max()))
    return PDPCurve(model.schema.names[i], str(cls), g.tolist(), mean, lo, hi, len(flows))


def sequential_pdp(
    model: Model, data, cls, feature, step: int, grid=None, points: int = DEFAULT_GRID, adversarial=None
) -> PDPCurve:
    """Mean step-``step`` prediction (0-based) when only that step's feature value is replaced.

    Flows shorter than ``step + 1`` packets are left out. Each flow keeps its
    true history up to ``step - 1``. ``adversarial`` optionally supplies
    adversarial versions of the class flows whose mean trajectory of the
    feature is attached for overlay.
    """
    i = _feature_index(model, feature)
    if step < 0:
        raise ValueError("step must be >= 0")
    flows = [f for f in _class_flows(data, cls) if len(f) > step]
    if not flows:
        raise DataError(f"no flow of class {cls!r} reaches step {step}")
    if grid is None:
        grid = quantile_grid(np.concatenate([f.features[:, i] for f in flows]), points)
    g = _check_grid(grid)
    mean, lo, hi = [], [], []
    for w in g:
        p = _final_confidences(model, [_substitute(f, i, w, step) for f in flows])
        mean.append(float(p.mean()))
        lo.append(float(p.min()))
        hi.append(float(p.max()))
    traj = {"original": feature_sequence_profile(flows, None, i).mean}
    if adversarial is not None:
        adv = [f for f in _flows(adversarial) if matches_class(f, cls)]
        if adv:
            traj["adversarial"] = feature_sequence_profile(adv, None, i).mean
    return PDPCurve(model.schema.names[i], str(cls), g.tolist(), mean, lo, hi, len(flows), step, traj)


# --- per-step profiles -----------------------------------------------------------------


@dataclass
class StepProfile:
    name: str
    condition: str
    mean: list  # index k is step k + 1
    std: list
    count: list  # flows with length >= step

    @property
    def steps(self) -> list:
        return list(range(1, len(self.mean) + 1))

    def last_common_step(self, fraction: float = 0.5) -> int:
        """Last 1-based step still reached by at least ``fraction`` of the step-1 flows."""
        need = fraction * self.count[0]
        return max(k + 1 for k, c in enumerate(self.count) if c >= need)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "condition": self.condition,
            "steps": [
                {"step": s, "mean": m, "std": sd, "count": c}
                for s, m, sd, c in zip(self.steps, self.mean, self.std, self.count)
            ],
        }

    def to_json(self) -> str:
        return _json(self.to_dict())

    def to_csv(self) -> str:
        rows = [[self.name, self.condition, s, float(m), float(sd), c]
                for s, m, sd, c in zip(self.steps, self.mean, self.std, self.count)]
        return _dump(rows, ["feature", "condition", "step", "mean", "std", "count"])


def _profile(name: str, cls, series: Sequence[np.ndarray]) -> StepProfile:
    if not series:
        raise DataError(f"no flows of class {cls!r}")
    T = max(len(s) for s in series)
    mean, std, count = [], [], []
    for t in range(T):
        v = np.array([s[t] for s in series if len(s) > t])
        mean.append(float(v.mean()))
        std.append(float(v.std()))
        count.append(int(v.size))
    return StepProfile(name, str(cls), mean, std, count)


def confidence_per_step(model: Model, data, cls=None) -> StepProfile:
    """Mean attack confidence at each step over the flows long enough to reach it."""
    flows = _class_flows(data, cls)
    return _profile("confidence", cls, predict_confidences(model, flows) if flows else [])


def feature_sequence_profile(data, cls, feature) -> StepProfile:
    """Per-step mean and standard deviation of one raw feature over the class flows."""
    flows = _class_flows(data, cls)
    schema = data.schema if isinstance(data, Dataset) else canonical_schema()
    i = _feature_index(schema, feature)
    return _profile(schema.names[i], cls, [f.features[:, i] for f in flows])
