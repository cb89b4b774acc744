"""Training, prediction and per-packet / per-flow metrics for the LSTM flow classifier."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from . import lstm
from .flowdata import (
    DataError,
    Dataset,
    FeatureSchema,
    Flow,
    NormalizationStats,
    apply_normalizer,
    fit_normalizer,
)

MODEL_KIND = "rnnids-classifier"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    layers: int = 3
    hidden: int = 64
    feature_dropout: bool = False
    dropout_p: Optional[float] = None  # None -> 1/n

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("layers and hidden must be >= 1")
        if self.dropout_p is not None and not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")


@dataclass
class Model:
    params: lstm.ModelParams
    stats: NormalizationStats
    schema: FeatureSchema
    feature_dropout: bool = False
    history: list = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return self.schema.n

    def encode(self, flow, mask=None) -> np.ndarray:
        """Model input for one flow: normalized features, plus indicator slots in dropout mode."""
        z = apply_normalizer(self.stats, flow, self.schema)
        return self.encode_normalized(z, mask)

    def encode_normalized(self, z: np.ndarray, mask=None) -> np.ndarray:
        if mask is not None and not self.feature_dropout:
            raise ValueError("a feature mask needs a model trained with feature dropout")
        if not self.feature_dropout:
            return z
        return _with_indicators(z, _as_mask(mask, self.n_features))


def _as_mask(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.zeros(n, dtype=bool)
    m = np.asarray(mask)
    if m.dtype != bool:
        idx = m.astype(np.int64)
        m = np.zeros(n, dtype=bool)
        m[idx] = True
    if m.shape != (n,):
        raise ValueError(f"feature mask must have {n} entries")
    return m


def _with_indicators(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = np.zeros((z.shape[0], 2 * z.shape[1]))
    out[:, : z.shape[1]] = np.where(mask, 0.0, z)
    out[:, z.shape[1] :] = mask
    return out


def pad_batch(inputs: Sequence[np.ndarray]) -> tuple:
    lengths = np.array([x.shape[0] for x in inputs], dtype=np.int64)
    out = np.zeros((len(inputs), int(lengths.max()), inputs[0].shape[1]))
    for b, x in enumerate(inputs):
        out[b, : x.shape[0]] = x
    return out, lengths


def batched_confidences(params: lstm.ModelParams, inputs: Sequence[np.ndarray], batch_size: int = 256) -> list:
    """Per-step attack confidences for many encoded flows, batched by length."""
    order = sorted(range(len(inputs)), key=lambda i: (inputs[i].shape[0], i))
    out = [None] * len(inputs)
    for s in range(0, len(order), batch_size):
        idx = order[s : s + batch_size]
        x, lengths = pad_batch([inputs[i] for i in idx])
        conf = lstm.forward(params, x, lengths).confidences
        for b, i in enumerate(idx):
            out[i] = conf[b, : lengths[b]].copy()
    return out


def _flows(data) -> list:
    return list(data.flows) if isinstance(data, Dataset) else list(data)


def predict_confidences(model: Model, flows, mask=None) -> list:
    flows = _flows(flows)
    return batched_confidences(model.params, [model.encode(f, mask) for f in flows])


@dataclass
class FlowPrediction:
    confidences: np.ndarray  # per-step attack probability
    decision: int  # 1 = attack

    @property
    def final_confidence(self) -> float:
        return float(self.confidences[-1])


def decide(confidence) -> np.ndarray:
    # a tie at exactly 0.5 counts as benign
    return (np.asarray(confidence) > 0.5).astype(np.int64)


def predict_flow(model: Model, flow: Flow, mask=None) -> FlowPrediction:
    conf = lstm.forward(model.params, model.encode(flow, mask)).confidences[0]
    return FlowPrediction(conf, int(decide(conf[-1])))


# --- training ------------------------------------------------------------------------


def _epoch_batches(rng, n: int, batch_size: int):
    perm = rng.permutation(n)
    return [perm[s : s + batch_size] for s in range(0, n, batch_size)]


def fit_params(
    params: lstm.ModelParams,
    normalized: Sequence[np.ndarray],
    labels: Sequence[int],
    config: TrainConfig,
    rng: np.random.Generator,
    epochs: int,
    adam: Optional[lstm.AdamState] = None,
    feature_dropout: bool = False,
) -> tuple:
    """Run ``epochs`` passes of minibatch Adam over pre-normalized flows.

    Returns ``(params, adam_state, history, backprop_steps)``. One backprop step
    is one gradient evaluation over a minibatch.
    """
    labels = np.asarray(labels, dtype=np.float64)
    adam = adam or lstm.AdamState.zeros_like(params)
    hyper = lstm.AdamHyper(lr=config.lr)
    n_feat = normalized[0].shape[1]
    p_drop = config.dropout_p if config.dropout_p is not None else 1.0 / n_feat
    history, steps = [], 0
    for _ in range(epochs):
        total, correct = 0.0, 0
        for idx in _epoch_batches(rng, len(normalized), config.batch_size):
            if feature_dropout:
                masks = rng.random((len(idx), n_feat)) < p_drop
                inputs = [_with_indicators(normalized[i], masks[k]) for k, i in enumerate(idx)]
            else:
                inputs = [normalized[i] for i in idx]
            x, lengths = pad_batch(inputs)
            trace = lstm.forward(params, x, lengths)
            y = labels[idx]
            total += float(lstm.flow_losses(trace, y).sum())
            correct += int(np.sum(decide(expit(trace.final_logits())) == y))
            grads = lstm.backward_params(trace, y)
            params, adam = lstm.adam_step(params, grads, adam, hyper)
            steps += 1
        history.append({"loss": total / len(normalized), "accuracy": correct / len(normalized)})
    return params, adam, history, steps


def train(
    train_data: Dataset,
    config: TrainConfig = None,
    stats: Optional[NormalizationStats] = None,
    schema: Optional[FeatureSchema] = None,
) -> Model:
    """Train a regular (or, with ``config.feature_dropout``, a feature-dropout) model."""
    config = config or TrainConfig()
    config.validate()
    flows = _flows(train_data)
    if not flows:
        raise DataError("cannot train on an empty dataset")
    schema = schema or (train_data.schema if isinstance(train_data, Dataset) else FeatureSchema())
    stats = stats or fit_normalizer(flows)
    normalized = [apply_normalizer(stats, f, schema) for f in flows]
    labels = [f.label for f in flows]
    width = schema.n * (2 if config.feature_dropout else 1)
    params = lstm.init_params(config.layers, config.hidden, width, config.seed)
    rng = np.random.default_rng(config.seed)
    params, _, history, _ = fit_params(
        params, normalized, labels, config, rng, config.epochs, feature_dropout=config.feature_dropout
    )
    params.meta.update({"epochs": config.epochs, "feature_dropout": config.feature_dropout, "train": asdict(config)})
    for k, h in enumerate(history, start=1):
        h["epoch"] = k
    return Model(params, stats, schema, config.feature_dropout, history)


def train_feature_dropout(train_data: Dataset, config: TrainConfig = None, **kwargs) -> Model:
    config = config or TrainConfig()
    cfg = TrainConfig(**{**asdict(config), "feature_dropout": True})
    return train(train_data, cfg, **kwargs)


def dataset_loss(model: Model, data, mask=None) -> float:
    """Mean per-flow loss of ``model`` on ``data``."""
    flows = _flows(data)
    confs = predict_confidences(model, flows, mask)
    p = [np.clip(c, lstm.PROB_CLAMP, 1 - lstm.PROB_CLAMP) for c in confs]
    losses = [-np.mean(np.log(pi) if f.label else np.log(1 - pi)) for pi, f in zip(p, flows)]
    return float(np.mean(losses))


# --- metrics -------------------------------------------------------------------------


def _ratio(num: float, den: float, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


@dataclass
class BinaryMetrics:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        self.undefined = []
        flags = self.undefined
        n = self.tp + self.fp + self.tn + self.fn
        self.accuracy = _ratio(self.tp + self.tn, n, "accuracy", flags)
        self.precision = _ratio(self.tp, self.tp + self.fp, "precision", flags)
        self.recall = _ratio(self.tp, self.tp + self.fn, "recall", flags)
        self.specificity = _ratio(self.tn, self.tn + self.fp, "specificity", flags)
        self.f1 = _ratio(2 * self.precision * self.recall, self.precision + self.recall, "f1", flags)
        self.youden_j = self.recall + self.specificity - 1.0

    @classmethod
    def from_decisions(cls, y_true, y_pred) -> "BinaryMetrics":
        y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
        return cls(
            int(np.sum((y_true == 1) & (y_pred == 1))),
            int(np.sum((y_true == 0) & (y_pred == 1))),
            int(np.sum((y_true == 0) & (y_pred == 0))),
            int(np.sum((y_true == 1) & (y_pred == 0))),
        )

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "specificity": self.specificity,
            "f1": self.f1,
            "youden_j": self.youden_j,
            "undefined": list(self.undefined),
        }


METRIC_KEYS = ("accuracy", "precision", "recall", "f1", "youden_j", "specificity", "tp", "fp", "tn", "fn")


@dataclass
class MetricsReport:
    packet: BinaryMetrics
    flow: BinaryMetrics

    def to_dict(self) -> dict:
        return {"packet": self.packet.to_dict(), "flow": self.flow.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "packet", "flow"])
        for k in METRIC_KEYS:
            w.writerow([k, repr(getattr(self.packet, k)), repr(getattr(self.flow, k))])
        return buf.getvalue()


def evaluate(model: Model, data, mask=None) -> MetricsReport:
    """Per-packet metrics over every step decision, per-flow metrics over final-step decisions."""
    flows = _flows(data)
    if not flows:
        raise DataError("cannot evaluate on an empty dataset")
    confs = predict_confidences(model, flows, mask)
    return metrics_from_confidences(flows, confs)


def metrics_from_confidences(flows: Sequence[Flow], confs: Sequence[np.ndarray]) -> MetricsReport:
    packet_true = np.concatenate([np.full(len(c), f.label) for f, c in zip(flows, confs)])
    packet_pred = decide(np.concatenate(confs))
    flow_true = np.array([f.label for f in flows])
    flow_pred = decide(np.array([c[-1] for c in confs]))
    return MetricsReport(
        BinaryMetrics.from_decisions(packet_true, packet_pred),
        BinaryMetrics.from_decisions(flow_true, flow_pred),
    )


def flow_accuracy(model: Model, data, mask=None) -> float:
    flows = _flows(data)
    confs = predict_confidences(model, flows, mask)
    pred = decide(np.array([c[-1] for c in confs]))
    return float(np.mean(pred == np.array([f.label for f in flows])))


def history_csv(model: Model) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "accuracy"])
    for h in model.history:
        w.writerow([h["epoch"], repr(h["loss"]), repr(h["accuracy"])])
    return buf.getvalue()


# --- persistence ---------------------------------------------------------------------


def model_to_bytes(model: Model) -> bytes:
    params = model.params.copy()
    params.meta.update(
        {
            "kind": MODEL_KIND,
            "stats": model.stats.to_dict(),
            "schema": model.schema.to_dict(),
            "feature_dropout": model.feature_dropout,
            "history": model.history,
        }
    )
    return lstm.serialize_model(params)


def model_from_bytes(data: bytes) -> Model:
    params = lstm.deserialize_model(data)
    meta = params.meta
    if meta.get("kind") != MODEL_KIND:
        raise ValueError("model file does not carry classifier metadata")
    schema = FeatureSchema.from_dict(meta["schema"])
    dropout = bool(meta["feature_dropout"])
    expected = schema.n * (2 if dropout else 1)
    if params.input_dim != expected:
        raise ValueError(f"model input width {params.input_dim} does not match schema width {expected}")
    return Model(params, NormalizationStats.from_dict(meta["stats"]), schema, dropout, list(meta.get("history", [])))


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
