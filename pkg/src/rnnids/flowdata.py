"""Packet ingestion, flow assembly, Z-score normalization and splitting.

A flow is stored as a ``(T, 15)`` float64 array of raw per-packet features in
the canonical column order given by :data:`FEATURE_NAMES`.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Iterable, Optional, Sequence, Union

import numpy as np

FLAG_NAMES = ("fin", "syn", "rst", "psh", "ack", "urg", "ece", "cwr", "ns")
FEATURE_NAMES = ("src_port", "dst_port", "protocol", "packet_length", "iat", "direction") + FLAG_NAMES
N_FEATURES = len(FEATURE_NAMES)
FEATURE_INDEX = {name: i for i, name in enumerate(FEATURE_NAMES)}

SRC_PORT, DST_PORT, PROTOCOL, LENGTH, IAT, DIRECTION = range(6)
FORWARD, REVERSE = 0, 1
TCP = 6

REDUCTIONS = ("none", "both_directions", "attacker_direction_only")

CSV_COLUMNS = (
    ("flow_hint", "timestamp", "src_ip", "dst_ip", "src_port", "dst_port", "protocol", "packet_length")
    + FLAG_NAMES
    + ("label", "attack_type", "fully_controlled")
)
OPTIONAL_COLUMNS = {"flow_hint", "attack_type", "fully_controlled"}

CACHE_FORMAT = "rnnids-dataset"
CACHE_VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple = FEATURE_NAMES
    flow_constant_mask: tuple = (True, True, True) + (False,) * 12
    manipulable_mask: tuple = (False, False, False, True, True) + (False,) * 10
    active_mask: tuple = (True,) * N_FEATURES
    reduction: str = "none"

    def __post_init__(self):
        n = len(self.names)
        for m in (self.flow_constant_mask, self.manipulable_mask, self.active_mask):
            if len(m) != n:
                raise ValueError("schema masks must have one entry per feature")
        if any(a and b for a, b in zip(self.flow_constant_mask, self.manipulable_mask)):
            raise ValueError("flow-constant and manipulable features must be disjoint")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}")

    @property
    def n(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown feature {name!r}") from None

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "flow_constant_mask": list(self.flow_constant_mask),
            "manipulable_mask": list(self.manipulable_mask),
            "active_mask": list(self.active_mask),
            "reduction": self.reduction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(
            tuple(d["names"]),
            tuple(bool(v) for v in d["flow_constant_mask"]),
            tuple(bool(v) for v in d["manipulable_mask"]),
            tuple(bool(v) for v in d["active_mask"]),
            d.get("reduction", "none"),
        )


def canonical_schema() -> FeatureSchema:
    return FeatureSchema()


@dataclass(frozen=True)
class PacketFeatureVector:
    src_port: int
    dst_port: int
    protocol: int
    packet_length: float
    iat: float
    direction: int
    flags: tuple = (0,) * 9

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.src_port, self.dst_port, self.protocol, self.packet_length, self.iat, self.direction, *self.flags],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, row) -> "PacketFeatureVector":
        row = [float(v) for v in row]
        return cls(int(row[0]), int(row[1]), int(row[2]), row[3], row[4], int(row[5]), tuple(int(v) for v in row[6:]))


@dataclass
class Flow:
    key: tuple  # (src_ip, dst_ip, src_port, dst_port, protocol), forward orientation
    features: np.ndarray  # (T, 15) raw values
    label: int
    attack_type: str = "benign"
    fully_controlled: bool = False
    flow_id: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("a flow needs at least one packet")
        if self.label not in (0, 1):
            raise ValueError(f"flow label must be 0 or 1, got {self.label!r}")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def packets(self) -> list:
        return [PacketFeatureVector.from_array(r) for r in self.features]

    @property
    def directions(self) -> np.ndarray:
        return self.features[:, DIRECTION]

    def with_features(self, features: np.ndarray) -> "Flow":
        return replace(self, features=np.array(features, dtype=np.float64))


@dataclass
class Dataset:
    flows: list
    schema: FeatureSchema = field(default_factory=canonical_schema)
    split_tag: str = "unsplit"

    def __len__(self) -> int:
        return len(self.flows)

    def __iter__(self):
        return iter(self.flows)

    @property
    def labels(self) -> np.ndarray:
        return np.array([f.label for f in self.flows], dtype=np.int64)

    @property
    def n_packets(self) -> int:
        return int(sum(len(f) for f in self.flows))

    def subset(self, flows: Iterable[Flow], split_tag: Optional[str] = None) -> "Dataset":
        return Dataset(list(flows), self.schema, split_tag or self.split_tag)

    def filter(self, cls=None) -> "Dataset":
        return self.subset(f for f in self.flows if matches_class(f, cls))

    def attack_types(self) -> list:
        return sorted({f.attack_type for f in self.flows})


def matches_class(flow: Flow, cls) -> bool:
    """``cls`` is None (everything), a label int, or an attack-type string."""
    if cls is None:
        return True
    if isinstance(cls, (int, np.integer)) and not isinstance(cls, bool):
        return flow.label == int(cls)
    if cls == "attack":
        return flow.label == 1
    return flow.attack_type == cls


# --- CSV ingestion -------------------------------------------------------------------


@dataclass(frozen=True)
class PacketRecord:
    line: int
    flow_hint: str
    timestamp: float
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int
    packet_length: float
    flags: tuple
    label: int
    attack_type: str
    fully_controlled: bool


def _int_field(row: dict, name: str, lo: int, hi: int, line: int) -> int:
    raw = row[name].strip()
    try:
        value = float(raw)
    except ValueError:
        raise DataError(f"line {line}: column {name!r} is not a number: {raw!r}") from None
    if not value.is_integer() or not lo <= value <= hi:
        raise DataError(f"line {line}: column {name!r} must be an integer in [{lo}, {hi}], got {raw!r}")
    return int(value)


def _float_field(row: dict, name: str, line: int) -> float:
    raw = row[name].strip()
    try:
        value = float(raw)
    except ValueError:
        raise DataError(f"line {line}: column {name!r} is not a number: {raw!r}") from None
    if not math.isfinite(value):
        raise DataError(f"line {line}: column {name!r} must be finite")
    return value


def _open_text(source) -> io.TextIOBase:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"))
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def parse_packet_csv(source: Union[bytes, BinaryIO, str, os.PathLike]) -> list:
    """Parse the packet CSV into :class:`PacketRecord` objects in file order."""
    stream = _open_text(source)
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("line 1: missing header row") from None
    header = [h.strip() for h in header]
    for name in header:
        if name not in CSV_COLUMNS:
            raise DataError(f"line 1: unknown column {name!r}")
    missing = [c for c in CSV_COLUMNS if c not in header and c not in OPTIONAL_COLUMNS]
    if missing:
        raise DataError(f"line 1: missing required column(s) {', '.join(missing)}")

    records = []
    for line, values in enumerate(reader, start=2):
        if not values or all(not v.strip() for v in values):
            continue
        if len(values) != len(header):
            raise DataError(f"line {line}: expected {len(header)} fields, got {len(values)}")
        row = dict(zip(header, values))
        row.setdefault("flow_hint", "")
        row.setdefault("attack_type", "")
        row.setdefault("fully_controlled", "0")
        if not row["fully_controlled"].strip():
            row["fully_controlled"] = "0"
        protocol = _int_field(row, "protocol", 0, 255, line)
        length = _float_field(row, "packet_length", line)
        if length < 0:
            raise DataError(f"line {line}: packet_length must be >= 0, got {length}")
        flags = tuple(_int_field(row, f, 0, 1, line) for f in FLAG_NAMES)
        if protocol != TCP and any(flags):
            raise DataError(f"line {line}: TCP flags set on a non-TCP packet (protocol {protocol})")
        label = _int_field(row, "label", 0, 1, line)
        records.append(
            PacketRecord(
                line=line,
                flow_hint=row["flow_hint"].strip(),
                timestamp=_float_field(row, "timestamp", line),
                src_ip=row["src_ip"].strip(),
                dst_ip=row["dst_ip"].strip(),
                src_port=_int_field(row, "src_port", 0, 65535, line),
                dst_port=_int_field(row, "dst_port", 0, 65535, line),
                protocol=protocol,
                packet_length=length,
                flags=flags,
                label=label,
                attack_type=row["attack_type"].strip() or ("attack" if label else "benign"),
                fully_controlled=bool(_int_field(row, "fully_controlled", 0, 1, line)),
            )
        )
    return records


def _flow_key(r: PacketRecord) -> tuple:
    a, b = (r.src_ip, r.src_port), (r.dst_ip, r.dst_port)
    return (min(a, b), max(a, b), r.protocol)


def assemble_flows(records: Sequence[PacketRecord]) -> list:
    """Group records into bidirectional 5-tuple flows (or by ``flow_hint``)."""
    groups: dict = {}
    for r in records:
        gkey = ("hint", r.flow_hint) if r.flow_hint else ("tuple", _flow_key(r))
        groups.setdefault(gkey, []).append(r)

    flows = []
    for gkey, recs in groups.items():
        recs = sorted(recs, key=lambda r: r.timestamp)  # stable: ties keep file order
        first = recs[0]
        for r in recs[1:]:
            if r.protocol != first.protocol:
                raise DataError(f"line {r.line}: protocol {r.protocol} conflicts with protocol {first.protocol} of flow {gkey[1]!r}")
            if r.label != first.label:
                raise DataError(f"line {r.line}: label {r.label} conflicts with label {first.label} of flow {gkey[1]!r}")
        feats = np.zeros((len(recs), N_FEATURES))
        feats[:, SRC_PORT] = first.src_port
        feats[:, DST_PORT] = first.dst_port
        feats[:, PROTOCOL] = first.protocol
        prev_ts = first.timestamp
        for t, r in enumerate(recs):
            feats[t, LENGTH] = r.packet_length
            feats[t, IAT] = r.timestamp - prev_ts
            prev_ts = r.timestamp
            forward = r.src_ip == first.src_ip and r.src_port == first.src_port
            feats[t, DIRECTION] = FORWARD if forward else REVERSE
            feats[t, 6:] = r.flags
        flows.append(
            Flow(
                key=(first.src_ip, first.dst_ip, first.src_port, first.dst_port, first.protocol),
                features=feats,
                label=first.label,
                attack_type=first.attack_type,
                fully_controlled=any(r.fully_controlled for r in recs),
                flow_id=first.flow_hint or f"flow{len(flows)}",
            )
        )
    return flows


def write_packet_csv(flows: Iterable[Flow], path, start_gap: float = 1.0) -> None:
    """Write flows back out as packet CSV; each flow starts ``start_gap`` s after the previous one's end."""
    t0 = 0.0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for flow in flows:
            src_ip, dst_ip, sport, dport, proto = flow.key
            ts = t0
            for row in flow.features:
                ts += float(row[IAT])
                fwd = row[DIRECTION] == FORWARD
                w.writerow(
                    [flow.flow_id, repr(ts)]
                    + ([src_ip, dst_ip, sport, dport] if fwd else [dst_ip, src_ip, dport, sport])
                    + [int(proto), repr(float(row[LENGTH]))]
                    + [int(v) for v in row[6:]]
                    + [flow.label, flow.attack_type, int(flow.fully_controlled)]
                )
            t0 = ts + start_gap


# --- normalization -------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def _flows_of(data) -> list:
    return list(data.flows) if isinstance(data, Dataset) else list(data)


def fit_normalizer(train) -> NormalizationStats:
    """Population mean/std per feature over every packet of every training flow."""
    flows = _flows_of(train)
    if not flows:
        raise DataError("cannot fit normalization on an empty dataset")
    x = np.concatenate([f.features for f in flows])
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return NormalizationStats(mean, std)


def apply_normalizer(stats: NormalizationStats, flow, schema: Optional[FeatureSchema] = None) -> np.ndarray:
    """Z-score a flow (``Flow`` or raw ``(T, n)`` array).

    Features inactive under ``schema`` are set to 0, and with the
    ``attacker_direction_only`` reduction the manipulable features of
    forward-direction packets are set to 0 as well.
    """
    x = flow.features if isinstance(flow, Flow) else np.asarray(flow, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != stats.mean.shape[0]:
        raise ValueError(f"flow has {x.shape[-1]} features, normalization expects {stats.mean.shape[0]}")
    z = (x - stats.mean) / stats.std
    if schema is not None:
        z[:, ~np.asarray(schema.active_mask)] = 0.0
        if schema.reduction == "attacker_direction_only":
            fwd = x[:, DIRECTION] == FORWARD
            z[np.ix_(fwd, np.asarray(schema.manipulable_mask))] = 0.0
    return z


def invert_normalizer(stats: NormalizationStats, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"tensor has {z.shape[-1]} features, normalization expects {stats.mean.shape[0]}")
    return z * stats.std + stats.mean


# --- splitting -----------------------------------------------------------------------


def split_dataset(dataset: Dataset, seed: int, test_fraction: float = 1.0 / 3.0) -> tuple:
    """Stratified, seeded 2:1 train/test split. Flows keep their original order within each side."""
    n = len(dataset)
    if n < 3:
        raise DataError(f"need at least 3 flows to split, got {n}")
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n - n_test < 1:
        raise DataError("split would leave one side empty")
    labels = dataset.labels
    rng = np.random.default_rng(seed)
    strata = {lab: rng.permutation(np.flatnonzero(labels == lab)) for lab in sorted(set(labels.tolist()))}
    # largest-remainder allocation of test slots across strata
    quotas = {lab: len(idx) * n_test / n for lab, idx in strata.items()}
    alloc = {lab: int(math.floor(q)) for lab, q in quotas.items()}
    leftover = n_test - sum(alloc.values())
    for lab in sorted(quotas, key=lambda k: (-(quotas[k] - alloc[k]), k))[:leftover]:
        alloc[lab] += 1
    test_idx = np.sort(np.concatenate([idx[: alloc[lab]] for lab, idx in strata.items()]))
    is_test = np.zeros(n, dtype=bool)
    is_test[test_idx] = True
    train = dataset.subset((f for f, t in zip(dataset.flows, is_test) if not t), "train")
    test = dataset.subset((f for f, t in zip(dataset.flows, is_test) if t), "test")
    return train, test


# --- dataset cache -------------------------------------------------------------------


def dataset_to_dict(dataset: Dataset, stats: Optional[NormalizationStats] = None) -> dict:
    return {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "schema": dataset.schema.to_dict(),
        "split_tag": dataset.split_tag,
        "stats": stats.to_dict() if stats is not None else None,
        "flows": [
            {
                "flow_id": f.flow_id,
                "key": list(f.key),
                "label": int(f.label),
                "attack_type": f.attack_type,
                "fully_controlled": bool(f.fully_controlled),
                "features": f.features.tolist(),
            }
            for f in dataset.flows
        ],
    }


def dataset_to_bytes(dataset: Dataset, stats: Optional[NormalizationStats] = None) -> bytes:
    return json.dumps(dataset_to_dict(dataset, stats), separators=(",", ":")).encode("utf-8")


def dataset_from_bytes(data: bytes) -> tuple:
    """Inverse of :func:`dataset_to_bytes`; returns ``(dataset, stats_or_None)``."""
    try:
        d = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"dataset cache is not valid JSON: {exc}") from None
    if d.get("format") != CACHE_FORMAT:
        raise DataError("not a dataset cache file")
    if d.get("version") != CACHE_VERSION:
        raise DataError(f"unsupported dataset cache version {d.get('version')}")
    flows = [
        Flow(
            key=tuple(f["key"]),
            features=np.array(f["features"], dtype=np.float64),
            label=int(f["label"]),
            attack_type=f["attack_type"],
            fully_controlled=bool(f["fully_controlled"]),
            flow_id=f["flow_id"],
        )
        for f in d["flows"]
    ]
    stats = NormalizationStats.from_dict(d["stats"]) if d.get("stats") else None
    return Dataset(flows, FeatureSchema.from_dict(d["schema"]), d.get("split_tag", "unsplit")), stats


def save_dataset(path, dataset: Dataset, stats: Optional[NormalizationStats] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(dataset, stats))


def load_dataset(path) -> tuple:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
