"""Desk-scale synthetic flow generator with planted, documented signatures.

Every flow uses an ephemeral source port drawn uniformly from
[32768, 60999] regardless of class, so ``src_port`` carries no class
information (it is the designated noise feature).

Flow types and their rules:

``benign``
    75 % web-like TCP flows to port 80/443 (SYN / SYN-ACK handshake, then
    mixed-direction ACK/PSH packets, forward length U(52, 600), reverse
    length U(52, 1500), exponential IATs with a per-flow mean in
    [0.02, 0.3] s, closing FIN) and 25 % DNS-like UDP flows to port 53 with
    1-2 packets.
``dos``
    Handshake as web, then 90 % forward PSH/ACK packets with the fixed
    length pattern 60, 400, 60, 400, ... and near-constant IAT of
    2 ms (+-10 %). Signature lives in the manipulable features.
``scan``
    Exactly one forward packet: SYN only, length 44, destination port
    drawn from [1024, 65535].
``slow``
    Handshake, then forward PSH/ACK packets of length U(60, 80) separated
    by IATs of U(3, 10) s, each optionally answered by a 52-byte ACK.
``botnet`` (fully controlled)
    Port 443, handshake, then strictly alternating 120-byte forward beacons
    every 2.0 s (+-0.05) and 250-byte reverse replies after U(10, 30) ms.
    Signature lives in the manipulable features of both directions.
``backdoor`` (fully controlled)
    Generated exactly like benign web traffic except that the destination
    port is one of :data:`BACKDOOR_PORTS`. ``dst_port`` is therefore the
    only feature carrying this class (the planted signature feature).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flowdata import (
    DIRECTION,
    DST_PORT,
    FORWARD,
    IAT,
    LENGTH,
    N_FEATURES,
    PROTOCOL,
    REVERSE,
    SRC_PORT,
    DataError,
    Dataset,
    Flow,
    canonical_schema,
)

FIN, SYN, RST, PSH, ACK = 6, 7, 8, 9, 10
UDP, TCP = 17, 6

ATTACK_TYPES = ("dos", "scan", "slow", "botnet", "backdoor")
FLOW_TYPES = ("benign",) + ATTACK_TYPES
FULLY_CONTROLLED = frozenset({"botnet", "backdoor"})
BACKDOOR_PORTS = (4444, 5555, 6666, 7777, 31337)

SIGNATURE_FEATURE = "dst_port"
NOISE_FEATURE = "src_port"

DEFAULT_COUNTS = {"benign": 700, "dos": 150, "scan": 120, "slow": 120, "botnet": 120, "backdoor": 120}


@dataclass
class SynthConfig:
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    min_len: int = 4
    max_len: int = 12

    def validate(self) -> None:
        unknown = set(self.counts) - set(FLOW_TYPES)
        if unknown:
            raise DataError(f"unknown flow type(s) {sorted(unknown)}; known: {FLOW_TYPES}")
        if any(int(v) < 0 for v in self.counts.values()):
            raise DataError("flow counts must be non-negative")
        if sum(int(v) for v in self.counts.values()) == 0:
            raise DataError("zero flows requested")
        if not 3 <= self.min_len <= self.max_len:
            raise DataError("flow length range must satisfy 3 <= min_len <= max_len")


def _empty(n: int, sport: int, dport: int, proto: int) -> np.ndarray:
    x = np.zeros((n, N_FEATURES))
    x[:, SRC_PORT] = sport
    x[:, DST_PORT] = dport
    x[:, PROTOCOL] = proto
    return x


def _handshake(x: np.ndarray, rng) -> None:
    x[0, [LENGTH, DIRECTION, SYN]] = (60, FORWARD, 1)
    x[1, [LENGTH, DIRECTION, SYN, ACK]] = (60, REVERSE, 1, 1)
    x[1, IAT] = rng.uniform(0.005, 0.08)


def _web(rng, n: int, sport: int, dport: int) -> np.ndarray:
    x = _empty(n, sport, dport, TCP)
    _handshake(x, rng)
    mean_iat = rng.uniform(0.02, 0.3)
    for t in range(2, n):
        fwd = rng.random() < 0.5
        x[t, DIRECTION] = FORWARD if fwd else REVERSE
        x[t, LENGTH] = round(rng.uniform(52, 600 if fwd else 1500))
        x[t, IAT] = rng.exponential(mean_iat)
        x[t, ACK] = 1
        x[t, PSH] = float(rng.random() < 0.5)
    x[n - 1, [LENGTH, DIRECTION, FIN, ACK, PSH]] = (52, FORWARD, 1, 1, 0)
    return x


def _dns(rng, sport: int) -> np.ndarray:
    n = int(rng.integers(1, 3))
    x = _empty(n, sport, 53, UDP)
    x[0, LENGTH] = round(rng.uniform(60, 100))
    if n == 2:
        x[1, [LENGTH, DIRECTION, IAT]] = (round(rng.uniform(80, 300)), REVERSE, rng.uniform(0.005, 0.05))
    return x


def _dos(rng, n: int, sport: int) -> np.ndarray:
    x = _empty(n, sport, 80, TCP)
    _handshake(x, rng)
    for t in range(2, n):
        fwd = rng.random() < 0.9
        x[t, DIRECTION] = FORWARD if fwd else REVERSE
        x[t, LENGTH] = (60 if t % 2 == 0 else 400) if fwd else 52
        x[t, IAT] = 0.002 * (1.0 + rng.uniform(-0.1, 0.1))
        x[t, ACK] = 1
        x[t, PSH] = float(fwd)
    return x


def _scan(rng, sport: int) -> np.ndarray:
    x = _empty(1, sport, int(rng.integers(1024, 65536)), TCP)
    x[0, [LENGTH, DIRECTION, SYN]] = (44, FORWARD, 1)
    return x


def _slow(rng, n: int, sport: int) -> np.ndarray:
    x = _empty(n, sport, 80, TCP)
    _handshake(x, rng)
    for t in range(2, n):
        reply = x[t - 1, DIRECTION] == FORWARD and t > 2 and rng.random() < 0.3
        x[t, ACK] = 1
        if reply:
            x[t, [LENGTH, DIRECTION, IAT]] = (52, REVERSE, rng.uniform(0.01, 0.05))
        else:
            x[t, [LENGTH, DIRECTION, IAT, PSH]] = (round(rng.uniform(60, 80)), FORWARD, rng.uniform(3.0, 10.0), 1)
    return x


def _botnet(rng, n: int, sport: int) -> np.ndarray:
    x = _empty(n, sport, 443, TCP)
    _handshake(x, rng)
    for t in range(2, n):
        beacon = t % 2 == 0
        x[t, ACK] = 1
        x[t, PSH] = 1
        if beacon:
            x[t, [LENGTH, DIRECTION, IAT]] = (120, FORWARD, 2.0 + rng.uniform(-0.05, 0.05))
        else:
            x[t, [LENGTH, DIRECTION, IAT]] = (250, REVERSE, rng.uniform(0.01, 0.03))
    return x


def _one(rng, kind: str, cfg: SynthConfig) -> np.ndarray:
    sport = int(rng.integers(32768, 61000))
    n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    if kind == "benign":
        if rng.random() < 0.25:
            return _dns(rng, sport)
        return _web(rng, n, sport, 80 if rng.random() < 0.5 else 443)
    if kind == "backdoor":
        return _web(rng, n, sport, int(rng.choice(BACKDOOR_PORTS)))
    if kind == "dos":
        return _dos(rng, n, sport)
    if kind == "scan":
        return _scan(rng, sport)
    if kind == "slow":
        return _slow(rng, n, sport)
    if kind == "botnet":
        return _botnet(rng, n, sport)
    raise DataError(f"unknown flow type {kind!r}")


def synth_generate(config: SynthConfig = None, seed: int = 0) -> Dataset:
    """Generate a deterministic synthetic dataset; flows come out in shuffled order."""
    cfg = config or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    raw = []
    for kind in FLOW_TYPES:
        for _ in range(int(cfg.counts.get(kind, 0))):
            raw.append((kind, _one(rng, kind, cfg)))
    order = rng.permutation(len(raw))
    flows = []
    for i, j in enumerate(order):
        kind, feats = raw[j]
        proto = int(feats[0, PROTOCOL])
        key = (f"10.{(i >> 8) & 255}.{i & 255}.{1 + (i >> 16)}", f"192.168.{(i >> 8) & 255}.{i & 255}",
               int(feats[0, SRC_PORT]), int(feats[0, DST_PORT]), proto)
        flows.append(
            Flow(
                key=key,
                features=feats,
                label=0 if kind == "benign" else 1,
                attack_type=kind,
                fully_controlled=kind in FULLY_CONTROLLED,
                flow_id=f"synth{i:05d}",
            )
        )
    return Dataset(flows, canonical_schema(), "unsplit")
