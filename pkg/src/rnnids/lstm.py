"""Stacked LSTM with a scalar logit head, written directly against numpy.

Everything runs in float64. Batches are time-padded: flow ``b`` occupies
steps ``0 .. lengths[b]-1`` and padding only ever follows real steps, so
padded positions never influence the outputs or gradients of real steps
(the recurrence is causal and padded steps receive zero upstream gradient).

Gate layout inside every layer's weight matrix is ``[i, f, g, o]`` along the
column axis, each block ``H`` wide. Rows ``0 .. in_dim-1`` multiply the layer
input, rows ``in_dim ..`` multiply the previous hidden state.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from ._kernels import layer_backward, layer_forward

FORMAT_VERSION = 1
MAGIC = b"RNNIDSM\x00"
PROB_CLAMP = 1e-7

OBJECTIVES = ("loss", "logit_final", "logit_step")


@dataclass
class ModelParams:
    weights: list  # per layer, (in_dim + H, 4H)
    biases: list  # per layer, (4H,)
    head_w: np.ndarray  # (H,)
    head_b: np.ndarray  # (1,)
    meta: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def hidden(self) -> int:
        return self.head_w.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0] - self.hidden

    def arrays(self) -> list:
        """Parameter arrays in canonical order: W0, b0, W1, b1, ..., head_w, head_b."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        out.extend([self.head_w, self.head_b])
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], meta: Optional[dict] = None) -> "ModelParams":
        arrays = list(arrays)
        n_layers = (len(arrays) - 2) // 2
        return cls(
            weights=arrays[0 : 2 * n_layers : 2],
            biases=arrays[1 : 2 * n_layers : 2],
            head_w=arrays[-2],
            head_b=arrays[-1],
            meta=dict(meta or {}),
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays([a.copy() for a in self.arrays()], json.loads(json.dumps(self.meta)))

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.array(vec[pos : pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        return ModelParams.from_arrays(out, self.meta)


def init_params(n_layers: int, hidden: int, input_dim: int, seed: int) -> ModelParams:
    if min(n_layers, hidden, input_dim) < 1:
        raise ValueError(f"dimensions must be >= 1, got L={n_layers} H={hidden} D={input_dim}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(hidden)
    weights, biases = [], []
    in_dim = input_dim
    for _ in range(n_layers):
        weights.append(rng.uniform(-bound, bound, size=(in_dim + hidden, 4 * hidden)))
        b = rng.uniform(-bound, bound, size=4 * hidden)
        b[hidden : 2 * hidden] = 1.0  # forget gate
        biases.append(b)
        in_dim = hidden
    head_w = rng.uniform(-bound, bound, size=hidden)
    head_b = rng.uniform(-bound, bound, size=1)
    meta = {"seed": int(seed), "layers": n_layers, "hidden": hidden, "input_dim": input_dim}
    return ModelParams(weights, biases, head_w, head_b, meta)


@dataclass
class ForwardTrace:
    """Everything the backward pass needs. Arrays are time-major internally."""

    inputs: np.ndarray  # (T, B, D)
    lengths: np.ndarray  # (B,)
    layer_inputs: list  # per layer (T, B, in_dim)
    gates: list  # per layer (T, B, 4H), post-activation
    cells: list  # per layer (T+1, B, H), cells[0] = 0
    hiddens: list  # per layer (T+1, B, H), hiddens[0] = 0
    tanh_cells: list  # per layer (T, B, H)
    logits: np.ndarray  # (B, T)
    params: ModelParams = None

    @property
    def batch(self) -> int:
        return self.logits.shape[0]

    @property
    def steps(self) -> int:
        return self.logits.shape[1]

    @property
    def confidences(self) -> np.ndarray:
        return expit(self.logits)

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.steps)[None, :] < self.lengths[:, None]

    def final_logits(self) -> np.ndarray:
        return self.logits[np.arange(self.batch), self.lengths - 1]

    def flow_logits(self, b: int) -> np.ndarray:
        return self.logits[b, : self.lengths[b]]


def _as_batch(x: np.ndarray, lengths) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (T, D) or (B, T, D) input, got shape {x.shape}")
    if lengths is None:
        lengths = np.full(x.shape[0], x.shape[1], dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (x.shape[0],) or lengths.min() < 1 or lengths.max() > x.shape[1]:
        raise ValueError("lengths must be one value in [1, T] per batch entry")
    return x, lengths


def forward(params: ModelParams, x: np.ndarray, lengths=None) -> ForwardTrace:
    """Run the stacked LSTM on one flow ``(T, D)`` or a padded batch ``(B, T, D)``."""
    x, lengths = _as_batch(x, lengths)
    if x.shape[2] != params.input_dim:
        raise ValueError(f"input width {x.shape[2]} does not match model input width {params.input_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value in model input")
    inp = np.ascontiguousarray(x.transpose(1, 0, 2))
    trace = ForwardTrace(inp, lengths, [], [], [], [], [], None, params)
    for W, b in zip(params.weights, params.biases):
        in_dim = inp.shape[2]
        Wx, Wh = W[:in_dim], W[in_dim:]
        pre_x = inp @ Wx + b
        gates, c, h, tc = layer_forward(np.ascontiguousarray(pre_x), np.ascontiguousarray(Wh))
        trace.layer_inputs.append(inp)
        trace.gates.append(gates)
        trace.cells.append(c)
        trace.hiddens.append(h)
        trace.tanh_cells.append(tc)
        inp = h[1:]
    trace.logits = np.ascontiguousarray((inp @ params.head_w + params.head_b[0]).T)
    return trace


def _check_labels(trace: ForwardTrace, labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim == 0:
        y = np.full((trace.batch, trace.steps), float(y))
    elif y.ndim == 1 and trace.batch == 1 and y.shape[0] == trace.steps:
        y = y[None]
    elif y.ndim == 1 and y.shape[0] == trace.batch:
        y = np.repeat(y[:, None], trace.steps, axis=1)
    if y.shape != (trace.batch, trace.steps):
        raise ValueError(f"labels of shape {np.shape(labels)} do not match trace {trace.batch}x{trace.steps}")
    valid = y[trace.mask]
    if not np.all((valid == 0.0) | (valid == 1.0)):
        raise ValueError("labels must be 0 or 1")
    return y


def flow_losses(trace: ForwardTrace, labels) -> np.ndarray:
    """Mean per-step binary cross-entropy of every flow in the batch, shape (B,)."""
    y = _check_labels(trace, labels)
    p = np.clip(trace.confidences, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ce = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    ce = np.where(trace.mask, ce, 0.0)
    return ce.sum(axis=1) / trace.lengths


def loss(trace: ForwardTrace, labels) -> float:
    """Sum over the batch of per-flow mean BCE; for a single flow this is its mean BCE."""
    return float(flow_losses(trace, labels).sum())


def loss_logit_grad(trace: ForwardTrace, labels) -> np.ndarray:
    # derivative of the unclamped BCE, see decisions: keeps attacks alive on saturated flows
    y = _check_labels(trace, labels)
    g = (trace.confidences - y) / trace.lengths[:, None]
    return np.where(trace.mask, g, 0.0)


def backward(trace: ForwardTrace, dlogits: np.ndarray, need_params: bool = True) -> tuple:
    """Reverse-mode pass for an arbitrary upstream gradient on the logits.

    Returns ``(param_grads, input_grads)`` where ``param_grads`` follows
    :meth:`ModelParams.arrays` order (``None`` when ``need_params`` is false)
    and ``input_grads`` has the batch-major shape ``(B, T, D)``.
    """
    params = trace.params
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != trace.logits.shape:
        raise ValueError("upstream gradient must match the logits shape")
    dz = np.ascontiguousarray(dlogits.T)  # (T, B)
    top_h = trace.hiddens[-1][1:]
    grads_rev = []
    if need_params:
        grads_rev.append(np.array([dz.sum()]))
        grads_rev.append(np.tensordot(dz, top_h, axes=([0, 1], [0, 1])))
    dh_in = dz[:, :, None] * params.head_w
    for layer in reversed(range(params.n_layers)):
        W = params.weights[layer]
        inp = trace.layer_inputs[layer]
        in_dim = inp.shape[2]
        Wx_T = W[:in_dim].T
        Wh_T = W[in_dim:].T
        gates, c, tc = trace.gates[layer], trace.cells[layer], trace.tanh_cells[layer]
        dpre = layer_backward(np.ascontiguousarray(dh_in), gates, c, tc, np.ascontiguousarray(Wh_T))
        if need_params:
            h_prev = trace.hiddens[layer][:-1]
            dW = np.concatenate(
                [
                    np.tensordot(inp, dpre, axes=([0, 1], [0, 1])),
                    np.tensordot(h_prev, dpre, axes=([0, 1], [0, 1])),
                ]
            )
            grads_rev.append(dpre.sum(axis=(0, 1)))
            grads_rev.append(dW)
        dh_in = dpre @ Wx_T
    param_grads = list(reversed(grads_rev)) if need_params else None
    return param_grads, np.ascontiguousarray(dh_in.transpose(1, 0, 2))


def backward_params(trace: ForwardTrace, labels) -> list:
    """Exact gradient of :func:`loss` w.r.t. every parameter array."""
    grads, _ = backward(trace, loss_logit_grad(trace, labels), need_params=True)
    return grads


def objective_logit_grad(trace: ForwardTrace, objective: str, labels=None, step: Optional[int] = None) -> np.ndarray:
    if objective == "loss":
        if labels is None:
            raise ValueError("objective 'loss' needs labels")
        return loss_logit_grad(trace, labels)
    dz = np.zeros_like(trace.logits)
    if objective == "logit_final":
        dz[np.arange(trace.batch), trace.lengths - 1] = 1.0
    elif objective == "logit_step":
        if step is None or not 0 <= step < trace.steps:
            raise ValueError("objective 'logit_step' needs a step inside the trace")
        dz[:, step] = np.where(trace.lengths > step, 1.0, 0.0)
    else:
        raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    return dz


def backward_inputs(trace: ForwardTrace, objective: str = "loss", labels=None, step: Optional[int] = None) -> np.ndarray:
    """Gradient of a scalar objective w.r.t. every input entry, shape (B, T, D).

    ``objective`` is ``"loss"`` (needs ``labels``), ``"logit_final"`` (each
    flow's last real step) or ``"logit_step"`` (the logit at ``step``).
    """
    dz = objective_logit_grad(trace, objective, labels, step)
    _, dx = backward(trace, dz, need_params=False)
    return dx


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()], 0)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ModelParams, grads: Sequence[np.ndarray], state: AdamState, hyper: AdamHyper = AdamHyper()) -> tuple:
    """One bias-corrected Adam update. Inputs are left untouched."""
    arrays = params.arrays()
    if len(grads) != len(arrays) or any(g.shape != a.shape for g, a in zip(grads, arrays)):
        raise ValueError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise ValueError("non-finite gradient")
    t = state.t + 1
    b1, b2 = hyper.beta1, hyper.beta2
    new_arrays, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_arrays.append(a - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps))
        new_m.append(m)
        new_v.append(v)
    return ModelParams.from_arrays(new_arrays, params.meta), AdamState(new_m, new_v, t)


def serialize_model(params: ModelParams) -> bytes:
    """Binary container; layout documented in docs/formats.md."""
    arrays = params.arrays()
    header = {
        "layers": params.n_layers,
        "hidden": params.hidden,
        "input_dim": params.input_dim,
        "shapes": [list(a.shape) for a in arrays],
        "meta": params.meta,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    payload = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header_bytes)) + header_bytes + body
    return payload + struct.pack("<I", zlib.crc32(payload))


def deserialize_model(data: bytes, input_dim: Optional[int] = None) -> ModelParams:
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise ValueError("not a model file (bad magic bytes)")
    version, header_len = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version} (expected {FORMAT_VERSION})")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ValueError("model file is truncated or corrupted (checksum mismatch)")
    pos = len(MAGIC) + 8
    header = json.loads(data[pos : pos + header_len].decode("utf-8"))
    pos += header_len
    arrays = []
    for shape in header["shapes"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = data[pos : pos + 8 * n]
        if len(chunk) != 8 * n:
            raise ValueError("model file is truncated")
        arrays.append(np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape))
        pos += 8 * n
    if pos != len(data) - 4:
        raise ValueError("trailing bytes in model file")
    params = ModelParams.from_arrays(arrays, header["meta"])
    if params.n_layers != header["layers"] or params.hidden != header["hidden"] or params.input_dim != header["input_dim"]:
        raise ValueError("model header dimensions disagree with stored arrays")
    if input_dim is not None and params.input_dim != input_dim:
        raise ValueError(f"model input width {params.input_dim} does not match expected width {input_dim}")
    return params


# --- finite-difference verification -------------------------------------------------


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@dataclass
class GradCheckReport:
    seed: int
    layers: int
    hidden: int
    steps: int
    param_max_rel_err: float
    input_max_rel_err: float
    n_params: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return max(self.param_max_rel_err, self.input_max_rel_err) < self.tolerance


def grad_check(
    seed: int = 0,
    layers: int = 2,
    hidden: int = 4,
    steps: int = 5,
    input_dim: int = 15,
    eps: float = 1e-5,
    floor: float = 1e-6,
    tolerance: float = 1e-4,
    max_param_coords: Optional[int] = None,
    directions: int = 2,
) -> GradCheckReport:
    """Compare analytic gradients against central differences on a random tiny model.

    Every input coordinate is checked. Parameters are checked coordinate-wise
    (all of them, or a random subset of ``max_param_coords``) and along
    ``directions`` random unit directions, which covers the whole gradient
    vector at once.
    """
    rng = np.random.default_rng(seed)
    params = init_params(layers, hidden, input_dim, seed)
    # widen weights so the check is not dominated by near-linear regimes
    params = params.with_flat(params.flat() + rng.normal(0.0, 0.3, params.count()))
    x = rng.normal(size=(steps, input_dim))
    y = rng.integers(0, 2, size=steps).astype(np.float64)

    trace = forward(params, x)
    analytic = np.concatenate([g.ravel() for g in backward_params(trace, y)])
    base = params.flat()
    coords = np.arange(base.size)
    if max_param_coords is not None and max_param_coords < base.size:
        coords = np.sort(rng.choice(base.size, size=max_param_coords, replace=False))

    def at(vec):
        return loss(forward(params.with_flat(vec), x), y)

    numeric = np.empty(coords.size)
    for n, k in enumerate(coords):
        plus, minus = base.copy(), base.copy()
        plus[k] += eps
        minus[k] -= eps
        numeric[n] = (at(plus) - at(minus)) / (2 * eps)
    param_err = _rel_err(analytic[coords], numeric, floor)
    for _ in range(directions):
        v = rng.normal(size=base.size)
        v /= np.linalg.norm(v)
        num = (at(base + eps * v) - at(base - eps * v)) / (2 * eps)
        param_err = max(param_err, _rel_err(np.array([analytic @ v]), np.array([num]), floor))

    # all input perturbations go through one batched forward pass
    n_in = steps * input_dim
    shifted = np.repeat(x[None], 2 * n_in, axis=0)
    for k, idx in enumerate(np.ndindex(*x.shape)):
        shifted[2 * k][idx] += eps
        shifted[2 * k + 1][idx] -= eps
    fd_trace = forward(params, shifted)
    input_err = 0.0
    for objective in ("loss", "logit_final"):
        dx = backward_inputs(trace, objective, labels=y)[0]
        if objective == "loss":
            vals = flow_losses(fd_trace, np.broadcast_to(y, (2 * n_in, steps)))
        else:
            vals = fd_trace.logits[:, -1]
        num = ((vals[0::2] - vals[1::2]) / (2 * eps)).reshape(x.shape)
        input_err = max(input_err, _rel_err(dx, num, floor))
    return GradCheckReport(seed, layers, hidden, steps, param_err, input_err, base.size, tolerance)
