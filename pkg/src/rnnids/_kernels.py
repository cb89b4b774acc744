"""Per-layer LSTM recurrences on time-major arrays.

The backward recurrence is compiled with numba when it is importable (set
``RNNIDS_NO_NUMBA=1`` to force the numpy version); its per-step elementwise
work is tiny, so Python overhead dominates without compilation.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.special import expit


def layer_forward(pre_x: np.ndarray, Wh: np.ndarray) -> tuple:
    """Gate activations, cells, hiddens and tanh(cells) for one layer.

    Every gate is evaluated as ``1 / (1 + exp(-s * pre))``: ``s = 1`` for the
    sigmoid gates, and ``s = 2`` for the candidate gate, which is then mapped
    through ``2 * sigma - 1 = tanh``. One vectorized exp per step is much
    cheaper than separate sigmoid and tanh calls.
    """
    n_steps, n_batch, four_h = pre_x.shape
    H = four_h // 4
    gates = np.empty((n_steps, n_batch, four_h))
    c = np.zeros((n_steps + 1, n_batch, H))
    h = np.zeros((n_steps + 1, n_batch, H))
    tc = np.empty((n_steps, n_batch, H))
    scale = np.full(four_h, -1.0)
    scale[2 * H : 3 * H] = -2.0
    Wh_s = Wh * scale
    pre_s = pre_x * scale
    with np.errstate(over="ignore"):
        for t in range(n_steps):
            g = gates[t]
            np.dot(h[t], Wh_s, out=g)
            g += pre_s[t]
            np.exp(g, out=g)
            g += 1.0
            np.reciprocal(g, out=g)
            cand = g[:, 2 * H : 3 * H]
            cand *= 2.0
            cand -= 1.0
            np.multiply(g[:, H : 2 * H], c[t], out=c[t + 1])
            c[t + 1] += g[:, :H] * cand
            np.tanh(c[t + 1], out=tc[t])
            np.multiply(g[:, 3 * H :], tc[t], out=h[t + 1])
    return gates, c, h, tc


def layer_forward_reference(pre_x: np.ndarray, Wh: np.ndarray) -> tuple:
    n_steps, n_batch, four_h = pre_x.shape
    H = four_h // 4
    gates = np.empty((n_steps, n_batch, four_h))
    c = np.zeros((n_steps + 1, n_batch, H))
    h = np.zeros((n_steps + 1, n_batch, H))
    tc = np.empty((n_steps, n_batch, H))
    for t in range(n_steps):
        pre = pre_x[t] + h[t] @ Wh
        g = gates[t]
        g[:, : 2 * H] = expit(pre[:, : 2 * H])
        g[:, 2 * H : 3 * H] = np.tanh(pre[:, 2 * H : 3 * H])
        g[:, 3 * H :] = expit(pre[:, 3 * H :])
        c[t + 1] = g[:, H : 2 * H] * c[t] + g[:, :H] * g[:, 2 * H : 3 * H]
        tc[t] = np.tanh(c[t + 1])
        h[t + 1] = g[:, 3 * H :] * tc[t]
    return gates, c, h, tc


def layer_backward_numpy(dh_in, gates, c, tc, Wh_T) -> np.ndarray:
    n_steps, n_batch, H = dh_in.shape
    dpre = np.empty((n_steps, n_batch, 4 * H))
    dh_next = np.zeros((n_batch, H))
    dc_next = np.zeros((n_batch, H))
    for t in range(n_steps - 1, -1, -1):
        g = gates[t]
        i, f, gg, o = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
        dh = dh_in[t] + dh_next
        dc = dh * o * (1.0 - tc[t] ** 2) + dc_next
        d = dpre[t]
        d[:, :H] = dc * gg * i * (1.0 - i)
        d[:, H : 2 * H] = dc * c[t] * f * (1.0 - f)
        d[:, 2 * H : 3 * H] = dc * i * (1.0 - gg**2)
        d[:, 3 * H :] = dh * tc[t] * o * (1.0 - o)
        dc_next = dc * f
        dh_next = d @ Wh_T
    return dpre


def _compile():
    import numba

    @numba.njit(cache=True)
    def layer_backward(dh_in, gates, c, tc, Wh_T):
        n_steps, n_batch, H = dh_in.shape
        dpre = np.empty((n_steps, n_batch, 4 * H))
        dh_next = np.zeros((n_batch, H))
        dc_next = np.zeros((n_batch, H))
        for t in range(n_steps - 1, -1, -1):
            for b in range(n_batch):
                for k in range(H):
                    gi = gates[t, b, k]
                    gf = gates[t, b, H + k]
                    gg = gates[t, b, 2 * H + k]
                    go = gates[t, b, 3 * H + k]
                    th = tc[t, b, k]
                    dh = dh_in[t, b, k] + dh_next[b, k]
                    dc = dh * go * (1.0 - th * th) + dc_next[b, k]
                    dpre[t, b, k] = dc * gg * gi * (1.0 - gi)
                    dpre[t, b, H + k] = dc * c[t, b, k] * gf * (1.0 - gf)
                    dpre[t, b, 2 * H + k] = dc * gi * (1.0 - gg * gg)
                    dpre[t, b, 3 * H + k] = dh * th * go * (1.0 - go)
                    dc_next[b, k] = dc * gf
            dh_next = np.dot(dpre[t], Wh_T)
        return dpre

    return layer_backward


layer_backward = layer_backward_numpy
BACKEND = "numpy"
if os.environ.get("RNNIDS_NO_NUMBA", "") != "1":
    try:
        layer_backward = _compile()
        BACKEND = "numba"
    except ImportError:
        pass
