"""Single-layer LSTM: cell evaluation and a batched unroll with BPTT."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import backend
from ._fallback import _sigmoid
from .rng import as_generator
from .tensor import ParameterVector


def lstm_layout(n_in, hidden, prefix=""):
    return ((f"{prefix}Wx", (n_in, 4 * hidden)),
            (f"{prefix}Wh", (hidden, 4 * hidden)),
            (f"{prefix}b", (4 * hidden,)))


def init_lstm_blocks(n_in, hidden, rng) -> dict:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights; forget-gate bias shifted by +1."""
    gen = as_generator(rng)
    k = 1.0 / np.sqrt(hidden)
    b = gen.uniform(-k, k, 4 * hidden)
    b[hidden:2 * hidden] += 1.0
    return {"Wx": gen.uniform(-k, k, (n_in, 4 * hidden)),
            "Wh": gen.uniform(-k, k, (hidden, 4 * hidden)),
            "b": b}


def _blocks(params):
    if isinstance(params, ParameterVector):
        return params.unflatten()
    return params


def lstm_cell(x_t, h_prev, c_prev, params):
    """One LSTM step. Vectors or (batch, width) matrices are accepted.

    Gates are ordered input, forget, candidate, output.
    """
    blk = _blocks(params)
    Wx, Wh, b = blk["Wx"], blk["Wh"], blk["b"]
    H = Wh.shape[0]
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    if x_t.shape[-1] != Wx.shape[0] or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ShapeError("LSTM input/state widths do not match parameters")
    z = x_t @ Wx + h_prev @ Wh + b
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def lstm_forward(X, params, kernels=None):
    """Unroll over ``X`` of shape (batch, steps, n_in) from a zero state.

    Returns hidden states (batch, steps, H) and an opaque cache for
    :func:`lstm_backward`.
    """
    kern = kernels or backend
    blk = _blocks(params)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != blk["Wx"].shape[0]:
        raise ShapeError(f"expected (batch, steps, {blk['Wx'].shape[0]}) input, got {X.shape}")
    Xt = np.ascontiguousarray(X.transpose(1, 0, 2))
    Hs, Cs, G = kern.lstm_seq_forward(Xt, np.ascontiguousarray(blk["Wx"]),
                                      np.ascontiguousarray(blk["Wh"]), np.ascontiguousarray(blk["b"]))
    cache = (Xt, blk, Hs, Cs, G, kern)
    return Hs.transpose(1, 0, 2), cache


def lstm_backward(cache, dH):
    """Gradients of the LSTM blocks and the input given dL/dH (batch, steps, H)."""
    Xt, blk, Hs, Cs, G, kern = cache
    dHt = np.ascontiguousarray(np.asarray(dH, dtype=np.float64).transpose(1, 0, 2))
    dWx, dWh, db, dXt = kern.lstm_seq_backward(Xt, np.ascontiguousarray(blk["Wx"]),
                                               np.ascontiguousarray(blk["Wh"]), Hs, Cs, G, dHt)
    return {"Wx": dWx, "Wh": dWh, "b": db}, dXt.transpose(1, 0, 2)
