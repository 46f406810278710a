"""Pure-numpy reference versions of the compiled kernels in ``_kernels.pyx``.

Both modules expose the same three functions with the same array contracts;
``backend`` picks one at import time.
"""

import numpy as np


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_seq_forward(X, Wx, Wh, b):
    """Unroll an LSTM over time-major input ``X`` of shape (E, B, In).

    Returns hidden states, cell states (both (E, B, H)) and activated gates
    (E, B, 4H) in i, f, g, o order. Initial state is zero.
    """
    E, B, _ = X.shape
    H = Wh.shape[0]
    Hs = np.empty((E, B, H))
    Cs = np.empty((E, B, H))
    G = np.empty((E, B, 4 * H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(E):
        z = X[t] @ Wx + h @ Wh + b
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        G[t, :, :H] = i
        G[t, :, H:2 * H] = f
        G[t, :, 2 * H:3 * H] = g
        G[t, :, 3 * H:] = o
        Hs[t] = h
        Cs[t] = c
    return Hs, Cs, G


def lstm_seq_backward(X, Wx, Wh, Hs, Cs, G, dHs):
    """Backpropagate ``dHs`` (E, B, H) through the unrolled LSTM."""
    E, B, n_in = X.shape
    H = Wh.shape[0]
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * H)
    dX = np.empty_like(X)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    zeros = np.zeros((B, H))
    da = np.empty((B, 4 * H))
    for t in range(E - 1, -1, -1):
        i = G[t, :, :H]
        f = G[t, :, H:2 * H]
        g = G[t, :, 2 * H:3 * H]
        o = G[t, :, 3 * H:]
        c_prev = Cs[t - 1] if t > 0 else zeros
        h_prev = Hs[t - 1] if t > 0 else zeros
        tc = np.tanh(Cs[t])
        dh = dHs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        da[:, :H] = dc * g * i * (1.0 - i)
        da[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        da[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        da[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dWx += X[t].T @ da
        dWh += h_prev.T @ da
        db += da.sum(axis=0)
        dX[t] = da @ Wx.T
        dh_next = da @ Wh.T
    return dWx, dWh, db, dX


def mlp_sgd_epoch(values, dims, codes, X, y, order, batch_size, lr):
    """One epoch of mini-batch SGD on softmax cross-entropy.

    ``values`` is the flat parameter array (W0, b0, W1, b1, ...); a new array
    is returned. Batches follow ``order``; the last batch may be short.
    Returns ``(new_values, mean_batch_loss)``.
    """
    values = np.array(values, dtype=np.float64, copy=True)
    L = len(dims) - 1
    Ws, bs = [], []
    off = 0
    for k in range(L):
        n = dims[k] * dims[k + 1]
        Ws.append(values[off:off + n].reshape(dims[k], dims[k + 1]))
        off += n
        bs.append(values[off:off + dims[k + 1]])
        off += dims[k + 1]
    n_samples = order.shape[0]
    total = 0.0
    n_batches = 0
    for start in range(0, n_samples, batch_size):
        idx = order[start:start + batch_size]
        m = idx.shape[0]
        a = X[idx]
        acts = [a]
        pres = []
        for k in range(L):
            z = a @ Ws[k] + bs[k]
            if codes[k] == 1:
                a = np.maximum(z, 0.0)
            elif codes[k] == 2:
                a = np.tanh(z)
            else:
                a = z
            pres.append(z)
            acts.append(a)
        logits = acts[-1]
        zmax = logits.max(axis=1, keepdims=True)
        shifted = logits - zmax
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - lse
        yb = y[idx]
        total += -logp[np.arange(m), yb].mean()
        n_batches += 1
        dz = np.exp(logp)
        dz[np.arange(m), yb] -= 1.0
        dz /= m
        for k in range(L - 1, -1, -1):
            if codes[k] == 1:
                dz = dz * (pres[k] > 0.0)
            elif codes[k] == 2:
                dz = dz * (1.0 - acts[k + 1] * acts[k + 1])
            gW = acts[k].T @ dz
            gb = dz.sum(axis=0)
            if k > 0:
                dz = dz @ Ws[k].T
            Ws[k] -= lr * gW
            bs[k] -= lr * gb
    return values, (total / n_batches if n_batches else 0.0)
