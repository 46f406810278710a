# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the LSTM unroll and the MLP SGD epoch.

Same contracts as ``_fallback``; matrix products go through BLAS dgemm via
scipy's Cython bindings, the per-step and per-batch loops run in C.
"""

import numpy as np
from libc.math cimport exp, tanh, log
from scipy.linalg.cython_blas cimport dgemm


cdef inline void _gemm(bint ta, bint tb, int M, int N, int K, double alpha,
                       const double* A, int lda, const double* B, int ldb,
                       double beta, double* C, int ldc) nogil:
    # row-major C = alpha*op(A)*op(B) + beta*C via column-major dgemm on transposes
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    if M == 0 or N == 0:
        return
    dgemm(&cb, &ca, &N, &M, &K, &alpha, <double*>B, &ldb, <double*>A, &lda, &beta, C, &ldc)


cdef inline double _sigmoid(double z) nogil:
    cdef double ez
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    ez = exp(z)
    return ez / (1.0 + ez)


def lstm_seq_forward(X, Wx, Wh, b):
    cdef const double[:, :, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] wx = np.ascontiguousarray(Wx, dtype=np.float64)
    cdef const double[:, ::1] wh = np.ascontiguousarray(Wh, dtype=np.float64)
    cdef const double[::1] bb = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t E = x.shape[0], B = x.shape[1], n_in = x.shape[2]
    cdef Py_ssize_t H = wh.shape[0], H4 = 4 * H
    Hs_a = np.empty((E, B, H))
    Cs_a = np.empty((E, B, H))
    G_a = np.empty((E, B, H4))
    cdef double[:, :, ::1] hs = Hs_a
    cdef double[:, :, ::1] cs = Cs_a
    cdef double[:, :, ::1] g = G_a
    cdef Py_ssize_t t, r, j
    cdef double iv, fv, gv, ov, cprev, cv
    if E == 0 or B == 0:
        return Hs_a, Cs_a, G_a
    with nogil:
        for t in range(E):
            for r in range(B):
                for j in range(H4):
                    g[t, r, j] = bb[j]
            _gemm(False, False, <int>B, <int>H4, <int>n_in, 1.0, &x[t, 0, 0], <int>n_in,
                  &wx[0, 0], <int>H4, 1.0, &g[t, 0, 0], <int>H4)
            if t > 0:
                _gemm(False, False, <int>B, <int>H4, <int>H, 1.0, &hs[t - 1, 0, 0], <int>H,
                      &wh[0, 0], <int>H4, 1.0, &g[t, 0, 0], <int>H4)
            for r in range(B):
                for j in range(H):
                    iv = _sigmoid(g[t, r, j])
                    fv = _sigmoid(g[t, r, H + j])
                    gv = tanh(g[t, r, 2 * H + j])
                    ov = _sigmoid(g[t, r, 3 * H + j])
                    cprev = cs[t - 1, r, j] if t > 0 else 0.0
                    cv = fv * cprev + iv * gv
                    cs[t, r, j] = cv
                    hs[t, r, j] = ov * tanh(cv)
                    g[t, r, j] = iv
                    g[t, r, H + j] = fv
                    g[t, r, 2 * H + j] = gv
                    g[t, r, 3 * H + j] = ov
    return Hs_a, Cs_a, G_a


def lstm_seq_backward(X, Wx, Wh, Hs, Cs, G, dHs):
    cdef const double[:, :, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] wx = np.ascontiguousarray(Wx, dtype=np.float64)
    cdef const double[:, ::1] wh = np.ascontiguousarray(Wh, dtype=np.float64)
    cdef const double[:, :, ::1] hs = np.ascontiguousarray(Hs, dtype=np.float64)
    cdef const double[:, :, ::1] cs = np.ascontiguousarray(Cs, dtype=np.float64)
    cdef const double[:, :, ::1] g = np.ascontiguousarray(G, dtype=np.float64)
    cdef const double[:, :, ::1] dhs = np.ascontiguousarray(dHs, dtype=np.float64)
    cdef Py_ssize_t E = x.shape[0], B = x.shape[1], n_in = x.shape[2]
    cdef Py_ssize_t H = wh.shape[0], H4 = 4 * H
    dWx_a = np.zeros((n_in, H4))
    dWh_a = np.zeros((H, H4))
    db_a = np.zeros(H4)
    dX_a = np.empty((E, B, n_in))
    cdef double[:, ::1] dwx = dWx_a
    cdef double[:, ::1] dwh = dWh_a
    cdef double[::1] db = db_a
    cdef double[:, :, ::1] dx = dX_a
    cdef double[:, ::1] da = np.empty((max(B, 1), H4))
    cdef double[:, ::1] dh_next = np.zeros((max(B, 1), H))
    cdef double[:, ::1] dc_next = np.zeros((max(B, 1), H))
    cdef Py_ssize_t t, r, j
    cdef double iv, fv, gv, ov, tc, dh, dc, cprev
    if E == 0 or B == 0:
        return dWx_a, dWh_a, db_a, dX_a
    with nogil:
        for t in range(E - 1, -1, -1):
            for r in range(B):
                for j in range(H):
                    iv = g[t, r, j]
                    fv = g[t, r, H + j]
                    gv = g[t, r, 2 * H + j]
                    ov = g[t, r, 3 * H + j]
                    cprev = cs[t - 1, r, j] if t > 0 else 0.0
                    tc = tanh(cs[t, r, j])
                    dh = dhs[t, r, j] + dh_next[r, j]
                    dc = dc_next[r, j] + dh * ov * (1.0 - tc * tc)
                    da[r, j] = dc * gv * iv * (1.0 - iv)
                    da[r, H + j] = dc * cprev * fv * (1.0 - fv)
                    da[r, 2 * H + j] = dc * iv * (1.0 - gv * gv)
                    da[r, 3 * H + j] = dh * tc * ov * (1.0 - ov)
                    dc_next[r, j] = dc * fv
            _gemm(True, False, <int>n_in, <int>H4, <int>B, 1.0, &x[t, 0, 0], <int>n_in,
                  &da[0, 0], <int>H4, 1.0, &dwx[0, 0], <int>H4)
            if t > 0:
                _gemm(True, False, <int>H, <int>H4, <int>B, 1.0, &hs[t - 1, 0, 0], <int>H,
                      &da[0, 0], <int>H4, 1.0, &dwh[0, 0], <int>H4)
            for r in range(B):
                for j in range(H4):
                    db[j] += da[r, j]
            _gemm(False, True, <int>B, <int>n_in, <int>H4, 1.0, &da[0, 0], <int>H4,
                  &wx[0, 0], <int>H4, 0.0, &dx[t, 0, 0], <int>n_in)
            _gemm(False, True, <int>B, <int>H, <int>H4, 1.0, &da[0, 0], <int>H4,
                  &wh[0, 0], <int>H4, 0.0, &dh_next[0, 0], <int>H)
    return dWx_a, dWh_a, db_a, dX_a


def mlp_sgd_epoch(values, dims, codes, X, y, order, Py_ssize_t batch_size, double lr):
    out = np.array(values, dtype=np.float64, copy=True)
    cdef double[::1] p = out
    cdef const Py_ssize_t[::1] d = np.ascontiguousarray(dims, dtype=np.intp)
    cdef const Py_ssize_t[::1] code = np.ascontiguousarray(codes, dtype=np.intp)
    cdef const double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef const Py_ssize_t[::1] yy = np.ascontiguousarray(y, dtype=np.intp)
    cdef const Py_ssize_t[::1] ordr = np.ascontiguousarray(order, dtype=np.intp)
    cdef Py_ssize_t L = d.shape[0] - 1
    cdef Py_ssize_t n = ordr.shape[0]
    cdef Py_ssize_t maxb = min(batch_size, n) if n > 0 else 1
    cdef Py_ssize_t k, maxd = 0, total_act = 0, total_pre = 0
    for k in range(L + 1):
        maxd = max(maxd, d[k])
        total_act += maxb * d[k]
        if k > 0:
            total_pre += maxb * d[k]
    cdef Py_ssize_t[::1] woff = np.empty(L, dtype=np.intp)
    cdef Py_ssize_t[::1] boff = np.empty(L, dtype=np.intp)
    cdef Py_ssize_t[::1] aoff = np.empty(L + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] poff = np.empty(max(L, 1), dtype=np.intp)
    cdef Py_ssize_t off = 0
    for k in range(L):
        woff[k] = off
        off += d[k] * d[k + 1]
        boff[k] = off
        off += d[k + 1]
    if off != p.shape[0]:
        raise ValueError("parameter vector does not match dims")
    off = 0
    for k in range(L + 1):
        aoff[k] = off
        off += maxb * d[k]
    off = 0
    for k in range(L):
        poff[k] = off
        off += maxb * d[k + 1]
    cdef double[::1] act = np.empty(max(total_act, 1))
    cdef double[::1] pre = np.empty(max(total_pre, 1))
    cdef double[::1] dz = np.empty(maxb * maxd)
    cdef double[::1] dz2 = np.empty(maxb * maxd)
    cdef double* dzp
    cdef double* dzq
    cdef double* tmp
    cdef Py_ssize_t start, m, r, j, C = d[L], nb = 0, row, din, dout
    cdef double total = 0.0, zmax, s, v, lse
    with nogil:
        start = 0
        while start < n:
            m = min(batch_size, n - start)
            din = d[0]
            for r in range(m):
                row = ordr[start + r]
                for j in range(din):
                    act[aoff[0] + r * din + j] = x[row, j]
            for k in range(L):
                din = d[k]
                dout = d[k + 1]
                for r in range(m):
                    for j in range(dout):
                        pre[poff[k] + r * dout + j] = p[boff[k] + j]
                _gemm(False, False, <int>m, <int>dout, <int>din, 1.0, &act[aoff[k]], <int>din,
                      &p[woff[k]], <int>dout, 1.0, &pre[poff[k]], <int>dout)
                for r in range(m * dout):
                    v = pre[poff[k] + r]
                    if code[k] == 1:
                        v = v if v > 0.0 else 0.0
                    elif code[k] == 2:
                        v = tanh(v)
                    act[aoff[k + 1] + r] = v
            dzp = &dz[0]
            dzq = &dz2[0]
            s = 0.0
            for r in range(m):
                zmax = act[aoff[L] + r * C]
                for j in range(1, C):
                    if act[aoff[L] + r * C + j] > zmax:
                        zmax = act[aoff[L] + r * C + j]
                lse = 0.0
                for j in range(C):
                    lse += exp(act[aoff[L] + r * C + j] - zmax)
                lse = log(lse)
                for j in range(C):
                    v = act[aoff[L] + r * C + j] - zmax - lse
                    dzp[r * C + j] = exp(v)
                    if j == yy[ordr[start + r]]:
                        s += v
                        dzp[r * C + j] -= 1.0
                for j in range(C):
                    dzp[r * C + j] /= m
            total += -(s / m)
            nb += 1
            for k in range(L - 1, -1, -1):
                din = d[k]
                dout = d[k + 1]
                if code[k] == 1:
                    for r in range(m * dout):
                        if not (pre[poff[k] + r] > 0.0):
                            dzp[r] = 0.0
                elif code[k] == 2:
                    for r in range(m * dout):
                        v = act[aoff[k + 1] + r]
                        dzp[r] = dzp[r] * (1.0 - v * v)
                if k > 0:
                    _gemm(False, True, <int>m, <int>din, <int>dout, 1.0, dzp, <int>dout,
                          &p[woff[k]], <int>dout, 0.0, dzq, <int>din)
                _gemm(True, False, <int>din, <int>dout, <int>m, -lr, &act[aoff[k]], <int>din,
                      dzp, <int>dout, 1.0, &p[woff[k]], <int>dout)
                for j in range(dout):
                    v = 0.0
                    for r in range(m):
                        v += dzp[r * dout + j]
                    p[boff[k] + j] -= lr * v
                tmp = dzp
                dzp = dzq
                dzq = tmp
            start += m
    return out, (total / nb if nb else 0.0)
