# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled GRU recurrence and Soft-NMS loops.

Mirrors ``_kernels_py`` exactly in signature. Matrix products go through the
BLAS exported by scipy so results agree with the numpy path to rounding.
"""
import numpy as np

from libc.math cimport exp, tanh, fabs
from scipy.linalg.cython_blas cimport dgemm


cdef inline void mm(bint ta, bint tb, int m, int n, int k, double alpha,
                    double* A, int lda, double* B, int ldb,
                    double beta, double* C, int ldc) noexcept nogil:
    # row-major C[m,n] = alpha * op(A) op(B) + beta * C, via the column-major
    # identity C^T = op(B)^T op(A)^T
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    dgemm(&cb, &ca, &n, &m, &k, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


cdef inline double sigm(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def gru_forward(gx_in, U_in):
    cdef double[:, :, ::1] gx = np.ascontiguousarray(gx_in, dtype=np.float64)
    cdef double[:, ::1] U = np.ascontiguousarray(U_in, dtype=np.float64)
    cdef int T = gx.shape[0], B = gx.shape[1], h3 = gx.shape[2]
    cdef int h = h3 // 3, h2 = 2 * h
    H_arr = np.empty((T, B, h))
    Z_arr = np.empty((T, B, h))
    R_arr = np.empty((T, B, h))
    C_arr = np.empty((T, B, h))
    cdef double[:, :, ::1] H = H_arr
    cdef double[:, :, ::1] Z = Z_arr
    cdef double[:, :, ::1] R = R_arr
    cdef double[:, :, ::1] C = C_arr
    cdef double[:, ::1] hp = np.zeros((B, h))
    cdef double[:, ::1] rh = np.zeros((B, h))
    cdef double[:, ::1] buf = np.empty((B, h3))
    cdef int t, b, j
    cdef double z, r, c
    if T == 0 or B == 0 or h == 0:
        return H_arr, Z_arr, R_arr, C_arr
    with nogil:
        for t in range(T):
            for b in range(B):
                for j in range(h3):
                    buf[b, j] = gx[t, b, j]
            mm(False, False, B, h2, h, 1.0, &hp[0, 0], h, &U[0, 0], h3, 1.0, &buf[0, 0], h3)
            for b in range(B):
                for j in range(h):
                    z = sigm(buf[b, j])
                    r = sigm(buf[b, h + j])
                    Z[t, b, j] = z
                    R[t, b, j] = r
                    rh[b, j] = r * hp[b, j]
            mm(False, False, B, h, h, 1.0, &rh[0, 0], h, &U[0, h2], h3, 1.0, &buf[0, h2], h3)
            for b in range(B):
                for j in range(h):
                    c = tanh(buf[b, h2 + j])
                    C[t, b, j] = c
                    hp[b, j] = hp[b, j] + Z[t, b, j] * (c - hp[b, j])
                    H[t, b, j] = hp[b, j]
    return H_arr, Z_arr, R_arr, C_arr


def gru_backward(dH_in, H_in, Z_in, R_in, C_in, U_in):
    cdef double[:, :, ::1] dH = np.ascontiguousarray(dH_in, dtype=np.float64)
    cdef double[:, :, ::1] H = np.ascontiguousarray(H_in, dtype=np.float64)
    cdef double[:, :, ::1] Z = np.ascontiguousarray(Z_in, dtype=np.float64)
    cdef double[:, :, ::1] R = np.ascontiguousarray(R_in, dtype=np.float64)
    cdef double[:, :, ::1] C = np.ascontiguousarray(C_in, dtype=np.float64)
    cdef double[:, ::1] U = np.ascontiguousarray(U_in, dtype=np.float64)
    cdef int T = H.shape[0], B = H.shape[1], h = H.shape[2]
    cdef int h2 = 2 * h, h3 = 3 * h
    dgx_arr = np.empty((T, B, h3))
    dU_arr = np.zeros((h, h3))
    cdef double[:, :, ::1] dgx = dgx_arr
    cdef double[:, ::1] dU = dU_arr
    cdef double[:, ::1] dh = np.zeros((B, h))
    cdef double[:, ::1] hp = np.zeros((B, h))
    cdef double[:, ::1] rh = np.empty((B, h))
    cdef double[:, ::1] drh = np.empty((B, h))
    cdef int t, b, j
    cdef double z, r, c, hv, g
    if T == 0 or B == 0 or h == 0:
        return dgx_arr, dU_arr
    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                for j in range(h):
                    hv = H[t - 1, b, j] if t > 0 else 0.0
                    hp[b, j] = hv
                    z = Z[t, b, j]
                    c = C[t, b, j]
                    g = dh[b, j] + dH[t, b, j]
                    dh[b, j] = g
                    dgx[t, b, h2 + j] = g * z * (1.0 - c * c)
                    dgx[t, b, j] = g * (c - hv) * z * (1.0 - z)
                    rh[b, j] = R[t, b, j] * hv
            mm(False, True, B, h, h, 1.0, &dgx[t, 0, h2], h3, &U[0, h2], h3, 0.0, &drh[0, 0], h)
            for b in range(B):
                for j in range(h):
                    r = R[t, b, j]
                    dgx[t, b, h + j] = drh[b, j] * hp[b, j] * r * (1.0 - r)
            mm(True, False, h, h, B, 1.0, &rh[0, 0], h, &dgx[t, 0, h2], h3, 1.0, &dU[0, h2], h3)
            mm(True, False, h, h2, B, 1.0, &hp[0, 0], h, &dgx[t, 0, 0], h3, 1.0, &dU[0, 0], h3)
            for b in range(B):
                for j in range(h):
                    dh[b, j] = dh[b, j] * (1.0 - Z[t, b, j]) + drh[b, j] * R[t, b, j]
            mm(False, True, B, h, h2, 1.0, &dgx[t, 0, 0], h3, &U[0, 0], h3, 1.0, &dh[0, 0], h)
    return dgx_arr, dU_arr


cdef inline double iou1d(double s1, double e1, double s2, double e2) noexcept nogil:
    cdef double inter = (e1 if e1 < e2 else e2) - (s1 if s1 > s2 else s2)
    cdef double union
    if inter <= 0.0:
        return 0.0
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union if union > 0.0 else 0.0


def interval_iou(double s1, double e1, double s2, double e2):
    return iou1d(s1, e1, s2, e2)


def soft_nms(starts_in, ends_in, scores_in, bint gaussian, double iou_thresh,
             double sigma, double min_score):
    cdef double[::1] s = np.ascontiguousarray(starts_in, dtype=np.float64)
    cdef double[::1] e = np.ascontiguousarray(ends_in, dtype=np.float64)
    cur_arr = np.array(scores_in, dtype=np.float64)
    cdef double[::1] cur = cur_arr
    cdef Py_ssize_t n = cur.shape[0]
    alive_arr = np.ones(n, dtype=np.uint8)
    cdef unsigned char[::1] alive = alive_arr
    keep_arr = np.empty(n, dtype=np.int64)
    kept_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] keep = keep_arr
    cdef double[::1] kept = kept_arr
    cdef Py_ssize_t it, i, j, best, m = 0
    cdef double bs = 0.0, ov
    with nogil:
        for it in range(n):
            best = -1
            for i in range(n):
                if alive[i] and (best < 0 or cur[i] > bs):
                    best = i
                    bs = cur[i]
            if best < 0:
                break
            alive[best] = 0
            keep[m] = best
            kept[m] = cur[best]
            m += 1
            for j in range(n):
                if not alive[j]:
                    continue
                ov = iou1d(s[best], e[best], s[j], e[j])
                if gaussian:
                    cur[j] = cur[j] * exp(-ov * ov / sigma)
                elif ov >= iou_thresh:
                    alive[j] = 0
    keep_arr = keep_arr[:m]
    kept_arr = kept_arr[:m]
    sel = kept_arr >= min_score
    return keep_arr[sel], kept_arr[sel]
