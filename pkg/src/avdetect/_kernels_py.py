"""Pure numpy implementations of the hot loops.

Signatures and results match the compiled ``_ckernels`` module; this module is
used when the extension is not built or when ``AVDETECT_PURE_PYTHON`` is set.
"""
import numpy as np


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def gru_forward(gx, U):
    """Run a GRU over time from a zero initial state.

    Parameters
    ----------
    gx : ndarray, shape (T, B, 3h)
        Input projections ``x_t W + b`` with gate blocks ordered (z, r, n).
    U : ndarray, shape (h, 3h)
        Hidden-to-hidden weights in the same block order.

    Returns
    -------
    H, Z, R, C : ndarray, shape (T, B, h)
        Hidden states, update gates, reset gates and candidate states.
    """
    T, B, h3 = gx.shape
    h = h3 // 3
    Uzr = U[:, :2 * h]
    Un = U[:, 2 * h:]
    H = np.empty((T, B, h))
    Z = np.empty((T, B, h))
    R = np.empty((T, B, h))
    C = np.empty((T, B, h))
    hp = np.zeros((B, h))
    for t in range(T):
        g = gx[t]
        zr = _sigmoid(g[:, :2 * h] + hp @ Uzr)
        z = zr[:, :h]
        r = zr[:, h:]
        c = np.tanh(g[:, 2 * h:] + (r * hp) @ Un)
        hp = hp + z * (c - hp)
        H[t], Z[t], R[t], C[t] = hp, z, r, c
    return H, Z, R, C


def gru_backward(dH, H, Z, R, C, U):
    """Backpropagate through :func:`gru_forward`.

    ``dH`` holds the loss gradient with respect to every emitted hidden state.
    Returns the gradient with respect to ``gx`` and ``U``.
    """
    T, B, h = H.shape
    Uzr = U[:, :2 * h]
    Un = U[:, 2 * h:]
    dgx = np.empty((T, B, 3 * h))
    dU = np.zeros_like(U)
    dh = np.zeros((B, h))
    zero = np.zeros((B, h))
    for t in range(T - 1, -1, -1):
        hp = H[t - 1] if t > 0 else zero
        z, r, c = Z[t], R[t], C[t]
        dh = dh + dH[t]
        dan = dh * z * (1.0 - c * c)
        daz = dh * (c - hp) * z * (1.0 - z)
        drh = dan @ Un.T
        dar = drh * hp * r * (1.0 - r)
        dzr = np.concatenate([daz, dar], axis=1)
        dU[:, 2 * h:] += (r * hp).T @ dan
        dU[:, :2 * h] += hp.T @ dzr
        dh = dh * (1.0 - z) + drh * r + dzr @ Uzr.T
        dgx[t, :, :2 * h] = dzr
        dgx[t, :, 2 * h:] = dan
    return dgx, dU


def interval_iou(s1, e1, s2, e2):
    inter = min(e1, e2) - max(s1, s2)
    if inter <= 0.0:
        return 0.0
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union if union > 0.0 else 0.0


def soft_nms(starts, ends, scores, gaussian, iou_thresh, sigma, min_score):
    """Greedy (Soft-)NMS over 1-D segments.

    Returns the kept indices in selection order (non-increasing score) and
    their final scores.
    """
    n = len(scores)
    cur = np.array(scores, dtype=np.float64)
    alive = np.ones(n, dtype=bool)
    keep = []
    kept_scores = []
    for _ in range(n):
        masked = np.where(alive, cur, -np.inf)
        i = int(np.argmax(masked))
        if not alive[i]:
            break
        alive[i] = False
        keep.append(i)
        kept_scores.append(cur[i])
        for j in np.flatnonzero(alive):
            ov = interval_iou(starts[i], ends[i], starts[j], ends[j])
            if gaussian:
                cur[j] *= np.exp(-ov * ov / sigma)
            elif ov >= iou_thresh:
                alive[j] = False
    keep = np.array(keep, dtype=np.int64)
    kept_scores = np.array(kept_scores, dtype=np.float64)
    sel = kept_scores >= min_score
    return keep[sel], kept_scores[sel]
