"""Per-modality bidirectional GRU encoders with a dense projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import (
    Tensor,
    _make,
    activation,
    concat_cols,
    concat_rows,
    dropout,
    hadamard,
    parameter,
    sigmoid,
    slice_cols,
    slice_rows,
    tanh,
)


@dataclass
class GruCellParams:
    """Packed GRU weights; gate blocks are ordered (update, reset, candidate).

    ``W`` is ``d_in x 3h``, ``U`` is ``h x 3h`` and ``b`` is ``1 x 3h``.
    """

    W: Tensor
    U: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.U.rows

    @property
    def input_width(self) -> int:
        return self.W.rows

    def tensors(self) -> list:
        return [self.W, self.U, self.b]


@dataclass
class ModalityEncoderParams:
    forward: GruCellParams
    backward: GruCellParams
    proj_W: Tensor
    proj_b: Tensor
    dropout: float = 0.3

    @property
    def input_width(self) -> int:
        return self.forward.input_width

    @property
    def proj_width(self) -> int:
        return self.proj_W.cols

    def tensors(self) -> list:
        return self.forward.tensors() + self.backward.tensors() + [self.proj_W, self.proj_b]


def glorot_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """``U[-s, s]`` with ``s = sqrt(6 / (fan_in + fan_out))``."""
    s = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-s, s, size=shape)


def orthogonal_init(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Matrix with orthonormal rows or columns (whichever is the shorter side)."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q.T if rows < cols else q


def init_gru_cell(d_in: int, hidden: int, rng: np.random.Generator) -> GruCellParams:
    # the recurrent matrix is orthogonal as a whole (h x 3h has orthonormal rows)
    return GruCellParams(
        W=parameter(glorot_uniform(rng, (d_in, 3 * hidden))),
        U=parameter(orthogonal_init(rng, (hidden, 3 * hidden))),
        b=parameter(np.zeros((1, 3 * hidden))),
    )


def init_modality_encoder(d_in: int, hidden: int, d_proj: int, rng: np.random.Generator,
                          dropout_rate: float = 0.3) -> ModalityEncoderParams:
    fwd = init_gru_cell(d_in, hidden, rng)
    bwd = init_gru_cell(d_in, hidden, rng)
    return ModalityEncoderParams(
        forward=fwd,
        backward=bwd,
        proj_W=parameter(glorot_uniform(rng, (2 * hidden, d_proj))),
        proj_b=parameter(np.zeros((1, d_proj))),
        dropout=dropout_rate,
    )


def gru_step(params: GruCellParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU update built from primitive tensor ops (rows are independent)."""
    h = params.hidden
    if x_t.cols != params.input_width or h_prev.cols != h or x_t.rows != h_prev.rows:
        raise ShapeError(
            f"gru_step: x {x_t.shape} / h {h_prev.shape} do not fit W {params.W.shape}, U {params.U.shape}"
        )
    gx = x_t @ params.W + params.b
    zr = sigmoid(slice_cols(gx, 0, 2 * h) + h_prev @ slice_cols(params.U, 0, 2 * h))
    z = slice_cols(zr, 0, h)
    r = slice_cols(zr, h, 2 * h)
    cand = tanh(slice_cols(gx, 2 * h, 3 * h) + hadamard(r, h_prev) @ slice_cols(params.U, 2 * h, 3 * h))
    return h_prev + hadamard(z, cand - h_prev)


def bigru(X: Tensor, fwd: GruCellParams, bwd: GruCellParams, n_steps: int) -> Tensor:
    """Fused bidirectional GRU over a stack of equal-length sequences.

    ``X`` holds ``B`` sequences of ``n_steps`` rows each, stacked sequence-major.
    Returns ``(B * n_steps) x 2h`` with the forward state in the left half and
    the backward state in the right half of every row. The recurrence runs in
    the active kernel backend as a single graph node.
    """
    d = fwd.input_width
    if X.cols != d or bwd.input_width != d:
        raise ShapeError(f"bigru: input {X.shape} does not match input width {d}")
    if n_steps < 1 or X.rows % n_steps:
        raise ShapeError(f"bigru: {X.rows} rows cannot be split into sequences of {n_steps}")
    if fwd.hidden != bwd.hidden:
        raise ShapeError("bigru: forward and backward hidden widths differ")
    h = fwd.hidden
    B = X.rows // n_steps
    xt = X.data.reshape(B, n_steps, d).transpose(1, 0, 2)
    xr = xt[::-1]
    Wf, Uf, bf = fwd.W.data, fwd.U.data, fwd.b.data
    Wb, Ub, bb = bwd.W.data, bwd.U.data, bwd.b.data
    sf = kernels.gru_forward(np.ascontiguousarray(xt @ Wf + bf), Uf)
    sb = kernels.gru_forward(np.ascontiguousarray(xr @ Wb + bb), Ub)
    out = np.concatenate([sf[0], sb[0][::-1]], axis=2).transpose(1, 0, 2).reshape(B * n_steps, 2 * h)

    def backward(g):
        G = g.reshape(B, n_steps, 2 * h).transpose(1, 0, 2)
        dgf, dUf = kernels.gru_backward(np.ascontiguousarray(G[:, :, :h]), *sf, Uf)
        dgb, dUb = kernels.gru_backward(np.ascontiguousarray(G[::-1, :, h:]), *sb, Ub)
        flat_f = dgf.reshape(-1, 3 * h)
        flat_b = dgb.reshape(-1, 3 * h)
        dWf = xt.reshape(-1, d).T @ flat_f
        dWb = xr.reshape(-1, d).T @ flat_b
        dxt = dgf @ Wf.T + (dgb @ Wb.T)[::-1]
        dX = dxt.transpose(1, 0, 2).reshape(B * n_steps, d)
        return (dX, dWf, dUf, flat_f.sum(axis=0, keepdims=True),
                dWb, dUb, flat_b.sum(axis=0, keepdims=True))

    parents = (X, fwd.W, fwd.U, fwd.b, bwd.W, bwd.U, bwd.b)
    return _make(np.ascontiguousarray(out), parents, "bigru", backward)


def bigru_reference(X: Tensor, fwd: GruCellParams, bwd: GruCellParams) -> Tensor:
    """Bidirectional GRU over one sequence, unrolled with :func:`gru_step`."""
    n = X.rows
    h = fwd.hidden
    hf = Tensor(np.zeros((1, h)))
    hb = Tensor(np.zeros((1, h)))
    fwd_states, bwd_states = [], [None] * n
    for t in range(n):
        hf = gru_step(fwd, slice_rows(X, t, t + 1), hf)
        fwd_states.append(hf)
    for t in range(n - 1, -1, -1):
        hb = gru_step(bwd, slice_rows(X, t, t + 1), hb)
        bwd_states[t] = hb
    return concat_cols([concat_rows(fwd_states), concat_rows(bwd_states)])


def project(params: ModalityEncoderParams, H: Tensor, training: bool, rng, act: str = "relu") -> Tensor:
    H = dropout(H, params.dropout, rng, training)
    P = activation(act, H @ params.proj_W + params.proj_b)
    return dropout(P, params.dropout, rng, training)


def encode_batch(params: ModalityEncoderParams, X: Tensor, n_steps: int, training: bool = False,
                 rng=None, act: str = "relu") -> Tensor:
    """Encode ``B`` stacked sequences of ``n_steps`` rows into ``(B * n_steps) x d_proj``."""
    return project(params, bigru(X, params.forward, params.backward, n_steps), training, rng, act)


def encode_modality(params: ModalityEncoderParams, X: Tensor, training: bool = False,
                    rng=None, act: str = "relu") -> Tensor:
    """Embed the ``N`` sequence feature vectors of one modality (``N x d_in`` -> ``N x d_proj``)."""
    if X.rows < 1:
        raise ShapeError("encode_modality: need at least one sequence")
    if X.cols != params.input_width:
        raise ShapeError(f"encode_modality: input width {X.cols} != encoder width {params.input_width}")
    return encode_batch(params, X, X.rows, training, rng, act)
