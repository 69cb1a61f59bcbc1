"""Attention fusion blocks over per-sequence modality embeddings.

``pair_attention`` is the contextual bi-modal block: every sequence of one
modality attends over all sequences of the partner modality, and the attended
result gates the receiving modality elementwise. ``mmms_ba_fuse`` applies it
to the three modality pairs and appends the raw embeddings as a residual.

Two ablation blocks are included. ``mmus_sa_block`` attends across the three
modalities of a single sequence. ``ms_sa_block`` attends across the sequences
of a single modality.

Blocks that mix information across sequences evaluate their inputs in a
canonical row order (lexicographic on the concatenated input rows) and map the
result back. Floating-point reductions then see the same operand order for any
joint row permutation, so permutation equivariance holds bit for bit rather
than to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import (
    Tensor,
    concat_cols,
    hadamard,
    mul,
    permute_rows,
    reshape,
    row_softmax,
    slice_cols,
    tensor_sum,
    transpose,
)

# Column order of the fused MMMS-BA representation; checkpoints depend on it.
PAIR_ORDER = (("V", "L"), ("A", "V"), ("A", "L"))
RESIDUAL_ORDER = ("V", "A", "L")


@dataclass
class PairAttentionTrace:
    M1: Tensor
    M2: Tensor
    K1: Tensor
    K2: Tensor
    O1: Tensor
    O2: Tensor
    A1: Tensor
    A2: Tensor
    fused: Tensor


def _same_shape(op, *xs):
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeError(f"{op}: inputs must share a shape, got {[y.shape for y in xs]}")


def pair_attention(Xp: Tensor, Xq: Tensor) -> PairAttentionTrace:
    _same_shape("pair_attention", Xp, Xq)
    M1 = Xp @ transpose(Xq)
    M2 = Xq @ transpose(Xp)
    K1 = row_softmax(M1)
    K2 = row_softmax(M2)
    O1 = K1 @ Xq
    O2 = K2 @ Xp
    A1 = hadamard(O1, Xp)
    A2 = hadamard(O2, Xq)
    return PairAttentionTrace(M1, M2, K1, K2, O1, O2, A1, A2, concat_cols([A1, A2]))


def canonical_order(tensors) -> np.ndarray:
    """Row order that sorts the concatenated rows of ``tensors`` lexicographically."""
    stacked = np.concatenate([t.data for t in tensors], axis=1)
    return np.lexsort(stacked.T[::-1])


def _in_canonical_order(fn, tensors):
    """Apply a row-equivariant ``fn`` to ``tensors`` in canonical row order."""
    order = canonical_order(tensors)
    if np.array_equal(order, np.arange(order.size)):
        return fn(*tensors)
    out = fn(*(permute_rows(t, order) for t in tensors))
    return permute_rows(out, np.argsort(order))


def pairs_for(modalities) -> list:
    """Attention pairs (in fused column order) available for a modality subset."""
    present = set(modalities)
    return [p for p in PAIR_ORDER if set(p) <= present]


def mmms_ba_fuse_subset(embeddings: dict) -> Tensor:
    """Pairwise contextual attention over the supplied modalities plus residual embeddings.

    ``embeddings`` maps modality keys ("V", "L", "A") to ``N x d`` tensors; at
    least two are required. With all three the width is ``9d``; with two it is
    ``4d``.
    """
    if len(embeddings) < 2:
        raise ShapeError("pairwise attention needs at least two modalities")
    _same_shape("mmms_ba_fuse", *embeddings.values())
    keys = [m for m in RESIDUAL_ORDER if m in embeddings]

    def fuse(*mats):
        emb = dict(zip(keys, mats))
        parts = [pair_attention(emb[p], emb[q]).fused for p, q in pairs_for(emb)]
        return concat_cols(parts + list(mats))

    return _in_canonical_order(fuse, [embeddings[m] for m in keys])


def mmms_ba_fuse(V: Tensor, L: Tensor, A: Tensor) -> Tensor:
    """``[VL | AV | AL | V | A | L]`` with each pair block ``[A1 | A2]``; ``N x 9d``."""
    return mmms_ba_fuse_subset({"V": V, "L": L, "A": A})


def mmus_sa_block(Xp: Tensor) -> Tensor:
    """Self-attention across the three modality rows of one sequence.

    Returns the row-major flattening of ``[A_p | X_p]`` as a ``1 x 6r`` row.
    """
    if Xp.rows != 3:
        raise ShapeError(f"mmus_sa_block: expected 3 modality rows, got {Xp.shape}")
    Np = row_softmax(Xp @ transpose(Xp))
    Ap = hadamard(Np @ Xp, Xp)
    return reshape(concat_cols([Ap, Xp]), 1, 6 * Xp.cols)


def mmus_sa_fuse(V: Tensor, L: Tensor, A: Tensor) -> Tensor:
    """:func:`mmus_sa_block` for every sequence at once, ``N x 6d``.

    Row ``i`` equals ``mmus_sa_block`` applied to ``[V_i; L_i; A_i]``.
    """
    _same_shape("mmus_sa_fuse", V, L, A)
    mods = (V, L, A)
    dots = {}
    for i in range(3):
        for j in range(i, 3):
            dots[i, j] = dots[j, i] = tensor_sum(hadamard(mods[i], mods[j]), axis=1)
    out = []
    for i in range(3):
        w = row_softmax(concat_cols([dots[i, 0], dots[i, 1], dots[i, 2]]))
        attended = (mul(slice_cols(w, 0, 1), V) + mul(slice_cols(w, 1, 2), L)
                    + mul(slice_cols(w, 2, 3), A))
        out += [hadamard(attended, mods[i]), mods[i]]
    return concat_cols(out)


def ms_sa_block(X: Tensor) -> Tensor:
    """Self-attention across the sequences of one modality, ``N x d``."""
    if X.rows < 1:
        raise ShapeError("ms_sa_block: need at least one sequence")

    def block(Y):
        return hadamard(row_softmax(Y @ transpose(Y)) @ Y, Y)

    return _in_canonical_order(block, [X])


def ms_sa_fuse(V: Tensor, L: Tensor, A: Tensor) -> Tensor:
    """``[A_v | A_l | A_a | V | L | A]``, ``N x 6d``."""
    _same_shape("ms_sa_fuse", V, L, A)
    return concat_cols([ms_sa_block(V), ms_sa_block(L), ms_sa_block(A), V, L, A])
