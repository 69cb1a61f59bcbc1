"""Central finite-difference checks of analytic gradients.

``relative_error`` treats ``|a - n| <= rtol * max(|a|, |n|)`` and
``|a - n| <= atol`` as equivalent passes: the error is divided by
``max(|a|, |n|, atol / rtol)``, so a value below ``rtol`` means the element
passes either the relative test or the absolute floor.
"""
from __future__ import annotations

import time
from dataclasses import replace
from typing import Callable

import numpy as np

from . import attention, encoder, model
from . import tensor as tt
from .tensor import Tensor, parameter

RTOL = 1e-4
ATOL = 1e-7
STEP = 1e-5


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = STEP) -> np.ndarray:
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn().item()
        flat[i] = old - h
        down = fn().item()
        flat[i] = old
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, rtol: float = RTOL, atol: float = ATOL) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def check_gradients(fn: Callable[[], Tensor], tensors, h: float = STEP) -> float:
    """Largest relative error over every element of ``tensors`` for the scalar ``fn()``."""
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, t, h)))
    return worst


def _rand(rng, rows, cols, lo=-2.0, hi=2.0):
    return parameter(rng.uniform(lo, hi, size=(rows, cols)))


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    # a fixed random projection exercises every output element with distinct weight
    return tt.tensor_sum(tt.mul(w, out))


def toy_features(rng, n=3, dims=(3, 2, 4), vid="toy"):
    from .data import FeatureSequenceSet

    return FeatureSequenceSet(vid, rng.uniform(-2, 2, (n, dims[0])), rng.uniform(-2, 2, (n, dims[1])),
                              rng.uniform(-2, 2, (n, dims[2])))


def toy_config(**overrides) -> model.ModelConfig:
    base = dict(d_v=3, d_l=2, d_a=4, hidden=3, proj=3, head_hidden=4, dropout=0.3,
                focal_alpha=0.25, focal_gamma=2.0, seq_duration=1.0, seq_stride=1.0)
    base.update(overrides)
    return model.ModelConfig(**base)


def model_case(rng, config: model.ModelConfig, n: int = 3, training: bool = True):
    """A seeded toy model, video and target; returns (loss_fn, params)."""
    params = model.init_params(config, int(rng.integers(1 << 31)))
    for t in params.tensors():
        # lift biases off zero so no unit sits on a ReLU kink
        t.data = t.data + rng.uniform(-0.3, 0.3, size=t.shape)
    feats = toy_features(rng, n, (config.d_v, config.d_l, config.d_a))
    labels = np.array([0, 1, 1][:n] + [0] * max(0, n - 3))
    target = model.VideoTarget(labels, [(0.6, 2.7)], 1)
    seed = int(rng.integers(1 << 31))

    def fn():
        drop = np.random.default_rng(seed)
        out = model.forward_batch(params, config, [feats], training, drop)
        return model.combined_loss(out, target, config)

    return fn, params


def suite(seed: int = 0) -> dict:
    """Run every gradient check; returns ``{name: max relative error}``."""
    rng = np.random.default_rng(seed)
    results = {}

    def run(name, fn, tensors):
        results[name] = check_gradients(fn, tensors)

    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    w = rng.standard_normal((3, 2))
    run("matmul", lambda: _weighted_sum(a @ b, w), [a, b])

    s = _rand(rng, 4, 4)
    w = rng.standard_normal((4, 4))
    run("row_softmax", lambda: _weighted_sum(tt.row_softmax(s), w), [s])

    x, y = _rand(rng, 3, 3), _rand(rng, 3, 3)
    w = rng.standard_normal((3, 3))
    run("hadamard", lambda: _weighted_sum(tt.hadamard(x, y), w), [x, y])

    parts = [_rand(rng, 2, 1), _rand(rng, 2, 3), _rand(rng, 2, 2)]
    w = rng.standard_normal((2, 6))
    run("concat_cols", lambda: _weighted_sum(tt.concat_cols(parts), w), parts)

    r = _rand(rng, 4, 3)
    w = rng.standard_normal((4, 3))
    run("permute_rows", lambda: _weighted_sum(tt.permute_rows(r, [2, 0, 3, 1]), w), [r])

    for kind in tt.ACTIVATIONS:
        z = _rand(rng, 3, 4)
        w = rng.standard_normal((3, 4))
        run(f"activation:{kind}", lambda z=z, w=w, kind=kind: _weighted_sum(tt.activation(kind, z), w), [z])

    d = _rand(rng, 4, 4)
    w = rng.standard_normal((4, 4))
    seed_d = int(rng.integers(1 << 31))
    run("dropout", lambda: _weighted_sum(tt.dropout(d, 0.3, np.random.default_rng(seed_d), True), w), [d])

    cell = encoder.GruCellParams(_rand(rng, 3, 12, -1, 1), _rand(rng, 4, 12, -1, 1), _rand(rng, 1, 12, -1, 1))
    xt, hp = _rand(rng, 1, 3), _rand(rng, 1, 4, -1, 1)
    w = rng.standard_normal((1, 4))
    run("gru_step", lambda: _weighted_sum(encoder.gru_step(cell, xt, hp), w), cell.tensors() + [xt, hp])

    enc = encoder.init_modality_encoder(3, 4, 3, rng, 0.3)
    for t in enc.tensors():
        t.data = t.data + rng.uniform(-0.3, 0.3, size=t.shape)
    X = _rand(rng, 4, 3)
    w = rng.standard_normal((4, 8))
    run("bigru", lambda: _weighted_sum(encoder.bigru(X, enc.forward, enc.backward, 2), w[:, :8]),
        enc.tensors()[:6] + [X])
    w = rng.standard_normal((4, 3))
    seed_e = int(rng.integers(1 << 31))
    run("encode_modality", lambda: _weighted_sum(
        encoder.encode_modality(enc, X, True, np.random.default_rng(seed_e)), w), enc.tensors() + [X])

    P, Q = _rand(rng, 3, 4, -1, 1), _rand(rng, 3, 4, -1, 1)
    w = rng.standard_normal((3, 8))
    run("pair_attention", lambda: _weighted_sum(attention.pair_attention(P, Q).fused, w), [P, Q])

    V, L, A = (_rand(rng, 3, 2, -1, 1) for _ in range(3))
    w9, w6 = rng.standard_normal((3, 18)), rng.standard_normal((3, 12))
    run("mmms_ba_fuse", lambda: _weighted_sum(attention.mmms_ba_fuse(V, L, A), w9), [V, L, A])
    run("ms_sa_fuse", lambda: _weighted_sum(attention.ms_sa_fuse(V, L, A), w6), [V, L, A])
    run("mmus_sa_fuse", lambda: _weighted_sum(attention.mmus_sa_fuse(V, L, A), w6), [V, L, A])
    Xp = _rand(rng, 3, 4, -1, 1)
    w = rng.standard_normal((1, 24))
    run("mmus_sa_block", lambda: _weighted_sum(attention.mmus_sa_block(Xp), w), [Xp])

    for variant in model.VARIANTS:
        for kind in model.REG_LOSSES:
            cfg = toy_config(variant=variant, reg_loss=kind)
            fn, params = model_case(rng, cfg)
            run(f"model:{variant}:{kind}", fn, params.tensors())
    for subset in ("V+L", "V+A", "L+A"):
        fn, params = model_case(rng, toy_config(modalities=subset))
        run(f"model:MMMS-BA:{subset}", fn, params.tensors())
    return results


def run_suite(seed: int = 0):
    """``(results, seconds)`` for :func:`suite`."""
    start = time.perf_counter()
    results = suite(seed)
    return results, time.perf_counter() - start
