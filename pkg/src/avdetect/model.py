"""Encoders + fusion + output heads, the training objective and checkpoints."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .attention import mmms_ba_fuse_subset, ms_sa_fuse, mmus_sa_fuse
from .encoder import ModalityEncoderParams, encode_batch, glorot_uniform, init_modality_encoder
from .errors import ConfigError, DataError, FormatError, ShapeError
from .tensor import (
    ACTIVATIONS,
    Tensor,
    activation,
    clamp,
    concat_rows,
    dropout,
    maximum,
    minimum,
    no_grad,
    parameter,
    power,
    relu,
    row_softmax,
    slice_cols,
    slice_rows,
    tensor_sum,
)
from . import tensor as tt

VARIANTS = ("MMMS-BA", "MMUS-SA", "MS-SA")
MODALITIES = ("V", "L", "A")
REG_LOSSES = ("diou", "giou")
PROB_EPS = 1e-12


def parse_modalities(text) -> tuple:
    """``"V+L+A"`` or an iterable of keys -> canonical ordered tuple."""
    keys = text.split("+") if isinstance(text, str) else list(text)
    keys = [k.strip().upper() for k in keys if k.strip()]
    bad = [k for k in keys if k not in MODALITIES]
    if bad or len(set(keys)) != len(keys):
        raise ConfigError(f"invalid modality subset {text!r}; use keys from {MODALITIES}")
    return tuple(m for m in MODALITIES if m in keys)


@dataclass
class ModelConfig:
    variant: str = "MMMS-BA"
    modalities: tuple = ("V", "L", "A")
    d_v: int = 32
    d_l: int = 32
    d_a: int = 32
    hidden: int = 300
    proj: int = 100
    head_hidden: int = 100
    dropout: float = 0.3
    activation: str = "relu"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    lambda_reg: float = 1.0
    reg_loss: str = "diou"
    seq_duration: float = 1.0
    seq_stride: float = 1.0

    def __post_init__(self):
        self.modalities = parse_modalities(self.modalities)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.modalities) < 2:
            raise ConfigError("at least two modalities are required for pairwise attention")
        if self.variant != "MMMS-BA" and len(self.modalities) != 3:
            raise ConfigError(f"{self.variant} is defined only for the V+L+A setting")
        for name in ("d_v", "d_l", "d_a", "hidden", "proj", "head_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.reg_loss not in REG_LOSSES:
            raise ConfigError(f"reg_loss must be one of {REG_LOSSES}")
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg must be >= 0")
        if self.focal_gamma < 0 or self.focal_alpha <= 0:
            raise ConfigError("focal_alpha must be > 0 and focal_gamma >= 0")
        if not (self.seq_duration > 0 and self.seq_stride > 0):
            raise ConfigError("seq_duration and seq_stride must be > 0")

    def input_width(self, modality: str) -> int:
        return {"V": self.d_v, "L": self.d_l, "A": self.d_a}[modality]

    @property
    def fused_width(self) -> int:
        if self.variant == "MMMS-BA":
            return (9 if len(self.modalities) == 3 else 4) * self.proj
        return 6 * self.proj

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if key == "modalities":
                value = "+".join(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}")
            kwargs[key] = _coerce(key, value, getattr(cls, key))
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_key_values(text))


def parse_key_values(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _coerce(key, value, default):
    if not isinstance(value, str):
        return value
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


@dataclass
class SequencePrediction:
    p_fake: float
    start_offset: float
    end_offset: float


@dataclass
class VideoTarget:
    labels: np.ndarray
    segments: list = field(default_factory=list)
    video_label: int = 0

    @property
    def n_fake(self) -> int:
        return int(np.sum(self.labels))


class ModelParams:
    """All learnable tensors, addressable by name in declaration order."""

    def __init__(self, encoders: dict, cls_hidden_W, cls_hidden_b, cls_W, cls_b,
                 reg_hidden_W, reg_hidden_b, reg_W, reg_b):
        self.encoders = encoders
        self.cls_hidden_W, self.cls_hidden_b = cls_hidden_W, cls_hidden_b
        self.cls_W, self.cls_b = cls_W, cls_b
        self.reg_hidden_W, self.reg_hidden_b = reg_hidden_W, reg_hidden_b
        self.reg_W, self.reg_b = reg_W, reg_b

    def named_tensors(self) -> list:
        out = []
        for m, enc in self.encoders.items():
            names = ("fwd.W", "fwd.U", "fwd.b", "bwd.W", "bwd.U", "bwd.b", "proj.W", "proj.b")
            out += [(f"{m}.{n}", t) for n, t in zip(names, enc.tensors())]
        out += [("cls.hidden.W", self.cls_hidden_W), ("cls.hidden.b", self.cls_hidden_b),
                ("cls.W", self.cls_W), ("cls.b", self.cls_b),
                ("reg.hidden.W", self.reg_hidden_W), ("reg.hidden.b", self.reg_hidden_b),
                ("reg.W", self.reg_W), ("reg.b", self.reg_b)]
        return out

    def tensors(self) -> list:
        return [t for _, t in self.named_tensors()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def snapshot(self) -> list:
        return [t.data.copy() for t in self.tensors()]

    def restore(self, arrays) -> None:
        for t, a in zip(self.tensors(), arrays):
            t.data = np.array(a, dtype=np.float64)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors())


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    encoders = {
        m: init_modality_encoder(config.input_width(m), config.hidden, config.proj, rng, config.dropout)
        for m in config.modalities
    }
    F, Hh = config.fused_width, config.head_hidden
    reg_b = np.array([[0.0, config.seq_duration]])
    return ModelParams(
        encoders,
        parameter(glorot_uniform(rng, (F, Hh))), parameter(np.zeros((1, Hh))),
        parameter(glorot_uniform(rng, (Hh, 2))), parameter(np.zeros((1, 2))),
        parameter(glorot_uniform(rng, (F, Hh))), parameter(np.zeros((1, Hh))),
        parameter(glorot_uniform(rng, (Hh, 2))), parameter(reg_b),
    )


def zero_params(config: ModelConfig) -> ModelParams:
    params = init_params(config)
    for t in params.tensors():
        t.data = np.zeros_like(t.data)
    return params


@dataclass
class BatchOutput:
    """Head outputs for ``B`` videos of ``n_steps`` sequences, stacked video-major."""

    probs: Tensor
    offsets: Tensor
    n_steps: int
    video_ids: list

    def video_rows(self, b: int) -> slice:
        return slice(b * self.n_steps, (b + 1) * self.n_steps)

    def predictions(self) -> dict:
        p = self.probs.data[:, 1]
        off = self.offsets.data
        out = {}
        for b, vid in enumerate(self.video_ids):
            rows = self.video_rows(b)
            out[vid] = [SequencePrediction(float(pf), float(s), float(e))
                        for pf, (s, e) in zip(p[rows], off[rows])]
        return out


_FEATURE_ATTR = {"V": "X_v", "L": "X_l", "A": "X_a"}


def _fuse_video(config: ModelConfig, emb: dict) -> Tensor:
    if config.variant == "MMMS-BA":
        return mmms_ba_fuse_subset(emb)
    if config.variant == "MS-SA":
        return ms_sa_fuse(emb["V"], emb["L"], emb["A"])
    return mmus_sa_fuse(emb["V"], emb["L"], emb["A"])


def forward_batch(params: ModelParams, config: ModelConfig, videos, training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> BatchOutput:
    """Run the network on videos that all have the same sequence count."""
    if not videos:
        raise DataError("forward_batch: no videos")
    n = videos[0].n
    if any(v.n != n for v in videos):
        raise DataError("forward_batch: videos in one batch must share the sequence count")
    act = config.activation
    emb = {}
    for m in config.modalities:
        width = config.input_width(m)
        mats = [getattr(v, _FEATURE_ATTR[m]) for v in videos]
        if any(x.shape[1] != width for x in mats):
            raise ShapeError(f"modality {m}: feature width does not match d_{m.lower()}={width}")
        X = Tensor._wrap(np.concatenate(mats, axis=0))
        emb[m] = encode_batch(params.encoders[m], X, n, training, rng, act)
    B = len(videos)
    if config.variant == "MMUS-SA" or B == 1:
        W = _fuse_video(config, emb)
    else:
        W = concat_rows([
            _fuse_video(config, {m: slice_rows(e, b * n, (b + 1) * n) for m, e in emb.items()})
            for b in range(B)
        ])
    # each head has its own hidden dense layer
    hid_c = dropout(activation(act, W @ params.cls_hidden_W + params.cls_hidden_b), config.dropout, rng, training)
    hid_r = dropout(activation(act, W @ params.reg_hidden_W + params.reg_hidden_b), config.dropout, rng, training)
    probs = row_softmax(hid_c @ params.cls_W + params.cls_b)
    offsets = relu(hid_r @ params.reg_W + params.reg_b)
    return BatchOutput(probs, offsets, n, [v.video_id for v in videos])


def forward(params: ModelParams, config: ModelConfig, features, training: bool = False,
            rng: Optional[np.random.Generator] = None) -> list:
    """Per-sequence predictions for one video."""
    out = forward_batch(params, config, [features], training, rng)
    return out.predictions()[features.video_id]


def predict(params: ModelParams, config: ModelConfig, videos, batch_size: int = 64) -> dict:
    """Evaluation-mode predictions keyed by video id (no graph is recorded)."""
    by_n = {}
    for v in videos:
        by_n.setdefault(v.n, []).append(v)
    out = {}
    with no_grad():
        for group in by_n.values():
            for i in range(0, len(group), batch_size):
                out.update(forward_batch(params, config, group[i:i + batch_size]).predictions())
    return {v.video_id: out[v.video_id] for v in videos}


def video_score(preds) -> float:
    """Video-level fake probability: the largest per-sequence probability."""
    if len(preds) == 0:
        raise DataError("video_score: no sequence predictions")
    return max(float(p.p_fake if isinstance(p, SequencePrediction) else p) for p in preds)


# -- losses -------------------------------------------------------------------

def focal_terms(p_fake: Tensor, labels: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Per-entry focal loss ``-alpha (1 - p_t)^gamma log p_t`` for a column of probabilities."""
    c = np.asarray(labels, dtype=np.float64).reshape(p_fake.shape)
    p = clamp(p_fake, PROB_EPS, 1.0 - PROB_EPS)
    p_t = tt.mul(c, p) + tt.mul(1.0 - c, 1.0 - p)
    ce = -tt.log(p_t)
    if gamma == 0:
        return ce * alpha
    return tt.mul(power(1.0 - p_t, gamma), ce) * alpha


def focal_loss(p_fake: float, c: int, alpha: float = 0.25, gamma: float = 2.0) -> float:
    return focal_terms(Tensor(p_fake), np.array([[c]]), alpha, gamma).item()


def segment_terms(ps: Tensor, pe: Tensor, gs, ge, kind: str = "diou") -> Tensor:
    """Elementwise DIoU/GIoU loss between predicted and ground-truth intervals."""
    gs, ge = tt.as_tensor(gs), tt.as_tensor(ge)
    if np.any(ge.data <= gs.data):
        raise DataError("segment loss: ground-truth segments need end > start")
    if kind not in REG_LOSSES:
        raise ConfigError(f"unknown regression loss {kind!r}")
    pe = maximum(pe, ps)
    inter = relu(minimum(pe, ge) - maximum(ps, gs))
    union = (pe - ps) + (ge - gs) - inter
    iou = inter / union
    enclose = maximum(pe, ge) - minimum(ps, gs)
    if kind == "giou":
        return 1.0 - iou + (enclose - union) / enclose
    centre = (ps + pe) * 0.5 - (gs + ge) * 0.5
    return 1.0 - iou + tt.mul(centre, centre) / tt.mul(enclose, enclose)


def segment_reg_loss(pred, gt, kind: str = "diou") -> float:
    (ps, pe), (gs, ge) = pred, gt
    return segment_terms(Tensor(ps), Tensor(pe), gs, ge, kind).item()


def window_starts(n: int, stride: float) -> np.ndarray:
    return np.arange(n, dtype=np.float64) * stride


def interval_iou(a, b) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def regression_targets(labels, segments, seq_duration: float, seq_stride: float) -> np.ndarray:
    """Ground-truth interval for every sequence (the window itself where ``c_i = 0``).

    A fake sequence takes the overlapping segment with the highest IoU against its
    window; ties go to the earliest start.
    """
    labels = np.asarray(labels).reshape(-1)
    starts = window_starts(len(labels), seq_stride)
    out = np.stack([starts, starts + seq_duration], axis=1)
    ordered = sorted(segments)
    for i in np.flatnonzero(labels):
        window = (starts[i], starts[i] + seq_duration)
        best, best_iou = None, 0.0
        for seg in ordered:
            iou = interval_iou(window, seg)
            if iou > best_iou:
                best, best_iou = seg, iou
        if best is None:
            raise DataError(f"sequence {i} is labelled fake but overlaps no fake segment")
        out[i] = best
    return out


def batch_loss(output: BatchOutput, targets, config: ModelConfig) -> Tensor:
    """Mean over videos of the per-video combined objective.

    Per video: ``(sum_i focal_i + lambda_reg * sum_{c_i=1} reg_i) / max(N_f, 1)``.
    """
    n, B = output.n_steps, len(targets)
    if output.probs.rows != n * B:
        raise DataError(f"loss: {output.probs.rows} predictions for {B} videos of {n} sequences")
    labels = np.concatenate([np.asarray(t.labels, dtype=np.float64).reshape(-1) for t in targets])
    if labels.size != n * B or any(np.asarray(t.labels).size != n for t in targets):
        raise DataError("loss: label count does not match prediction count")
    gt = np.concatenate([regression_targets(t.labels, t.segments, config.seq_duration, config.seq_stride)
                         for t in targets])
    ws = np.tile(window_starts(n, config.seq_stride), B).reshape(-1, 1)
    weight = np.concatenate([np.full(n, 1.0 / (max(t.n_fake, 1) * B)) for t in targets]).reshape(-1, 1)

    focal = focal_terms(slice_cols(output.probs, 1, 2), labels, config.focal_alpha, config.focal_gamma)
    total = focal
    if config.lambda_reg > 0 and labels.any():
        ps = slice_cols(output.offsets, 0, 1) + ws
        pe = slice_cols(output.offsets, 1, 2) + ws
        reg = segment_terms(ps, pe, gt[:, :1], gt[:, 1:], config.reg_loss)
        total = total + tt.mul(labels.reshape(-1, 1) * config.lambda_reg, reg)
    return tensor_sum(tt.mul(weight, total))


def combined_loss(output: BatchOutput, target: VideoTarget, config: ModelConfig) -> Tensor:
    return batch_loss(output, [target], config)


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"MMBA"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(config: ModelConfig, params: ModelParams) -> bytes:
    text = config.to_text().encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(text)), text]
    for _, t in params.named_tensors():
        r, c = t.shape
        chunks.append(struct.pack("<II", r, c))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def checkpoint_from_bytes(blob: bytes):
    """Inverse of :func:`checkpoint_bytes`; raises :class:`FormatError` on any defect."""
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint: bad magic", 0)
    if len(blob) < 10:
        raise FormatError("truncated checkpoint header", len(blob))
    version, text_len = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 10
    if pos + text_len > len(blob):
        raise FormatError("truncated config block", len(blob))
    try:
        config = ModelConfig.from_text(blob[pos:pos + text_len].decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"corrupt config block: {exc}", pos) from None
    pos += text_len
    params = init_params(config)
    for name, t in params.named_tensors():
        if pos + 8 > len(blob):
            raise FormatError(f"truncated header for {name}", pos)
        r, c = struct.unpack_from("<II", blob, pos)
        if (r, c) != t.shape:
            raise FormatError(f"{name}: stored shape {(r, c)} != expected {t.shape}", pos)
        pos += 8
        nbytes = 8 * r * c
        if pos + nbytes > len(blob):
            raise FormatError(f"truncated data for {name}", pos)
        t.data = np.frombuffer(blob, dtype="<f8", count=r * c, offset=pos).reshape(r, c).astype(np.float64)
        pos += nbytes
    if pos != len(blob):
        raise FormatError("trailing bytes after last parameter", pos)
    return config, params


def save_checkpoint(path, config: ModelConfig, params: ModelParams) -> None:
    from .fileio import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(config, params))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
