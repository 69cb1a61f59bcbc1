"""Feature/label file formats and the synthetic cross-modal dataset generator.

Feature files (``.msqf``, little-endian)::

    magic "MSQF" | u16 version=1 | u32 N | u32 d_v | u32 d_l | u32 d_a
    | f32 seq_duration | f32 seq_stride | f32 video_duration
    | X_v, X_l, X_a row-major f32 | u16 id length | UTF-8 video id

Label files hold one video per line::

    <video_id> <real|fake> [start-end;start-end;...] [c=0,1,0,...]
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .fileio import atomic_write_bytes, atomic_write_text
from .model import VideoTarget

FEATURE_MAGIC = b"MSQF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIfff")
SPLITS = ("train", "val", "test")


@dataclass
class FeatureSequenceSet:
    video_id: str
    X_v: np.ndarray
    X_l: np.ndarray
    X_a: np.ndarray
    seq_duration: float = 1.0
    seq_stride: float = 1.0
    video_duration: Optional[float] = None

    def __post_init__(self):
        self.X_v = np.asarray(self.X_v, dtype=np.float64)
        self.X_l = np.asarray(self.X_l, dtype=np.float64)
        self.X_a = np.asarray(self.X_a, dtype=np.float64)
        if self.video_duration is None:
            self.video_duration = (self.n - 1) * self.seq_stride + self.seq_duration
        self.validate()

    @property
    def n(self) -> int:
        return self.X_v.shape[0]

    def validate(self) -> None:
        mats = (self.X_v, self.X_l, self.X_a)
        if any(m.ndim != 2 for m in mats):
            raise DataError(f"{self.video_id}: feature matrices must be 2-D")
        if len({m.shape[0] for m in mats}) != 1:
            raise DataError(f"{self.video_id}: modalities disagree on the sequence count")
        if self.n < 1:
            raise DataError(f"{self.video_id}: a video needs at least one sequence")
        if not (self.seq_duration > 0 and self.seq_stride > 0 and self.video_duration > 0):
            raise DataError(f"{self.video_id}: durations must be positive")
        needed = (self.n - 1) * self.seq_stride + self.seq_duration
        if self.video_duration < needed - 1e-6:
            raise DataError(f"{self.video_id}: video_duration {self.video_duration} < span {needed}")


@dataclass
class LabelRecord:
    video_id: str
    label: str
    segments: list = field(default_factory=list)
    sequence_labels: Optional[np.ndarray] = None

    @property
    def is_fake(self) -> bool:
        return self.label == "fake"

    def labels_for(self, n: int, seq_duration: float, seq_stride: float) -> np.ndarray:
        if self.sequence_labels is not None:
            if len(self.sequence_labels) != n:
                raise DataError(f"{self.video_id}: {len(self.sequence_labels)} sequence labels for {n} sequences")
            return np.asarray(self.sequence_labels, dtype=np.int64)
        return sequence_labels(self.segments, n, seq_duration, seq_stride)

    def target(self, n: int, seq_duration: float, seq_stride: float) -> VideoTarget:
        return VideoTarget(self.labels_for(n, seq_duration, seq_stride), list(self.segments), int(self.is_fake))


def sequence_labels(segments, n: int, seq_duration: float, seq_stride: float) -> np.ndarray:
    """``c_i = 1`` iff window ``i`` overlaps the fake segments by at least half its length."""
    c = np.zeros(n, dtype=np.int64)
    for i in range(n):
        ws = i * seq_stride
        we = ws + seq_duration
        covered = sum(max(0.0, min(we, e) - max(ws, s)) for s, e in segments)
        if covered >= 0.5 * seq_duration - 1e-9:
            c[i] = 1
    return c


# -- feature files ------------------------------------------------------------

def feature_bytes(fs: FeatureSequenceSet) -> bytes:
    fs.validate()
    vid = fs.video_id.encode("utf-8")
    if len(vid) > 0xFFFF:
        raise DataError("video id longer than 65535 bytes")
    head = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, fs.n, fs.X_v.shape[1], fs.X_l.shape[1],
                        fs.X_a.shape[1], fs.seq_duration, fs.seq_stride, fs.video_duration)
    body = b"".join(np.ascontiguousarray(m, dtype="<f4").tobytes() for m in (fs.X_v, fs.X_l, fs.X_a))
    return head + body + struct.pack("<H", len(vid)) + vid


def features_from_bytes(blob: bytes) -> FeatureSequenceSet:
    if len(blob) < 4 or blob[:4] != FEATURE_MAGIC:
        raise FormatError("not a feature file: bad magic", 0)
    if len(blob) < _HEADER.size:
        raise FormatError("truncated feature header", len(blob))
    _, version, n, dv, dl, da, dur, stride, vdur = _HEADER.unpack_from(blob, 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}", 4)
    if n == 0:
        raise FormatError("feature file declares zero sequences", 6)
    pos = _HEADER.size
    mats = []
    for width in (dv, dl, da):
        count = n * width
        if pos + 4 * count > len(blob):
            raise FormatError("truncated feature matrix", len(blob))
        raw = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
        if not np.all(np.isfinite(raw)):
            raise FormatError("feature matrix holds non-finite values", pos)
        mats.append(raw.reshape(n, width).astype(np.float64))
        pos += 4 * count
    if pos + 2 > len(blob):
        raise FormatError("truncated video id length", pos)
    (id_len,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    if pos + id_len != len(blob):
        raise FormatError(f"video id block expects {id_len} bytes, found {len(blob) - pos}", pos)
    try:
        vid = blob[pos:pos + id_len].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("video id is not valid UTF-8", pos) from None
    try:
        return FeatureSequenceSet(vid, *mats, seq_duration=float(dur), seq_stride=float(stride),
                                  video_duration=float(vdur))
    except DataError as exc:
        raise FormatError(f"invalid feature header: {exc}", 0) from None


def write_features(path, fs: FeatureSequenceSet) -> None:
    atomic_write_bytes(path, feature_bytes(fs))


def read_features(path) -> FeatureSequenceSet:
    with open(path, "rb") as fh:
        return features_from_bytes(fh.read())


# -- label files --------------------------------------------------------------

def _format_segment(seg) -> str:
    return f"{seg[0]:.6f}-{seg[1]:.6f}"


def format_labels(records) -> str:
    lines = []
    for r in records:
        parts = [r.video_id, r.label]
        if r.segments:
            parts.append(";".join(_format_segment(s) for s in r.segments))
        if r.sequence_labels is not None:
            parts.append("c=" + ",".join(str(int(c)) for c in r.sequence_labels))
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def parse_label_line(line: str, lineno: int = 1) -> LabelRecord:
    fields_ = line.split()
    if len(fields_) < 2:
        raise DataError(f"line {lineno}: expected '<video_id> <real|fake> [segments] [c=...]'")
    vid, label, rest = fields_[0], fields_[1].lower(), fields_[2:]
    if label not in ("real", "fake"):
        raise DataError(f"line {lineno}: label must be 'real' or 'fake', got {fields_[1]!r}")
    segments, seq = [], None
    for tok in rest:
        if tok.startswith("c="):
            if seq is not None:
                raise DataError(f"line {lineno}: duplicate sequence label field")
            try:
                seq = np.array([int(x) for x in tok[2:].split(",")], dtype=np.int64)
            except ValueError:
                raise DataError(f"line {lineno}: bad sequence labels {tok!r}") from None
            if np.any((seq != 0) & (seq != 1)):
                raise DataError(f"line {lineno}: sequence labels must be 0 or 1")
            continue
        if segments:
            raise DataError(f"line {lineno}: unexpected field {tok!r}")
        for piece in tok.split(";"):
            try:
                s, e = (float(x) for x in piece.split("-"))
            except ValueError:
                raise DataError(f"line {lineno}: bad segment {piece!r}, expected 'start-end'") from None
            segments.append((s, e))
    if label == "real" and segments:
        raise DataError(f"line {lineno}: real video {vid!r} lists fake segments")
    segments.sort()
    for s, e in segments:
        if not e > s >= 0:
            raise DataError(f"line {lineno}: segment ({s}, {e}) needs 0 <= start < end")
    for (s1, e1), (s2, e2) in zip(segments, segments[1:]):
        if s2 < e1:
            raise DataError(f"line {lineno}: segments ({s1}, {e1}) and ({s2}, {e2}) overlap")
    return LabelRecord(vid, label, segments, seq)


def parse_labels(text: str) -> list:
    records, seen = [], set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        rec = parse_label_line(line, lineno)
        if rec.video_id in seen:
            raise DataError(f"line {lineno}: duplicate video id {rec.video_id!r}")
        seen.add(rec.video_id)
        records.append(rec)
    return records


def read_labels(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return parse_labels(fh.read())


def write_labels(path, records) -> None:
    atomic_write_text(path, format_labels(records))


# -- synthetic data -----------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Generator settings.

    Real sequences share a latent factor across modalities; fake segments swap
    one modality's latent for an independent draw (plus a small additive
    artifact), which breaks the cross-modal agreement. Segment lengths are in
    whole windows.
    """

    n_videos: int = 200
    n_seq: int = 20
    d_v: int = 32
    d_l: int = 32
    d_a: int = 32
    fake_video_ratio: float = 0.5
    min_segments: int = 1
    max_segments: int = 3
    min_segment_windows: int = 1
    max_segment_windows: int = 1
    rho: float = 0.9
    noise: float = 0.1
    latent_dim: int = 8
    temporal_corr: float = 0.5
    artifact: float = 2.0
    seq_duration: float = 1.0
    seq_stride: float = 1.0
    split_fractions: tuple = (0.7, 0.15, 0.15)
    seed: int = 7

    def validate(self) -> None:
        for name in ("fake_video_ratio", "rho", "temporal_corr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.noise < 0 or self.artifact < 0:
            raise ConfigError("noise and artifact must be >= 0")
        if min(self.n_videos, self.n_seq, self.d_v, self.d_l, self.d_a, self.latent_dim) < 1:
            raise ConfigError("counts and widths must be positive")
        if not 1 <= self.min_segments <= self.max_segments:
            raise ConfigError("need 1 <= min_segments <= max_segments")
        if not 1 <= self.min_segment_windows <= self.max_segment_windows:
            raise ConfigError("need 1 <= min_segment_windows <= max_segment_windows")
        if self.seq_stride != self.seq_duration:
            raise ConfigError("the generator places segments on a grid of non-overlapping windows "
                              "(seq_stride must equal seq_duration)")
        # segments are separated by at least one real window
        need = self.max_segments * self.max_segment_windows + self.max_segments - 1
        if self.fake_video_ratio > 0 and need > self.n_seq:
            raise ConfigError(f"{self.max_segments} segments of up to {self.max_segment_windows} windows "
                              f"do not fit in {self.n_seq} windows")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must be three numbers summing to 1")


@dataclass
class SyntheticSplit:
    features: list
    labels: list

    def targets(self) -> list:
        return [r.target(f.n, f.seq_duration, f.seq_stride) for f, r in zip(self.features, self.labels)]


def _place_segments(rng, spec: SyntheticSpec) -> list:
    n = spec.n_seq
    count = int(rng.integers(spec.min_segments, spec.max_segments + 1))
    lengths = [int(rng.integers(spec.min_segment_windows, spec.max_segment_windows + 1)) for _ in range(count)]
    # distribute the spare windows into gaps; inner gaps keep one real window
    spare = n - sum(lengths) - (count - 1)
    cuts = np.sort(rng.integers(0, spare + 1, size=count))
    gaps = np.diff(np.concatenate([[0], cuts]))
    windows, pos = [], 0
    for k, length in enumerate(lengths):
        pos += int(gaps[k]) + (1 if k else 0)
        windows.append((pos, pos + length))
        pos += length
    return windows


def _video(rng, spec: SyntheticSpec, mixing: dict, artifacts: dict, vid: str, fake: bool):
    n, k = spec.n_seq, spec.latent_dim
    phi = spec.temporal_corr
    z = np.empty((n, k))
    z[0] = rng.standard_normal(k)
    for i in range(1, n):
        z[i] = phi * z[i - 1] + np.sqrt(1.0 - phi * phi) * rng.standard_normal(k)
    own = np.sqrt(1.0 - spec.rho ** 2)
    latents = {m: spec.rho * z + own * rng.standard_normal((n, k)) for m in "VLA"}
    segments = []
    if fake:
        for start, stop in _place_segments(rng, spec):
            target = "VLA"[int(rng.integers(0, 3))]
            swap = rng.standard_normal((stop - start, k))
            latents[target][start:stop] = spec.rho * swap + own * rng.standard_normal((stop - start, k))
            segments.append((start, stop, target))
    feats = {}
    for m in "VLA":
        X = latents[m] @ mixing[m].T + spec.noise * rng.standard_normal((n, mixing[m].shape[0]))
        for start, stop, target in segments:
            if target == m:
                X[start:stop] += spec.artifact * artifacts[m]
        feats[m] = X
    seg_times = [(s * spec.seq_stride, s * spec.seq_stride + (e - s) * spec.seq_duration) for s, e, _ in segments]
    fs = FeatureSequenceSet(vid, feats["V"], feats["L"], feats["A"], spec.seq_duration, spec.seq_stride)
    rec = LabelRecord(vid, "fake" if fake else "real", seg_times)
    return fs, rec


def synth_generate(spec: SyntheticSpec) -> dict:
    """Generate train/val/test splits; returns ``{split: SyntheticSplit}``.

    Each split receives its own share of real and fake videos (stratified) and
    video ids never repeat across splits. Output is a pure function of ``spec``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    widths = {"V": spec.d_v, "L": spec.d_l, "A": spec.d_a}
    mixing = {m: rng.standard_normal((w, spec.latent_dim)) / np.sqrt(spec.latent_dim) for m, w in widths.items()}
    artifacts = {}
    for m, w in widths.items():
        a = rng.standard_normal(w)
        artifacts[m] = a / np.linalg.norm(a) * np.sqrt(w) / np.sqrt(spec.latent_dim)
    n_fake = int(round(spec.n_videos * spec.fake_video_ratio))
    is_fake = np.array([True] * n_fake + [False] * (spec.n_videos - n_fake))
    videos = [_video(rng, spec, mixing, artifacts, f"vid{i:05d}", bool(f)) for i, f in enumerate(is_fake)]

    order = {True: list(rng.permutation(np.flatnonzero(is_fake))),
             False: list(rng.permutation(np.flatnonzero(~is_fake)))}
    assignment = {}
    for flag, idx in order.items():
        n = len(idx)
        n_train = int(round(spec.split_fractions[0] * n))
        n_val = int(round(spec.split_fractions[1] * n))
        for j, i in enumerate(idx):
            assignment[i] = "train" if j < n_train else "val" if j < n_train + n_val else "test"
    out = {}
    for split in SPLITS:
        chosen = [i for i in range(spec.n_videos) if assignment[i] == split]
        out[split] = SyntheticSplit([videos[i][0] for i in chosen], [videos[i][1] for i in chosen])
    return out


# -- dataset directories ------------------------------------------------------

def write_dataset(root, splits: dict) -> None:
    """Write ``root/<split>/labels.txt`` and ``root/<split>/features/<id>.msqf``."""
    root = Path(root)
    for name, split in splits.items():
        for fs in split.features:
            write_features(root / name / "features" / f"{fs.video_id}.msqf", fs)
        write_labels(root / name / "labels.txt", split.labels)


def load_split(root, split: str) -> SyntheticSplit:
    """Read one split written by :func:`write_dataset`; labels define the video order."""
    root = Path(root) / split
    labels_path = root / "labels.txt"
    if not labels_path.exists():
        raise FileNotFoundError(labels_path)
    records = read_labels(labels_path)
    features = []
    for rec in records:
        fs = read_features(root / "features" / f"{rec.video_id}.msqf")
        if fs.video_id != rec.video_id:
            raise DataError(f"feature file for {rec.video_id!r} carries id {fs.video_id!r}")
        for s, e in rec.segments:
            if e > fs.video_duration + 1e-6:
                raise DataError(f"{rec.video_id}: segment ({s}, {e}) ends after the video")
        features.append(fs)
    return SyntheticSplit(features, records)
