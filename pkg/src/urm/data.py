"""Synthetic anticipation segments and the binary feature-file format.

Feature file (little-endian)::

    b"URMF" | u32 version | u32 segment count
    per segment: u16 id length | id bytes (utf-8) | u32 T | u32 N | u32 C_in
                 | T*N*C_in float32, row-major

Annotations live in a text file next to it, one ``id,t_start_s,verb,noun,action``
line per segment.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"URMF"
VERSION = 1


class FeatureFormatError(ValueError):
    """Malformed feature or annotation file; ``offset`` is the byte position, when known."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class SyntheticConfig:
    grid_h: int = 4
    grid_w: int = 4
    feature_dim: int = 32
    verbs: int = 5
    nouns: int = 5
    sigma: float = 0.5
    observed: int = 14  # frames before the action start
    seq_len: int = 18  # observed frames plus the unseen action frames
    fps: float = 4.0
    noun_amplitude: float = 2.0
    drift_scale: float = 2.0
    seed: int = 0

    @property
    def num_vertices(self) -> int:
        return self.grid_h * self.grid_w

    def validate(self) -> None:
        if self.verbs * self.nouns < 2:
            raise ValueError("need at least two verb-noun combinations")
        if self.verbs < 1 or self.nouns < 1:
            raise ValueError("verb and noun counts must be positive")
        if self.num_vertices < 4:
            raise ValueError(f"need at least 4 vertices, got {self.num_vertices}")
        if self.num_vertices < self.nouns:
            raise ValueError(f"{self.nouns} nouns cannot each own a vertex subset of a {self.num_vertices}-vertex grid")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.observed < 2 or self.seq_len <= self.observed:
            raise ValueError("seq_len must exceed observed, and observed must be >= 2")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass
class Segment:
    id: str
    frames: np.ndarray  # (T, N, C_in)
    t_start_s: float
    verb: int
    noun: int
    action: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape


@dataclass(frozen=True)
class World:
    """Label-to-signal layout shared by every segment of one seed."""

    noun_dir: np.ndarray
    verb_dir: np.ndarray
    groups: tuple[np.ndarray, ...]


def make_world(cfg: SyntheticConfig) -> World:
    rng = np.random.default_rng([cfg.seed, 0xD1CE])
    q, _ = np.linalg.qr(rng.normal(size=(cfg.feature_dim, 2)))
    perm = rng.permutation(cfg.num_vertices)
    g = cfg.num_vertices // cfg.nouns
    groups = tuple(np.sort(perm[i * g : (i + 1) * g]) for i in range(cfg.nouns))
    return World(q[:, 0], q[:, 1], groups)


def verb_slope(cfg: SyntheticConfig, verb: int) -> float:
    return cfg.drift_scale * (verb - (cfg.verbs - 1) / 2.0)


def render_frames(cfg: SyntheticConfig, world: World, verb: int, noun: int, noise: np.ndarray) -> np.ndarray:
    """Noun picks the vertex subset, verb picks the drift slope along a second direction."""
    frames = cfg.sigma * noise
    s = np.arange(cfg.seq_len) / (cfg.observed - 1)
    slope = verb_slope(cfg, verb)
    signal = cfg.noun_amplitude * world.noun_dir[None, :] + (slope * s)[:, None] * world.verb_dir[None, :]
    # frames from the action start on carry an exaggerated copy; they are never sampled as input
    signal[cfg.observed :] *= 2.0
    frames[:, world.groups[noun], :] += signal[:, None, :]
    return frames.astype(np.float32)


def gen_dataset(cfg: SyntheticConfig, count: int, start: int = 0) -> list[Segment]:
    """``count`` segments with independent per-index random streams derived from ``cfg.seed``."""
    cfg.validate()
    world = make_world(cfg)
    t_start = cfg.observed / cfg.fps
    out = []
    for i in range(start, start + count):
        rng = np.random.default_rng([cfg.seed, i])
        verb = int(rng.integers(cfg.verbs))
        noun = int(rng.integers(cfg.nouns))
        noise = rng.standard_normal((cfg.seq_len, cfg.num_vertices, cfg.feature_dim))
        frames = render_frames(cfg, world, verb, noun, noise)
        out.append(Segment(f"syn{i:06d}", frames, t_start, verb, noun, verb * cfg.nouns + noun))
    return out


def split(dataset: Sequence[Segment], fractions=(0.8, 0.2), seed: int = 0) -> tuple[list[Segment], list[Segment]]:
    """Seeded shuffle into disjoint (train, val) parts."""
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be two non-negative numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_train = int(round(fractions[0] * len(dataset)))
    return [dataset[i] for i in order[:n_train]], [dataset[i] for i in order[n_train:]]


# ---------------------------------------------------------------- files


def annotations_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".csv")


def save_features(path, segments: Sequence[Segment], annotations=None) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(segments)))
        for seg in segments:
            sid = seg.id.encode("utf-8")
            t, n, c = seg.frames.shape
            f.write(struct.pack("<H", len(sid)) + sid + struct.pack("<III", t, n, c))
            f.write(np.ascontiguousarray(seg.frames, dtype="<f4").tobytes())
    ann = annotations_path(path) if annotations is None else Path(annotations)
    with open(ann, "w") as f:
        for seg in segments:
            f.write(f"{seg.id},{seg.t_start_s!r},{seg.verb},{seg.noun},{seg.action}\n")


def read_feature_blobs(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise FeatureFormatError(
                f"truncated {what}: expected {nbytes} bytes, only {len(buf) - pos} remain "
                f"(file is {len(buf)} bytes, needed {pos + nbytes})",
                pos,
            )
        chunk = buf[pos : pos + nbytes]
        pos += nbytes
        return chunk

    magic = take(4, "magic")
    if magic != MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FeatureFormatError(f"unsupported version {version}", 4)
    blobs: dict[str, np.ndarray] = {}
    dims = None
    for _ in range(count):
        (idlen,) = struct.unpack("<H", take(2, "id length"))
        at = pos
        try:
            sid = take(idlen, "segment id").decode("utf-8")
        except UnicodeDecodeError:
            raise FeatureFormatError("segment id is not valid utf-8", at) from None
        at = pos
        t, n, c = struct.unpack("<III", take(12, "segment dims"))
        if 0 in (t, n, c):
            raise FeatureFormatError(f"segment {sid!r} has a zero dimension ({t}, {n}, {c})", at)
        if dims is not None and (n, c) != dims:
            raise FeatureFormatError(f"segment {sid!r} has (N, C_in)=({n}, {c}), earlier segments have {dims}", at)
        dims = (n, c)
        if sid in blobs:
            raise FeatureFormatError(f"duplicate segment id {sid!r}", at)
        payload = take(4 * t * n * c, f"payload of segment {sid!r}")
        blobs[sid] = np.frombuffer(payload, dtype="<f4").reshape(t, n, c).astype(np.float32)
    if pos != len(buf):
        raise FeatureFormatError(f"{len(buf) - pos} trailing bytes after {count} segments", pos)
    return blobs


def read_annotations(path) -> list[tuple[str, float, int, int, int]]:
    rows = []
    offset = 0
    for lineno, line in enumerate(Path(path).read_bytes().splitlines(keepends=True), 1):
        text = line.decode("utf-8").strip()
        if text:
            parts = text.split(",")
            try:
                if len(parts) != 5:
                    raise ValueError(f"expected 5 fields, got {len(parts)}")
                rows.append((parts[0], float(parts[1]), int(parts[2]), int(parts[3]), int(parts[4])))
            except ValueError as exc:
                raise FeatureFormatError(f"annotation line {lineno}: {exc}", offset) from None
        offset += len(line)
    return rows


def load_features(path, annotations=None) -> list[Segment]:
    """Read a feature file and join it with its annotations by segment id."""
    blobs = read_feature_blobs(path)
    ann = read_annotations(annotations_path(path) if annotations is None else annotations)
    orphans = [row[0] for row in ann if row[0] not in blobs]
    if orphans:
        raise FeatureFormatError(f"annotation ids without a feature blob: {', '.join(orphans)}")
    ids = {row[0] for row in ann}
    unlabeled = [sid for sid in blobs if sid not in ids]
    if unlabeled:
        raise FeatureFormatError(f"feature blobs without annotations: {', '.join(unlabeled)}")
    return [Segment(sid, blobs[sid], t_s, v, n, a) for sid, t_s, v, n, a in ann]
