"""Anticipation protocol: frame sampling, summed per-interval loss, and evaluation metrics."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .data import Segment


class SegmentTooEarly(ValueError):
    """The observation window would start before the recording does."""


@dataclass
class AnticipationConfig:
    num_frames: int = 14
    stride_s: float = 0.25
    intervals_s: tuple[float, ...] = (2.0, 1.75, 1.5, 1.25, 1.0, 0.75, 0.5, 0.25)

    def __post_init__(self):
        self.intervals_s = tuple(float(t) for t in self.intervals_s)
        self.validate()

    def validate(self) -> None:
        iv = self.intervals_s
        if not iv:
            raise ValueError("need at least one anticipation interval")
        if any(b >= a for a, b in zip(iv, iv[1:])):
            raise ValueError(f"intervals must be strictly decreasing, got {iv}")
        if self.num_frames < len(iv):
            raise ValueError(f"{self.num_frames} frames cannot host {len(iv)} intervals")
        steps = self.interval_steps()
        if len(set(steps.values())) != len(iv):
            raise ValueError(f"intervals {iv} do not map to distinct steps")

    def interval_steps(self) -> dict[float, int]:
        """Step index whose frame time is ``t_s - tau``."""
        out = {}
        for tau in self.intervals_s:
            back = tau / self.stride_s
            if abs(back - round(back)) > 1e-9 or not 1 <= round(back) <= self.num_frames:
                raise ValueError(f"interval {tau}s is not a whole number of strides within the window")
            out[tau] = self.num_frames - int(round(back))
        return out

    @property
    def steps(self) -> list[int]:
        return sorted(self.interval_steps().values())


def frame_indices(cfg: AnticipationConfig, t_start_s: float, fps: float) -> tuple[list[int], dict[float, int]]:
    """Recording frame indices of the observed window and the interval-to-step map.

    The window ends one stride before ``t_start_s``; nothing at or after the
    action start is returned.
    """
    first = t_start_s - cfg.num_frames * cfg.stride_s
    if first < -1e-9:
        raise SegmentTooEarly(
            f"action starts at {t_start_s}s but the window needs {cfg.num_frames * cfg.stride_s}s of history"
        )
    times = [first + j * cfg.stride_s for j in range(cfg.num_frames)]
    idx = [int(math.floor(t * fps + 1e-6)) for t in times]
    limit = t_start_s * fps
    assert all(i < limit - 1e-9 for i in idx), "sampled a frame at or after the action start"
    return idx, cfg.interval_steps()


def sample_frames(seg: Segment, cfg: AnticipationConfig, fps: float) -> np.ndarray:
    idx, _ = frame_indices(cfg, seg.t_start_s, fps)
    if idx[-1] >= seg.frames.shape[0]:
        raise ValueError(f"segment {seg.id!r} has {seg.frames.shape[0]} frames, window needs index {idx[-1]}")
    return seg.frames[idx]


def usable_segments(segments: Sequence[Segment], cfg: AnticipationConfig, fps: float) -> list[Segment]:
    """Drop (with a warning) segments whose action starts too early to sample a full window."""
    keep = []
    for seg in segments:
        try:
            frame_indices(cfg, seg.t_start_s, fps)
        except SegmentTooEarly as exc:
            warnings.warn(f"skipping segment {seg.id!r}: {exc}", stacklevel=2)
            continue
        keep.append(seg)
    return keep


def stack_batch(segments: Sequence[Segment], cfg: AnticipationConfig, fps: float):
    frames = np.stack([sample_frames(s, cfg, fps) for s in segments])
    labels = (
        np.array([s.verb for s in segments]),
        np.array([s.noun for s in segments]),
        np.array([s.action for s in segments]),
    )
    return frames, labels


def forward_batch(model, frames: np.ndarray, cfg: AnticipationConfig):
    """Per-interval ``(verb, noun, action)`` logits, ordered like ``cfg.intervals_s``."""
    x = Tensor(np.asarray(frames, dtype=model.dtype))
    return model.forward(x, cfg.steps)


def forward_segment(model, seg: Segment, cfg: AnticipationConfig, fps: float):
    frames = sample_frames(seg, cfg, fps)[None]
    return [tuple(Tensor(t.data[0]) for t in trip) for trip in forward_batch(model, frames, cfg)]


def anticipation_loss(per_interval_logits, labels) -> Tensor:
    """Sum over intervals of verb, noun and action cross-entropies (each averaged over the batch)."""
    verbs, nouns, actions = (np.atleast_1d(np.asarray(l)) for l in labels)
    total = None
    for v, n, a in per_interval_logits:
        if v.ndim == 1:
            v, n, a = (ad.reshape(t, (1, t.shape[0])) for t in (v, n, a))
        term = ad.add(ad.add(ad.cross_entropy(v, verbs), ad.cross_entropy(n, nouns)), ad.cross_entropy(a, actions))
        total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------- metrics


def topk_ranks(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k class ids per row, highest first, ties going to the lower class index.

    A ``k`` above the class count keeps every class.
    """
    scores = np.asarray(scores)
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def _hits(scores, labels, k) -> np.ndarray:
    labels = np.asarray(labels)
    return (topk_ranks(scores, k) == labels[:, None]).any(axis=1)


def topk_accuracy(scores, labels, k: int) -> float:
    return float(_hits(scores, labels, k).mean())


def mean_topk_recall(scores, labels, k: int) -> float:
    """Per-class top-k recall averaged over the classes that occur in ``labels``."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("mean_topk_recall is undefined without any ground-truth classes")
    hits = _hits(scores, labels, k)
    present = np.unique(labels)
    # fsum makes the average independent of class order
    return math.fsum(hits[labels == c].mean() for c in present) / len(present)


METRICS = (
    "verb_top1", "verb_top5", "noun_top1", "noun_top5", "action_top1", "action_top5",
    "verb_recall5", "noun_recall5", "action_recall5",
)


@dataclass
class EvalReport:
    intervals: tuple[float, ...]
    metrics: dict[float, dict[str, float]] = field(default_factory=dict)
    count: int = 0

    def lines(self) -> list[str]:
        return [f"eval,{tau:.2f},{name},{self.metrics[tau][name]!r}" for tau in self.intervals for name in METRICS]

    def table(self) -> str:
        head = f"{'tau_a':>6} " + " ".join(f"{m:>14}" for m in METRICS)
        rows = [f"{tau:>6.2f} " + " ".join(f"{100 * self.metrics[tau][m]:>13.2f}%" for m in METRICS) for tau in self.intervals]
        return "\n".join([head, *rows, f"samples: {self.count}"])


def collect_scores(model, segments: Sequence[Segment], cfg: AnticipationConfig, fps: float, batch_size: int = 64):
    """Stacked logits per interval: ``{tau: (verb, noun, action)}`` arrays of shape (S, classes)."""
    per = {tau: ([], [], []) for tau in cfg.intervals_s}
    taus = sorted(cfg.intervals_s, key=lambda t: cfg.interval_steps()[t])
    with no_grad():
        for i in range(0, len(segments), batch_size):
            frames, _ = stack_batch(segments[i : i + batch_size], cfg, fps)
            for tau, trip in zip(taus, forward_batch(model, frames, cfg)):
                for bucket, t in zip(per[tau], trip):
                    bucket.append(t.data)
    return {tau: tuple(np.concatenate(b) for b in per[tau]) for tau in cfg.intervals_s}


def evaluate(model, segments: Sequence[Segment], cfg: AnticipationConfig, fps: float, batch_size: int = 64) -> EvalReport:
    scores = collect_scores(model, segments, cfg, fps, batch_size)
    labels = (
        np.array([s.verb for s in segments]),
        np.array([s.noun for s in segments]),
        np.array([s.action for s in segments]),
    )
    report = EvalReport(tuple(cfg.intervals_s), count=len(segments))
    for tau, trip in scores.items():
        row = {}
        for name, sc, lab in zip(("verb", "noun", "action"), trip, labels):
            k5 = min(5, sc.shape[1])
            row[f"{name}_top1"] = topk_accuracy(sc, lab, 1)
            row[f"{name}_top5"] = topk_accuracy(sc, lab, k5)
            row[f"{name}_recall5"] = mean_topk_recall(sc, lab, k5)
        report.metrics[tau] = {m: row[m] for m in METRICS}
    return report
