"""Clip storage, resampling, window segmentation, manifests and the training corpus."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .pose_features import (
    Normalizer, SkeletonClip, featurize, read_features, write_features,
)
from .synth import SynthClip

log = logging.getLogger(__name__)

TARGET_FPS = 30.0


@dataclass
class MotionClip:
    id: str
    source: str
    skeleton: SkeletonClip
    texts: list[str] = field(default_factory=list)

    @property
    def fps(self) -> float:
        return self.skeleton.fps

    @property
    def n_frames(self) -> int:
        return self.skeleton.n_frames

    @property
    def duration(self) -> float:
        return self.skeleton.duration

    @classmethod
    def from_synth(cls, s: SynthClip) -> "MotionClip":
        return cls(s.id, f"synth:{s.primitive}", s.clip, list(s.texts))


def resample(clip: MotionClip, target_fps: float = TARGET_FPS) -> MotionClip:
    """Linear interpolation of joint positions onto round(T * target / source) frames.

    Output frames are spaced uniformly between the first and last source frames,
    so both endpoint poses are reproduced exactly.
    """
    if clip.fps <= 0 or target_fps <= 0:
        raise ContractError(f"fps must be positive (source {clip.fps}, target {target_fps})")
    P = clip.skeleton.joints
    T = P.shape[0]
    n_out = max(2, int(round(T * target_fps / clip.fps)))
    if n_out == T:
        joints = P.copy()
    else:
        s = np.arange(n_out) * (T - 1) / (n_out - 1)
        i0 = np.minimum(np.floor(s).astype(int), T - 2)
        w = (s - i0)[:, None, None]
        joints = (1.0 - w) * P[i0] + w * P[i0 + 1]
    return MotionClip(clip.id, clip.source, SkeletonClip(target_fps, joints, clip.skeleton.names),
                      list(clip.texts))


def window_starts(n_frames: int, window: int, min_frames: int, max_overlap: float = 0.25) -> list[tuple[int, int]]:
    """(start, stop) frame ranges of the overlap-bounded windows of one clip."""
    if n_frames < min_frames:
        return []
    if n_frames <= window:
        return [(0, n_frames)]
    # smallest integer stride whose overlap stays strictly below the bound
    stride = int(math.floor((1.0 - max_overlap) * window)) + 1
    spans = []
    start = 0
    while start + window <= n_frames:
        spans.append((start, start + window))
        start += stride
    prev_end = spans[-1][1]
    if prev_end < n_frames:
        # tail window: shift right until its overlap with the previous one is in bounds
        lo = math.floor((prev_end - max_overlap * n_frames) / (1.0 - max_overlap)) + 1
        start = max(start, lo)
        if n_frames - start >= min_frames:
            spans.append((start, n_frames))
    return spans


def overlap_fraction(a: tuple[int, int], b: tuple[int, int]) -> float:
    """Shared frames relative to the shorter of the two windows."""
    shared = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    return shared / min(a[1] - a[0], b[1] - b[0])


def segment_windows(
    clip: MotionClip, min_s: float = 2.0, max_s: float = 10.0, max_overlap: float = 0.25
) -> list[MotionClip]:
    window = int(round(max_s * clip.fps))
    min_frames = int(math.ceil(min_s * clip.fps))
    spans = window_starts(clip.n_frames, window, min_frames, max_overlap)
    if not spans:
        log.warning("clip %s (%.2f s) is shorter than %.1f s; no windows", clip.id, clip.duration, min_s)
        return []
    if len(spans) == 1:
        return [clip]
    out = []
    for k, (a, b) in enumerate(spans):
        sk = SkeletonClip(clip.fps, clip.skeleton.joints[a:b], clip.skeleton.names)
        out.append(MotionClip(f"{clip.id}_w{k:02d}", clip.source, sk, list(clip.texts)))
    return out


@dataclass
class ManifestEntry:
    path: str
    frames: int
    texts: list[str]
    source: str
    fps: float = TARGET_FPS


class DatasetManifest:
    """Index of feature files with running totals that are re-verified on every ingest."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self.entries: dict[str, ManifestEntry] = {}
        self.total_frames = 0
        self.text_total = 0
        self.per_source: dict[str, int] = {}

    def add(self, clip_id: str, entry: ManifestEntry) -> None:
        if clip_id in self.entries:
            raise ContractError(f"duplicate clip id {clip_id!r}")
        self.entries[clip_id] = entry
        self.total_frames += entry.frames
        self.text_total += len(entry.texts)
        self.per_source[entry.source] = self.per_source.get(entry.source, 0) + entry.frames
        self.check()

    def check(self) -> None:
        frames = sum(e.frames for e in self.entries.values())
        if frames != self.total_frames or sum(self.per_source.values()) != self.total_frames:
            raise ContractError("manifest totals disagree with entries")
        if sum(len(e.texts) for e in self.entries.values()) != self.text_total:
            raise ContractError("manifest text total disagrees with entries")

    @property
    def total_hours(self) -> float:
        return sum(e.frames / e.fps for e in self.entries.values()) / 3600.0

    def stats(self) -> dict:
        return {
            "clips": len(self.entries),
            "total_frames": self.total_frames,
            "total_hours": self.total_hours,
            "text_total": self.text_total,
            "per_source_frames": dict(sorted(self.per_source.items())),
        }

    def to_json(self) -> dict:
        return {
            "entries": {k: vars(v) for k, v in sorted(self.entries.items())},
            **self.stats(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        try:
            obj = json.loads(path.read_text())
            m = cls(path.parent)
            for k, v in obj["entries"].items():
                m.add(k, ManifestEntry(**v))
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: malformed manifest ({e})") from None
        if m.total_frames != obj.get("total_frames", m.total_frames):
            raise FormatError(f"{path}: stored total_frames does not match entries")
        return m


@dataclass
class CorpusItem:
    id: str
    source: str
    features: np.ndarray  # raw (T, 263)
    texts: list[str]


class Corpus:
    """Featurized clips with a deterministic train/held-out split and training-split statistics."""

    def __init__(self, items: list[CorpusItem], holdout: float = 0.1, seed: int = 0):
        if not items:
            raise ContractError("empty corpus")
        self.items = items
        order = np.random.default_rng(seed).permutation(len(items))
        n_hold = int(round(holdout * len(items)))
        self.holdout_idx = sorted(order[:n_hold].tolist())
        self.train_idx = sorted(order[n_hold:].tolist())
        if not self.train_idx:
            raise ContractError("no training clips after the held-out split")
        self.normalizer = Normalizer.fit([items[i].features for i in self.train_idx])

    def split(self, which: str) -> list[CorpusItem]:
        idx = self.train_idx if which == "train" else self.holdout_idx
        return [self.items[i] for i in idx]

    def normalized(self, item: CorpusItem) -> np.ndarray:
        return self.normalizer.normalize(item.features).astype(np.float32)

    @classmethod
    def from_clips(cls, clips: list[MotionClip], holdout: float = 0.1, seed: int = 0,
                   max_s: float = 10.0, min_s: float = 2.0) -> "Corpus":
        items = []
        for clip in clips:
            if clip.fps != TARGET_FPS:
                clip = resample(clip)
            for w in segment_windows(clip, min_s=min_s, max_s=max_s):
                items.append(CorpusItem(w.id, w.source, featurize(w.skeleton).features, list(w.texts)))
        return cls(items, holdout, seed)

    @classmethod
    def from_manifest(cls, path: str | Path, holdout: float = 0.1, seed: int = 0) -> "Corpus":
        m = DatasetManifest.load(path)
        items = []
        for cid, e in sorted(m.entries.items()):
            seq = read_features(Path(path).parent / e.path)
            items.append(CorpusItem(cid, e.source, seq.features, list(e.texts)))
        return cls(items, holdout, seed)


def write_corpus(clips: list[MotionClip], out_dir: str | Path, segment: bool = True) -> DatasetManifest:
    """Featurize clips into ``out_dir`` as feature files plus ``manifest.json``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(out)
    for clip in clips:
        if clip.fps != TARGET_FPS:
            clip = resample(clip)
        windows = segment_windows(clip) if segment else [clip]
        for w in windows:
            seq = featurize(w.skeleton)
            rel = f"features/{w.id}.gm3f"
            write_features(out / rel, seq)
            manifest.add(w.id, ManifestEntry(rel, len(seq), list(w.texts), w.source, w.fps))
    manifest.save(out / "manifest.json")
    return manifest

