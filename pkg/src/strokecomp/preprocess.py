"""Keyframe extraction, windowed de-duplication, spline time alignment, Z-scoring."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .skeleton import Dataset, MotionSequence, N_JOINTS

log = logging.getLogger(__name__)

N_CHANNELS = N_JOINTS * 3
DEGENERATE_STD = 1e-12


@dataclass(frozen=True)
class PreprocessConfig:
    keyframe_threshold: float = 0.005
    window_size: int = 5
    window_step: int = 2
    similarity_epsilon: float = 0.002
    target_length: int | str = "auto"

    def __post_init__(self):
        if self.keyframe_threshold <= 0 or self.similarity_epsilon <= 0:
            raise ValueError("thresholds must be positive")
        if self.window_step < 1 or self.window_size < self.window_step:
            raise ValueError("need window_step >= 1 and window_size >= window_step")
        if self.target_length != "auto" and int(self.target_length) < 2:
            raise ValueError("target_length must be 'auto' or an integer >= 2")


@dataclass(frozen=True, eq=False)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray
    target_length: int | None = None

    @property
    def degenerate(self) -> np.ndarray:
        return self.std < DEGENERATE_STD

    def __eq__(self, other):
        if not isinstance(other, ChannelStats):
            return NotImplemented
        return (self.target_length == other.target_length
                and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.std, other.std))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "target_length": self.target_length}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        mean = np.asarray(d["mean"], dtype=np.float64)
        std = np.asarray(d["std"], dtype=np.float64)
        if mean.shape != (N_CHANNELS,) or std.shape != (N_CHANNELS,):
            raise ValueError(f"stats must hold {N_CHANNELS} means and stds")
        tl = d.get("target_length")
        return cls(mean, std, None if tl is None else int(tl))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path) -> "ChannelStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def mean_joint_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over joints of the Euclidean distance between two (20, 3) poses."""
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


def extract_keyframes(seq: MotionSequence, threshold: float) -> MotionSequence:
    """Keep the first frame, then every frame that moved more than ``threshold``
    (mean per-joint distance) away from the last kept frame."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    coords = seq.coords
    keep = [0]
    for i in range(1, len(coords)):
        if mean_joint_distance(coords[i], coords[keep[-1]]) > threshold:
            keep.append(i)
    return seq.with_frames(coords[keep], seq.timestamps[keep])


def _dedup_pass(coords: np.ndarray, size: int, step: int, eps: float) -> np.ndarray:
    n = len(coords)
    # near[d][k] : frames k and k + d are closer than eps
    near = [None] + [np.linalg.norm(coords[d:] - coords[:n - d], axis=-1).mean(axis=-1) < eps
                     for d in range(1, min(size, n))]
    keep = np.ones(n, dtype=bool)
    start = 0
    while True:
        kept_here: list[int] = []
        for i in range(start, min(start + size, n)):
            if not keep[i]:
                continue
            if any(near[i - k][k] for k in kept_here):
                keep[i] = False
            else:
                kept_here.append(i)
        if start + size >= n:
            return keep
        start += step


def dedup_sliding_window(seq: MotionSequence, cfg: PreprocessConfig) -> MotionSequence:
    """Drop near-duplicate frames inside sliding windows.

    Windows of ``window_size`` frames advance by ``window_step``; a frame closer
    than ``similarity_epsilon`` to a frame already kept in the same window is
    removed. Removal can bring far-apart survivors into a common window, so the
    pass is repeated until nothing changes, which makes the operation idempotent.
    """
    coords, ts = seq.coords, seq.timestamps
    while True:
        keep = _dedup_pass(coords, cfg.window_size, cfg.window_step, cfg.similarity_epsilon)
        if keep.all():
            break
        coords, ts = coords[keep], ts[keep]
    return seq.with_frames(coords, ts)


def fit_spline(seq: MotionSequence) -> tuple[np.ndarray, CubicSpline]:
    """Natural cubic spline through every channel, over time rescaled to [0, 1].

    Returns the knot positions and the (T, 60)-valued interpolant.
    """
    if len(seq) < 2:
        raise ValueError("sequence too short to resample")
    t = seq.timestamps
    u = (t - t[0]) / (t[-1] - t[0])
    u[-1] = 1.0
    return u, CubicSpline(u, seq.channels(), axis=0, bc_type="natural")


def resample_cubic_spline(seq: MotionSequence, target_length: int) -> MotionSequence:
    """Sample the natural spline of every channel at ``target_length`` uniform times."""
    if target_length < 2:
        raise ValueError("target_length must be >= 2")
    _, spline = fit_spline(seq)
    grid = np.linspace(0.0, 1.0, target_length)
    out = spline(grid)
    # exact endpoints; the polynomial evaluation can be off by an ulp
    out[0], out[-1] = seq.channels()[0], seq.channels()[-1]
    t = seq.timestamps
    return seq.with_frames(out.reshape(target_length, N_JOINTS, 3), t[0] + grid * (t[-1] - t[0]))


def fit_channel_stats(train: list[MotionSequence], target_length: int | None = None) -> ChannelStats:
    """Population mean/std per channel over every frame of every training sequence."""
    if not train:
        raise ValueError("cannot fit channel statistics on an empty training set")
    lengths = {len(s) for s in train}
    if len(lengths) != 1:
        raise ValueError(f"training sequences must share one length, got {sorted(lengths)}")
    X = np.concatenate([s.channels() for s in train], axis=0)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    n_deg = int(np.sum(std < DEGENERATE_STD))
    if n_deg:
        log.warning("%d degenerate channel(s) with zero variance", n_deg)
    if target_length is None:
        target_length = lengths.pop()
    return ChannelStats(mean, std, target_length)


def apply_zscore(seq: MotionSequence, stats: ChannelStats) -> MotionSequence:
    X = seq.channels()
    deg = stats.degenerate
    safe = np.where(deg, 1.0, stats.std)
    Z = np.where(deg, 0.0, (X - stats.mean) / safe)
    return seq.with_frames(Z.reshape(seq.coords.shape), seq.timestamps)


def clean_sequence(seq: MotionSequence, cfg: PreprocessConfig) -> MotionSequence:
    return dedup_sliding_window(extract_keyframes(seq, cfg.keyframe_threshold), cfg)


class PreprocessError(ValueError):
    pass


def _cleaned(seqs, cfg):
    out = []
    for s in seqs:
        c = clean_sequence(s, cfg)
        if len(c) < 2:
            raise PreprocessError(f"sequence {s.key()} collapsed to {len(c)} frame(s) after keyframe/dedup")
        out.append(c)
    return out


def preprocess_sequences(seqs, cfg: PreprocessConfig, stats: ChannelStats) -> list[MotionSequence]:
    """Inference-time path: clean, resample to the stored length, Z-score with stored stats."""
    if stats.target_length is None:
        raise ValueError("stats carry no target_length")
    return [_finish(apply_zscore(resample_cubic_spline(c, stats.target_length), stats))
            for c in _cleaned(seqs, cfg)]


def _finish(seq: MotionSequence) -> MotionSequence:
    return seq.with_frames(seq.coords, seq.timestamps, preprocessed=True)


def preprocess_dataset(ds: Dataset, cfg: PreprocessConfig) -> tuple[Dataset, ChannelStats]:
    """Full chain with statistics and target length taken from the training subset only."""
    if not ds.has_split:
        raise ValueError("preprocess_dataset needs a dataset with a train/test split")
    cleaned = _cleaned(ds.sequences, cfg)
    if cfg.target_length == "auto":
        target = max(len(cleaned[i]) for i in ds.train_idx)
    else:
        target = int(cfg.target_length)
    resampled = [resample_cubic_spline(c, target) for c in cleaned]
    stats = fit_channel_stats([resampled[i] for i in ds.train_idx], target)
    out = [_finish(apply_zscore(s, stats)) for s in resampled]
    meta = dict(ds.meta, preprocess=asdict(cfg))
    return Dataset(out, ds.train_idx, ds.test_idx, stats, meta), stats
