"""Skeleton sequences, class labels, the upper-limb joint graph and JSONL I/O."""
from __future__ import annotations

import enum
import json
import logging
import math
import warnings
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

N_JOINTS = 20


class Label(enum.IntEnum):
    NC = 0
    TLF = 1
    TR = 2
    SE = 3


class ActionKind(enum.Enum):
    TOUCH_MOUTH = "touch_mouth"
    EXTEND_BACKWARD = "extend_backward"
    ARM_ABDUCTION = "arm_abduction"

    @property
    def compensation(self) -> Label:
        """The single compensation pattern associated with this movement."""
        return _COMPENSATION[self]


_COMPENSATION = {
    ActionKind.TOUCH_MOUTH: Label.TLF,
    ActionKind.EXTEND_BACKWARD: Label.TR,
    ActionKind.ARM_ABDUCTION: Label.SE,
}


JOINT_NAMES = (
    "PELVIS", "SPINE_NAVEL", "SPINE_CHEST", "NECK", "HEAD", "NOSE",
    "CLAVICLE_LEFT", "SHOULDER_LEFT", "ELBOW_LEFT", "WRIST_LEFT",
    "HAND_LEFT", "HANDTIP_LEFT", "THUMB_LEFT",
    "CLAVICLE_RIGHT", "SHOULDER_RIGHT", "ELBOW_RIGHT", "WRIST_RIGHT",
    "HAND_RIGHT", "HANDTIP_RIGHT", "THUMB_RIGHT",
)
JOINT = {name: i for i, name in enumerate(JOINT_NAMES)}


def _edges():
    j = JOINT
    edges = [
        (j["PELVIS"], j["SPINE_NAVEL"]),
        (j["SPINE_NAVEL"], j["SPINE_CHEST"]),
        (j["SPINE_CHEST"], j["NECK"]),
        (j["NECK"], j["HEAD"]),
        (j["HEAD"], j["NOSE"]),
    ]
    for side in ("LEFT", "RIGHT"):
        chain = ["CLAVICLE", "SHOULDER", "ELBOW", "WRIST", "HAND", "HANDTIP"]
        edges.append((j["SPINE_CHEST"], j[f"CLAVICLE_{side}"]))
        edges += [(j[f"{a}_{side}"], j[f"{b}_{side}"]) for a, b in zip(chain, chain[1:])]
        edges.append((j[f"WRIST_{side}"], j[f"THUMB_{side}"]))
    return tuple(edges)


@dataclass(frozen=True)
class SkeletonGraph:
    n_nodes: int
    edges: tuple[tuple[int, int], ...]
    joint_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.joint_names) != self.n_nodes:
            raise ValueError("joint_names must have one entry per node")
        seen = set()
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self-loop on node {a}")
            if not (0 <= a < self.n_nodes and 0 <= b < self.n_nodes):
                raise ValueError(f"edge ({a}, {b}) out of range")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
        if not self.is_connected():
            raise ValueError("skeleton graph must be connected")

    def adjacency(self) -> np.ndarray:
        """Symmetric 0/1 adjacency matrix without self-loops."""
        A = np.zeros((self.n_nodes, self.n_nodes))
        for a, b in self.edges:
            A[a, b] = A[b, a] = 1.0
        return A

    def degree(self, node: int) -> int:
        return sum(node in e for e in self.edges)

    def bfs_order(self, start: int = 0) -> list[int]:
        nbrs: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for a, b in self.edges:
            nbrs[a].append(b)
            nbrs[b].append(a)
        order, seen, queue = [], {start}, deque([start])
        while queue:
            u = queue.popleft()
            order.append(u)
            for v in nbrs[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return order

    def is_connected(self) -> bool:
        return self.n_nodes == 0 or len(self.bfs_order()) == self.n_nodes


def canonical_upper_limb_graph() -> SkeletonGraph:
    """The fixed 20-joint, 19-edge upper-body tree used throughout."""
    return SkeletonGraph(N_JOINTS, _edges(), JOINT_NAMES)


class SkeletonFrame(NamedTuple):
    coords: np.ndarray  # (20, 3) meters
    timestamp: float


@dataclass(frozen=True, eq=False)
class MotionSequence:
    """One recorded repetition seen from one camera.

    ``coords`` has shape (T, 20, 3); ``timestamps`` has shape (T,).
    """

    coords: np.ndarray
    timestamps: np.ndarray
    label: Label
    action: ActionKind
    subject_id: str = "S00"
    view_id: int = 0
    repetition: int = 0
    fps: float = 30.0
    preprocessed: bool = False

    def __post_init__(self):
        # own copies: they are frozen below and must not freeze the caller's arrays
        coords = np.array(self.coords, dtype=np.float64)
        ts = np.array(self.timestamps, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[1:] != (N_JOINTS, 3):
            raise SchemaError(f"expected coords of shape (T, {N_JOINTS}, 3), got {coords.shape}")
        if ts.shape != (coords.shape[0],):
            raise SchemaError(f"{ts.shape[0] if ts.ndim else 0} timestamps for {coords.shape[0]} frames")
        if coords.shape[0] < 1:
            raise ValidationError("sequence has no frames")
        if not np.all(np.isfinite(coords)) or not np.all(np.isfinite(ts)):
            raise ValidationError("non-finite coordinate or timestamp")
        if ts[0] < 0 or np.any(np.diff(ts) <= 0):
            raise ValidationError("timestamps must be non-negative and strictly increasing")
        coords.flags.writeable = False
        ts.flags.writeable = False
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "action", ActionKind(self.action))

    def __len__(self):
        return self.coords.shape[0]

    @property
    def frames(self) -> list[SkeletonFrame]:
        return [SkeletonFrame(c, float(t)) for c, t in zip(self.coords, self.timestamps)]

    def with_frames(self, coords, timestamps, **changes) -> "MotionSequence":
        """Copy with new frame data and unchanged metadata."""
        return replace(self, coords=coords, timestamps=timestamps, **changes)

    def channels(self) -> np.ndarray:
        """(T, 60) view, channel = joint * 3 + axis."""
        return self.coords.reshape(len(self), N_JOINTS * 3)

    def key(self) -> str:
        return f"{self.subject_id}/{self.action.value}/r{self.repetition}/v{self.view_id}"


@dataclass
class Dataset:
    sequences: list[MotionSequence]
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    stats: object | None = None  # ChannelStats once preprocessed
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.train_idx is None) != (self.test_idx is None):
            raise ValueError("train_idx and test_idx must be given together")
        if self.train_idx is not None:
            tr = np.asarray(self.train_idx, dtype=np.int64)
            te = np.asarray(self.test_idx, dtype=np.int64)
            n = len(self.sequences)
            both = np.concatenate([tr, te])
            if len(np.unique(both)) != len(both) or len(both) != n or (n and (both.min() < 0 or both.max() >= n)):
                raise ValueError("train/test indices must be a disjoint cover of the dataset")
            self.train_idx, self.test_idx = tr, te

    def __len__(self):
        return len(self.sequences)

    @property
    def has_split(self) -> bool:
        return self.train_idx is not None

    def labels(self) -> np.ndarray:
        return np.array([int(s.label) for s in self.sequences], dtype=np.int64)

    def subset(self, which: str) -> list[MotionSequence]:
        if which == "all":
            return list(self.sequences)
        if not self.has_split:
            raise ValueError("dataset has no train/test split")
        idx = self.train_idx if which == "train" else self.test_idx
        return [self.sequences[i] for i in idx]


class DatasetError(Exception):
    """Base class for dataset loading and validation problems."""


class ParseError(DatasetError):
    pass


class SchemaError(DatasetError):
    pass


class ValidationError(DatasetError):
    pass


def sequence_to_record(seq: MotionSequence) -> dict:
    rec = {
        "subject_id": seq.subject_id,
        "view_id": int(seq.view_id),
        "repetition": int(seq.repetition),
        "action": seq.action.value,
        "label": seq.label.name,
        "fps": float(seq.fps),
        "frames": [{"t": float(t), "xyz": c.tolist()} for c, t in zip(seq.coords, seq.timestamps)],
    }
    if seq.preprocessed:
        rec["preprocessed"] = True
    return rec


def record_to_sequence(rec: dict) -> MotionSequence:
    try:
        frames = rec["frames"]
        label = Label[rec["label"]]
        action = ActionKind(rec["action"])
        xyz = [f["xyz"] for f in frames]
        ts = [f["t"] for f in frames]
        subject_id, view_id, repetition = str(rec["subject_id"]), int(rec["view_id"]), int(rec["repetition"])
        fps = float(rec["fps"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad record: {exc!r}") from exc
    for k, joints in enumerate(xyz):
        if len(joints) != N_JOINTS or any(len(p) != 3 for p in joints):
            raise SchemaError(f"frame {k}: expected {N_JOINTS} joints of 3 coordinates, got {len(joints)}")
    if len(xyz) < 2:
        raise ValidationError("sequence needs at least 2 frames")
    coords = np.array(xyz, dtype=np.float64).reshape(len(xyz), N_JOINTS, 3)
    return MotionSequence(coords, np.array(ts, dtype=np.float64), label, action, subject_id,
                          view_id, repetition, fps, bool(rec.get("preprocessed", False)))


def save_dataset(ds: Dataset | Sequence[MotionSequence], path) -> Path:
    """Write one JSON object per line. Floats go through ``repr`` so they round-trip exactly."""
    seqs = ds.sequences if isinstance(ds, Dataset) else ds
    path = Path(path)
    with path.open("w") as fh:
        for seq in seqs:
            fh.write(json.dumps(sequence_to_record(seq)))
            fh.write("\n")
    return path


def load_dataset(path, format: str = "jsonl") -> Dataset:
    if format != "jsonl":
        raise ValueError(f"unsupported dataset format {format!r}")
    path = Path(path)
    seqs = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            try:
                seqs.append(record_to_sequence(rec))
            except DatasetError as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from exc
    if not seqs:
        warnings.warn(f"{path} contains no sequences", stacklevel=2)
    return Dataset(seqs)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(ds: Dataset, train_fraction: float = 0.8, seed: int = 0,
                     by: str = "sequence") -> Dataset:
    """Per-class random split; ``by="subject"`` keeps each subject on one side."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    if by == "subject":
        return _subject_split(ds, train_fraction, seed)
    if by != "sequence":
        raise ValueError(f"unknown split mode {by!r}")
    labels = ds.labels()
    rng = np.random.default_rng(seed)
    train, test = [], []
    for lab in Label:
        idx = np.flatnonzero(labels == lab)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise ValueError(f"class {lab.name} has {len(idx)} sequence(s); need at least 2 to split")
        idx = rng.permutation(idx)
        n_train = min(max(_round_half_up(len(idx) * train_fraction), 1), len(idx) - 1)
        train.extend(idx[:n_train])
        test.extend(idx[n_train:])
    return Dataset(ds.sequences, np.sort(np.array(train, dtype=np.int64)),
                   np.sort(np.array(test, dtype=np.int64)), ds.stats, dict(ds.meta))


def _subject_split(ds: Dataset, train_fraction: float, seed: int) -> Dataset:
    subjects = sorted({s.subject_id for s in ds.sequences})
    if len(subjects) < 2:
        raise ValueError("subject-wise split needs at least 2 subjects")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n_train = min(max(_round_half_up(len(subjects) * train_fraction), 1), len(subjects) - 1)
    train_subjects = set(order[:n_train])
    train = [i for i, s in enumerate(ds.sequences) if s.subject_id in train_subjects]
    test = [i for i, s in enumerate(ds.sequences) if s.subject_id not in train_subjects]
    return Dataset(ds.sequences, np.array(train, dtype=np.int64), np.array(test, dtype=np.int64),
                   ds.stats, dict(ds.meta))
