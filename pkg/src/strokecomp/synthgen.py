"""Synthetic seated rehab movements with injectable trunk/shoulder compensation.

Poses are driven by a handful of joint angles and turned into the 20 joint
positions by forward kinematics, so bone lengths are exact before noise.
Each repetition is rendered once and seen from three fixed camera poses.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .skeleton import JOINT, N_JOINTS, ActionKind, Dataset, Label, MotionSequence, save_dataset

ACTIONS = (ActionKind.TOUCH_MOUTH, ActionKind.EXTEND_BACKWARD, ActionKind.ARM_ABDUCTION)


@dataclass(frozen=True)
class GenConfig:
    n_subjects: int = 15
    reps_per_action: int = 6
    views: int = 3
    fps: float = 30.0
    compensation_rate: float = 0.5
    noise_sigma: float = 0.003
    duration_range: tuple[float, float] = (2.0, 4.0)
    tlf_pitch_deg: tuple[float, float] = (10.0, 30.0)
    tr_yaw_deg: tuple[float, float] = (10.0, 30.0)
    se_lift_m: tuple[float, float] = (0.03, 0.08)
    seed: int = 0

    def __post_init__(self):
        for name in ("duration_range", "tlf_pitch_deg", "tr_yaw_deg", "se_lift_m"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if not 0 < lo < hi:
                raise ValueError(f"{name} must be a positive, non-degenerate range, got {(lo, hi)}")
        if not 0.0 <= self.compensation_rate <= 1.0:
            raise ValueError("compensation_rate must lie in [0, 1]")
        if not 1 <= self.views <= len(CAMERA_YAWS_DEG):
            raise ValueError(f"views must be between 1 and {len(CAMERA_YAWS_DEG)}")
        if self.n_subjects < 1 or self.reps_per_action < 1 or self.fps <= 0 or self.noise_sigma < 0:
            raise ValueError("n_subjects, reps_per_action, fps must be positive and noise_sigma >= 0")
        if self.se_lift_m[1] >= CLAVICLE_LENGTH * 0.9:
            raise ValueError("se_lift_m upper bound exceeds what the clavicle can produce")

    def to_dict(self) -> dict:
        return asdict(self)


# Adult template, meters, trunk frame: x lateral (+ = left), y up, z forward.
SPINE_OFFSETS = {
    "SPINE_NAVEL": ("PELVIS", (0.0, 0.20, 0.0)),
    "SPINE_CHEST": ("SPINE_NAVEL", (0.0, 0.18, 0.0)),
    "NECK": ("SPINE_CHEST", (0.0, 0.20, 0.0)),
    "HEAD": ("NECK", (0.0, 0.10, 0.03)),
    "NOSE": ("HEAD", (0.0, 0.02, 0.09)),
}
CLAVICLE_OFFSET = (0.035, 0.15, 0.0)  # from SPINE_CHEST, x mirrored per side
CLAVICLE_LENGTH = 0.16
UPPER_ARM, FOREARM, HAND, HANDTIP = 0.29, 0.25, 0.08, 0.07
THUMB_OFFSET = (0.025, -0.045, 0.025)  # from WRIST in hand frame, x mirrored per side

# peak joint angles (degrees) of the moving arm: flexion, abduction, rotation, elbow, wrist
ACTION_TARGETS = {
    ActionKind.TOUCH_MOUTH: (60.0, 0.0, -40.0, 120.0, 10.0),
    ActionKind.EXTEND_BACKWARD: (-45.0, 0.0, 0.0, 10.0, 0.0),
    ActionKind.ARM_ABDUCTION: (0.0, 90.0, 0.0, 10.0, 0.0),
}
REST_POSE = (0.0, 5.0, 0.0, 10.0, 0.0)

CAMERA_YAWS_DEG = (0.0, 45.0, -45.0)
CAMERA_DISTANCE = 2.5
CAMERA_HEIGHT = 1.0
SEAT_HEIGHT = 0.45
# per-subject nuisance: fraction of the template reach achieved, its per-repetition
# jitter, and horizontal seat placement
ROM_RANGE = (0.7, 1.0)
AMPLITUDE_JITTER = 0.05
PELVIS_JITTER = 0.05
# share of subjects whose left arm is the affected one; 0 keeps the moving arm on
# one side so the classes differ in trunk and shoulder motion, not in handedness
LEFT_AFFECTED_RATE = 0.0


def rot_x(a):
    a = np.asarray(a, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def rot_y(a):
    a = np.asarray(a, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def rot_z(a):
    a = np.asarray(a, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def _apply(R, v):
    return np.einsum("...ij,...j->...i", R, v)


@dataclass
class KinematicPose:
    """Time-indexed pose parameters; every array has shape (T,) and angles are radians."""

    trunk_pitch: np.ndarray
    trunk_yaw: np.ndarray
    shoulder_lift: dict[str, np.ndarray]  # meters, per side
    arm: dict[str, np.ndarray]  # per side: (T, 5) flexion, abduction, rotation, elbow, wrist


def forward_kinematics(pose: KinematicPose, scale: float = 1.0, pelvis=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Joint positions (T, 20, 3) in the world frame."""
    T = len(pose.trunk_pitch)
    out = np.zeros((T, N_JOINTS, 3))
    local = np.zeros((T, N_JOINTS, 3))
    for name, (parent, off) in SPINE_OFFSETS.items():
        local[:, JOINT[name]] = local[:, JOINT[parent]] + scale * np.asarray(off)
    for side, sgn in (("LEFT", 1.0), ("RIGHT", -1.0)):
        clav = local[:, JOINT["SPINE_CHEST"]] + scale * np.array([sgn * CLAVICLE_OFFSET[0], *CLAVICLE_OFFSET[1:]])
        local[:, JOINT[f"CLAVICLE_{side}"]] = clav
        L = scale * CLAVICLE_LENGTH
        elev = np.arcsin(np.clip(pose.shoulder_lift[side] / L, -1.0, 1.0))
        shoulder = clav + np.stack([sgn * L * np.cos(elev), L * np.sin(elev), np.zeros(T)], -1)
        local[:, JOINT[f"SHOULDER_{side}"]] = shoulder
        ang = pose.arm[side]
        flex, abd, rot, elbow, wrist = (ang[:, k] for k in range(5))
        R_arm = rot_z(sgn * abd) @ rot_x(-flex) @ rot_y(sgn * rot)
        R_fore = R_arm @ rot_x(-elbow)
        R_hand = R_fore @ rot_x(-wrist)
        down = np.array([0.0, -1.0, 0.0])
        elbow_p = shoulder + scale * UPPER_ARM * _apply(R_arm, down)
        wrist_p = elbow_p + scale * FOREARM * _apply(R_fore, down)
        hand_p = wrist_p + scale * HAND * _apply(R_hand, down)
        tip_p = hand_p + scale * HANDTIP * _apply(R_hand, down)
        thumb_p = wrist_p + scale * _apply(R_hand, np.array([sgn * THUMB_OFFSET[0], *THUMB_OFFSET[1:]]))
        for nm, p in (("ELBOW", elbow_p), ("WRIST", wrist_p), ("HAND", hand_p),
                      ("HANDTIP", tip_p), ("THUMB", thumb_p)):
            local[:, JOINT[f"{nm}_{side}"]] = p
    R_trunk = rot_y(pose.trunk_yaw) @ rot_x(pose.trunk_pitch)
    out[:] = np.einsum("tij,tkj->tki", R_trunk, local) + np.asarray(pelvis)
    return out


def minimum_jerk(x):
    x = np.clip(x, 0.0, 1.0)
    return x ** 3 * (10 - 15 * x + 6 * x * x)


def reach_profile(tau, rise: float = 0.4):
    """0 -> 1 -> 0 over tau in [0, 1]: minimum-jerk out, hold, minimum-jerk back."""
    tau = np.asarray(tau, dtype=np.float64)
    return np.where(tau < 0.5, minimum_jerk(tau / rise), minimum_jerk((1.0 - tau) / rise))


def compensation_ramp(tau):
    """Smooth onset and release, peaking at mid-movement with value 1."""
    return np.sin(np.pi * np.asarray(tau)) ** 2


def camera_rotation(view_id: int) -> tuple[np.ndarray, np.ndarray]:
    """(R, center) such that camera coordinates are R @ (p - center)."""
    yaw = np.deg2rad(CAMERA_YAWS_DEG[view_id])
    target = np.array([0.0, CAMERA_HEIGHT, 0.0])
    toward = np.array([np.sin(yaw), 0.0, np.cos(yaw)])
    center = target + CAMERA_DISTANCE * toward
    f = -toward
    up = np.array([0.0, 1.0, 0.0])
    r = np.cross(up, f)
    return np.stack([r, up, f]), center


@dataclass
class RepetitionTruth:
    subject_id: str
    action: str
    repetition: int
    label: str
    affected_side: str
    magnitude: float  # degrees for TLF/TR, meters for SE, 0 for NC
    scale: float
    amplitude: float
    duration: float
    n_frames: int

    def to_dict(self):
        return asdict(self)


def _repetition_pose(action, label, magnitude, side, amplitude, n):
    tau = np.linspace(0.0, 1.0, n)
    prof = reach_profile(tau)
    arm = {}
    for s in ("LEFT", "RIGHT"):
        rest = np.deg2rad(np.array(REST_POSE))
        if s == side:
            target = np.deg2rad(np.array(ACTION_TARGETS[action])) * amplitude
            arm[s] = rest + prof[:, None] * (target - rest)
        else:
            arm[s] = np.tile(rest, (n, 1))
    ramp = compensation_ramp(tau)
    zero = np.zeros(n)
    pitch = np.deg2rad(magnitude) * ramp if label is Label.TLF else zero
    yaw_sign = 1.0 if side == "LEFT" else -1.0
    yaw = yaw_sign * np.deg2rad(magnitude) * ramp if label is Label.TR else zero
    lift = {s: (magnitude * ramp if (label is Label.SE and s == side) else zero) for s in ("LEFT", "RIGHT")}
    return KinematicPose(pitch, yaw, lift, arm)


def generate_with_truth(cfg: GenConfig) -> tuple[Dataset, list[RepetitionTruth]]:
    """Dataset in canonical (subject, action, repetition, view) order plus per-sequence ground truth."""
    seqs, truth = [], []
    cams = [camera_rotation(v) for v in range(cfg.views)]
    subject_seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_subjects)
    for s_idx, ss in enumerate(subject_seeds):
        rng = np.random.default_rng(ss)
        subject_id = f"S{s_idx + 1:02d}"
        scale = rng.uniform(0.9, 1.1)
        side = "LEFT" if rng.random() < LEFT_AFFECTED_RATE else "RIGHT"
        rom = rng.uniform(*ROM_RANGE)
        pelvis = np.array([rng.uniform(-PELVIS_JITTER, PELVIS_JITTER), SEAT_HEIGHT,
                           rng.uniform(-PELVIS_JITTER, PELVIS_JITTER)])
        for action in ACTIONS:
            for rep in range(cfg.reps_per_action):
                duration = rng.uniform(*cfg.duration_range)
                n = int(round(duration * cfg.fps))
                amplitude = float(np.clip(rom + rng.normal(0.0, AMPLITUDE_JITTER), 0.5, 1.05))
                compensated = rng.random() < cfg.compensation_rate
                label = action.compensation if compensated else Label.NC
                if label is Label.TLF:
                    magnitude = rng.uniform(*cfg.tlf_pitch_deg)
                elif label is Label.TR:
                    magnitude = rng.uniform(*cfg.tr_yaw_deg)
                elif label is Label.SE:
                    magnitude = rng.uniform(*cfg.se_lift_m)
                else:
                    magnitude = 0.0
                pose = _repetition_pose(action, label, magnitude, side, amplitude, n)
                world = forward_kinematics(pose, scale, pelvis)
                ts = np.arange(n) / cfg.fps
                for view_id, (R, center) in enumerate(cams):
                    cam = (world - center) @ R.T
                    if cfg.noise_sigma > 0:
                        cam = cam + rng.normal(0.0, cfg.noise_sigma, size=cam.shape)
                    seqs.append(MotionSequence(cam, ts, label, action, subject_id, view_id, rep, cfg.fps))
                    truth.append(RepetitionTruth(subject_id, action.value, rep, label.name, side,
                                                 float(magnitude), float(scale), amplitude, float(duration), n))
    return Dataset(seqs, meta={"generator": cfg.to_dict()}), truth


def generate(cfg: GenConfig | None = None) -> Dataset:
    return generate_with_truth(cfg or GenConfig())[0]


def write_generated(cfg: GenConfig, path) -> tuple[Path, Path]:
    """JSONL dataset plus a ``<stem>.provenance.json`` sidecar with config and per-sequence truth."""
    ds, truth = generate_with_truth(cfg)
    path = Path(path)
    save_dataset(ds, path)
    sidecar = path.with_name(path.stem + ".provenance.json")
    sidecar.write_text(json.dumps({"config": cfg.to_dict(), "sequences": [t.to_dict() for t in truth]}, indent=1))
    return path, sidecar


@dataclass(frozen=True)
class Signature:
    trunk_pitch_deg: float
    trunk_yaw_deg: float
    shoulder_lift_m: float


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def compensation_signature(seq: MotionSequence) -> Signature:
    """Peak trunk pitch, trunk yaw and shoulder lift relative to the first frame.

    Only uses distances and angles between joints, so any rigid camera
    transform gives the same answer. Expects noise-free input whose first
    frame is the neutral pose, as produced by :func:`generate`.
    """
    P = seq.coords
    up = _unit(P[:, JOINT["NECK"]] - P[:, JOINT["PELVIS"]])
    pitch = np.arccos(np.clip(up @ up[0], -1.0, 1.0))

    line = P[:, JOINT["CLAVICLE_LEFT"]] - P[:, JOINT["CLAVICLE_RIGHT"]]
    flat = _unit(line - np.outer(line @ up[0], up[0]))
    yaw = np.arccos(np.clip(flat @ flat[0], -1.0, 1.0))

    lift = 0.0
    for side in ("LEFT", "RIGHT"):
        rel = P[:, JOINT[f"SHOULDER_{side}"]] - P[:, JOINT[f"CLAVICLE_{side}"]]
        height = np.einsum("ti,ti->t", rel, up)
        lift = max(lift, float(np.max(height - height[0])))
    return Signature(float(np.rad2deg(pitch.max())), float(np.rad2deg(yaw.max())), lift)


def bone_lengths(seq_or_coords, edges) -> np.ndarray:
    """(T, n_edges) bone lengths."""
    P = seq_or_coords.coords if isinstance(seq_or_coords, MotionSequence) else np.asarray(seq_or_coords)
    a = np.array([e[0] for e in edges])
    b = np.array([e[1] for e in edges])
    return np.linalg.norm(P[:, a] - P[:, b], axis=-1)
