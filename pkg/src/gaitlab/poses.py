"""Skeleton and sequence primitives.

A pose is a float64 array of shape (18, 2) in COCO/OpenPose BODY-18 joint
order. A gait sequence stacks N poses into an (N, 18, 2) array together with
identity metadata. All operations here are pure; sequences are treated as
immutable values.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyTarget, SequenceTooShort

N_JOINTS = 18

JOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)

R_HIP, L_HIP = 8, 11


def as_pose(joints) -> np.ndarray:
    """Validate and return a (18, 2) float64 pose array."""
    arr = np.asarray(joints, dtype=np.float64)
    if arr.shape != (N_JOINTS, 2):
        raise ValueError(f"pose must have shape (18, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("pose contains non-finite coordinates")
    return arr


@dataclass(frozen=True)
class FrameGeometry:
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError("frame width and height must be positive")


@dataclass(frozen=True)
class GaitSequence:
    poses: np.ndarray  # (N, 18, 2)
    subject_id: str
    sequence_id: str
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.poses, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1:] != (N_JOINTS, 2) or arr.shape[0] < 1:
            raise ValueError(f"sequence must have shape (N>=1, 18, 2), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("sequence contains non-finite coordinates")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "poses", arr)

    def __len__(self):
        return self.poses.shape[0]

    def with_poses(self, poses: np.ndarray) -> "GaitSequence":
        """Same identity metadata, new coordinate payload."""
        return replace(self, poses=poses)


# Default slot assignment for the six 3-joint groups feeding the single-pose
# model: left head, right head, left arm, right arm, left leg, right leg.
# Nose and neck have no side; they are attached to the left/right head groups.
DEFAULT_PERMUTATION = (
    15, 17, 0,    # left head: l_eye, l_ear, nose
    14, 16, 1,    # right head: r_eye, r_ear, neck
    5, 6, 7,      # left arm
    2, 3, 4,      # right arm
    11, 12, 13,   # left leg
    8, 9, 10,     # right leg
)

GROUP_NAMES = ("left_head", "right_head", "left_arm", "right_arm",
               "left_leg", "right_leg")
AREA_NAMES = ("head", "upper_body", "lower_body")


@dataclass(frozen=True)
class AnatomyMap:
    """Bijection from model input slot to BODY-18 joint index.

    Slots 0-2, 3-5, ... 15-17 are the six anatomical groups in order.
    """
    permutation: tuple = DEFAULT_PERMUTATION

    def __post_init__(self):
        perm = tuple(int(i) for i in self.permutation)
        if sorted(perm) != list(range(N_JOINTS)):
            raise ValueError("permutation must be a bijection on 0..17")
        object.__setattr__(self, "permutation", perm)

    @property
    def inverse(self) -> tuple:
        inv = [0] * N_JOINTS
        for slot, joint in enumerate(self.permutation):
            inv[joint] = slot
        return tuple(inv)


DEFAULT_ANATOMY = AnatomyMap()


def height(pose: np.ndarray) -> float:
    """Bounding-box height: max y minus min y over all joints."""
    y = pose[..., 1]
    return float(y.max() - y.min())


def heights(poses: np.ndarray) -> np.ndarray:
    """Per-frame bounding-box heights for an (N, 18, 2) stack."""
    y = poses[..., 1]
    return y.max(axis=-1) - y.min(axis=-1)


def pelvis(pose: np.ndarray) -> np.ndarray:
    """Hip midpoint (BODY-18 has no explicit pelvis keypoint)."""
    return 0.5 * (pose[..., R_HIP, :] + pose[..., L_HIP, :])


def reorder(pose: np.ndarray, anatomy: AnatomyMap = DEFAULT_ANATOMY) -> np.ndarray:
    """Permute joints into model slot order."""
    return pose[..., list(anatomy.permutation), :]


def inverse_reorder(pose: np.ndarray, anatomy: AnatomyMap = DEFAULT_ANATOMY) -> np.ndarray:
    return pose[..., list(anatomy.inverse), :]


def resample(seq: GaitSequence, target_len: int, mode: str = "interpolate",
             rng: np.random.Generator | None = None) -> GaitSequence:
    """Change sequence length.

    interpolate: per-joint linear interpolation at uniform fractional frame
    indices over [0, N-1] (endpoints preserved). random_crop / middle_crop:
    contiguous windows; both require len(seq) >= target_len.
    """
    if target_len < 1:
        raise EmptyTarget(f"target_len must be >= 1, got {target_len}")
    n = len(seq)
    if mode == "interpolate":
        if n == 1:
            out = np.repeat(seq.poses, target_len, axis=0)
        else:
            t = np.linspace(0.0, n - 1, target_len)
            lo = np.floor(t).astype(int)
            hi = np.minimum(lo + 1, n - 1)
            frac = (t - lo)[:, None, None]
            out = (1.0 - frac) * seq.poses[lo] + frac * seq.poses[hi]
        return seq.with_poses(out)
    if mode in ("random_crop", "middle_crop"):
        if n < target_len:
            raise SequenceTooShort(
                f"sequence {seq.sequence_id} has {n} frames < target {target_len}")
        if mode == "random_crop":
            if rng is None:
                raise ValueError("random_crop requires an rng")
            start = int(rng.integers(0, n - target_len + 1))
        else:
            start = (n - target_len) // 2
        return seq.with_poses(seq.poses[start:start + target_len])
    raise ValueError(f"unknown resample mode {mode!r}")


# -- JSONL dataset persistence --

def sequence_to_record(seq: GaitSequence) -> dict:
    return {
        "subject_id": seq.subject_id,
        "sequence_id": seq.sequence_id,
        "tags": seq.tags,
        "frames": seq.poses.tolist(),
    }


def sequence_from_record(rec: dict) -> GaitSequence:
    return GaitSequence(
        poses=np.asarray(rec["frames"], dtype=np.float64),
        subject_id=str(rec["subject_id"]),
        sequence_id=str(rec["sequence_id"]),
        tags=dict(rec.get("tags", {})),
    )


def save_dataset(path, sequences) -> None:
    with open(path, "w") as f:
        for seq in sequences:
            f.write(json.dumps(sequence_to_record(seq)) + "\n")


def load_dataset(path) -> list:
    sequences = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                sequences.append(sequence_from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed sequence record: {exc}")
    return sequences
