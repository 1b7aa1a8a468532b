"""Gait sequence normalization schemes.

Eight schemes grouped by what identity cue they destroy:

  preserve height and position: none, frame-scale, batch-norm (a marker for
      the learnable input layer), global-avg-skeleton, global-coord-std
  remove position: skeleton-translate, sequence-translate
  remove height: skeleton-scale, sequence-scale

All transforms are pure maps GaitSequence -> GaitSequence preserving frame
order and identity metadata. "Middle" frame means index floor(N/2), 0-based.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import BadGeometry, DegenerateHeight, DegenerateStats, EmptyDataset, MissingContext
from .poses import FrameGeometry, GaitSequence, N_JOINTS, heights, pelvis

HEIGHT_FLOOR = 1e-6
STD_FLOOR = 1e-6

SCHEME_NAMES = (
    "none", "frame-scale", "batch-norm", "global-avg-skeleton",
    "global-coord-std", "skeleton-translate", "sequence-translate",
    "skeleton-scale", "sequence-scale",
)

STATS_SCHEMES = {"global-avg-skeleton", "global-coord-std"}
GEOM_SCHEMES = {"frame-scale"}


@dataclass(frozen=True)
class DatasetStats:
    """Training-set constants for the global normalizations."""
    mean_pelvis: np.ndarray       # (2,)
    mean_height: float
    per_joint_mean: np.ndarray    # (18, 2)
    per_joint_std: np.ndarray     # (18, 2), population std
    frame_width: float
    fingerprint: str = ""

    def __post_init__(self):
        object.__setattr__(self, "mean_pelvis",
                           np.asarray(self.mean_pelvis, dtype=np.float64).reshape(2))
        object.__setattr__(self, "per_joint_mean",
                           np.asarray(self.per_joint_mean, dtype=np.float64).reshape(N_JOINTS, 2))
        object.__setattr__(self, "per_joint_std",
                           np.asarray(self.per_joint_std, dtype=np.float64).reshape(N_JOINTS, 2))
        if not self.mean_height > 0:
            raise DegenerateStats(f"mean_height must be positive, got {self.mean_height}")
        if np.any(self.per_joint_std < 0):
            raise DegenerateStats("negative per-joint std")


def compute_stats(train_set, geom: FrameGeometry, fingerprint: str = "") -> DatasetStats:
    """Pool every pose of every sequence and take per-coordinate moments."""
    if not train_set:
        raise EmptyDataset("cannot compute stats on an empty training set")
    all_poses = np.concatenate([seq.poses for seq in train_set], axis=0)
    mean_pelvis = pelvis(all_poses).mean(axis=0)
    mean_height = float(heights(all_poses).mean())
    if mean_height < HEIGHT_FLOOR:
        raise DegenerateStats(f"mean height {mean_height} below {HEIGHT_FLOOR}")
    return DatasetStats(
        mean_pelvis=mean_pelvis,
        mean_height=mean_height,
        per_joint_mean=all_poses.mean(axis=0),
        per_joint_std=all_poses.std(axis=0),
        frame_width=geom.width,
        fingerprint=fingerprint,
    )


def frame_scale(seq: GaitSequence, geom: FrameGeometry) -> GaitSequence:
    if not geom.width > 0:
        raise BadGeometry(f"frame width must be positive, got {geom.width}")
    return seq.with_poses(seq.poses / geom.width)


def global_average_skeleton(seq: GaitSequence, stats: DatasetStats) -> GaitSequence:
    if stats.mean_height < HEIGHT_FLOOR:
        raise DegenerateStats(f"mean height {stats.mean_height} below {HEIGHT_FLOOR}")
    return seq.with_poses((seq.poses - stats.mean_pelvis) / stats.mean_height)


def global_coord_standardize(seq: GaitSequence, stats: DatasetStats) -> GaitSequence:
    std = np.maximum(stats.per_joint_std, STD_FLOOR)
    return seq.with_poses((seq.poses - stats.per_joint_mean) / std)


def skeleton_translate(seq: GaitSequence) -> GaitSequence:
    return seq.with_poses(seq.poses - pelvis(seq.poses)[:, None, :])


def sequence_translate(seq: GaitSequence) -> GaitSequence:
    mid = len(seq) // 2
    return seq.with_poses(seq.poses - pelvis(seq.poses[mid]))


def skeleton_scale(seq: GaitSequence) -> GaitSequence:
    h = heights(seq.poses)
    bad = np.nonzero(h < HEIGHT_FLOOR)[0]
    if bad.size:
        raise DegenerateHeight(f"frame {bad[0]} has height {h[bad[0]]} below {HEIGHT_FLOOR}")
    return seq.with_poses(seq.poses / h[:, None, None])


def sequence_scale(seq: GaitSequence) -> GaitSequence:
    mid = len(seq) // 2
    h = heights(seq.poses[mid:mid + 1])[0]
    if h < HEIGHT_FLOOR:
        raise DegenerateHeight(f"middle frame {mid} has height {h} below {HEIGHT_FLOOR}")
    return seq.with_poses(seq.poses / h)


def parse_scheme(spec: str) -> list:
    """Parse a scheme name or comma-joined composition into a list of names."""
    names = [s.strip() for s in str(spec).split(",") if s.strip()]
    if not names:
        raise ValueError("empty scheme specification")
    for name in names:
        if name not in SCHEME_NAMES:
            raise ValueError(f"unknown scheme {name!r}; known: {', '.join(SCHEME_NAMES)}")
    return names


def scheme_needs_stats(spec: str) -> bool:
    return any(n in STATS_SCHEMES for n in parse_scheme(spec))


def scheme_needs_geom(spec: str) -> bool:
    return any(n in GEOM_SCHEMES for n in parse_scheme(spec))


def apply_scheme(spec, seq: GaitSequence,
                 stats: DatasetStats | None = None,
                 geom: FrameGeometry | None = None) -> GaitSequence:
    """Apply a scheme (or comma-joined composition, left to right).

    `batch-norm` is a marker handled by the model's learnable input layer and
    is the identity here. `none` is the identity.
    """
    names = parse_scheme(spec) if isinstance(spec, str) else list(spec)
    for name in names:
        if name in ("none", "batch-norm"):
            continue
        elif name == "frame-scale":
            if geom is None:
                raise MissingContext("frame-scale requires frame geometry")
            seq = frame_scale(seq, geom)
        elif name == "global-avg-skeleton":
            if stats is None:
                raise MissingContext("global-avg-skeleton requires dataset stats")
            seq = global_average_skeleton(seq, stats)
        elif name == "global-coord-std":
            if stats is None:
                raise MissingContext("global-coord-std requires dataset stats")
            seq = global_coord_standardize(seq, stats)
        elif name == "skeleton-translate":
            seq = skeleton_translate(seq)
        elif name == "sequence-translate":
            seq = sequence_translate(seq)
        elif name == "skeleton-scale":
            seq = skeleton_scale(seq)
        elif name == "sequence-scale":
            seq = sequence_scale(seq)
        else:
            raise ValueError(f"unknown scheme {name!r}")
    return seq


# -- stats persistence --

def stats_to_dict(stats: DatasetStats) -> dict:
    return {
        "mean_pelvis": stats.mean_pelvis.tolist(),
        "mean_height": stats.mean_height,
        "per_joint_mean": stats.per_joint_mean.tolist(),
        "per_joint_std": stats.per_joint_std.tolist(),
        "frame_width": stats.frame_width,
        "fingerprint": stats.fingerprint,
    }


def stats_from_dict(d: dict) -> DatasetStats:
    return DatasetStats(
        mean_pelvis=d["mean_pelvis"],
        mean_height=float(d["mean_height"]),
        per_joint_mean=d["per_joint_mean"],
        per_joint_std=d["per_joint_std"],
        frame_width=float(d["frame_width"]),
        fingerprint=d.get("fingerprint", ""),
    )


def save_stats(path, stats: DatasetStats) -> None:
    with open(path, "w") as f:
        json.dump(stats_to_dict(stats), f, indent=2)
        f.write("\n")


def load_stats(path) -> DatasetStats:
    with open(path) as f:
        return stats_from_dict(json.load(f))


def dataset_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
