"""Procedural 2D walker generator with independently controllable identity
cues: body height, screen position, and motion style.

The walker is a sagittal-view stick figure in image coordinates (y grows
downward). Legs swing sinusoidally at the hip; the knee angle is solved each
frame so both ankles keep a constant vertical drop below the pelvis. Together
with a rigid torso/head this makes the bounding-box height of every frame an
exact constant per body, independent of gait phase, so motion and height cues
are perfectly separable by construction.

Confound modes:
  height-only:   identical motion everywhere; heights distinct (>= 2% gaps);
                 screen positions randomized i.i.d. per sequence.
  motion-only:   identical bodies; gait frequency and phase distinct per
                 identity (shared amplitudes, so a single pose carries no cue).
  position-only: identical bodies and motion, walking in place; identity is a
                 per-identity screen-position cluster.
  mixed:         all cues vary per identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfoundInfeasible
from .poses import FrameGeometry, GaitSequence

# Canonical proportions as fractions of nominal body height (frozen; any
# anatomically plausible table works, this one is the repo constant).
HEAD = 0.13      # neck to eye line
TORSO = 0.30     # pelvis to neck
ARM = 0.34       # shoulder to wrist (0.17 + 0.17)
LEG = 0.48       # hip to ankle (0.24 + 0.24)
ANKLE_DROP = 0.9 * LEG   # constant vertical hip-to-ankle distance

_MAX_STRIDE = 0.6        # rad; keeps the constant-drop knee solvable

# static joint offsets (x, y) from their parent (y-down)
_NECK = np.array([0.0, -TORSO])
_NOSE = np.array([0.030, -0.065])
_R_EYE = np.array([0.015, -HEAD])
_L_EYE = np.array([-0.015, -HEAD])
_R_EAR = np.array([0.030, -0.115])
_L_EAR = np.array([-0.030, -0.115])
_R_SHOULDER = np.array([0.020, 0.0])
_L_SHOULDER = np.array([-0.020, 0.0])
_R_HIP = np.array([0.050, 0.0])
_L_HIP = np.array([-0.050, 0.0])

BBOX_HEIGHT = ANKLE_DROP + TORSO + HEAD   # exact canonical bounding-box height


@dataclass(frozen=True)
class WalkerIdentity:
    height_scale: float = 0.5
    limb_ratios: dict = field(default_factory=dict)   # per-segment multipliers
    gait_frequency: float = 0.08                       # cycles per frame
    stride_amplitude: float = 0.5                      # rad
    phase_offset: float = 0.0                          # rad
    arm_swing: float = 0.35                            # rad

    def __post_init__(self):
        if not self.height_scale > 0:
            raise ValueError("height_scale must be positive")
        if not 0 < self.gait_frequency < 0.5:
            raise ValueError("gait_frequency must lie in (0, 0.5) cycles/frame")
        if self.stride_amplitude < 0 or self.arm_swing < 0:
            raise ValueError("amplitudes must be >= 0")
        if self.stride_amplitude > _MAX_STRIDE:
            raise ValueError(f"stride_amplitude above {_MAX_STRIDE} rad is not supported")


@dataclass(frozen=True)
class ConfoundSpec:
    mode: str                          # height-only | motion-only | position-only | mixed
    n_identities: int
    sequences_per_identity: int = 6
    frames: int = 60
    geometry: FrameGeometry = field(default_factory=lambda: FrameGeometry(1.0, 1.0))
    noise_std: float = 0.0
    seed: int = 0
    height_gap: float = 0.02           # min relative pairwise height separation
    freq_gap: float = 0.10             # min relative frequency separation
    phase_gap: float = math.pi / 8     # min phase separation

    def __post_init__(self):
        if self.mode not in ("height-only", "motion-only", "position-only", "mixed"):
            raise ValueError(f"unknown confound mode {self.mode!r}")
        if self.n_identities < 2:
            raise ValueError("need at least 2 identities")


def _ratio(identity, segment):
    return identity.limb_ratios.get(segment, 1.0)


def walker_pose(identity: WalkerIdentity, theta: float,
                pelvis_xy=(0.0, 0.0)) -> np.ndarray:
    """One BODY-18 pose at gait phase theta (radians), pelvis at pelvis_xy."""
    s = identity.height_scale
    torso = TORSO * _ratio(identity, "torso") * s
    lu = 0.17 * _ratio(identity, "arm") * s
    lf = 0.17 * _ratio(identity, "arm") * s
    l1 = 0.24 * _ratio(identity, "leg") * s
    l2 = 0.24 * _ratio(identity, "leg") * s
    drop = 0.9 * (l1 + l2)

    pelvis = np.asarray(pelvis_xy, dtype=np.float64)
    neck = pelvis + np.array([0.0, -torso])
    head_scale = _ratio(identity, "head") * s

    def leg(hip_offset, alpha):
        hip = pelvis + hip_offset * s
        knee = hip + l1 * np.array([math.sin(alpha), math.cos(alpha)])
        cos_g = np.clip((drop - l1 * math.cos(alpha)) / l2, -1.0, 1.0)
        gamma = math.acos(cos_g)
        ankle = knee + l2 * np.array([math.sin(gamma), math.cos(gamma)])
        return hip, knee, ankle

    def arm(shoulder_offset, alpha):
        shoulder = neck + shoulder_offset * s
        elbow = shoulder + lu * np.array([math.sin(alpha), math.cos(alpha)])
        bend = alpha + 0.3
        wrist = elbow + lf * np.array([math.sin(bend), math.cos(bend)])
        return shoulder, elbow, wrist

    a_leg = identity.stride_amplitude
    a_arm = identity.arm_swing
    r_hip_a = a_leg * math.sin(theta)
    l_hip_a = a_leg * math.sin(theta + math.pi)
    r_arm_a = a_arm * math.sin(theta + math.pi)
    l_arm_a = a_arm * math.sin(theta)

    r_hip, r_knee, r_ankle = leg(_R_HIP, r_hip_a)
    l_hip, l_knee, l_ankle = leg(_L_HIP, l_hip_a)
    r_sho, r_elb, r_wri = arm(_R_SHOULDER, r_arm_a)
    l_sho, l_elb, l_wri = arm(_L_SHOULDER, l_arm_a)

    pose = np.empty((18, 2))
    pose[0] = neck + _NOSE * head_scale
    pose[1] = neck
    pose[2], pose[3], pose[4] = r_sho, r_elb, r_wri
    pose[5], pose[6], pose[7] = l_sho, l_elb, l_wri
    pose[8], pose[9], pose[10] = r_hip, r_knee, r_ankle
    pose[11], pose[12], pose[13] = l_hip, l_knee, l_ankle
    pose[14] = neck + _R_EYE * head_scale
    pose[15] = neck + _L_EYE * head_scale
    pose[16] = neck + _R_EAR * head_scale
    pose[17] = neck + _L_EAR * head_scale
    return pose


def walk_speed(identity: WalkerIdentity) -> float:
    """Horizontal pelvis speed per frame, consistent with stride geometry."""
    leg_len = LEG * _ratio(identity, "leg") * identity.height_scale
    return 2.0 * identity.gait_frequency * leg_len * math.sin(identity.stride_amplitude)


def walker_sequence(identity: WalkerIdentity, n_frames: int, start_xy,
                    walking: bool = True, start_phase: float | None = None) -> np.ndarray:
    """(n_frames, 18, 2) noise-free trajectory starting with pelvis at start_xy.

    start_phase overrides the identity's phase offset; a recording can begin
    at any moment of the gait cycle.
    """
    v = walk_speed(identity) if walking else 0.0
    phase0 = identity.phase_offset if start_phase is None else start_phase
    frames = np.empty((n_frames, 18, 2))
    for t in range(n_frames):
        theta = 2.0 * math.pi * identity.gait_frequency * t + phase0
        frames[t] = walker_pose(identity, theta, (start_xy[0] + v * t, start_xy[1]))
    return frames


def _pelvis_y_range(spec: ConfoundSpec, height_scale: float):
    top = (TORSO + HEAD) * height_scale
    bottom = ANKLE_DROP * height_scale
    margin = 0.01 * spec.geometry.height
    lo = top + margin
    hi = spec.geometry.height - bottom - margin
    if hi <= lo:
        raise ConfoundInfeasible(
            f"height_scale {height_scale} does not fit frame height {spec.geometry.height}")
    return lo, hi


def _assign_identities(spec: ConfoundSpec, rng: np.random.Generator) -> list:
    n = spec.n_identities
    base = dict(height_scale=0.45 * spec.geometry.height,
                gait_frequency=0.08, stride_amplitude=0.5,
                phase_offset=0.0, arm_swing=0.35)
    identities = []
    if spec.mode == "height-only":
        h0 = 0.25 * spec.geometry.height
        heights = h0 * (1.0 + spec.height_gap) ** np.arange(n)
        _pelvis_y_range(spec, float(heights[-1]))   # feasibility of the tallest
        for h in heights:
            identities.append(WalkerIdentity(**{**base, "height_scale": float(h)}))
    elif spec.mode == "motion-only":
        growth = (1.0 + spec.freq_gap) ** (n - 1)
        f0 = min(0.05, 0.45 / growth)   # keep the fastest walker below Nyquist
        if f0 < 0.01:
            raise ConfoundInfeasible(
                f"{n} identities at {spec.freq_gap:.0%} frequency gaps exceed Nyquist")
        freqs = f0 * (1.0 + spec.freq_gap) ** np.arange(n)
        # equally spaced phases; separation 2*pi/n (>= phase_gap only matters
        # as a secondary cue, frequency is the primary one)
        phases = 2 * math.pi * np.arange(n) / n
        for f, ph in zip(freqs, phases):
            identities.append(WalkerIdentity(**{
                **base, "gait_frequency": float(f), "phase_offset": float(ph)}))
    elif spec.mode == "position-only":
        identities = [WalkerIdentity(**base) for _ in range(n)]
    else:  # mixed
        heights = rng.uniform(0.30, 0.60, size=n) * spec.geometry.height
        freqs = rng.uniform(0.05, 0.15, size=n)
        phases = rng.uniform(0, 2 * math.pi, size=n)
        amps = rng.uniform(0.35, 0.6, size=n)
        arms = rng.uniform(0.2, 0.5, size=n)
        for i in range(n):
            identities.append(WalkerIdentity(
                height_scale=float(heights[i]), gait_frequency=float(freqs[i]),
                stride_amplitude=float(amps[i]), phase_offset=float(phases[i]),
                arm_swing=float(arms[i])))
    return identities


def _position_clusters(spec: ConfoundSpec, rng: np.random.Generator,
                       height_scale: float):
    """Well-separated per-identity screen-position cluster centers."""
    lo, hi = _pelvis_y_range(spec, height_scale)
    n = spec.n_identities
    side = int(math.ceil(math.sqrt(n)))
    xs = np.linspace(0.15, 0.85, side) * spec.geometry.width
    ys = np.linspace(lo, hi, side) if side > 1 else np.array([(lo + hi) / 2])
    centers = [(float(x), float(y)) for y in ys for x in xs][:n]
    order = rng.permutation(n)
    return [centers[i] for i in order]


def generate(spec: ConfoundSpec):
    """Build the dataset and a ground-truth manifest. Deterministic in seed."""
    rng = np.random.default_rng(spec.seed)
    identities = _assign_identities(spec, rng)
    walking = spec.mode != "position-only"
    clusters = None
    if spec.mode in ("position-only", "mixed"):
        clusters = _position_clusters(spec, rng, max(i.height_scale for i in identities))

    # shared vertical placement range (tightest body) so screen position is
    # i.i.d. across identities in the non-clustered modes
    shared_lo, shared_hi = _pelvis_y_range(spec, max(i.height_scale for i in identities))

    sequences = []
    for i, identity in enumerate(identities):
        subject = f"id{i:03d}"
        lo, hi = shared_lo, shared_hi
        for s in range(spec.sequences_per_identity):
            if clusters is not None:
                cx, cy = clusters[i]
                x0 = cx + rng.normal(0.0, 0.01 * spec.geometry.width)
                y0 = float(np.clip(cy + rng.normal(0.0, 0.01 * spec.geometry.height),
                                   lo, hi))
            else:
                x0 = rng.uniform(0.05, 0.5) * spec.geometry.width
                y0 = rng.uniform(lo, hi)
            # every sequence starts at a fresh point in the gait cycle so the
            # pose set itself never identifies a subject
            phase0 = identity.phase_offset + rng.uniform(0.0, 2.0 * math.pi)
            frames = walker_sequence(identity, spec.frames, (x0, y0), walking,
                                     start_phase=phase0)
            if spec.noise_std > 0:
                frames = frames + rng.normal(0.0, spec.noise_std, size=frames.shape)
            sequences.append(GaitSequence(
                poses=frames, subject_id=subject, sequence_id=f"{subject}_s{s:02d}",
                tags={"mode": spec.mode}))

    manifest = {
        "spec": {
            "mode": spec.mode, "n_identities": spec.n_identities,
            "sequences_per_identity": spec.sequences_per_identity,
            "frames": spec.frames,
            "frame_width": spec.geometry.width, "frame_height": spec.geometry.height,
            "noise_std": spec.noise_std, "seed": spec.seed,
            "height_gap": spec.height_gap, "freq_gap": spec.freq_gap,
            "phase_gap": spec.phase_gap,
        },
        "identities": [
            {"subject_id": f"id{i:03d}", **{k: (dict(v) if isinstance(v, dict) else v)
                                            for k, v in asdict(ident).items()}}
            for i, ident in enumerate(identities)
        ],
    }
    return sequences, manifest


def describe(manifest: dict) -> dict:
    """Per-identity parameter table plus which cue separates identities."""
    rows = manifest["identities"]
    def column(key):
        return [r[key] for r in rows]
    varying = [k for k in ("height_scale", "gait_frequency", "stride_amplitude",
                           "phase_offset", "arm_swing")
               if len({round(v, 12) for v in column(k)}) > 1]
    return {
        "mode": manifest["spec"]["mode"],
        "n_identities": len(rows),
        "varying_cues": varying,
        "rows": rows,
    }
