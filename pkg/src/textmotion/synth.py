"""Procedural motion corpus: oscillator/ramp driven primitives on the 22-joint skeleton.

Every clip comes with template captions drawn from a closed vocabulary, so the
hashed-vocabulary text encoder never sees an unknown word.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .pose_features import SkeletonClip
from .skeleton import JOINT_INDEX, N_JOINTS, axis_angle_matrix

X_AXIS = np.array([1.0, 0.0, 0.0])
Y_AXIS = np.array([0.0, 1.0, 0.0])
Z_AXIS = np.array([0.0, 0.0, 1.0])

SUBJECTS = ("a person", "someone", "the person", "a man", "a woman")

TEMPLATES = {
    "walk": ("{s} walks forward", "{s} walks {adv}", "{s} is walking straight ahead"),
    "run": ("{s} runs forward", "{s} jogs {adv}", "{s} is running ahead"),
    "raise_left_arm": ("{s} raises the left arm", "{s} lifts the left arm up",
                       "{s} slowly raises their left arm"),
    "raise_right_arm": ("{s} raises the right arm", "{s} lifts the right arm up",
                        "{s} slowly raises their right arm"),
    "squat": ("{s} squats down", "{s} does a squat", "{s} bends the knees and squats"),
    "turn_left": ("{s} turns to the left", "{s} walks and turns left", "{s} turns around left"),
    "turn_right": ("{s} turns to the right", "{s} walks and turns right", "{s} turns around right"),
    "jump": ("{s} jumps up", "{s} jumps in place", "{s} is jumping up and down"),
    "wave": ("{s} waves the right hand", "{s} waves hello", "{s} is waving with the right arm"),
}
ADVERBS = ("slowly", "quickly", "steadily")
PRIMITIVES = tuple(TEMPLATES)


def template_lexicon() -> set[str]:
    """Every word any synthetic caption can contain."""
    from .text_encoder import tokenize

    words: set[str] = set()
    for temps in TEMPLATES.values():
        for t in temps:
            for s in SUBJECTS:
                for a in ADVERBS:
                    words.update(tokenize(t.format(s=s, adv=a)))
    return words


@dataclass
class SynthClip:
    id: str
    primitive: str
    clip: SkeletonClip
    texts: list[str]
    period: float | None = None  # frames, for periodic primitives


def _rot(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    return axis_angle_matrix(axis, angle)


class _Pose:
    def __init__(self, T: int):
        self.T = T
        self.local = np.broadcast_to(np.eye(3), (T, N_JOINTS, 3, 3)).copy()
        self.root = np.zeros((T, 3))
        self.root[:, 1] = 0.93
        self.yaw = np.zeros(T)

    def turn(self, joint: str, axis: np.ndarray, angle: np.ndarray) -> None:
        j = JOINT_INDEX[joint]
        self.local[:, j] = self.local[:, j] @ _rot(axis, np.broadcast_to(angle, (self.T,)))


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _gait(pose: _Pose, phase: np.ndarray, amp: float, speed: np.ndarray, fps: float) -> None:
    """Alternating leg/arm swing plus forward root travel along the current yaw."""
    s = np.sin(phase)
    pose.turn("left_hip", X_AXIS, -amp * s)
    pose.turn("right_hip", X_AXIS, amp * s)
    pose.turn("left_knee", X_AXIS, amp * 1.2 * np.maximum(0.0, np.sin(phase + 0.6)))
    pose.turn("right_knee", X_AXIS, amp * 1.2 * np.maximum(0.0, -np.sin(phase + 0.6)))
    pose.turn("left_shoulder", Z_AXIS, -1.2)
    pose.turn("right_shoulder", Z_AXIS, 1.2)
    pose.turn("left_shoulder", X_AXIS, 0.6 * amp * s)
    pose.turn("right_shoulder", X_AXIS, -0.6 * amp * s)
    pose.root[:, 1] += 0.02 * amp * np.cos(2 * phase)
    step = speed / fps
    heading = np.stack([np.sin(pose.yaw), np.cos(pose.yaw)], axis=-1)
    travel = np.concatenate([[[0.0, 0.0]], np.cumsum(heading[:-1] * step[:-1, None], axis=0)])
    pose.root[:, 0] += travel[:, 0]
    pose.root[:, 2] += travel[:, 1]


def _primitive(name: str, T: int, fps: float, rng: np.random.Generator) -> tuple[_Pose, float | None]:
    pose = _Pose(T)
    t = np.arange(T, dtype=np.float64)
    period: float | None = None
    if name in ("walk", "run", "turn_left", "turn_right"):
        period = float(rng.uniform(28, 40) if name != "run" else rng.uniform(18, 24))
        amp = float(rng.uniform(0.35, 0.5) if name != "run" else rng.uniform(0.6, 0.75))
        speed = np.full(T, rng.uniform(1.0, 1.4) if name != "run" else rng.uniform(2.4, 3.0))
        if name.startswith("turn"):
            sign = 1.0 if name == "turn_left" else -1.0
            total = sign * rng.uniform(0.5, 1.0) * np.pi
            pose.yaw = total * _smoothstep((t / T - 0.2) / 0.6)
            speed *= 0.6
        _gait(pose, 2 * np.pi * t / period, amp, speed, fps)
    elif name in ("raise_left_arm", "raise_right_arm"):
        side = 1.0 if name == "raise_left_arm" else -1.0
        joint = "left_shoulder" if side > 0 else "right_shoulder"
        up = rng.uniform(0.2, 0.45) * T
        hold = rng.uniform(0.1, 0.3) * T
        lift = _smoothstep(t / up) - _smoothstep((t - up - hold) / up)
        pose.turn(joint, Z_AXIS, side * (-1.2 + lift * rng.uniform(2.4, 2.9)))
        other = "right_shoulder" if side > 0 else "left_shoulder"
        pose.turn(other, Z_AXIS, side * 1.2)
    elif name == "squat":
        period = float(rng.uniform(45, 75))
        depth = 0.5 - 0.5 * np.cos(2 * np.pi * t / period)
        bend = rng.uniform(0.9, 1.3) * depth
        pose.turn("left_hip", X_AXIS, -bend)
        pose.turn("right_hip", X_AXIS, -bend)
        pose.turn("left_knee", X_AXIS, 2 * bend)
        pose.turn("right_knee", X_AXIS, 2 * bend)
        pose.turn("left_ankle", X_AXIS, -bend)
        pose.turn("right_ankle", X_AXIS, -bend)
        pose.turn("spine1", X_AXIS, -0.4 * bend)
        pose.turn("left_shoulder", Z_AXIS, -1.2)
        pose.turn("right_shoulder", Z_AXIS, 1.2)
        pose.turn("left_shoulder", X_AXIS, -bend)
        pose.turn("right_shoulder", X_AXIS, -bend)
        pose.root[:, 1] -= 0.8 * (1 - np.cos(bend)) * 0.8
    elif name == "jump":
        period = float(rng.uniform(30, 45))
        ph = (t % period) / period
        air = np.clip((ph - 0.4) / 0.4, 0.0, 1.0)
        crouch = np.where(ph < 0.4, np.sin(np.pi * ph / 0.4), 0.0)
        pose.root[:, 1] += rng.uniform(0.25, 0.4) * 4 * air * (1 - air) - 0.12 * crouch
        pose.turn("left_knee", X_AXIS, 0.8 * crouch)
        pose.turn("right_knee", X_AXIS, 0.8 * crouch)
        pose.turn("left_hip", X_AXIS, -0.5 * crouch)
        pose.turn("right_hip", X_AXIS, -0.5 * crouch)
        pose.turn("left_shoulder", Z_AXIS, -1.2 + 1.5 * air)
        pose.turn("right_shoulder", Z_AXIS, 1.2 - 1.5 * air)
    elif name == "wave":
        period = float(rng.uniform(20, 30))
        rise = _smoothstep(t / (0.2 * T))
        pose.turn("right_shoulder", Z_AXIS, 1.2 - rise * rng.uniform(2.2, 2.6))
        pose.turn("right_elbow", Z_AXIS, -rise * (0.6 + 0.5 * np.sin(2 * np.pi * t / period)))
        pose.turn("left_shoulder", Z_AXIS, -1.2)
    else:
        raise ContractError(f"unknown motion primitive {name!r}; known: {', '.join(PRIMITIVES)}")
    # small per-clip idle sway keeps every feature dimension varied
    sway = rng.uniform(0.01, 0.04) * np.sin(2 * np.pi * t / rng.uniform(50, 90) + rng.uniform(0, 6.3))
    pose.turn("spine2", Z_AXIS, sway)
    pose.turn("neck", Y_AXIS, 2 * sway)
    return pose, period


def synth_clip(
    primitive: str,
    n_frames: int,
    rng: np.random.Generator,
    fps: float = 30.0,
    clip_id: str = "clip",
) -> SynthClip:
    from .skeleton import forward_kinematics

    pose, period = _primitive(primitive, n_frames, fps, rng)
    yaw0 = rng.uniform(-np.pi, np.pi)
    origin = rng.uniform(-2.0, 2.0, size=2)
    # rotate the trajectory about the origin, then offset
    c, s = np.cos(yaw0), np.sin(yaw0)
    x, z = pose.root[:, 0].copy(), pose.root[:, 2].copy()
    pose.root[:, 0] = c * x + s * z + origin[0]
    pose.root[:, 2] = -s * x + c * z + origin[1]
    joints = forward_kinematics(pose.local, pose.root, pose.yaw + yaw0)
    n_text = int(rng.integers(1, 4))
    texts = []
    for _ in range(n_text):
        temps = TEMPLATES[primitive]
        t = temps[int(rng.integers(len(temps)))]
        texts.append(t.format(s=SUBJECTS[int(rng.integers(len(SUBJECTS)))],
                              adv=ADVERBS[int(rng.integers(len(ADVERBS)))]))
    return SynthClip(clip_id, primitive, SkeletonClip(fps, joints), texts, period)


def synth_generate(
    seed: int,
    n_clips: int,
    primitives: tuple[str, ...] | list[str] = PRIMITIVES,
    fps: float = 30.0,
    min_s: float = 2.0,
    max_s: float = 10.0,
) -> list[SynthClip]:
    """Deterministic corpus: identical arguments give bit-identical clips and captions."""
    if n_clips < 1:
        raise ContractError(f"n_clips must be >= 1, got {n_clips}")
    unknown = [p for p in primitives if p not in TEMPLATES]
    if unknown:
        raise ContractError(f"unknown motion primitive(s): {', '.join(unknown)}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_clips):
        prim = primitives[i % len(primitives)]
        n_frames = int(round(rng.uniform(min_s, max_s) * fps))
        out.append(synth_clip(prim, n_frames, rng, fps, clip_id=f"synth_{seed}_{i:05d}"))
    return out
