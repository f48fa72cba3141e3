"""Per-frame pose features (263 dims for the 22-joint skeleton) and their inverse.

Layout of one feature frame, in order:

    [0]        root angular velocity about Y (rad/frame)
    [1:3]      root linear velocity on XZ in the heading frame (m/frame)
    [3]        root height (m)
    [4:67]     root-space positions of joints 1..21
    [67:193]   6-D rotations of joints 1..21 (first two matrix columns)
    [193:259]  root-space velocities of joints 0..21
    [259:263]  foot contacts (left ankle, left foot, right ankle, right foot)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, ShapeError
from .skeleton import (
    FOOT_JOINTS, HIP_L, HIP_R, JOINT_NAMES, N_JOINTS, PARENTS, REST_OFFSETS,
    SHOULDER_L, SHOULDER_R, yaw_matrix,
)

J = N_JOINTS
FEATURE_DIM = 4 + 3 * (J - 1) + 6 * (J - 1) + 3 * J + 4
ROOT = slice(0, 4)
POS = slice(4, 4 + 3 * (J - 1))
ROT = slice(POS.stop, POS.stop + 6 * (J - 1))
VEL = slice(ROT.stop, ROT.stop + 3 * J)
CONTACT = slice(VEL.stop, VEL.stop + 4)
assert CONTACT.stop == FEATURE_DIM == 263

CONTACT_THRESHOLD = 0.002  # squared speed, m^2/frame^2
STD_FLOOR = 1e-6
FEATURE_MAGIC = b"GM3F"
FEATURE_VERSION = 1


@dataclass
class SkeletonClip:
    fps: float
    joints: np.ndarray  # (T, J, 3)
    names: tuple[str, ...] = JOINT_NAMES

    def __post_init__(self) -> None:
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.fps <= 0:
            raise ContractError(f"fps must be positive, got {self.fps}")
        if self.joints.ndim != 3 or self.joints.shape[2] != 3:
            raise ShapeError(f"joints must be (T, J, 3), got {self.joints.shape}")
        if self.joints.shape[0] < 2:
            raise ContractError("a clip needs at least 2 frames")
        if np.isnan(self.joints).any():
            raise ContractError("NaN joint coordinates")

    @property
    def n_frames(self) -> int:
        return self.joints.shape[0]

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps

    def to_json(self) -> dict:
        return {"fps": self.fps, "names": list(self.names),
                "joints": np.round(self.joints, 6).tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "SkeletonClip":
        try:
            return cls(float(obj["fps"]), np.asarray(obj["joints"], dtype=np.float64),
                       tuple(obj.get("names", JOINT_NAMES)))
        except KeyError as e:
            raise FormatError(f"skeleton clip JSON missing field {e}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "SkeletonClip":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class MotionFeatureSequence:
    features: np.ndarray  # (T, 263)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be (T, D), got {self.features.shape}")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)

    @classmethod
    def fit(cls, sequences: list[np.ndarray]) -> "Normalizer":
        """Statistics over all frames of the (training) sequences."""
        data = np.concatenate([np.asarray(s, dtype=np.float64) for s in sequences], axis=0)
        return cls(data.mean(axis=0), data.std(axis=0))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def de_normalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


def normalize(seq: MotionFeatureSequence, norm: Normalizer) -> MotionFeatureSequence:
    if seq.normalized:
        return seq
    return MotionFeatureSequence(norm.normalize(seq.features), norm.mean, norm.std, True)


def de_normalize(seq: MotionFeatureSequence, norm: Normalizer | None = None) -> MotionFeatureSequence:
    if not seq.normalized:
        return seq
    if norm is None:
        if seq.mean is None or seq.std is None:
            raise ContractError("normalized sequence carries no statistics")
        norm = Normalizer(seq.mean, seq.std)
    return MotionFeatureSequence(norm.de_normalize(seq.features), norm.mean, norm.std, False)


def heading_angles(joints: np.ndarray) -> np.ndarray:
    """Facing direction (T,) as the yaw taking +Z onto the body's forward vector."""
    across = (joints[:, HIP_R] - joints[:, HIP_L]) + (joints[:, SHOULDER_R] - joints[:, SHOULDER_L])
    # forward = up x across, projected on the ground plane
    fx, fz = across[:, 2], -across[:, 0]
    return np.arctan2(fx, fz)


def _wrap(a: np.ndarray) -> np.ndarray:
    return (a + np.pi) % (2 * np.pi) - np.pi


def _to_root(vecs: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Rotate (T, N, 3) world vectors by -theta about Y."""
    inv = yaw_matrix(-theta)
    return np.einsum("tab,tnb->tna", inv, vecs)


def _shortest_arc(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) taking unit vectors ``src`` onto unit vectors ``dst``."""
    src = np.broadcast_to(src, dst.shape)
    v = np.cross(src, dst)
    c = np.sum(src * dst, axis=-1)
    vx = np.zeros(dst.shape[:-1] + (3, 3))
    vx[..., 0, 1], vx[..., 0, 2] = -v[..., 2], v[..., 1]
    vx[..., 1, 0], vx[..., 1, 2] = v[..., 2], -v[..., 0]
    vx[..., 2, 0], vx[..., 2, 1] = -v[..., 1], v[..., 0]
    eye = np.broadcast_to(np.eye(3), vx.shape)
    opposite = c < -1 + 1e-9
    k = 1.0 / np.where(opposite, 1.0, 1.0 + c)
    rot = eye + vx + (vx @ vx) * k[..., None, None]
    if np.any(opposite):
        # half turn about any axis perpendicular to src
        s = src[opposite]
        helper = np.where(np.abs(s[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
        ax = np.cross(s, helper)
        ax /= np.linalg.norm(ax, axis=-1, keepdims=True)
        rot[opposite] = 2 * ax[:, :, None] * ax[:, None, :] - np.eye(3)
    return rot


_REST_DIRS = REST_OFFSETS[1:] / np.linalg.norm(REST_OFFSETS[1:], axis=-1, keepdims=True)


def featurize(clip: SkeletonClip, contact_threshold: float = CONTACT_THRESHOLD) -> MotionFeatureSequence:
    """Features for frames 0..T-2 of ``clip`` (velocities consume the last frame)."""
    P = clip.joints
    if P.shape[1] != N_JOINTS:
        raise ContractError(f"unsupported skeleton: {P.shape[1]} joints, expected {N_JOINTS}")
    T = P.shape[0]
    theta = heading_angles(P)
    cur, nxt, th = P[:-1], P[1:], theta[:-1]
    n = T - 1

    feats = np.zeros((n, FEATURE_DIM))
    feats[:, 0] = _wrap(theta[1:] - th)
    root_vel = _to_root((nxt[:, 0] - cur[:, 0])[:, None], th)[:, 0]
    feats[:, 1] = root_vel[:, 0]
    feats[:, 2] = root_vel[:, 2]
    feats[:, 3] = cur[:, 0, 1]

    centered = cur[:, 1:].copy()
    centered[..., 0] -= cur[:, 0:1, 0]
    centered[..., 2] -= cur[:, 0:1, 2]
    feats[:, POS] = _to_root(centered, th).reshape(n, -1)

    parents = np.array(PARENTS[1:])
    bones = _to_root(cur[:, 1:] - cur[:, parents], th)
    lengths = np.linalg.norm(bones, axis=-1, keepdims=True)
    dirs = bones / np.maximum(lengths, 1e-12)
    rot = _shortest_arc(_REST_DIRS[None], dirs)
    feats[:, ROT] = rot[..., :, :2].transpose(0, 1, 3, 2).reshape(n, -1)

    feats[:, VEL] = _to_root(nxt - cur, th).reshape(n, -1)

    foot = np.array(FOOT_JOINTS)
    speed2 = np.sum((nxt[:, foot] - cur[:, foot]) ** 2, axis=-1)
    feats[:, CONTACT] = (speed2 < contact_threshold).astype(np.float64)
    return MotionFeatureSequence(feats)


def recover(
    seq: MotionFeatureSequence | np.ndarray,
    initial_root: tuple[float, float, float] = (0.0, 0.0, 0.0),
    fps: float = 30.0,
) -> SkeletonClip:
    """World joint positions from (de-normalized) features.

    ``initial_root`` is (x, z, heading) of the first frame. T feature frames give
    T + 1 skeleton frames: the last one is reached through the joint velocities.
    """
    f = seq.features if isinstance(seq, MotionFeatureSequence) else np.asarray(seq)
    if isinstance(seq, MotionFeatureSequence) and seq.normalized:
        f = de_normalize(seq).features
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != FEATURE_DIM:
        raise ShapeError(f"expected (T, {FEATURE_DIM}) features, got {f.shape}")
    n = f.shape[0]
    theta = initial_root[2] + np.concatenate([[0.0], np.cumsum(f[:-1, 0])])
    steps = np.zeros((n, 3))
    steps[:, 0], steps[:, 2] = f[:, 1], f[:, 2]
    steps = np.einsum("tab,tb->ta", yaw_matrix(theta), steps)
    root = np.zeros((n, 3))
    root[:, 0] = initial_root[0] + np.concatenate([[0.0], np.cumsum(steps[:-1, 0])])
    root[:, 2] = initial_root[1] + np.concatenate([[0.0], np.cumsum(steps[:-1, 2])])

    rotm = yaw_matrix(theta)
    out = np.empty((n + 1, N_JOINTS, 3))
    local = f[:, POS].reshape(n, N_JOINTS - 1, 3)
    out[:n, 1:] = np.einsum("tab,tjb->tja", rotm, local)
    out[:n, 1:, 0] += root[:, None, 0]
    out[:n, 1:, 2] += root[:, None, 2]
    out[:n, 0] = root
    out[:n, 0, 1] = f[:, 3]
    vel = f[-1, VEL].reshape(N_JOINTS, 3)
    out[n] = out[n - 1] + vel @ rotm[-1].T
    return SkeletonClip(fps, out)


def initial_root_of(clip: SkeletonClip) -> tuple[float, float, float]:
    P = clip.joints
    return float(P[0, 0, 0]), float(P[0, 0, 2]), float(heading_angles(P[:1])[0])


def write_features(path: str | Path, seq: MotionFeatureSequence) -> None:
    """Store de-normalized features with the statistics they carry (identity if none)."""
    seq = de_normalize(seq)
    feats = np.asarray(seq.features, dtype="<f4")
    T, D = feats.shape
    mean = np.zeros(D) if seq.mean is None else seq.mean
    std = np.ones(D) if seq.std is None else seq.std
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<HII", FEATURE_VERSION, T, D))
        fh.write(feats.tobytes())
        fh.write(np.asarray(mean, dtype="<f4").tobytes())
        fh.write(np.asarray(std, dtype="<f4").tobytes())


def read_features(path: str | Path) -> MotionFeatureSequence:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a motion feature file")
    version, T, D = struct.unpack_from("<HII", data, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 14
    need = off + 4 * (T * D + 2 * D)
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(data)}")
    feats = np.frombuffer(data, "<f4", T * D, off).reshape(T, D).astype(np.float64)
    off += 4 * T * D
    mean = np.frombuffer(data, "<f4", D, off).astype(np.float64)
    std = np.frombuffer(data, "<f4", D, off + 4 * D).astype(np.float64)
    return MotionFeatureSequence(feats, mean, std)
