"""The 22-joint body skeleton shared by featurization, synthesis and export.

Coordinates are meters, Y up; the rest pose faces +Z with the body's left side
towards +X.
"""

from __future__ import annotations

import numpy as np

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)
N_JOINTS = len(JOINT_NAMES)
JOINT_INDEX = {n: i for i, n in enumerate(JOINT_NAMES)}

PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

KINEMATIC_CHAINS = (
    (0, 2, 5, 8, 11),
    (0, 1, 4, 7, 10),
    (0, 3, 6, 9, 12, 15),
    (9, 14, 17, 19, 21),
    (9, 13, 16, 18, 20),
)

# parent-relative rest offsets
REST_OFFSETS = np.array([
    [0.0, 0.93, 0.0],
    [0.08, -0.07, 0.0],
    [-0.08, -0.07, 0.0],
    [0.0, 0.11, 0.0],
    [0.0, -0.39, 0.0],
    [0.0, -0.39, 0.0],
    [0.0, 0.13, 0.0],
    [0.0, -0.41, 0.0],
    [0.0, -0.41, 0.0],
    [0.0, 0.05, 0.0],
    [0.0, -0.05, 0.12],
    [0.0, -0.05, 0.12],
    [0.0, 0.21, 0.0],
    [0.08, 0.12, 0.0],
    [-0.08, 0.12, 0.0],
    [0.0, 0.09, 0.05],
    [0.11, 0.04, 0.0],
    [-0.11, 0.04, 0.0],
    [0.26, 0.0, 0.0],
    [-0.26, 0.0, 0.0],
    [0.25, 0.0, 0.0],
    [-0.25, 0.0, 0.0],
])

# heel/toe joints used for ground contact: left ankle, left foot, right ankle, right foot
FOOT_JOINTS = (7, 10, 8, 11)
# joints defining the body's facing direction
HIP_L, HIP_R, SHOULDER_L, SHOULDER_R = 1, 2, 16, 17


def rest_pose() -> np.ndarray:
    """World joint positions (J, 3) of the rest pose at the origin."""
    pos = np.zeros((N_JOINTS, 3))
    for j in range(N_JOINTS):
        p = PARENTS[j]
        pos[j] = REST_OFFSETS[j] if p < 0 else pos[p] + REST_OFFSETS[j]
    return pos


def axis_angle_matrix(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rotation matrices for a fixed unit ``axis`` and an array of angles -> (..., 3, 3)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    angle = np.asarray(angle, dtype=np.float64)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    m = np.empty(angle.shape + (3, 3))
    m[..., 0, 0] = c + x * x * C
    m[..., 0, 1] = x * y * C - z * s
    m[..., 0, 2] = x * z * C + y * s
    m[..., 1, 0] = y * x * C + z * s
    m[..., 1, 1] = c + y * y * C
    m[..., 1, 2] = y * z * C - x * s
    m[..., 2, 0] = z * x * C - y * s
    m[..., 2, 1] = z * y * C + x * s
    m[..., 2, 2] = c + z * z * C
    return m


def yaw_matrix(theta: np.ndarray) -> np.ndarray:
    """Rotation about +Y mapping local +Z onto (sin t, 0, cos t)."""
    return axis_angle_matrix(np.array([0.0, 1.0, 0.0]), theta)


def forward_kinematics(
    local_rot: np.ndarray, root_pos: np.ndarray, root_yaw: np.ndarray | None = None
) -> np.ndarray:
    """World positions (T, J, 3) from per-joint local rotations (T, J, 3, 3).

    ``local_rot[:, j]`` rotates the subtree below joint ``j`` about that joint.
    ``root_yaw`` (T,) optionally turns the whole body about the vertical axis.
    """
    T = local_rot.shape[0]
    glob = np.empty((T, N_JOINTS, 3, 3))
    pos = np.empty((T, N_JOINTS, 3))
    base = np.broadcast_to(np.eye(3), (T, 3, 3)) if root_yaw is None else yaw_matrix(root_yaw)
    for j in range(N_JOINTS):
        p = PARENTS[j]
        if p < 0:
            glob[:, j] = base @ local_rot[:, j]
            pos[:, j] = root_pos
        else:
            pos[:, j] = pos[:, p] + np.einsum("tab,b->ta", glob[:, p], REST_OFFSETS[j])
            glob[:, j] = glob[:, p] @ local_rot[:, j]
    return pos
