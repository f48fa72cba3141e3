"""Clip export for external viewers: JSON skeleton clips, BVH-lite text and feature files.

BVH-lite keeps the usual HIERARCHY / MOTION layout but its channels are not
Euler angles. The root carries position plus heading (Yrotation, degrees) and
every other joint carries its world position, so a frame line is
4 + 3 * (J - 1) numbers.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError
from .pose_features import SkeletonClip, featurize, heading_angles, write_features
from .skeleton import PARENTS, REST_OFFSETS

FORMATS = ("json", "bvh", "features")


def _children(j: int) -> list[int]:
    return [c for c, p in enumerate(PARENTS) if p == j]


def _hierarchy(names: tuple[str, ...]) -> list[str]:
    lines = ["HIERARCHY"]

    def emit(j: int, depth: int) -> None:
        pad = "  " * depth
        off = REST_OFFSETS[j]
        kind = "ROOT" if PARENTS[j] < 0 else "JOINT"
        lines.append(f"{pad}{kind} {names[j]}")
        lines.append(f"{pad}{{")
        lines.append(f"{pad}  OFFSET {off[0]:.6f} {off[1]:.6f} {off[2]:.6f}")
        if PARENTS[j] < 0:
            lines.append(f"{pad}  CHANNELS 4 Xposition Yposition Zposition Yrotation")
        else:
            lines.append(f"{pad}  CHANNELS 3 Xposition Yposition Zposition")
        kids = _children(j)
        for c in kids:
            emit(c, depth + 1)
        if not kids:
            lines.append(f"{pad}  End Site")
            lines.append(f"{pad}  {{")
            lines.append(f"{pad}    OFFSET 0.000000 0.000000 0.000000")
            lines.append(f"{pad}  }}")
        lines.append(f"{pad}}}")

    emit(0, 0)
    return lines


def _dfs_order() -> list[int]:
    order, stack = [], [0]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(_children(j)))
    return order


def bvh_lite(clip: SkeletonClip) -> str:
    order = _dfs_order()
    heading = np.degrees(heading_angles(clip.joints))
    lines = _hierarchy(tuple(clip.names))
    lines += ["MOTION", f"Frames: {clip.n_frames}", f"Frame Time: {1.0 / clip.fps:.12f}"]
    for t in range(clip.n_frames):
        row = [*clip.joints[t, 0], heading[t]]
        for j in order[1:]:
            row.extend(clip.joints[t, j])
        lines.append(" ".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"


def read_bvh_lite(text: str) -> SkeletonClip:
    """Joint positions back from a BVH-lite export (heading channel is ignored)."""
    lines = text.splitlines()
    try:
        m = lines.index("MOTION")
        n = int(lines[m + 1].split(":")[1])
        dt = float(lines[m + 2].split(":")[1])
        rows = np.array([[float(v) for v in ln.split()] for ln in lines[m + 3:m + 3 + n]])
    except (ValueError, IndexError) as e:
        raise FormatError(f"malformed BVH-lite text: {e}") from None
    dfs_names = [ln.split()[1] for ln in lines[:m] if ln.strip().startswith(("ROOT", "JOINT"))]
    J = len(dfs_names)
    if rows.shape != (n, 4 + 3 * (J - 1)):
        raise FormatError(f"expected {n} frames of {4 + 3 * (J - 1)} values, got {rows.shape}")
    order = _dfs_order()
    if len(order) != J:
        raise FormatError(f"hierarchy has {J} joints, expected {len(order)}")
    names = [""] * J
    for k, j in enumerate(order):
        names[j] = dfs_names[k]
    joints = np.empty((n, J, 3))
    joints[:, 0] = rows[:, :3]
    for k, j in enumerate(order[1:]):
        joints[:, j] = rows[:, 4 + 3 * k:7 + 3 * k]
    return SkeletonClip(1.0 / dt, joints, tuple(names))


def export_clip(clip: SkeletonClip, path: str | Path, fmt: str) -> Path:
    path = Path(path)
    if fmt == "json":
        clip.save(path)
    elif fmt == "bvh":
        path.write_text(bvh_lite(clip))
    elif fmt == "features":
        write_features(path, featurize(clip))
    else:
        raise FormatError(f"unknown export format {fmt!r}; expected one of {', '.join(FORMATS)}")
    return path
