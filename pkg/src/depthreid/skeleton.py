"""13-element skeleton physique feature (distances in cm)."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateSkeletonError
from .geometry import SkeletonJoints

SKELETON_FEATURE_NAMES = (
    "head_height",
    "neck_height",
    "neck_left_shoulder",
    "neck_right_shoulder",
    "torso_right_shoulder",
    "right_arm_length",
    "left_arm_length",
    "right_upper_leg",
    "left_upper_leg",
    "torso_length",
    "hip_width",
    "torso_over_right_upper_leg",
    "torso_over_left_upper_leg",
)

FOOT_JOINTS = ("left_foot", "right_foot")
MM_PER_CM = 10.0


def _dist(j: SkeletonJoints, a: str, b: str) -> float:
    return float(np.linalg.norm(j[a] - j[b]))


def floor_height(j: SkeletonJoints) -> float:
    """Vertical coordinate of the floor plane (mm).

    With foot joints the floor is the lowest foot. Without them it is the lower
    knee minus a shank allowance equal to the median upper-leg length (shank
    and thigh have similar length in adult anthropometry).
    """
    feet = [j[f][1] for f in FOOT_JOINTS if f in j]
    if feet:
        return float(min(feet))
    upper = [_dist(j, "left_hip", "left_knee"), _dist(j, "right_hip", "right_knee")]
    return float(min(j["left_knee"][1], j["right_knee"][1]) - np.median(upper))


def skeleton_feature(joints: SkeletonJoints) -> np.ndarray:
    j = joints
    right_leg = _dist(j, "right_hip", "right_knee")
    left_leg = _dist(j, "left_hip", "left_knee")
    if right_leg <= 0 or left_leg <= 0:
        raise DegenerateSkeletonError("upper-leg length is zero; torso/leg ratios undefined")
    y_floor = floor_height(j)
    torso = _dist(j, "neck", "torso")
    v = np.array(
        [
            j["head"][1] - y_floor,
            j["neck"][1] - y_floor,
            _dist(j, "neck", "left_shoulder"),
            _dist(j, "neck", "right_shoulder"),
            _dist(j, "torso", "right_shoulder"),
            _dist(j, "right_shoulder", "right_elbow") + _dist(j, "right_elbow", "right_hand"),
            _dist(j, "left_shoulder", "left_elbow") + _dist(j, "left_elbow", "left_hand"),
            right_leg,
            left_leg,
            torso,
            _dist(j, "right_hip", "left_hip"),
            0.0,
            0.0,
        ]
    ) / MM_PER_CM
    v[11] = v[9] / v[7]
    v[12] = v[9] / v[8]
    return v


def skl_distance(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))
