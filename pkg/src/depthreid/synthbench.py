"""Deterministic synthetic bodies, skeletons and paired visual/depth features.

Bodies are unions of simple primitives (ellipsoid torso, sphere head,
cylinder limbs) seen by a sensor at the origin. Only the surface facing the
sensor is sampled, so turning the body changes which points are observed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .covdesc import DEFAULT_EPS_REL, extract_dvcov, extract_ed
from .geometry import PointCloud, SkeletonJoints, estimate_normals, random_rotation, yaw_rotation
from .recognition import Frame
from .skeleton import skeleton_feature
from .transfer import AuxiliaryDataset

TORSO, HEAD, LEFT_ARM, RIGHT_ARM, LEFT_LEG, RIGHT_LEG = range(6)
PART_NAMES = ("torso", "head", "left_arm", "right_arm", "left_leg", "right_leg")

BODY_DISTANCE = 2500.0  # mm from sensor to torso centre
FLOOR_Y = -1100.0  # sensor height above the floor, negated
ARM_GAP = 30.0  # clearance between torso edge and inner arm surface


@dataclass(frozen=True)
class SyntheticBodySpec:
    torso_axes: tuple = (170.0, 300.0, 110.0)  # lateral, vertical, depth semi-axes
    head_radius: float = 100.0
    arm_radius: float = 40.0
    arm_length: float = 600.0
    leg_radius: float = 60.0
    leg_length: float = 860.0
    density: float = 0.01  # points per mm^2 of full primitive surface
    noise_sigma: float = 0.0

    def __post_init__(self):
        dims = (*self.torso_axes, self.head_radius, self.arm_radius, self.arm_length, self.leg_radius, self.leg_length)
        if min(dims) <= 0 or self.density <= 0 or self.noise_sigma < 0:
            raise ValueError("body dimensions and density must be positive")

    @property
    def upper_leg(self) -> float:
        return 0.5 * self.leg_length


def random_body_spec(rng: np.random.Generator, **overrides) -> SyntheticBodySpec:
    """A plausible adult body with about 10% spread on each dimension."""
    base = SyntheticBodySpec()
    jitter = lambda v: float(v * rng.uniform(0.85, 1.15))  # noqa: E731
    spec = SyntheticBodySpec(
        torso_axes=tuple(jitter(a) for a in base.torso_axes),
        head_radius=jitter(base.head_radius),
        arm_radius=jitter(base.arm_radius),
        arm_length=jitter(base.arm_length),
        leg_radius=jitter(base.leg_radius),
        leg_length=jitter(base.leg_length),
    )
    return replace(spec, **overrides)


def _ellipsoid_area(a, b, c) -> float:
    p = 1.6075
    return 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)


def _unit_sphere(rng, n):
    """``n`` near-uniform unit vectors: a Fibonacci lattice under a random rotation.

    A lattice mimics the regular pixel footprint of a depth sensor; i.i.d.
    draws leave clumps that make small-neighbourhood normals unreliable.
    """
    i = np.arange(n) + rng.uniform()
    phi = np.arccos(np.clip(1 - 2 * i / n, -1, 1))
    theta = np.pi * (1 + 5**0.5) * i
    u = np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
    return u @ random_rotation(rng).T


def _sample_ellipsoid(rng, axes, n):
    a, b, c = axes

    def area_weight(u):
        # relative surface-area element of the map u -> diag(axes) u
        g = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
        return g / max(b * c, a * c, a * b)

    if a == b == c:
        u = _unit_sphere(rng, n)
    else:
        m = int(np.ceil(n / area_weight(_unit_sphere(rng, max(n, 1000))).mean()))
        u = _unit_sphere(rng, m)
        u = u[rng.uniform(size=m) < area_weight(u)]
    pts = u * np.array(axes)
    normals = u / np.array(axes)
    return pts, normals / np.linalg.norm(normals, axis=1, keepdims=True)


def _sample_cylinder(rng, radius, top, length, n):
    theta = rng.uniform(0, 2 * np.pi, n)
    h = rng.uniform(0, length, n)
    normals = np.column_stack([np.cos(theta), np.zeros(n), np.sin(theta)])
    pts = np.column_stack([top[0] + radius * normals[:, 0], top[1] - h, top[2] + radius * normals[:, 2]])
    return pts, normals


def body_joints(spec: SyntheticBodySpec) -> dict:
    """Joint positions in the body frame (torso centre at the origin, y up)."""
    ax, ay, _ = spec.torso_axes
    shoulder_y = 0.75 * ay
    arm_x = ax + ARM_GAP + spec.arm_radius
    hip_y, hip_x = -0.9 * ay, 0.55 * ax
    j = {
        "head": (0.0, ay + spec.head_radius, 0.0),
        "neck": (0.0, ay, 0.0),
        "torso": (0.0, 0.0, 0.0),
    }
    for side, s in (("left", 1.0), ("right", -1.0)):
        j[f"{side}_shoulder"] = (s * ax, shoulder_y, 0.0)
        j[f"{side}_elbow"] = (s * arm_x, shoulder_y - 0.5 * spec.arm_length, 0.0)
        j[f"{side}_hand"] = (s * arm_x, shoulder_y - spec.arm_length, 0.0)
        j[f"{side}_hip"] = (s * hip_x, hip_y, 0.0)
        j[f"{side}_knee"] = (s * hip_x, hip_y - spec.upper_leg, 0.0)
    return {k: np.array(v) for k, v in j.items()}


def body_origin(spec: SyntheticBodySpec) -> np.ndarray:
    """Camera-frame position of the torso centre for a standing body."""
    ay = spec.torso_axes[1]
    return np.array([0.0, FLOOR_Y + spec.leg_length + 0.9 * ay, BODY_DISTANCE])


def generate_body(
    spec: SyntheticBodySpec,
    seed: int,
    yaw: float = 0.0,
    offset=(0.0, 0.0, 0.0),
    joint_noise: float = 0.0,
):
    """Sample the sensor-facing surface of a body and its skeleton.

    ``yaw`` turns the body (degrees) about its vertical axis and ``offset``
    moves it (mm); both act before visibility is decided. Returns a labelled
    :class:`PointCloud` without normals and the :class:`SkeletonJoints`.
    """
    rng = np.random.default_rng(seed)
    ax, ay, az = spec.torso_axes
    joints = body_joints(spec)

    parts = []
    n = int(round(spec.density * _ellipsoid_area(ax, ay, az)))
    parts.append((*_sample_ellipsoid(rng, spec.torso_axes, n), TORSO))
    n = int(round(spec.density * 4 * np.pi * spec.head_radius**2))
    pts, nrm = _sample_ellipsoid(rng, (spec.head_radius,) * 3, n)
    parts.append((pts + joints["head"], nrm, HEAD))
    for label, side in ((LEFT_ARM, "left"), (RIGHT_ARM, "right")):
        n = int(round(spec.density * 2 * np.pi * spec.arm_radius * spec.arm_length))
        top = np.array([joints[f"{side}_elbow"][0], joints[f"{side}_shoulder"][1], 0.0])
        parts.append((*_sample_cylinder(rng, spec.arm_radius, top, spec.arm_length, n), label))
    for label, side in ((LEFT_LEG, "left"), (RIGHT_LEG, "right")):
        n = int(round(spec.density * 2 * np.pi * spec.leg_radius * spec.leg_length))
        top = joints[f"{side}_hip"]
        parts.append((*_sample_cylinder(rng, spec.leg_radius, top, spec.leg_length, n), label))

    R = yaw_rotation(yaw)
    origin = body_origin(spec) + np.asarray(offset, dtype=float)
    pts = np.concatenate([p for p, _, _ in parts]) @ R.T + origin
    nrm = np.concatenate([q for _, q, _ in parts]) @ R.T
    labels = np.concatenate([np.full(len(p), lab) for p, _, lab in parts])

    visible = np.einsum("ij,ij->i", nrm, -pts) > 0
    pts, labels = pts[visible], labels[visible]
    if spec.noise_sigma > 0:
        pts = pts + rng.normal(scale=spec.noise_sigma, size=pts.shape)

    cam_joints = {}
    for name, xyz in joints.items():
        xyz = R @ xyz + origin
        if joint_noise > 0:
            xyz = xyz + rng.normal(scale=joint_noise, size=3)
        cam_joints[name] = xyz
    return PointCloud(pts, labels=labels), SkeletonJoints(cam_joints)


# ---------------------------------------------------------------------------
# re-identification datasets


@dataclass(frozen=True)
class ReidSynthConfig:
    persons: int = 10
    frames: int = 20
    max_yaw: float = 30.0
    noise_sigma: float = 2.0
    joint_noise: float = 5.0
    max_offset: float = 150.0
    density: float = 0.01
    seed: int = 0


def person_specs(cfg: ReidSynthConfig) -> list:
    rng = np.random.default_rng([cfg.seed, 0])
    return [random_body_spec(rng, density=cfg.density, noise_sigma=cfg.noise_sigma) for _ in range(cfg.persons)]


def iter_frames(cfg: ReidSynthConfig):
    """Yield ``(person_id, frame_index, cloud, joints)`` for every synthetic frame."""
    specs = person_specs(cfg)
    for p, spec in enumerate(specs):
        rng = np.random.default_rng([cfg.seed, 1, p])
        for t in range(cfg.frames):
            yaw = rng.uniform(-cfg.max_yaw, cfg.max_yaw)
            offset = (rng.uniform(-cfg.max_offset, cfg.max_offset), 0.0, rng.uniform(-cfg.max_offset, cfg.max_offset))
            seed = int(rng.integers(2**31))
            cloud, joints = generate_body(spec, seed, yaw=yaw, offset=offset, joint_noise=cfg.joint_noise)
            yield f"p{p:03d}", t, cloud, joints


def frame_features(cloud: PointCloud, joints: SkeletonJoints, k: int = 10, rows: int = 6, cols: int = 2,
                   eps_rel: float = DEFAULT_EPS_REL):
    """Run the extraction pipeline on one frame: ``(dvcov, ed, skl)``."""
    with_normals = estimate_normals(cloud, k)
    d = extract_dvcov(with_normals, joints, rows, cols, eps_rel)
    return d, extract_ed(d), skeleton_feature(joints)


def synthetic_reid_frames(cfg: ReidSynthConfig = ReidSynthConfig(), group: str = "all", k: int = 10) -> list:
    frames = []
    for person, t, cloud, joints in iter_frames(cfg):
        d, ed, skl = frame_features(cloud, joints, k)
        frames.append(Frame(person, group, t, ed=ed, skl=skl, dvcov=d))
    return frames


# ---------------------------------------------------------------------------
# paired visual/depth features for transfer learning

EMBEDDING_SEED = 20170301
LATENT_DIM = 8
VISUAL_DIM = 40
DEPTH_DIM = 30
N_VIEW_CODES = 16


@lru_cache(maxsize=1)
def _embeddings():
    rng = np.random.default_rng(EMBEDDING_SEED)
    return {
        "W_v": rng.standard_normal((VISUAL_DIM, LATENT_DIM)) / np.sqrt(LATENT_DIM),
        "V_v": rng.standard_normal((VISUAL_DIM, N_VIEW_CODES)),
        "W_d1": rng.standard_normal((DEPTH_DIM, LATENT_DIM)) / np.sqrt(LATENT_DIM),
        "W_d2": rng.standard_normal((DEPTH_DIM, DEPTH_DIM)) / np.sqrt(DEPTH_DIM),
        "view_codes": rng.standard_normal((N_VIEW_CODES, N_VIEW_CODES)),
    }


def visual_embedding(latent, view: int, view_scale: float = 0.15) -> np.ndarray:
    E = _embeddings()
    code = E["view_codes"][view % N_VIEW_CODES]
    return np.tanh(E["W_v"] @ latent + view_scale * E["V_v"] @ code / np.sqrt(N_VIEW_CODES))


def depth_embedding(latent) -> np.ndarray:
    E = _embeddings()
    return E["W_d2"] @ np.tanh(1.5 * E["W_d1"] @ latent)


def generate_paired_features(persons: int, views: int, seed: int, noise: float = 0.05,
                             visual_noise: float = 0.02) -> AuxiliaryDataset:
    """Paired visual/depth samples sharing a per-person latent identity.

    Visual features change with the view; depth features only carry
    additive noise of standard deviation ``noise``.
    """
    if persons < 2:
        raise ValueError("need at least two persons")
    rng = np.random.default_rng(seed)
    visual, depth, labels = [], [], []
    for p in range(persons):
        z = rng.standard_normal(LATENT_DIM)
        d = depth_embedding(z)
        for v in range(views):
            visual.append(visual_embedding(z, v) + visual_noise * rng.standard_normal(VISUAL_DIM))
            depth.append(d + noise * rng.standard_normal(DEPTH_DIM))
            labels.append(p)
    return AuxiliaryDataset(np.array(visual), np.array(depth), np.array(labels))


@dataclass
class TransferBenchmark:
    gallery_visual: np.ndarray
    probe_visual: np.ndarray
    gallery_labels: np.ndarray
    probe_labels: np.ndarray
    rgb_distances: np.ndarray  # probe x gallery
    corrupted: np.ndarray  # boolean mask over probes


def generate_transfer_benchmark(persons: int = 30, views: int = 4, seed: int = 0, corrupt_fraction: float = 0.2,
                                appearance_noise: float = 0.6) -> TransferBenchmark:
    """RGB-only target set whose RGB distances are scrambled for some probes.

    Each person gets a fresh latent identity (disjoint from any auxiliary set
    drawn with a different seed). Visual features follow the shared visual
    embedding. RGB distances compare a separate appearance vector, and for
    ``corrupt_fraction`` of the probes they are replaced by a random shuffle of
    that probe's row, so only the visual features still carry identity.
    """
    rng = np.random.default_rng([seed, 7])
    latents = rng.standard_normal((persons, LATENT_DIM))
    appearance = rng.standard_normal((persons, 16))

    def sample(p, v):
        vis = visual_embedding(latents[p], v) + 0.02 * rng.standard_normal(VISUAL_DIM)
        app = appearance[p] + appearance_noise * rng.standard_normal(16)
        return vis, app

    g_vis, g_app, p_vis, p_app, g_lab, p_lab = [], [], [], [], [], []
    for p in range(persons):
        g_view = int(rng.integers(views))
        for v in range(views):
            vis, app = sample(p, v)
            if v == g_view:
                g_vis.append(vis), g_app.append(app), g_lab.append(p)
            else:
                p_vis.append(vis), p_app.append(app), p_lab.append(p)
    g_app, p_app = np.array(g_app), np.array(p_app)
    rgb = np.linalg.norm(p_app[:, None, :] - g_app[None, :, :], axis=-1)
    n_bad = int(round(corrupt_fraction * len(rgb)))
    bad = np.zeros(len(rgb), dtype=bool)
    bad[rng.choice(len(rgb), n_bad, replace=False)] = True
    for i in np.flatnonzero(bad):
        rgb[i] = rng.permutation(rgb[i])
    return TransferBenchmark(np.array(g_vis), np.array(p_vis), np.array(g_lab), np.array(p_lab), rgb, bad)
