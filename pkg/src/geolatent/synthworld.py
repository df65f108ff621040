"""Procedural multi-view capture studio.

Generates articulated stick figures with per-subject limb colors, renders
them from a calibrated camera ring over smooth random backgrounds, and
persists images, cameras, backgrounds, and ground-truth joint positions in
a plain directory layout:

    dataset/{subject}/{camera}/{frame:06d}.png
    dataset/backgrounds/{subject}_{camera}.png
    dataset/cameras.json
    dataset/poses.csv
    dataset/meta.json

PNGs are 8-bit RGB; loaded values are linear in [0, 1] after /255.
Everything is a pure function of the config seeds: per-frame seeds are
spawned from (seed, subject, frame), so parallel and serial generation
agree bitwise.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import cv2
import numpy as np
from PIL import Image

from . import geometry as geo


@dataclass(frozen=True)
class SkeletonSpec:
    """Kinematic tree: parents, rest offsets, bone lengths, angle limits.

    ``rest_dir[k]`` is the unit offset of joint k from its parent in the
    parent's local frame; the root's entry is ignored.  ``angle_limits``
    bounds each of the three local Euler angles of every joint.
    """

    parents: tuple[int, ...]
    bone_lengths: tuple[float, ...]
    rest_dirs: tuple[tuple[float, float, float], ...]
    angle_limits: tuple[tuple[float, float], ...]
    root_index: int = 0

    def __post_init__(self):
        k = len(self.parents)
        if not (len(self.bone_lengths) == len(self.rest_dirs) == len(self.angle_limits) == k):
            raise ValueError("inconsistent skeleton arrays")
        if self.parents[self.root_index] != -1:
            raise ValueError("root joint must have parent -1")
        for j, p in enumerate(self.parents):
            if j != self.root_index and not (0 <= p < j):
                raise ValueError("parents must be topologically ordered with a single root")
        if any(l <= 0 for j, l in enumerate(self.bone_lengths) if j != self.root_index):
            raise ValueError("bone lengths must be positive")

    @property
    def num_joints(self) -> int:
        return len(self.parents)


def default_skeleton() -> SkeletonSpec:
    """16-joint humanoid, pelvis-rooted, dimensions in mm."""
    names = [
        ("pelvis", -1, 0.0, (0, 0, 0)),
        ("spine", 0, 250.0, (0, -1, 0)),
        ("neck", 1, 250.0, (0, -1, 0)),
        ("head", 2, 180.0, (0, -1, 0)),
        ("l_shoulder", 2, 180.0, (-1, 0, 0)),
        ("l_elbow", 4, 280.0, (-1, 0, 0)),
        ("l_wrist", 5, 250.0, (-1, 0, 0)),
        ("r_shoulder", 2, 180.0, (1, 0, 0)),
        ("r_elbow", 7, 280.0, (1, 0, 0)),
        ("r_wrist", 8, 250.0, (1, 0, 0)),
        ("l_hip", 0, 130.0, (-1, 0, 0)),
        ("l_knee", 10, 440.0, (0, 1, 0)),
        ("l_ankle", 11, 440.0, (0, 1, 0)),
        ("r_hip", 0, 130.0, (1, 0, 0)),
        ("r_knee", 13, 440.0, (0, 1, 0)),
        ("r_ankle", 14, 440.0, (0, 1, 0)),
    ]
    parents = tuple(n[1] for n in names)
    lengths = tuple(max(n[2], 1.0) for n in names)
    dirs = tuple(n[3] for n in names)
    # Moderate articulation keeps every pose inside the camera crops.
    limits = tuple((-0.6, 0.6) for _ in names)
    return SkeletonSpec(parents=parents, bone_lengths=lengths, rest_dirs=dirs,
                        angle_limits=limits)


JOINT_NAMES = [
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
]


@dataclass(frozen=True)
class PoseSkeleton:
    """K x 3 joint positions in mm, world frame."""

    joints: np.ndarray
    root_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "joints", np.asarray(self.joints, dtype=np.float64))

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "PoseSkeleton":
        return PoseSkeleton(self.joints @ np.asarray(rotation).T + translation,
                            self.root_index)


@dataclass(frozen=True)
class Appearance:
    """Per-limb RGB colors in [0, 1] and limb thickness at reference depth."""

    limb_colors: np.ndarray  # (K, 3); entry k colors the bone parent(k)->k
    thickness: float  # px at the reference depth

    def __post_init__(self):
        colors = np.asarray(self.limb_colors, dtype=np.float64)
        if colors.min() < 0 or colors.max() > 1:
            raise ValueError("limb colors must lie in [0, 1]")
        if self.thickness <= 0:
            raise ValueError("thickness must be positive")
        object.__setattr__(self, "limb_colors", colors)


@dataclass(frozen=True)
class SceneFrame:
    subject_id: int
    time_index: int
    pose: PoseSkeleton
    appearance: Appearance
    parents: tuple[int, ...] | None = None  # falls back to the default skeleton

    def __post_init__(self):
        if self.time_index < 0:
            raise ValueError("time_index must be non-negative")


def forward_kinematics(spec: SkeletonSpec, angles: np.ndarray) -> PoseSkeleton:
    """Chain local Euler rotations down the tree; root stays at the origin."""
    k = spec.num_joints
    pos = np.zeros((k, 3))
    rot = [None] * k
    for j in range(k):
        local = geo.rotation_from_euler(*angles[j])
        p = spec.parents[j]
        if p < 0:
            rot[j] = local
            continue
        rot[j] = rot[p] @ local
        pos[j] = pos[p] + rot[p] @ (spec.bone_lengths[j] * np.asarray(spec.rest_dirs[j], dtype=float))
    return PoseSkeleton(joints=pos, root_index=spec.root_index)


def sample_pose(rng_seed, spec: SkeletonSpec) -> PoseSkeleton:
    """Uniformly sample joint angles within limits and run FK.

    ``rng_seed`` may be an int or a numpy SeedSequence/Generator.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    lo = np.array([l[0] for l in spec.angle_limits])[:, None]
    hi = np.array([l[1] for l in spec.angle_limits])[:, None]
    angles = rng.uniform(size=(spec.num_joints, 3)) * (hi - lo) + lo
    return forward_kinematics(spec, angles)


def sample_appearance(rng, num_joints: int) -> Appearance:
    """Saturated random limb palette with a random thickness."""
    hues = rng.uniform(0, 1, size=num_joints)
    sat = rng.uniform(0.6, 1.0, size=num_joints)
    val = rng.uniform(0.6, 1.0, size=num_joints)
    hsv = np.stack([hues * 179, sat * 255, val * 255], axis=-1).astype(np.uint8)
    rgb = cv2.cvtColor(hsv[None], cv2.COLOR_HSV2RGB)[0] / 255.0
    return Appearance(limb_colors=rgb, thickness=float(rng.uniform(3.0, 5.0)))


REFERENCE_DEPTH = 4000.0  # mm; thickness is quoted at this depth
SUPERSAMPLE = 2


def render_view(frame: SceneFrame, cam: geo.CameraView, background: np.ndarray) -> np.ndarray:
    """Rasterize limbs as anti-aliased capsules over a background plate.

    Bones are painted far-to-near (painter's algorithm) on a 2x
    supersampled grid and box-downsampled.  Deterministic.

    Raises:
        ValueError: any joint at or behind the camera plane.
    """
    x, y, w, h = cam.crop
    w, h = int(round(w)), int(round(h))
    if background.shape[:2] != (h, w):
        raise ValueError("background size must match the crop")
    pc = cam.to_camera(frame.pose.joints)
    if np.any(pc[:, 2] <= 0):
        raise ValueError("joint behind camera")
    uv = (cam.project(frame.pose.joints)) * SUPERSAMPLE + (SUPERSAMPLE - 1) / 2.0

    ss_h, ss_w = h * SUPERSAMPLE, w * SUPERSAMPLE
    canvas = np.repeat(np.repeat(background.astype(np.float32), SUPERSAMPLE, 0),
                       SUPERSAMPLE, 1)
    ys, xs = np.mgrid[0:ss_h, 0:ss_w].astype(np.float32)

    bones = []
    parents = frame.parents if frame.parents is not None else DEFAULT_PARENTS_CACHE
    for j, p in enumerate(parents):
        if p < 0:
            continue
        a, b = frame.pose.joints[j], frame.pose.joints[p]
        if np.linalg.norm(a - b) < 1e-9:
            continue
        z_mid = 0.5 * (pc[j, 2] + pc[p, 2])
        bones.append((z_mid, j, p))
    bones.sort(key=lambda t: -t[0])  # far first

    for z_mid, j, p in bones:
        a = uv[j]
        b = uv[p]
        radius = frame.appearance.thickness * SUPERSAMPLE * REFERENCE_DEPTH / z_mid
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-12:
            continue
        tpar = ((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / denom
        tpar = np.clip(tpar, 0.0, 1.0)
        dx = xs - (a[0] + tpar * ab[0])
        dy = ys - (a[1] + tpar * ab[1])
        mask = (dx * dx + dy * dy) <= radius * radius
        canvas[mask] = frame.appearance.limb_colors[j].astype(np.float32)

    out = canvas.reshape(h, SUPERSAMPLE, w, SUPERSAMPLE, 3).mean(axis=(1, 3))
    return out.astype(np.float32)


DEFAULT_PARENTS_CACHE = default_skeleton().parents


def foreground_mask(frame: SceneFrame, cam: geo.CameraView) -> np.ndarray:
    """Boolean H x W mask of pixels touched by any limb (no anti-aliasing)."""
    x, y, w, h = cam.crop
    w, h = int(round(w)), int(round(h))
    black = np.zeros((h, w, 3), dtype=np.float32)
    white = Appearance(limb_colors=np.ones_like(frame.appearance.limb_colors),
                       thickness=frame.appearance.thickness)
    rendered = render_view(
        SceneFrame(frame.subject_id, frame.time_index, frame.pose, white, frame.parents),
        cam, black
    )
    return rendered.max(axis=2) > 0.5


@dataclass
class DatasetConfig:
    out_dir: str
    num_subjects: int = 5
    num_cameras: int = 4
    num_frames: int = 200
    image_size: int = 64
    seed: int = 0
    camera_radius: float = 4200.0
    camera_height: float = -900.0  # world y is down; negative is above ground
    focal: float = 55.0
    sensor_size: int = 192
    root_jitter: float = 150.0
    subject_area: float = 350.0  # horizontal spread of subject placement

    def validate(self):
        if min(self.num_subjects, self.num_cameras, self.num_frames) < 1:
            raise ValueError("counts must be positive")
        if self.image_size < 8:
            raise ValueError("image_size too small")


def camera_ring(config: DatasetConfig) -> list[geo.CameraView]:
    """Cameras on a ring at chest height, aimed near (not exactly at) the
    origin so the crop center does not coincide with the principal point."""
    cams = []
    s = config.sensor_size
    for c in range(config.num_cameras):
        azim = 2 * np.pi * c / config.num_cameras
        center = np.array(
            [
                config.camera_radius * np.sin(azim),
                config.camera_height,
                -config.camera_radius * np.cos(azim),
            ]
        )
        # Aim at a point slightly off the origin; deterministic per camera.
        aim = np.array(
            [
                120.0 * np.cos(2.1 * c + 0.7),
                config.camera_height + 60.0 * np.sin(1.3 * c),
                90.0 * np.sin(1.7 * c),
            ]
        )
        z = aim - center
        z = z / np.linalg.norm(z)
        up = np.array([0.0, 1.0, 0.0])  # y-down camera frame
        x = np.cross(up, z)
        x /= np.linalg.norm(x)
        y_ax = np.cross(z, x)
        rotation = np.stack([x, y_ax, z], axis=0)
        cam_full = geo.CameraView(
            rotation=rotation,
            center=center,
            focal=np.array([config.focal, config.focal]),
            principal_point=np.array([s / 2.0, s / 2.0]),
            crop=(0.0, 0.0, float(s), float(s)),
        )
        # Crop centered on the projection of the world origin.
        uv = cam_full.project(np.zeros(3))
        half = config.image_size / 2.0
        crop = (float(uv[0] - half), float(uv[1] - half),
                float(config.image_size), float(config.image_size))
        cams.append(geo.CameraView(rotation=rotation, center=center,
                                   focal=cam_full.focal,
                                   principal_point=cam_full.principal_point,
                                   crop=crop))
    return cams


def smooth_background(rng, size: int) -> np.ndarray:
    small = rng.uniform(0.05, 0.95, size=(5, 5, 3)).astype(np.float32)
    return cv2.resize(small, (size, size), interpolation=cv2.INTER_CUBIC).clip(0, 1)


def _save_png(path: str, img: np.ndarray):
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    """Load an 8-bit PNG as float32 in [0, 1]."""
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


@dataclass
class MultiViewDatasetIndex:
    """Lightweight handle on a generated dataset directory."""

    root: str
    subjects: list[int]
    cameras: list[geo.CameraView]
    num_frames: int
    image_size: int

    def image_path(self, subject: int, camera: int, frame: int) -> str:
        return os.path.join(self.root, f"S{subject}", f"cam{camera}", f"{frame:06d}.png")

    def background_path(self, subject: int, camera: int) -> str:
        return os.path.join(self.root, "backgrounds", f"S{subject}_cam{camera}.png")


def make_dataset(config: DatasetConfig, spec: SkeletonSpec | None = None) -> MultiViewDatasetIndex:
    """Generate and persist the full synthetic dataset.

    Deterministic in (config, spec): regeneration is byte-identical.
    """
    config.validate()
    spec = spec or default_skeleton()
    os.makedirs(config.out_dir, exist_ok=True)
    cams = camera_ring(config)

    cameras_json = []
    for cam in cams:
        cameras_json.append(
            {
                "rotation": cam.rotation.tolist(),
                "center": cam.center.tolist(),
                "focal": cam.focal.tolist(),
                "principal_point": cam.principal_point.tolist(),
                "crop": list(cam.crop),
            }
        )
    with open(os.path.join(config.out_dir, "cameras.json"), "w") as f:
        json.dump(cameras_json, f, indent=1, sort_keys=True)

    os.makedirs(os.path.join(config.out_dir, "backgrounds"), exist_ok=True)
    subjects = list(range(config.num_subjects))
    k = spec.num_joints

    appearance_meta = {}
    pose_rows = []
    for s in subjects:
        subj_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7, s]))
        appearance = sample_appearance(subj_rng, k)
        appearance_meta[str(s)] = {
            "limb_colors": appearance.limb_colors.tolist(),
            "thickness": appearance.thickness,
        }
        backgrounds = []
        for c in range(config.num_cameras):
            bg_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11, s, c]))
            bg = smooth_background(bg_rng, config.image_size)
            backgrounds.append(bg)
            _save_png(os.path.join(config.out_dir, "backgrounds", f"S{s}_cam{c}.png"), bg)
            os.makedirs(os.path.join(config.out_dir, f"S{s}", f"cam{c}"), exist_ok=True)
        place_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 19, s]))
        base = np.array(
            [
                place_rng.uniform(-config.subject_area, config.subject_area),
                -1000.0,  # pelvis height above ground (y-down world)
                place_rng.uniform(-config.subject_area, config.subject_area),
            ]
        )
        for t in range(config.num_frames):
            frame_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 17, s, t]))
            local = sample_pose(frame_rng, spec)
            yaw = frame_rng.uniform(0, 2 * np.pi)
            jitter = frame_rng.uniform(-config.root_jitter, config.root_jitter, size=3)
            jitter *= np.array([1.0, 0.3, 1.0])
            pose = local.transformed(geo.rotation_from_euler(yaw, 0, 0), base + jitter)
            frame = SceneFrame(subject_id=s, time_index=t, pose=pose,
                               appearance=appearance, parents=spec.parents)
            for c, cam in enumerate(cams):
                img = render_view(frame, cam, backgrounds[c])
                _save_png(os.path.join(config.out_dir, f"S{s}", f"cam{c}", f"{t:06d}.png"), img)
            pose_rows.append((s, t, pose.joints))

    with open(os.path.join(config.out_dir, "poses.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        header = ["subject", "frame"]
        for name in (JOINT_NAMES if k == 16 else [f"j{i}" for i in range(k)]):
            header += [f"{name}_x", f"{name}_y", f"{name}_z"]
        writer.writerow(header)
        for s, t, joints in pose_rows:
            writer.writerow([s, t] + [f"{v:.6f}" for v in joints.reshape(-1)])

    config_meta = asdict(config)
    config_meta.pop("out_dir")  # path-independent so regeneration is byte-identical
    meta = {
        "config": config_meta,
        "skeleton": {
            "parents": list(spec.parents),
            "bone_lengths": list(spec.bone_lengths),
            "rest_dirs": [list(d) for d in spec.rest_dirs],
            "angle_limits": [list(l) for l in spec.angle_limits],
            "root_index": spec.root_index,
        },
        "appearance": appearance_meta,
    }
    with open(os.path.join(config.out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)

    return MultiViewDatasetIndex(
        root=config.out_dir,
        subjects=subjects,
        cameras=cams,
        num_frames=config.num_frames,
        image_size=config.image_size,
    )

