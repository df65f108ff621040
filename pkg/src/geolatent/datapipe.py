"""Training streams over a multi-view dataset directory.

Loads the layout written by :mod:`geolatent.synthworld`, estimates
per-view backgrounds by a pixel-wise median, applies the crop-virtual
shear warp to every image and background, and exposes triplet sampling,
label-budget splits, and normalization statistics.

Images handed out by this module are always in the virtual-camera frame
(warped), float32 in [0, 1]; relative rotations are between virtual
cameras.  Poses attached to samples are root-centered, in the sample's
virtual-camera frame, in mm.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import geometry as geo
from . import synthworld as sw

log = logging.getLogger(__name__)


@dataclass
class TripletSample:
    """Two simultaneous views plus an appearance donor of the same subject."""

    source_img: np.ndarray
    target_img: np.ndarray
    donor_img: np.ndarray
    rel_rotation: np.ndarray
    target_background: np.ndarray
    subject_id: int
    t: int
    t_prime: int
    cam_source: int = 0
    cam_target: int = 0
    cam_donor: int = 0
    pose: np.ndarray | None = None  # (K, 3) target-frame, root-centered, mm


@dataclass
class LabeledSample:
    image: np.ndarray
    pose: np.ndarray  # (K, 3) camera-frame, root-centered, mm
    subject_id: int
    camera: int
    t: int


@dataclass
class NormStats:
    """Per-channel image stats and per-coordinate pose stats."""

    image_mean: np.ndarray
    image_std: np.ndarray
    pose_mean: np.ndarray  # (K, 3)
    pose_std: np.ndarray
    # per-dimension stats of the flattened latent point set, filled in by
    # stage-2 training so the pose head sees standardized codes
    code_mean: np.ndarray | None = None
    code_std: np.ndarray | None = None

    def apply_image(self, img: np.ndarray) -> np.ndarray:
        return (img - self.image_mean) / self.image_std

    def invert_image(self, img: np.ndarray) -> np.ndarray:
        return img * self.image_std + self.image_mean

    def apply_pose(self, pose: np.ndarray) -> np.ndarray:
        return (pose - self.pose_mean) / self.pose_std

    def invert_pose(self, pose: np.ndarray) -> np.ndarray:
        return pose * self.pose_std + self.pose_mean

    def to_json(self) -> dict:
        return {k: None if v is None else np.asarray(v).tolist()
                for k, v in self.__dict__.items()}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(**{k: None if v is None else np.array(v) for k, v in d.items()})


def estimate_background(frames) -> np.ndarray:
    """Per-pixel, per-channel lower median of a stack of equal-size images.

    Raises:
        ValueError: empty sequence.
    """
    stack = np.stack([np.asarray(f) for f in frames]) if not isinstance(frames, np.ndarray) else frames
    if stack.size == 0 or stack.shape[0] == 0:
        raise ValueError("need at least one frame")
    idx = (stack.shape[0] - 1) // 2
    return np.partition(stack, idx, axis=0)[idx]


class MultiViewDataset:
    """In-memory handle on a generated dataset directory.

    Image stacks are loaded lazily per (subject, camera) and cached as
    uint8; backgrounds default to the median estimate over the available
    frames (the stored plates are used only when ``use_stored_plates``).
    """

    def __init__(self, root: str, frame_stride: int = 1, use_stored_plates: bool = False):
        if frame_stride < 1:
            raise ValueError("frame_stride must be >= 1")
        self.root = root
        self.frame_stride = frame_stride
        self.use_stored_plates = use_stored_plates
        with open(os.path.join(root, "cameras.json")) as f:
            cam_list = json.load(f)
        self.cameras = [
            geo.CameraView(
                rotation=np.array(c["rotation"]),
                center=np.array(c["center"]),
                focal=np.array(c["focal"]),
                principal_point=np.array(c["principal_point"]),
                crop=tuple(c["crop"]),
            )
            for c in cam_list
        ]
        self.virtual_cameras = []
        self.warps = []
        for cam in self.cameras:
            virtual, warp = geo.crop_virtual_camera(cam)
            self.virtual_cameras.append(virtual)
            self.warps.append(warp)
        with open(os.path.join(root, "meta.json")) as f:
            self.meta = json.load(f)
        self.image_size = int(self.meta["config"]["image_size"])
        self.root_index = int(self.meta["skeleton"]["root_index"])
        self.parents = tuple(self.meta["skeleton"]["parents"])
        self.num_joints = len(self.parents)
        self._poses = self._load_poses()
        self.subjects = sorted(self._poses.keys())
        self._frames = {
            s: list(range(0, self._poses[s].shape[0], frame_stride)) for s in self.subjects
        }
        self._image_cache: dict[tuple[int, int], np.ndarray] = {}
        self._background_cache: dict[tuple[int, int], np.ndarray] = {}

    def _load_poses(self) -> dict[int, np.ndarray]:
        per_subject: dict[int, list] = {}
        with open(os.path.join(self.root, "poses.csv")) as f:
            reader = csv.reader(f)
            next(reader)
            for row in reader:
                per_subject.setdefault(int(row[0]), []).append(
                    np.array(row[2:], dtype=np.float64).reshape(self.num_joints, 3)
                )
        return {s: np.stack(v) for s, v in per_subject.items()}

    # -- raw access -------------------------------------------------------

    def frames(self, subject: int) -> list[int]:
        return self._frames[subject]

    @property
    def num_cameras(self) -> int:
        return len(self.cameras)

    def _stack(self, subject: int, camera: int) -> np.ndarray:
        key = (subject, camera)
        if key not in self._image_cache:
            paths = [
                os.path.join(self.root, f"S{subject}", f"cam{camera}", f"{t:06d}.png")
                for t in self._frames[subject]
            ]
            stack = np.stack(
                [np.asarray(Image.open(p).convert("RGB")) for p in paths]
            )
            self._image_cache[key] = stack
        return self._image_cache[key]

    def raw_image(self, subject: int, camera: int, t: int) -> np.ndarray:
        row = self._frames[subject].index(t)
        return self._stack(subject, camera)[row].astype(np.float32) / 255.0

    def image(self, subject: int, camera: int, t: int) -> np.ndarray:
        """Crop image warped into the camera's virtual view."""
        return self._warp(self.raw_image(subject, camera, t), camera)

    def _warp(self, img: np.ndarray, camera: int) -> np.ndarray:
        size = (self.image_size, self.image_size)
        return np.clip(geo.warp_image(img, self.warps[camera], size), 0.0, 1.0)

    def background(self, subject: int, camera: int) -> np.ndarray:
        """Warped background plate for (subject, camera); median-estimated
        from the frames unless stored plates were requested."""
        key = (subject, camera)
        if key not in self._background_cache:
            if self.use_stored_plates:
                plate = sw.load_png(
                    os.path.join(self.root, "backgrounds", f"S{subject}_cam{camera}.png")
                )
            else:
                plate = estimate_background(self._stack(subject, camera)).astype(np.float32) / 255.0
            self._background_cache[key] = self._warp(plate, camera)
        return self._background_cache[key]

    def pose_world(self, subject: int, t: int) -> np.ndarray:
        return self._poses[subject][t]

    def pose_camera(self, subject: int, camera: int, t: int) -> np.ndarray:
        """Root-centered pose in the camera's virtual frame, mm."""
        joints = self.pose_world(subject, t)
        centered = joints - joints[self.root_index]
        return centered @ self.virtual_cameras[camera].rotation.T

    def view(self, subjects) -> "DatasetView":
        return DatasetView(self, sorted(subjects))


@dataclass
class DatasetView:
    """Subject-restricted view; split hygiene is enforced at this boundary."""

    dataset: MultiViewDataset
    subjects: list[int]

    def __post_init__(self):
        unknown = set(self.subjects) - set(self.dataset.subjects)
        if unknown:
            raise ValueError(f"unknown subjects {sorted(unknown)}")


def sample_triplet(view: DatasetView, rng: np.random.Generator,
                   inplane_range: float = 0.0) -> TripletSample:
    """Draw one (source, target, donor) triplet uniformly from a view.

    Subject, time t, distinct cameras i != j, donor time t' != t, and an
    arbitrary donor camera k are all uniform.  Subjects with fewer than
    two usable frames are rejected and resampled.
    """
    ds = view.dataset
    if ds.num_cameras < 2:
        raise ValueError("need at least two cameras")
    for _ in range(1000):
        subject = view.subjects[rng.integers(len(view.subjects))]
        frames = ds.frames(subject)
        if len(frames) >= 2:
            break
    else:
        raise ValueError("no subject with at least two frames")
    t, t_prime = (frames[x] for x in rng.choice(len(frames), size=2, replace=False))
    cam_i, cam_j = rng.choice(ds.num_cameras, size=2, replace=False)
    cam_k = int(rng.integers(ds.num_cameras))
    sample = TripletSample(
        source_img=ds.image(subject, cam_i, t),
        target_img=ds.image(subject, cam_j, t),
        donor_img=ds.image(subject, cam_k, t_prime),
        rel_rotation=geo.relative_rotation(
            ds.virtual_cameras[cam_i], ds.virtual_cameras[cam_j]
        ),
        target_background=ds.background(subject, cam_j),
        subject_id=subject,
        t=int(t),
        t_prime=int(t_prime),
        cam_source=int(cam_i),
        cam_target=int(cam_j),
        cam_donor=cam_k,
        pose=ds.pose_camera(subject, cam_j, t),
    )
    if inplane_range > 0.0:
        angle = float(rng.uniform(-inplane_range, inplane_range))
        sample = geo.inplane_augmentation(sample, angle)
    return sample


@dataclass
class BudgetScenario:
    """Which subjects contribute labels, and what fraction of their frames."""

    fraction: float = 1.0
    subjects: list[int] | None = None  # default: first subject of the view
    seed: int = 0


def label_budget_split(view: DatasetView, scenario: BudgetScenario):
    """Select labeled frames by a deterministic stride; nested across budgets.

    The stride is ``round(1 / fraction)`` with offset ``seed % stride``, so
    a smaller budget's frame set is a subset of any larger budget's under
    the same seed.  Every camera image of a selected frame becomes one
    labeled sample.  The unlabeled side is always the full view.

    Returns:
        (labeled samples, the unchanged view).
    """
    if not (0.0 < scenario.fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    ds = view.dataset
    subjects = scenario.subjects if scenario.subjects is not None else view.subjects[:1]
    unknown = set(subjects) - set(view.subjects)
    if unknown:
        raise ValueError(f"label subjects {sorted(unknown)} not in view")
    stride = max(1, round(1.0 / scenario.fraction))
    offset = scenario.seed % stride
    labeled = []
    for s in subjects:
        frames = ds.frames(s)
        for idx in range(offset, len(frames), stride):
            t = frames[idx]
            for c in range(ds.num_cameras):
                labeled.append(
                    LabeledSample(
                        image=ds.image(s, c, t),
                        pose=ds.pose_camera(s, c, t),
                        subject_id=s,
                        camera=c,
                        t=t,
                    )
                )
    return labeled, view


def compute_norm_stats(labeled: list[LabeledSample]) -> NormStats:
    """Mean/std of images (per channel) and poses (per coordinate).

    Zero-variance components are clamped to 1e-6 with a logged warning.
    """
    if not labeled:
        raise ValueError("empty split")
    images = np.stack([s.image for s in labeled])
    poses = np.stack([s.pose for s in labeled])
    image_std = images.std(axis=(0, 1, 2))
    pose_std = poses.std(axis=0)
    if np.any(image_std < 1e-6) or np.any(pose_std < 1e-6):
        log.warning("zero-variance component in normalization stats; clamping")
    return NormStats(
        image_mean=images.mean(axis=(0, 1, 2)).astype(np.float64),
        image_std=np.maximum(image_std, 1e-6).astype(np.float64),
        pose_mean=poses.mean(axis=0),
        pose_std=np.maximum(pose_std, 1e-6),
    )


def collate_triplets(samples: list[TripletSample]) -> dict[str, np.ndarray]:
    """Stack a list of triplets into dense float32 arrays (NHWC)."""
    return {
        "source": np.stack([s.source_img for s in samples]).astype(np.float32),
        "target": np.stack([s.target_img for s in samples]).astype(np.float32),
        "donor": np.stack([s.donor_img for s in samples]).astype(np.float32),
        "background": np.stack([s.target_background for s in samples]).astype(np.float32),
        "rotation": np.stack([s.rel_rotation for s in samples]).astype(np.float32),
        "subject": np.array([s.subject_id for s in samples]),
    }
