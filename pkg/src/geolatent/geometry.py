"""Rotation algebra, camera geometry, and rigid/similarity alignment.

Conventions used throughout the package:

* World and camera frames are right-handed.  Camera frames are x-right,
  y-down, z-forward (principal ray along +z).
* A camera stores a world-to-camera rotation ``R`` and a world-frame
  center ``c``; a world point ``X`` maps to camera coordinates
  ``R @ (X - c)``.
* Euler angles compose as ``Rz(roll) @ Rx(pitch) @ Ry(yaw)`` -- yaw about
  the vertical (y) axis is applied first, then pitch, then roll.
* Images are H x W x 3 float arrays in [0, 1]; pixel (0, 0) is the center
  of the top-left pixel of the stored crop.

All functions here are pure and operate on immutable inputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import cv2
import numpy as np

ROTATION_ATOL = 1e-6


def is_rotation(m: np.ndarray, atol: float = ROTATION_ATOL) -> bool:
    """True if ``m`` is a proper rotation: orthonormal and det +1."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        return False
    ortho = np.max(np.abs(m.T @ m - np.eye(3)))
    return ortho < atol and abs(np.linalg.det(m) - 1.0) < atol


def check_rotation(m: np.ndarray, name: str = "rotation") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if not is_rotation(m):
        raise ValueError(f"{name} is not a proper rotation matrix")
    return m


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera with a crop rectangle on its sensor.

    Attributes:
        rotation: 3x3 world-to-camera rotation.
        center: camera center in world coordinates, mm.
        focal: (fx, fy) in pixels.
        principal_point: (px, py) in full-sensor pixels.
        crop: (x, y, w, h) crop rectangle in full-sensor pixels; stored
            images cover exactly this rectangle.
    """

    rotation: np.ndarray
    center: np.ndarray
    focal: np.ndarray
    principal_point: np.ndarray
    crop: tuple[float, float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "focal", np.asarray(self.focal, dtype=np.float64))
        object.__setattr__(
            self, "principal_point", np.asarray(self.principal_point, dtype=np.float64)
        )
        object.__setattr__(self, "crop", tuple(float(v) for v in self.crop))
        if self.crop[2] <= 0 or self.crop[3] <= 0:
            raise ValueError("crop width and height must be positive")
        if np.any(self.focal <= 0):
            raise ValueError("focal components must be positive")

    def intrinsics(self) -> np.ndarray:
        """3x3 intrinsic matrix in full-sensor pixel coordinates."""
        fx, fy = self.focal
        px, py = self.principal_point
        return np.array([[fx, 0.0, px], [0.0, fy, py], [0.0, 0.0, 1.0]])

    def to_camera(self, points_world: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into this camera's frame."""
        pts = np.asarray(points_world, dtype=np.float64)
        return (pts - self.center) @ self.rotation.T

    def project(self, points_world: np.ndarray) -> np.ndarray:
        """Project world points to crop-local pixel coordinates.

        Raises:
            ValueError: if any point lies at or behind the camera plane.
        """
        pc = self.to_camera(points_world)
        if np.any(pc[..., 2] <= 0):
            raise ValueError("point behind camera")
        uv = pc[..., :2] / pc[..., 2:3] * self.focal + self.principal_point
        return uv - np.array(self.crop[:2])


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64)
        )
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("zero rotation axis")
    k = axis / n
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def rotation_from_euler(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation ``Rz(roll) @ Rx(pitch) @ Ry(yaw)`` (yaw applied first).

    Yaw rotates about the vertical y axis, pitch about x, roll about the
    optical z axis.
    """
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ rx @ ry


def geodesic_angle(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle in radians between two rotations (trace formula)."""
    r = np.asarray(r1) @ np.asarray(r2).T
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def relative_rotation(cam_i: CameraView, cam_j: CameraView) -> np.ndarray:
    """Rotation taking camera-i-frame directions to camera-j frame."""
    return cam_j.rotation @ cam_i.rotation.T


def crop_virtual_camera(cam: CameraView) -> tuple[CameraView, np.ndarray]:
    """Re-aim ``cam`` so its principal ray passes through the crop center.

    Returns the virtual camera and the 3x3 homography taking crop-local
    pixels of the original camera to pixels of the virtual view.  The
    virtual image covers the full crop (its crop rectangle is
    ``(0, 0, w, h)`` with the principal point at the crop center), so
    relative rotations between views can be taken between virtual cameras.
    """
    x, y, w, h = cam.crop
    cx, cy = x + w / 2.0, y + h / 2.0
    # Crop-center viewing direction in the camera frame.
    d = np.array(
        [
            (cx - cam.principal_point[0]) / cam.focal[0],
            (cy - cam.principal_point[1]) / cam.focal[1],
            1.0,
        ]
    )
    d /= np.linalg.norm(d)
    ez = np.array([0.0, 0.0, 1.0])
    axis = np.cross(ez, d)
    if np.linalg.norm(axis) < 1e-15:
        r_align = np.eye(3)
    else:
        r_align = rotation_about_axis(axis, float(np.arccos(np.clip(d[2], -1, 1))))
    # Points in the old camera frame map to the virtual frame via r_align.T.
    virtual = CameraView(
        rotation=r_align.T @ cam.rotation,
        center=cam.center,
        focal=cam.focal,
        principal_point=np.array([w / 2.0, h / 2.0]),
        crop=(0.0, 0.0, w, h),
    )
    k_old = cam.intrinsics()
    k_new = virtual.intrinsics()
    t_crop = np.array([[1.0, 0.0, x], [0.0, 1.0, y], [0.0, 0.0, 1.0]])
    warp = k_new @ r_align.T @ np.linalg.inv(k_old) @ t_crop
    return virtual, warp / warp[2, 2]


def warp_image(img: np.ndarray, warp: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Apply a pixel homography; ``size`` is (width, height) of the output."""
    return cv2.warpPerspective(
        img.astype(np.float32),
        warp.astype(np.float64),
        size,
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REFLECT_101,
    )


def rotate_image(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate an image about its center by ``angle`` radians.

    The rotation matches an in-plane camera-frame rotation ``Rz(angle)``:
    a feature at pixel u moves to ``c + Rot2(angle) @ (u - c)``.
    """
    if angle == 0.0:
        return img
    h, w = img.shape[:2]
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    ca, sa = np.cos(-angle), np.sin(-angle)
    rot = np.array([[ca, -sa], [sa, ca]])
    m_inv = np.hstack([rot, (c - rot @ c)[:, None]])
    return cv2.warpAffine(
        img.astype(np.float32),
        m_inv,
        (w, h),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_REFLECT_101,
    )


def inplane_augmentation(sample, angle: float):
    """Rotate a triplet sample's target view about its optical axis.

    The target image, the target background, the relative rotation, and
    (when present) the target-frame ground-truth pose are all rotated
    consistently; the source and donor views are untouched.  Returns a new
    sample; ``angle = 0`` returns the input unchanged.
    """
    if angle == 0.0:
        return sample
    rz = rotation_from_euler(0.0, 0.0, angle)
    pose = sample.pose
    if pose is not None:
        pose = pose @ rz.T
    return dataclasses.replace(
        sample,
        target_img=rotate_image(sample.target_img, angle),
        target_background=rotate_image(sample.target_background, angle),
        rel_rotation=rz @ sample.rel_rotation,
        pose=pose,
    )


def kabsch_align(
    p: np.ndarray, q: np.ndarray, with_scale: bool = True
) -> SimilarityTransform:
    """Least-squares similarity (or rigid) alignment of P onto Q.

    Minimizes ``sum_k || s * R @ p_k + t - q_k ||^2`` over rotations with
    det +1 (reflections are excluded by flipping the smallest singular
    direction), and over s > 0 when ``with_scale``.

    Raises:
        ValueError: fewer than 3 points or all points of P coincident.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError("expected matching K x 3 point sets")
    k = p.shape[0]
    if k < 3:
        raise ValueError("need at least 3 points")
    mu_p = p.mean(axis=0)
    mu_q = q.mean(axis=0)
    pc = p - mu_p
    qc = q - mu_q
    var_p = (pc**2).sum() / k
    if var_p < 1e-18:
        raise ValueError("all source points coincident")
    cov = qc.T @ pc / k
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u @ vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    scale = float((d * np.diag(s)).sum() / var_p) if with_scale else 1.0
    if scale <= 0:
        scale = 1e-12  # fully degenerate anti-correlated case
    t = mu_q - scale * rot @ mu_p
    return SimilarityTransform(scale=scale, rotation=rot, translation=t)
