"""Pinhole projection, 3D box corners, ray angles, and the crop transform.

Conventions match the KITTI camera frame: x right, y down, z forward.
Object yaw is rotation_y (right-handed about -y); the object-frame origin
sits at the bottom-face center of the box.  Ground-plane scenes carry no
pitch or roll, so a pose is just (yaw, translation).
"""

import math
from dataclasses import dataclass

import numpy as np

from .angles import wrap_angle
from .kitti_io import CameraIntrinsics

NEAR_PLANE_EPS = 1e-6


@dataclass(frozen=True)
class Pose:
    """Yaw about the camera's vertical axis plus a camera-frame translation."""

    yaw: float
    translation: tuple  # (x, y, z) meters


@dataclass(frozen=True)
class Box3D:
    dims: tuple  # (height, width, length) meters
    pose: Pose


@dataclass(frozen=True)
class ProjectedBBox:
    left: float
    top: float
    right: float
    bottom: float
    degenerate: bool  # zero area after clipping to the image

    def as_tuple(self) -> tuple:
        return (self.left, self.top, self.right, self.bottom)


@dataclass(frozen=True)
class CropTransform:
    """Isotropic resize of a source rectangle into a padded square target."""

    scale: float
    pad: tuple  # (pad_x, pad_y) pixels, leading-edge padding
    source_rect: tuple  # (left, top, right, bottom)
    target_size: int

    def apply(self, u: float, v: float) -> tuple:
        """Map a source-image pixel into the target square."""
        left, top = self.source_rect[0], self.source_rect[1]
        return ((u - left) * self.scale + self.pad[0],
                (v - top) * self.scale + self.pad[1])


def rotation_about_vertical(yaw: float) -> np.ndarray:
    """KITTI rotation_y matrix: yaw = +pi/2 turns object +x onto camera -z."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s],
                     [0.0, 1.0, 0.0],
                     [-s, 0.0, c]])


def project_point(p_object, pose: Pose, k: CameraIntrinsics) -> tuple:
    """Project an object-frame point to pixel coordinates.

    Applies the yaw rotation, translates into the camera frame, and divides
    by depth under the pinhole model.  Raises ValueError if the transformed
    point is not strictly in front of the camera.
    """
    p_cam = rotation_about_vertical(pose.yaw) @ np.asarray(p_object, dtype=float)
    p_cam = p_cam + np.asarray(pose.translation, dtype=float)
    return _project_camera_point(p_cam, k)


def _project_camera_point(p_cam, k: CameraIntrinsics) -> tuple:
    x, y, z = p_cam
    if z <= NEAR_PLANE_EPS:
        raise ValueError(f"point at depth z={z} is behind the camera plane")
    return (k.fu * x / z + k.cu, k.fv * y / z + k.cv)


def box_corners(box: Box3D) -> np.ndarray:
    """Camera-frame corners (8, 3) of a box whose origin is its bottom-face center.

    Object frame: x in {+-l/2}, y in {0, -h} (y down, bottom face at y=0),
    z in {+-w/2}; rotated by yaw and translated.
    """
    h, w, l = box.dims
    corners = []
    for y in (0.0, -h):
        for sx, sz in ((1, 1), (1, -1), (-1, -1), (-1, 1)):
            corners.append((sx * l / 2.0, y, sz * w / 2.0))
    r = rotation_about_vertical(box.pose.yaw)
    t = np.asarray(box.pose.translation, dtype=float)
    return np.asarray(corners) @ r.T + t


def projected_bbox(box: Box3D, k: CameraIntrinsics, image_size) -> ProjectedBBox:
    """Axis-aligned pixel bounds of the projected box corners, clipped to the image.

    All corners must lie in front of the camera.  A box that clips to zero
    area is returned with degenerate=True rather than raising.
    """
    width, height = image_size
    us, vs = [], []
    for corner in box_corners(box):
        u, v = _project_camera_point(corner, k)
        us.append(u)
        vs.append(v)
    left = min(max(min(us), 0.0), float(width))
    right = min(max(max(us), 0.0), float(width))
    top = min(max(min(vs), 0.0), float(height))
    bottom = min(max(max(vs), 0.0), float(height))
    degenerate = right - left <= 0.0 or bottom - top <= 0.0
    return ProjectedBBox(left, top, right, bottom, degenerate)


def ray_angle_from_pixel(u_center: float, k: CameraIntrinsics) -> float:
    """Viewing-ray azimuth through a pixel column, from the optical axis."""
    return wrap_angle(math.atan2(u_center - k.cu, k.fu))


def ray_angle_from_location(location) -> float:
    """Viewing-ray azimuth toward a camera-frame point (requires z > 0)."""
    x, _, z = location
    if z <= 0.0:
        raise ValueError(f"location depth must be positive, got z={z}")
    return math.atan2(x, z)


def local_to_global(theta_local: float, theta_ray: float) -> float:
    """Global yaw from the observation-angle decomposition (sum, wrapped)."""
    return wrap_angle(theta_local + theta_ray)


def global_to_local(theta: float, theta_ray: float) -> float:
    """Observation angle of a global yaw as seen along a given ray."""
    return wrap_angle(theta - theta_ray)


def crop_transform(bbox, target_side: int) -> CropTransform:
    """Resize-with-padding map from a bbox onto a square target.

    The longer bbox side scales to exactly target_side; the shorter side is
    centered with symmetric integer padding, the odd leftover pixel going to
    the leading (top/left) edge.
    """
    left, top, right, bottom = bbox
    w, h = right - left, bottom - top
    if w <= 0.0 or h <= 0.0:
        raise ValueError(f"degenerate bbox {bbox}")
    if target_side < 1:
        raise ValueError(f"target side must be >= 1, got {target_side}")
    scale = target_side / max(w, h)

    def lead_pad(side):
        # Snap float noise before quantizing so exact fits give zero padding.
        scaled = math.ceil(side * scale - 1e-9)
        total = max(target_side - scaled, 0)
        return (total + 1) // 2

    return CropTransform(
        scale=scale,
        pad=(lead_pad(w), lead_pad(h)),
        source_rect=(left, top, right, bottom),
        target_size=target_side,
    )
