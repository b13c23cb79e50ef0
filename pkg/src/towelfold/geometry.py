"""Pinhole camera model, pixel rays, table-plane reprojection and towel frames.

Conventions:

* World frame: table is the plane z = 0, +z points up.
* Camera frame: +z is the viewing direction, +x maps to image u (right),
  +y maps to image v (down). ``rotation``/``translation`` map world points to
  camera coordinates: ``p_cam = R @ p_world + t``.
* Pixel (u, v) = (column, row); pixel centres sit at integer coordinates.
* For the canonical top-down camera built by :func:`look_at` with the default
  ``up`` hint, world +x points along image +u and world +y along image -v,
  so a table point at (+0.1, 0, 0) lands at ``u = cx + 0.1 * fx`` when the
  camera is 1 m above the origin.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCameraError, ConfigError, DegenerateGeometryError

PARALLEL_TOL = 1e-9
COLLINEAR_AREA_M2 = 1e-6


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("camera.fx/fy", "focal lengths must be positive")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9:
            raise ConfigError("camera.rotation", "rotation matrix is not orthonormal")

    @property
    def position(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Viewing direction (camera +z) in world coordinates."""
        return self.rotation[2].copy()

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_camera(self, p) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.rotation.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            (self.fx, self.fy, self.cx, self.cy) == (other.fx, other.fy, other.cx, other.cy)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["translation"], dtype=np.float64),
        )


@dataclass(frozen=True)
class TablePlane:
    point: np.ndarray = field(default_factory=lambda: np.zeros(3))
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        point = np.array(self.point, dtype=np.float64).reshape(3)
        normal = np.array(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(normal)
        if not norm > 0:
            raise ConfigError("plane.normal", "normal must be non-zero")
        normal = normal / norm
        point.flags.writeable = False
        normal.flags.writeable = False
        object.__setattr__(self, "point", point)
        object.__setattr__(self, "normal", normal)

    def signed_distance(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.point) @ self.normal

    def project_point(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return p - np.multiply.outer(self.signed_distance(p), self.normal)

    def in_plane_basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Reference in-plane axes: world +x projected onto the plane, then n x e1."""
        n = self.normal
        for ref in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0])):
            e1 = ref - (ref @ n) * n
            if np.linalg.norm(e1) > 1e-6:
                e1 = e1 / np.linalg.norm(e1)
                return e1, np.cross(n, e1)
        raise DegenerateGeometryError("cannot build an in-plane basis")  # pragma: no cover

    def to_dict(self) -> dict:
        return {"point": self.point.tolist(), "normal": self.normal.tolist()}


TABLE = TablePlane()


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), roll: float = 0.0):
    """Rotation and translation of a camera at ``position`` looking at ``target``.

    Image -v is aligned with the projection of ``up``; ``roll`` (radians)
    then rotates the image about the viewing axis.
    """
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    dist = np.linalg.norm(z)
    if dist == 0:
        raise DegenerateGeometryError("camera position coincides with its target")
    z = z / dist
    up = np.asarray(up, dtype=np.float64)
    if abs(up @ z) > 0.999:
        up = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    y = -(up - (up @ z) * z)
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    if roll:
        c, s = math.cos(roll), math.sin(roll)
        x, y = c * x + s * y, -s * x + c * y
    rot = np.stack([x, y, z])
    return rot, -rot @ position


def project(cam: CameraModel, p) -> np.ndarray:
    """Pixel coordinates of world point(s) ``p`` (shape (3,) or (N, 3))."""
    pc = cam.to_camera(p)
    z = pc[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point has non-positive depth in the camera frame")
    return np.stack([cam.fx * pc[..., 0] / z + cam.cx, cam.fy * pc[..., 1] / z + cam.cy], axis=-1)


def pixel_rays(cam: CameraModel, px) -> np.ndarray:
    """World-frame ray directions through pixel(s) ``px``, scaled to unit camera depth.

    With this scaling the ray parameter equals the camera-frame depth.
    """
    px = np.asarray(px, dtype=np.float64)
    d_cam = np.stack(
        [(px[..., 0] - cam.cx) / cam.fx, (px[..., 1] - cam.cy) / cam.fy, np.ones(px.shape[:-1])],
        axis=-1,
    )
    return d_cam @ cam.rotation


def reproject_to_plane(cam: CameraModel, px, plane: TablePlane = TABLE) -> np.ndarray:
    """Intersection of the back-projected ray of pixel(s) ``px`` with ``plane``."""
    d = pixel_rays(cam, px)
    c = cam.position
    denom = d @ plane.normal
    unit_denom = denom / np.linalg.norm(d, axis=-1)
    if np.any(np.abs(unit_denom) <= PARALLEL_TOL):
        raise DegenerateGeometryError("pixel ray is parallel to the plane")
    t = ((plane.point - c) @ plane.normal) / denom
    if np.any(t <= 0):
        raise DegenerateGeometryError("plane intersection lies behind the camera")
    return c + t[..., None] * d


# ----------------------------------------------------------------- frames


@dataclass(frozen=True)
class TowelFrame:
    """Local towel frame.

    ``ordered_corners`` run counter-clockwise seen from +z; the fold side is
    (corner 1, corner 2) and ``x_axis`` points from that side's midpoint
    towards the midpoint of the opposite side (corner 3, corner 0).
    """

    origin: np.ndarray
    x_axis: np.ndarray
    y_axis: np.ndarray
    z_axis: np.ndarray
    ordered_corners: np.ndarray

    @property
    def rotation(self) -> np.ndarray:
        """Columns are the frame axes in world coordinates."""
        return np.stack([self.x_axis, self.y_axis, self.z_axis], axis=1)

    def to_world(self, local) -> np.ndarray:
        return self.origin + np.asarray(local, dtype=np.float64) @ self.rotation.T

    def to_local(self, world) -> np.ndarray:
        return (np.asarray(world, dtype=np.float64) - self.origin) @ self.rotation

    @property
    def fold_side(self) -> tuple[np.ndarray, np.ndarray]:
        return self.ordered_corners[1], self.ordered_corners[2]

    @property
    def opposite_side(self) -> tuple[np.ndarray, np.ndarray]:
        return self.ordered_corners[0], self.ordered_corners[3]


def _triangle_area(a, b, c) -> float:
    return 0.5 * float(np.linalg.norm(np.cross(b - a, c - a)))


def towel_frame(corners_3d, plane: TablePlane = TABLE) -> TowelFrame:
    """Builds the towel frame from four (unordered) corner points on ``plane``."""
    pts = plane.project_point(np.asarray(corners_3d, dtype=np.float64).reshape(4, 3))
    for i in range(4):
        tri = [pts[j] for j in range(4) if j != i]
        if _triangle_area(*tri) < COLLINEAR_AREA_M2:
            raise DegenerateGeometryError("three towel corners are (nearly) collinear")

    origin = pts.mean(axis=0)
    e1, e2 = plane.in_plane_basis()
    rel = pts - origin
    angle = np.mod(np.arctan2(rel @ e2, rel @ e1), 2 * np.pi)
    dist = np.linalg.norm(pts - plane.point, axis=1)
    order = np.lexsort((dist, angle))
    ordered = pts[order]

    fold_mid = 0.5 * (ordered[1] + ordered[2])
    far_mid = 0.5 * (ordered[3] + ordered[0])
    x = far_mid - fold_mid
    x = x - (x @ plane.normal) * plane.normal
    if np.linalg.norm(x) < 1e-9:
        raise DegenerateGeometryError("fold direction is undefined")
    x = x / np.linalg.norm(x)
    z = plane.normal.copy()
    y = np.cross(z, x)
    return TowelFrame(origin=origin, x_axis=x, y_axis=y, z_axis=z, ordered_corners=ordered)


# ------------------------------------------------------------ calibration


def save_calibration(path, cam: CameraModel, plane: TablePlane = TABLE) -> None:
    data = cam.to_dict()
    data["plane"] = plane.to_dict()
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))


def load_calibration(path) -> tuple[CameraModel, TablePlane]:
    """Reads ``{fx, fy, cx, cy, rotation[9], translation[3], plane: {point, normal}}``."""
    data = json.loads(Path(path).read_text())
    plane = TablePlane(**data["plane"]) if "plane" in data else TablePlane()
    return CameraModel.from_dict(data), plane
