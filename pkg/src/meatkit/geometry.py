"""Camera model, similarity transforms, and positional embeddings.

Coordinate conventions, binding for the whole package:

- World-to-camera: ``P_cam = R @ P + T`` (OpenCV-style camera frame:
  x right, y down, z forward; camera looks along +z).
- Pixel origin at the top-left corner; pixel centers at integer + 0.5.
- Projection: ``pix = [K (R P + T)]_xy / z`` with no clamping to image
  bounds; out-of-image results are legal and handled downstream.
- All geometry math runs in float64. Feature fusion elsewhere uses float32.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateRotation, DegenerateUp, MeatkitError, NonPositiveDepth

MIN_DEPTH = 1e-12
_UP = np.array([0.0, 1.0, 0.0])


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Camera:
    """Perspective pinhole camera.

    Attributes:
        K: 3x3 intrinsics matrix in pixels (upper triangular, K[2,2] = 1).
        R: 3x3 world-to-camera rotation (orthonormal, det +1).
        T: 3-vector translation in world units.
        width, height: image size in pixels.
    """

    K: np.ndarray
    R: np.ndarray
    T: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        T = np.asarray(self.T, dtype=np.float64).reshape(-1)
        if K.shape != (3, 3) or R.shape != (3, 3) or T.shape != (3,):
            raise MeatkitError("camera needs K (3,3), R (3,3), T (3,)")
        if not (np.isfinite(K).all() and np.isfinite(R).all() and np.isfinite(T).all()):
            raise MeatkitError("camera parameters must be finite")
        if abs(K[1, 0]) > 1e-9 or abs(K[2, 0]) > 1e-9 or abs(K[2, 1]) > 1e-9:
            raise MeatkitError("K must be upper triangular")
        if abs(K[2, 2] - 1.0) > 1e-9:
            raise MeatkitError("K[2,2] must equal 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise MeatkitError("focal entries must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise MeatkitError("R must be orthonormal with det +1")
        if int(self.width) < 1 or int(self.height) < 1:
            raise MeatkitError("image size must be at least 1x1")
        object.__setattr__(self, "K", _freeze(K))
        object.__setattr__(self, "R", _freeze(R))
        object.__setattr__(self, "T", _freeze(T))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))


def project_point(camera: Camera, point) -> np.ndarray:
    """Project a world point to pixel coordinates.

    Raises NonPositiveDepth when the camera-frame z is <= 1e-12.
    """
    p_cam = camera.R @ np.asarray(point, dtype=np.float64) + camera.T
    if p_cam[2] <= MIN_DEPTH:
        raise NonPositiveDepth(f"camera-frame depth {p_cam[2]:.3e} <= {MIN_DEPTH}")
    uvw = camera.K @ p_cam
    return uvw[:2] / uvw[2]


def camera_center(camera: Camera) -> np.ndarray:
    """World-space optical center, -R^T T."""
    return -camera.R.T @ camera.T


def pixel_ray(camera: Camera, pixel) -> tuple[np.ndarray, np.ndarray]:
    """Ray through a (continuous) pixel coordinate.

    Returns (origin, direction) where direction is scaled so that the
    camera-frame depth of ``origin + t * direction`` equals t exactly.
    """
    p = np.asarray(pixel, dtype=np.float64)
    d_cam = np.linalg.solve(camera.K, np.array([p[0], p[1], 1.0]))
    return camera_center(camera), camera.R.T @ d_cam


def rot6d_to_matrix(rot6d) -> np.ndarray:
    """Gram-Schmidt a 6-vector (c1, c2) into a rotation matrix.

    b1 = normalize(c1); b2 = normalize(c2 - (b1.c2) b1); b3 = b1 x b2.
    Returns the matrix with columns [b1 b2 b3].
    """
    v = np.asarray(rot6d, dtype=np.float64).reshape(6)
    c1, c2 = v[:3], v[3:]
    n1 = np.linalg.norm(c1)
    if n1 < 1e-9:
        raise DegenerateRotation("first basis vector is (near) zero")
    b1 = c1 / n1
    u2 = c2 - np.dot(b1, c2) * b1
    n2 = np.linalg.norm(u2)  # equals |b1 x c2|
    if n2 < 1e-9:
        raise DegenerateRotation("basis vectors are (near) parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def matrix_to_rot6d(matrix) -> np.ndarray:
    """First two columns of a rotation matrix, flattened to a 6-vector."""
    m = np.asarray(matrix, dtype=np.float64)
    return np.concatenate([m[:, 0], m[:, 1]])


def axis_angle_to_matrix(axis_angle) -> np.ndarray:
    """Rodrigues rotation from an axis-angle 3-vector."""
    v = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.eye(3)
    k = v / angle
    s = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * s + (1.0 - math.cos(angle)) * (s @ s)


@dataclass(frozen=True)
class ViewEmbedding:
    """Harmonic positional embedding of k scalars over L frequency bands."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.isfinite(v).all():
            raise MeatkitError("embedding values must be finite")
        object.__setattr__(self, "values", _freeze(v))

    def __len__(self) -> int:
        return self.values.shape[0]


def harmonic_embed(values, bands: int) -> ViewEmbedding:
    """[v, sin(2^0 v), cos(2^0 v), ..., sin(2^{L-1} v), cos(2^{L-1} v)].

    Output length is (2L+1)*k for k input scalars and L bands.
    """
    if bands < 1:
        raise MeatkitError("bands must be >= 1")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    parts = [v]
    for level in range(bands):
        scaled = (2.0**level) * v
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return ViewEmbedding(np.concatenate(parts))


def normalize_to_ndc(camera: Camera) -> Camera:
    """Rescale intrinsics so pixels map to [-1, 1]^2.

    x_ndc = (2x - W)/W and y_ndc = (2y - H)/H; R, T are unchanged, so
    projecting through the returned camera equals NDC-mapping the original
    projection exactly. width/height are kept for reference.
    """
    a = np.array(
        [
            [2.0 / camera.width, 0.0, -1.0],
            [0.0, 2.0 / camera.height, -1.0],
            [0.0, 0.0, 1.0],
        ]
    )
    return Camera(K=a @ camera.K, R=camera.R, T=camera.T, width=camera.width, height=camera.height)


def pixel_to_ndc(pixel, width: int, height: int) -> np.ndarray:
    """Map pixel coordinates to normalized device coordinates."""
    p = np.asarray(pixel, dtype=np.float64)
    return np.array([(2.0 * p[0] - width) / width, (2.0 * p[1] - height) / height])


@dataclass(frozen=True)
class SimilarityTransform:
    """Per-axis scaling, rotation (6D parameterization), then translation.

    apply(P) = R @ (s * P) + t.
    """

    scale: np.ndarray
    rot6d: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64).reshape(3)
        r = np.asarray(self.rot6d, dtype=np.float64).reshape(6)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (s > 0).all():
            raise MeatkitError("all scale components must be positive")
        rot6d_to_matrix(r)  # raises DegenerateRotation on bad input
        object.__setattr__(self, "scale", _freeze(s))
        object.__setattr__(self, "rot6d", _freeze(r))
        object.__setattr__(self, "translation", _freeze(t))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(np.ones(3), np.array([1.0, 0, 0, 0, 1.0, 0]), np.zeros(3))

    @classmethod
    def from_vector(cls, params) -> "SimilarityTransform":
        """Build from the 12-vector (s, c1, c2, t) used by the optimizer."""
        p = np.asarray(params, dtype=np.float64).reshape(12)
        return cls(p[0:3], p[3:9], p[9:12])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.scale, self.rot6d, self.translation])

    def rotation(self) -> np.ndarray:
        return rot6d_to_matrix(self.rot6d)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (self.scale * pts) @ self.rotation().T + self.translation


def look_at_rotation(eye, target, up=_UP) -> np.ndarray:
    """World-to-camera rotation for a camera at eye looking at target.

    Rows are the camera axes in world coordinates; with a y-up world the
    image y axis points along world -y (upright images).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise DegenerateUp("eye coincides with target")
    z = fwd / n
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise DegenerateUp("viewing direction parallel to up vector")
    x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=0)


def camera_from_lookat(eye, target, fov: float, width: int, height: int) -> Camera:
    """Camera at eye, aimed at target, with the given vertical field of view."""
    r = look_at_rotation(eye, target)
    f = (height / 2.0) / math.tan(fov / 2.0)
    k = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
    return Camera(K=k, R=r, T=-r @ np.asarray(eye, dtype=np.float64), width=width, height=height)


def camera_pose_scalars(camera: Camera, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """(azimuth, elevation, log-distance) of the camera center about origin.

    Azimuth is atan2(x, z) and elevation asin(y / r) in the y-up world frame,
    matching the parameterization of sample_orbit_cameras.
    """
    c = camera_center(camera) - np.asarray(origin, dtype=np.float64)
    r = np.linalg.norm(c)
    if r < 1e-12:
        raise MeatkitError("camera center coincides with the rig origin")
    return np.array([math.atan2(c[0], c[2]), math.asin(np.clip(c[1] / r, -1, 1)), math.log(r)])


def rig_view_embeddings(cameras, origin=(0.0, 0.0, 0.0), bands: int = 4) -> np.ndarray:
    """Stack of per-view harmonic pose embeddings, shape (n_views, (2L+1)*3)."""
    rows = [harmonic_embed(camera_pose_scalars(c, origin), bands).values for c in cameras]
    return np.stack(rows, axis=0)


def load_rig(path) -> tuple[list[int], list[Camera]]:
    """Read a camera rig JSON file; views are returned sorted by id."""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    views = data["views"]
    ids = [int(v["id"]) for v in views]
    if len(set(ids)) != len(ids):
        raise MeatkitError(f"duplicate view ids in rig file {path}")
    order = np.argsort(ids)
    cams = []
    for i in order:
        v = views[i]
        cams.append(Camera(K=np.array(v["K"]), R=np.array(v["R"]), T=np.array(v["T"]),
                           width=v["width"], height=v["height"]))
    return [ids[i] for i in order], cams


def save_rig(path, ids, cameras) -> None:
    views = []
    for vid, cam in zip(ids, cameras):
        views.append(
            {
                "id": int(vid),
                "K": cam.K.tolist(),
                "R": cam.R.tolist(),
                "T": cam.T.tolist(),
                "width": cam.width,
                "height": cam.height,
            }
        )
    Path(path).write_text(json.dumps({"views": views}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
