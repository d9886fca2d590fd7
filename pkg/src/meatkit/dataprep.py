"""Pelvis-centered cropping and keypoint projection for conditioning inputs.

Crops are square windows centered on the projected pelvis with radius
1.3x the maximum projected keypoint height difference; applying a crop only
rescales the intrinsics (focal and principal point), so projection through
the adjusted camera commutes with the pixel-space crop transform exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MeatkitError, ZeroExtent
from .geometry import MIN_DEPTH, Camera, project_point

RADIUS_FACTOR = 1.3

# fixed skeleton rendering constants (documented in FORMATS.md)
JOINT_RADIUS_PX = 4.0
BONE_WIDTH_PX = 2.0
JOINT_COLORS = np.array(
    [
        [255, 0, 0], [255, 85, 0], [255, 170, 0], [255, 255, 0],
        [170, 255, 0], [85, 255, 0], [0, 255, 0], [0, 255, 85],
        [0, 255, 170], [0, 255, 255], [0, 170, 255], [0, 85, 255],
        [0, 0, 255], [85, 0, 255], [170, 0, 255], [255, 0, 255],
        [255, 0, 170], [255, 0, 85], [128, 128, 0], [0, 128, 128],
        [128, 0, 128], [128, 64, 0], [0, 128, 64], [64, 0, 128],
    ],
    dtype=np.float64,
) / 255.0


@dataclass(frozen=True)
class CropSpec:
    """Square pelvis-centered crop window for one view."""

    view: int
    center: np.ndarray
    radius: float
    output_size: int

    def __post_init__(self):
        c = np.ascontiguousarray(self.center, dtype=np.float64).reshape(2)
        if self.radius <= 0:
            raise MeatkitError("crop radius must be positive")
        if int(self.output_size) < 1:
            raise MeatkitError("output size must be at least 1")
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "view", int(self.view))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "output_size", int(self.output_size))

    def to_dict(self) -> dict:
        return {
            "view": self.view,
            "center": self.center.tolist(),
            "radius": self.radius,
            "output_size": self.output_size,
        }


def compute_crop(camera: Camera, keypoints_3d, pelvis, output_size: int, view: int = 0) -> CropSpec:
    """Crop centered on the projected pelvis, sized by keypoint height spread."""
    kp = np.asarray(keypoints_3d, dtype=np.float64).reshape(-1, 3)
    if kp.shape[0] < 1:
        raise MeatkitError("need at least one keypoint besides the pelvis")
    center = project_point(camera, pelvis)
    dy = np.abs(np.array([project_point(camera, p)[1] for p in kp]) - center[1])
    extent = float(dy.max())
    if extent < 1e-9:
        raise ZeroExtent("all keypoints project to the pelvis height")
    return CropSpec(view=view, center=center, radius=RADIUS_FACTOR * extent, output_size=output_size)


def apply_crop_to_intrinsics(camera: Camera, crop: CropSpec) -> Camera:
    """Camera for the cropped-and-resized image; R and T are unchanged."""
    scale = crop.output_size / (2.0 * crop.radius)
    origin = crop.center - crop.radius
    k = camera.K.copy()
    k[0, 0] *= scale
    k[1, 1] *= scale
    k[0, 1] *= scale
    k[0, 2] = (k[0, 2] - origin[0]) * scale
    k[1, 2] = (k[1, 2] - origin[1]) * scale
    return Camera(K=k, R=camera.R, T=camera.T, width=crop.output_size, height=crop.output_size)


def project_keypoints(cameras: list[Camera], keypoints_3d):
    """Project keypoints into every view with a visibility flag.

    Returns (coords, visible): coords is (n_views, J, 2) with NaN where a
    point is behind the camera or out of the image; visible is boolean.
    """
    kp = np.asarray(keypoints_3d, dtype=np.float64).reshape(-1, 3)
    if not cameras or kp.shape[0] == 0:
        raise MeatkitError("need at least one camera and one keypoint")
    coords = np.full((len(cameras), kp.shape[0], 2), np.nan)
    visible = np.zeros((len(cameras), kp.shape[0]), dtype=bool)
    for vi, cam in enumerate(cameras):
        x = kp @ cam.R.T + cam.T
        z = x[:, 2]
        ok = z > MIN_DEPTH
        uvw = x @ cam.K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            pix = uvw[:, :2] / uvw[:, 2:3]
        inside = ok & (pix[:, 0] >= 0) & (pix[:, 0] < cam.width) & (pix[:, 1] >= 0) & (pix[:, 1] < cam.height)
        coords[vi][inside] = pix[inside]
        visible[vi] = inside
    return coords, visible


def render_keypoint_image(coords, visible, width: int, height: int, bones=None) -> np.ndarray:
    """Draw joints as colored discs and bones as segments on black.

    coords is (J, 2) for one view; bones is an optional list of joint index
    pairs. Returns a (3, H, W) float32 image in [0, 1].
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    visible = np.asarray(visible, dtype=bool).reshape(-1)
    img = np.zeros((3, height, width), dtype=np.float32)
    xs, ys = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)

    def paint(mask, color):
        for c in range(3):
            img[c][mask] = color[c]

    if bones:
        for bi, (a, b) in enumerate(bones):
            if not (visible[a] and visible[b]):
                continue
            pa, pb = coords[a], coords[b]
            seg = pb - pa
            length = np.linalg.norm(seg)
            if length < 1e-9:
                continue
            x0 = max(int(min(pa[0], pb[0]) - BONE_WIDTH_PX), 0)
            x1 = min(int(max(pa[0], pb[0]) + BONE_WIDTH_PX) + 1, width)
            y0 = max(int(min(pa[1], pb[1]) - BONE_WIDTH_PX), 0)
            y1 = min(int(max(pa[1], pb[1]) + BONE_WIDTH_PX) + 1, height)
            if x0 >= x1 or y0 >= y1:
                continue
            wx, wy = xs[y0:y1, x0:x1], ys[y0:y1, x0:x1]
            tproj = ((wx - pa[0]) * seg[0] + (wy - pa[1]) * seg[1]) / (length * length)
            dist = np.abs((wx - pa[0]) * seg[1] - (wy - pa[1]) * seg[0]) / length
            mask = (tproj >= 0) & (tproj <= 1) & (dist <= BONE_WIDTH_PX / 2.0)
            color = JOINT_COLORS[(a + b) % len(JOINT_COLORS)] * 0.5
            for c in range(3):
                img[c, y0:y1, x0:x1][mask] = color[c]
    for j, ((px, py), vis) in enumerate(zip(coords, visible)):
        if not vis:
            continue
        x0 = max(int(px - JOINT_RADIUS_PX) - 1, 0)
        x1 = min(int(px + JOINT_RADIUS_PX) + 2, width)
        y0 = max(int(py - JOINT_RADIUS_PX) - 1, 0)
        y1 = min(int(py + JOINT_RADIUS_PX) + 2, height)
        if x0 >= x1 or y0 >= y1:
            continue
        wx, wy = xs[y0:y1, x0:x1], ys[y0:y1, x0:x1]
        mask = (wx - px) ** 2 + (wy - py) ** 2 <= JOINT_RADIUS_PX**2
        color = JOINT_COLORS[j % len(JOINT_COLORS)]
        for c in range(3):
            img[c, y0:y1, x0:x1][mask] = color[c]
    return img


def load_keypoints(path):
    """Read a keypoints JSON file: joints, pelvis index, optional names."""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    joints = np.asarray(data["joints"], dtype=np.float64).reshape(-1, 3)
    pelvis_index = int(data["pelvis_index"])
    if not 0 <= pelvis_index < joints.shape[0]:
        raise MeatkitError("pelvis_index outside the joint list")
    return joints, pelvis_index, data.get("names")


def save_keypoints(path, joints, pelvis_index: int, names=None) -> None:
    payload = {"joints": np.asarray(joints, dtype=np.float64).tolist(), "pelvis_index": int(pelvis_index)}
    if names is not None:
        payload["names"] = list(names)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
