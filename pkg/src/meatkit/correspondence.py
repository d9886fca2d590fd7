"""Cross-view pixel correspondence via mesh-point projection.

For every target-view feature pixel with a valid aggregated intersection
point, the point is projected into every view and rounded up/down in both
axes to exactly four integer sample indices per view. Out-of-bounds and
behind-camera projections are flagged invalid, never clamped, so attention
never fabricates correspondences at image borders. An epipolar candidate
builder provides the depth-sampling baseline with N*K*4 keys per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidDepthRange, MeatkitError, ResolutionMismatch
from .geometry import MIN_DEPTH, Camera, camera_center
from .rasterizer import AggregatedRaster, Mesh

GRID_CONSTANT = 4  # floor/ceil in x times floor/ceil in y

_I32_MIN = np.int32(np.iinfo(np.int32).min)
_I32_MAX = np.int32(np.iinfo(np.int32).max)


@dataclass(frozen=True)
class SampleIndexSet:
    """Exactly four integer (x, y) sample indices with validity flags.

    Duplicates are kept when a coordinate is integral so the set always has
    fixed shape. valid[i] is False for out-of-bounds or non-finite entries.
    """

    indices: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int32)
        val = np.ascontiguousarray(self.valid, dtype=bool)
        if idx.shape != (4, 2) or val.shape != (4,):
            raise MeatkitError("sample set needs indices (4,2) and valid (4,)")
        idx.setflags(write=False)
        val.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "valid", val)


def _grid_sample_array(xy: np.ndarray, width: int, height: int):
    """Vectorized floor/ceil index extraction.

    xy has shape (..., 2); returns indices (..., 4, 2) int32 and valid
    (..., 4) bool. Order: (fx,fy), (cx,fy), (fx,cy), (cx,cy).
    """
    finite = np.isfinite(xy).all(axis=-1)
    safe = np.where(finite[..., None], xy, 0.0)
    fl = np.floor(safe)
    ce = np.ceil(safe)
    fx, fy = fl[..., 0], fl[..., 1]
    cx, cy = ce[..., 0], ce[..., 1]
    gx = np.stack([fx, cx, fx, cx], axis=-1)
    gy = np.stack([fy, fy, cy, cy], axis=-1)
    valid = finite[..., None] & (gx >= 0) & (gx < width) & (gy >= 0) & (gy < height)
    idx = np.stack([gx, gy], axis=-1)
    idx = np.clip(idx, float(_I32_MIN), float(_I32_MAX)).astype(np.int32)
    idx[~finite[..., None].repeat(4, axis=-1)] = 0
    return idx, valid


def grid_sample_indices(pixel, width: int, height: int) -> SampleIndexSet:
    """Floor/ceil rounding of one continuous pixel coordinate."""
    xy = np.asarray(pixel, dtype=np.float64).reshape(2)
    idx, valid = _grid_sample_array(xy[None, :], width, height)
    return SampleIndexSet(indices=idx[0], valid=valid[0])


def _as_scales(feature_scale, n_views: int) -> np.ndarray:
    """Normalize a scale spec to an (n_views, 2) array of (sx, sy)."""
    s = np.asarray(feature_scale, dtype=np.float64)
    if s.ndim == 0:
        return np.full((n_views, 2), float(s))
    if s.shape == (n_views,):
        return np.repeat(s[:, None], 2, axis=1)
    if s.shape == (n_views, 2):
        return s
    raise MeatkitError(f"cannot interpret feature_scale of shape {s.shape}")


def project_to_views(point, cameras: list[Camera], feature_scale=1.0) -> list[np.ndarray]:
    """Project one world point into each view's feature-map coordinates.

    Views where the point has non-positive depth yield (nan, nan) rather
    than an error so callers can flag them invalid.
    """
    if not cameras:
        raise MeatkitError("camera list is empty")
    scales = _as_scales(feature_scale, len(cameras))
    p = np.asarray(point, dtype=np.float64)
    out = []
    for cam, s in zip(cameras, scales):
        p_cam = cam.R @ p + cam.T
        if p_cam[2] <= MIN_DEPTH:
            out.append(np.array([np.nan, np.nan]))
            continue
        uvw = cam.K @ p_cam
        out.append(uvw[:2] / uvw[2] * s)
    return out


def _project_grid(points: np.ndarray, mask: np.ndarray, cam: Camera, scale) -> np.ndarray:
    """Project an (H, W, 3) point grid into one view; nan where invalid."""
    p_cam = points @ cam.R.T + cam.T
    z = p_cam[..., 2]
    ok = mask & (z > MIN_DEPTH)
    uvw = p_cam @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = uvw[..., :2] / uvw[..., 2:3]
    xy = xy * np.asarray(scale)
    return np.where(ok[..., None], xy, np.nan)


@dataclass(frozen=True)
class CorrespondenceTable:
    """Per (target view, feature pixel) sample indices into every source view.

    indices: (n_views, H, W, n_views, 4, 2) int32, valid likewise boolean.
    mask carries the target pixel's aggregated intersection flag M_p;
    rows with mask False are all-invalid. source_views maps the source axis
    to feature-stack view positions (identity in serialized tables).
    """

    n_views: int
    feature_width: int
    feature_height: int
    indices: np.ndarray
    valid: np.ndarray
    mask: np.ndarray
    source_views: tuple = field(default=())

    def __post_init__(self):
        n, h, w = self.n_views, self.feature_height, self.feature_width
        idx = np.ascontiguousarray(self.indices, dtype=np.int32)
        val = np.ascontiguousarray(self.valid, dtype=bool)
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        if idx.shape != (n, h, w, n, 4, 2) or val.shape != (n, h, w, n, 4) or mask.shape != (n, h, w):
            raise MeatkitError("correspondence table shapes are inconsistent")
        src = tuple(self.source_views) if self.source_views else tuple(range(n))
        if sorted(src) != list(range(n)):
            raise MeatkitError("source_views must be a permutation of range(n_views)")
        if val[~mask].any():
            raise MeatkitError("rows with M_p False must be all-invalid")
        for arr in (idx, val, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "valid", val)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "source_views", src)


def build_correspondence_table(aggs: list[AggregatedRaster], cameras: list[Camera]) -> CorrespondenceTable:
    """Project every view's aggregated points into every view and grid-sample."""
    if len(aggs) != len(cameras) or not aggs:
        raise ResolutionMismatch("need one aggregated raster per camera")
    fw, fh = aggs[0].width, aggs[0].height
    for a in aggs:
        if a.width != fw or a.height != fh:
            raise ResolutionMismatch("aggregated rasters disagree on feature resolution")
    n = len(cameras)
    scales = np.array([[fw / c.width, fh / c.height] for c in cameras])
    indices = np.zeros((n, fh, fw, n, 4, 2), dtype=np.int32)
    valid = np.zeros((n, fh, fw, n, 4), dtype=bool)
    mask = np.stack([a.mask for a in aggs], axis=0)
    for tgt in range(n):
        pts = aggs[tgt].point
        for src in range(n):
            xy = _project_grid(pts, aggs[tgt].mask, cameras[src], scales[src])
            idx, val = _grid_sample_array(xy, fw, fh)
            indices[tgt, :, :, src] = idx
            valid[tgt, :, :, src] = val
    valid &= mask[:, :, :, None, None]
    indices[~valid] = 0
    return CorrespondenceTable(
        n_views=n, feature_width=fw, feature_height=fh, indices=indices, valid=valid, mask=mask
    )


@dataclass(frozen=True)
class EpipolarCandidates:
    """Depth-sampled cross-view candidates for one target view.

    indices: (H, W, K, n_views, 4, 2) int32 with validity alongside; every
    target pixel carries n_views * K * 4 key candidates.
    """

    target_view: int
    n_views: int
    feature_width: int
    feature_height: int
    depth_range: tuple
    depths: np.ndarray
    indices: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        k = self.depths.shape[0]
        n, h, w = self.n_views, self.feature_height, self.feature_width
        if self.indices.shape != (h, w, k, n, 4, 2) or self.valid.shape != (h, w, k, n, 4):
            raise MeatkitError("epipolar candidate shapes are inconsistent")
        for name in ("depths", "indices", "valid"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def keys_per_pixel(self) -> int:
        return self.n_views * self.depths.shape[0] * GRID_CONSTANT


def build_epipolar_candidates(
    cameras: list[Camera],
    target_view: int,
    depth_range: tuple,
    n_samples: int,
    feature_res: int,
) -> EpipolarCandidates:
    """Uniformly sample depths along every target-pixel ray and project.

    Depths are camera-frame z values in [near, far]; a single sample sits at
    the midpoint. feature_res is the square feature-map size.
    """
    near, far = float(depth_range[0]), float(depth_range[1])
    if not (0.0 < near < far):
        raise InvalidDepthRange(f"need 0 < near < far, got ({near}, {far})")
    if n_samples < 1:
        raise InvalidDepthRange("need at least one depth sample")
    cam = cameras[target_view]
    depths = np.array([(near + far) / 2.0]) if n_samples == 1 else np.linspace(near, far, n_samples)
    s = feature_res
    scales = np.array([[s / c.width, s / c.height] for c in cameras])
    # rays through feature-pixel centers, in image pixel coordinates
    xs = (np.arange(s) + 0.5) * cam.width / s
    ys = (np.arange(s) + 0.5) * cam.height / s
    px, py = np.meshgrid(xs, ys)
    pix = np.stack([px, py, np.ones_like(px)], axis=-1)
    dirs = np.einsum("ij,hwj->hwi", np.linalg.inv(cam.K), pix)
    dirs = np.einsum("ji,hwj->hwi", cam.R, dirs)  # apply R^T
    origin = camera_center(cam)
    points = origin + depths[None, None, :, None] * dirs[:, :, None, :]  # (S, S, K, 3)
    all_true = np.ones(points.shape[:3], dtype=bool)
    indices = np.zeros((s, s, len(depths), len(cameras), 4, 2), dtype=np.int32)
    valid = np.zeros((s, s, len(depths), len(cameras), 4), dtype=bool)
    for v, c in enumerate(cameras):
        xy = _project_grid(points, all_true, c, scales[v])
        idx, val = _grid_sample_array(xy, s, s)
        indices[:, :, :, v] = idx
        valid[:, :, :, v] = val
    return EpipolarCandidates(
        target_view=target_view,
        n_views=len(cameras),
        feature_width=s,
        feature_height=s,
        depth_range=(near, far),
        depths=depths,
        indices=indices,
        valid=valid,
    )


def mesh_depth_range(mesh: Mesh, camera: Camera, margin: float = 0.1) -> tuple:
    """Camera-frame z extent of the mesh vertices, widened by a margin."""
    z = (mesh.vertices @ camera.R.T + camera.T)[:, 2]
    z = z[z > MIN_DEPTH]
    if z.size == 0:
        raise InvalidDepthRange("mesh is entirely behind the camera")
    near = max(float(z.min()) * (1.0 - margin), MIN_DEPTH * 10)
    far = float(z.max()) * (1.0 + margin)
    if far <= near:
        far = near * (1.0 + 1e-6)
    return near, far
