"""Triangle-mesh rasterization and aggregation to feature resolution.

Rasterization casts one ray per pixel center and keeps the nearest
ray-triangle intersection (Moller-Trumbore, both winding orders accepted).
Depth ties within 1e-9 break toward the lower face index so output is
deterministic. Aggregation pools a high-resolution raster down to a feature
map: mean of valid intersection points, logical-or of masks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyMesh,
    FaceOutOfRange,
    InvalidBary,
    MeatkitError,
    NonDivisibleResolution,
)
from .geometry import MIN_DEPTH, Camera, camera_center

logger = logging.getLogger(__name__)

TIE_EPS = 1e-9
_PARALLEL_EPS = 1e-12


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh: vertices (V, 3) float64 and faces (F, 3) int."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if not np.isfinite(v).all():
            raise MeatkitError("mesh vertices must be finite")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise MeatkitError("face index out of vertex range")
        if f.size:
            a = v[f[:, 1]] - v[f[:, 0]]
            b = v[f[:, 2]] - v[f[:, 0]]
            areas = 0.5 * np.linalg.norm(np.cross(a, b), axis=1)
            if (areas <= 1e-12).any():
                raise MeatkitError("mesh contains degenerate faces")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]


@dataclass(frozen=True)
class RasterMap:
    """Per-pixel intersection record at a fixed resolution.

    mask is False where the ray misses every face; there face_index is -1,
    bary is (0,0,0) and depth is 0. Where mask is True, bary sums to 1 and
    depth is the positive camera-frame z of the hit.
    """

    width: int
    height: int
    mask: np.ndarray
    face_index: np.ndarray
    bary: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        face = np.ascontiguousarray(self.face_index, dtype=np.int32)
        bary = np.ascontiguousarray(self.bary, dtype=np.float64)
        depth = np.ascontiguousarray(self.depth, dtype=np.float64)
        h, w = int(self.height), int(self.width)
        if mask.shape != (h, w) or face.shape != (h, w) or depth.shape != (h, w) or bary.shape != (h, w, 3):
            raise MeatkitError("raster field shapes disagree with width/height")
        miss = ~mask
        if (face[miss] != -1).any() or bary[miss].any():
            raise MeatkitError("miss pixels must carry face -1 and zero bary")
        if mask.any():
            b = bary[mask]
            if b.min() < -1e-9 or np.abs(b.sum(axis=1) - 1.0).max() > 1e-6:
                raise MeatkitError("hit barycentrics must be >= -1e-9 and sum to 1")
            if (depth[mask] <= 0).any():
                raise MeatkitError("hit depth must be positive")
        for arr in (mask, face, bary, depth):
            arr.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "face_index", face)
        object.__setattr__(self, "bary", bary)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "width", w)
        object.__setattr__(self, "height", h)


@dataclass(frozen=True)
class AggregatedRaster:
    """Mean intersection point and or-mask at feature resolution."""

    width: int
    height: int
    point: np.ndarray
    mask: np.ndarray
    source_factor: int

    def __post_init__(self):
        point = np.ascontiguousarray(self.point, dtype=np.float64)
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        h, w = int(self.height), int(self.width)
        if point.shape != (h, w, 3) or mask.shape != (h, w):
            raise MeatkitError("aggregated raster field shapes disagree with width/height")
        if point[~mask].any():
            raise MeatkitError("masked-out pixels must carry a zero point")
        if not np.isfinite(point).all():
            raise MeatkitError("aggregated points must be finite")
        point.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "point", point)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "width", w)
        object.__setattr__(self, "height", h)
        object.__setattr__(self, "source_factor", int(self.source_factor))


def _nearest_hits(mesh: Mesh, origins: np.ndarray, dirs: np.ndarray):
    """Nearest positive-depth Moller-Trumbore hit per ray.

    origins/dirs are (P, 3); either may be a single broadcast row. Faces are
    visited in index order and only strictly nearer hits (by more than
    TIE_EPS) replace the current one, which implements the lower-face-index
    tie rule and makes the scan order the only order dependence.
    """
    n = max(origins.shape[0], dirs.shape[0])
    best_t = np.full(n, np.inf)
    best_face = np.full(n, -1, dtype=np.int32)
    best_uv = np.zeros((n, 2))
    verts = mesh.vertices
    for fi in range(mesh.n_faces):
        i0, i1, i2 = mesh.faces[fi]
        v0 = verts[i0]
        e1 = verts[i1] - v0
        e2 = verts[i2] - v0
        h = np.cross(dirs, e2)
        a = h @ e1
        valid = np.abs(a) > _PARALLEL_EPS
        f = 1.0 / np.where(valid, a, np.inf)
        s = origins - v0
        u = f * np.einsum("...i,...i->...", s, h)
        q = np.cross(s, e1)
        v = f * np.einsum("...i,...i->...", dirs, q)
        t = f * (q @ e2)
        hit = valid & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > MIN_DEPTH)
        upd = hit & (t < best_t - TIE_EPS)
        if upd.any():
            best_t[upd] = t[upd]
            best_face[upd] = fi
            best_uv[upd, 0] = u[upd]
            best_uv[upd, 1] = v[upd]
    return best_t, best_face, best_uv


def _pack_raster(width, height, best_t, best_face, best_uv) -> RasterMap:
    mask = best_face >= 0
    bary = np.zeros((height * width, 3))
    bary[mask, 0] = 1.0 - best_uv[mask, 0] - best_uv[mask, 1]
    bary[mask, 1] = best_uv[mask, 0]
    bary[mask, 2] = best_uv[mask, 1]
    depth = np.where(mask, best_t, 0.0)
    return RasterMap(
        width=width,
        height=height,
        mask=mask.reshape(height, width),
        face_index=best_face.reshape(height, width),
        bary=bary.reshape(height, width, 3),
        depth=depth.reshape(height, width),
    )


def rasterize_mesh(mesh: Mesh, camera: Camera, width: int, height: int) -> RasterMap:
    """Perspective rasterization: one ray per pixel center.

    The recorded depth is the camera-frame z of the hit point (rays are
    parameterized so that t equals camera depth).
    """
    if mesh.n_faces == 0:
        raise EmptyMesh("mesh has no faces")
    xs = (np.arange(width) + 0.5)
    ys = (np.arange(height) + 0.5)
    px, py = np.meshgrid(xs, ys)
    pix = np.stack([px.ravel(), py.ravel(), np.ones(width * height)], axis=1)
    dirs = np.linalg.solve(camera.K, pix.T).T @ camera.R  # rows R^T K^-1 p
    origin = camera_center(camera)[None, :]
    best_t, best_face, best_uv = _nearest_hits(mesh, origin, dirs)
    return _pack_raster(width, height, best_t, best_face, best_uv)


def rasterize_mesh_ortho(mesh: Mesh, width: int, height: int, bounds=((-1.0, 1.0), (-1.0, 1.0))) -> RasterMap:
    """Parallel-ray frontal rasterization in the monocular mesh convention.

    The image covers ``bounds`` = ((x_min, x_max), (y_min, y_max)) in mesh
    coordinates with image y growing downward while mesh y grows upward;
    rays travel along -z from just in front of the mesh, so the front of the
    mesh (largest z) is hit first. Depth is distance along the ray.
    """
    if mesh.n_faces == 0:
        raise EmptyMesh("mesh has no faces")
    (x0, x1), (y0, y1) = bounds
    if not (x1 > x0 and y1 > y0):
        raise MeatkitError("ortho bounds must be increasing")
    xs = x0 + (np.arange(width) + 0.5) * (x1 - x0) / width
    ys = y1 - (np.arange(height) + 0.5) * (y1 - y0) / height
    px, py = np.meshgrid(xs, ys)
    z_start = mesh.vertices[:, 2].max() + 1.0
    origins = np.stack([px.ravel(), py.ravel(), np.full(width * height, z_start)], axis=1)
    dirs = np.array([[0.0, 0.0, -1.0]])
    best_t, best_face, best_uv = _nearest_hits(mesh, origins, dirs)
    return _pack_raster(width, height, best_t, best_face, best_uv)


def interpolate_point(mesh: Mesh, face_index: int, bary) -> np.ndarray:
    """Barycentric combination of a face's vertices."""
    if face_index < 0 or face_index >= mesh.n_faces:
        raise FaceOutOfRange(f"face {face_index} not in [0, {mesh.n_faces})")
    lam = np.asarray(bary, dtype=np.float64).reshape(3)
    if abs(lam.sum() - 1.0) > 1e-6:
        raise InvalidBary(f"barycentric sum {lam.sum():.8f} deviates from 1")
    tri = mesh.vertices[mesh.faces[face_index]]
    return lam @ tri


def intersection_points(raster: RasterMap, mesh: Mesh) -> np.ndarray:
    """Per-pixel interpolated intersection points, zeros where masked out."""
    if not raster.mask.any():
        return np.zeros((raster.height, raster.width, 3))
    if int(raster.face_index.max()) >= mesh.n_faces:
        raise FaceOutOfRange("raster references faces beyond the mesh")
    face = np.where(raster.mask, raster.face_index, 0)
    tri = mesh.vertices[mesh.faces[face]]  # (H, W, 3, 3)
    pts = np.einsum("hwk,hwki->hwi", raster.bary, tri)
    return np.where(raster.mask[..., None], pts, 0.0)


def aggregate_raster(raster: RasterMap, mesh: Mesh, feature_width: int, feature_height: int) -> AggregatedRaster:
    """Pool a high-res raster to feature resolution.

    Each feature pixel's region of high-res pixels yields the mean of the
    valid intersection points and the logical-or of the masks. One raster
    may be aggregated to any number of target resolutions.
    """
    if raster.width % feature_width or raster.height % feature_height:
        raise NonDivisibleResolution(
            f"raster {raster.width}x{raster.height} does not tile features "
            f"{feature_width}x{feature_height}"
        )
    fx = raster.width // feature_width
    fy = raster.height // feature_height
    if fx != fy:
        raise NonDivisibleResolution(f"anisotropic pyramid factors {fx} vs {fy}")
    pts = intersection_points(raster, mesh)
    m = raster.mask.reshape(feature_height, fy, feature_width, fx)
    p = pts.reshape(feature_height, fy, feature_width, fx, 3)
    count = m.sum(axis=(1, 3))
    psum = (p * m[..., None]).sum(axis=(1, 3))
    mask = count > 0
    point = np.where(mask[..., None], psum / np.maximum(count, 1)[..., None], 0.0)
    # convexity: the mean must stay inside the contributing bounding box
    masked = np.where(m[..., None], p, np.inf)
    lo = masked.min(axis=(1, 3))
    masked = np.where(m[..., None], p, -np.inf)
    hi = masked.max(axis=(1, 3))
    if mask.any():
        if (point[mask] < lo[mask] - 1e-12).any() or (point[mask] > hi[mask] + 1e-12).any():
            raise MeatkitError("aggregated point escaped its contributing bounding box")
    return AggregatedRaster(width=feature_width, height=feature_height, point=point, mask=mask, source_factor=fx)


def parse_obj(text: str) -> tuple[Mesh, int]:
    """Parse the OBJ subset (v / f lines, triangles, 1-based indices).

    Returns the mesh and the number of ignored lines. Face tokens may carry
    texture/normal suffixes (``f 1/1/1 ...``); only the position index is used.
    """
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    ignored = 0
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v" and len(parts) >= 4:
            verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise MeatkitError("OBJ subset supports triangles only")
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            if min(idx) < 1:
                raise MeatkitError("OBJ subset requires positive 1-based indices")
            faces.append([i - 1 for i in idx])
        else:
            ignored += 1
    return Mesh(vertices=np.array(verts, dtype=np.float64).reshape(-1, 3),
                faces=np.array(faces, dtype=np.int64).reshape(-1, 3)), ignored


def load_obj(path) -> Mesh:
    mesh, ignored = parse_obj(Path(path).read_text(encoding="utf-8"))
    if ignored:
        logger.warning("%s: ignored %d unsupported OBJ lines", path, ignored)
    return mesh


def save_obj(path, mesh: Mesh) -> None:
    lines = [f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}" for v in mesh.vertices]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
