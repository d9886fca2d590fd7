"""Rig calibration against a monocular-reconstructed mesh.

The monocular mesh lives in its own frontal orthographic frame; to place it
in the rig's world frame we fit a similarity transform (per-axis scale,
rotation in the 6D parameterization, translation) so that each frontal-view
pixel's mesh point reprojects onto itself in the frontal view and onto its
feature-matched pixel in the other views. All pixel coordinates are
normalized to [0, 1] by the view resolution. The fit is plain gradient
descent with analytic gradients, a backtracking-halving step rule (loss is
never allowed to increase) and the aligned-axes initialization
R0 = (diag(1,-1,-1) @ R_frontal)^-1, s0 = 1, t0 = 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateUp,
    EmptyMatchSet,
    MeatkitError,
    NoIntersection,
    TooFewKeypoints,
    ZeroOrientation,
)
from .geometry import (
    Camera,
    SimilarityTransform,
    camera_center,
    camera_from_lookat,
    look_at_rotation,
    matrix_to_rot6d,
    rot6d_to_matrix,
)
from .rasterizer import Mesh, RasterMap, interpolate_point

_FLIP_YZ = np.diag([1.0, -1.0, -1.0])
_Z_CLAMP = 1e-6


def select_frontal_view(cameras: list[Camera], pelvis, orientation) -> int:
    """Index of the camera whose direction from the pelvis best matches d.

    Maximizes the cosine between the body orientation and the pelvis-to-
    camera vector; ties break toward the lowest index.
    """
    d = np.asarray(orientation, dtype=np.float64).reshape(3)
    nd = np.linalg.norm(d)
    if nd <= 1e-9:
        raise ZeroOrientation("orientation vector is zero")
    if not cameras:
        raise MeatkitError("camera list is empty")
    g = np.asarray(pelvis, dtype=np.float64).reshape(3)
    best = None
    best_cos = -np.inf
    for i, cam in enumerate(cameras):
        v = camera_center(cam) - g
        nv = np.linalg.norm(v)
        cos = -np.inf if nv < 1e-12 else float(d @ v) / (nd * nv)
        if cos > best_cos:
            best, best_cos = i, cos
    return best


@dataclass(frozen=True)
class MatchSet:
    """Feature matches from the frontal view into other views.

    p are frontal-view pixels, q their matched pixels in view ``views``;
    both normalized to [0, 1] by the respective image resolution.
    """

    frontal_view: int
    views: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        views = np.ascontiguousarray(self.views, dtype=np.int64).reshape(-1)
        p = np.ascontiguousarray(self.p, dtype=np.float64).reshape(-1, 2)
        q = np.ascontiguousarray(self.q, dtype=np.float64).reshape(-1, 2)
        if not (len(views) == len(p) == len(q)):
            raise MeatkitError("match arrays disagree in length")
        for name, arr in (("p", p), ("q", q)):
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise MeatkitError(f"match coordinates {name} must lie in [0, 1]")
        for arr in (views, p, q):
            arr.setflags(write=False)
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "frontal_view", int(self.frontal_view))

    def __len__(self) -> int:
        return self.views.shape[0]


def load_matches(path) -> MatchSet:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    pairs = data["pairs"]
    return MatchSet(
        frontal_view=int(data["frontal_view"]),
        views=np.array([pr["view"] for pr in pairs], dtype=np.int64),
        p=np.array([pr["p"] for pr in pairs], dtype=np.float64).reshape(-1, 2),
        q=np.array([pr["q"] for pr in pairs], dtype=np.float64).reshape(-1, 2),
    )


def save_matches(path, matches: MatchSet) -> None:
    pairs = [
        {"view": int(v), "p": [float(px), float(py)], "q": [float(qx), float(qy)]}
        for v, (px, py), (qx, qy) in zip(matches.views, matches.p, matches.q)
    ]
    Path(path).write_text(
        json.dumps({"frontal_view": matches.frontal_view, "pairs": pairs}, indent=2) + "\n",
        encoding="utf-8",
    )


def _raster_lookup(pixel, raster: RasterMap, mesh: Mesh) -> np.ndarray:
    """Mesh point hit by a normalized frontal pixel, via the ortho raster."""
    x = float(pixel[0]) * raster.width
    y = float(pixel[1]) * raster.height
    ix = min(max(int(math.floor(x)), 0), raster.width - 1)
    iy = min(max(int(math.floor(y)), 0), raster.height - 1)
    if not raster.mask[iy, ix]:
        raise NoIntersection(f"pixel ({pixel[0]:.4f}, {pixel[1]:.4f}) misses the mesh")
    return interpolate_point(mesh, int(raster.face_index[iy, ix]), raster.bary[iy, ix])


def reproject(pixel, raster: RasterMap, mesh: Mesh, transform: SimilarityTransform, camera: Camera) -> np.ndarray:
    """Transform a frontal pixel's mesh point and project it into a view.

    Input and output pixels are normalized to [0, 1] by image resolution.
    Raises NoIntersection when the pixel misses the mesh in the raster.
    """
    p3 = transform.apply(_raster_lookup(pixel, raster, mesh))
    p_cam = camera.R @ p3 + camera.T
    z = max(p_cam[2], _Z_CLAMP)
    uvw = camera.K @ np.array([p_cam[0], p_cam[1], z])
    return uvw[:2] / z / np.array([camera.width, camera.height])


def _rot6d_jacobian(rot6d: np.ndarray):
    """Rotation matrix and its derivative tensor dR[i, j, k] = dR_ij/dc_k."""
    c1, c2 = rot6d[:3], rot6d[3:]
    n1 = np.linalg.norm(c1)
    b1 = c1 / n1
    db1_dc1 = (np.eye(3) - np.outer(b1, b1)) / n1
    d = b1 @ c2
    u2 = c2 - d * b1
    n2 = np.linalg.norm(u2)
    b2 = u2 / n2
    du2_dc1 = -(np.outer(b1, c2) + d * np.eye(3)) @ db1_dc1
    du2_dc2 = np.eye(3) - np.outer(b1, b1)
    db2_du2 = (np.eye(3) - np.outer(b2, b2)) / n2
    db2_dc1 = db2_du2 @ du2_dc1
    db2_dc2 = db2_du2 @ du2_dc2
    skew = lambda v: np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])  # noqa: E731
    db3_dc1 = -skew(b2) @ db1_dc1 + skew(b1) @ db2_dc1
    db3_dc2 = skew(b1) @ db2_dc2
    r = np.stack([b1, b2, np.cross(b1, b2)], axis=1)
    dr = np.zeros((3, 3, 6))
    dr[:, 0, :3] = db1_dc1
    dr[:, 1, :3] = db2_dc1
    dr[:, 1, 3:] = db2_dc2
    dr[:, 2, :3] = db3_dc1
    dr[:, 2, 3:] = db3_dc2
    return r, dr


@dataclass(frozen=True)
class _Objective:
    """Prebuilt residual system: mesh points, normalized targets, cameras."""

    points: np.ndarray  # (M, 3) mesh-frame points
    targets: np.ndarray  # (M, 2) normalized pixel targets
    cam_idx: np.ndarray  # (M,) index into cameras
    cameras: tuple

    def loss_and_grad(self, params: np.ndarray):
        s, c, t = params[0:3], params[3:9], params[9:12]
        rot, drot = _rot6d_jacobian(c)
        sp = self.points * s
        pw = sp @ rot.T + t
        loss = 0.0
        g = np.zeros(12)
        for ci, cam in enumerate(self.cameras):
            rows = np.flatnonzero(self.cam_idx == ci)
            if rows.size == 0:
                continue
            x = pw[rows] @ cam.R.T + cam.T
            z = np.maximum(x[:, 2], _Z_CLAMP)
            fx, sk, cx = cam.K[0]
            fy, cy = cam.K[1, 1], cam.K[1, 2]
            wh = np.array([cam.width, cam.height], dtype=np.float64)
            a = fx * x[:, 0] + sk * x[:, 1]
            b = fy * x[:, 1]
            pix = np.stack([a / z + cx, b / z + cy], axis=1)
            r = pix / wh - self.targets[rows]
            loss += float((r * r).sum())
            # d(normalized pixel)/d(camera point), rows stacked as (M, 2, 3)
            zinv = 1.0 / z
            j = np.zeros((rows.size, 2, 3))
            j[:, 0, 0] = fx * zinv / wh[0]
            j[:, 0, 1] = sk * zinv / wh[0]
            j[:, 0, 2] = -a * zinv * zinv / wh[0]
            j[:, 1, 1] = fy * zinv / wh[1]
            j[:, 1, 2] = -b * zinv * zinv / wh[1]
            clamped = x[:, 2] < _Z_CLAMP
            j[clamped, :, 2] = 0.0
            dl_dx = 2.0 * np.einsum("mi,mij->mj", r, j)
            dl_dpw = dl_dx @ cam.R
            g[9:12] += dl_dpw.sum(axis=0)
            g[0:3] += (dl_dpw @ rot * self.points[rows]).sum(axis=0)
            g[3:9] += np.einsum("mi,ijk,mj->k", dl_dpw, drot, sp[rows])
        return loss, g


def _build_objective(
    matches: MatchSet,
    raster: RasterMap,
    mesh: Mesh,
    cameras: list[Camera],
    stride: int,
) -> _Objective:
    points, targets, cam_idx = [], [], []
    # term 1: every valid frontal pixel (on a stride grid) must return to itself
    ys = np.arange(0, raster.height, stride)
    xs = np.arange(0, raster.width, stride)
    sub_mask = raster.mask[np.ix_(ys, xs)]
    yy, xx = np.nonzero(sub_mask)
    for y, x in zip(ys[yy], xs[xx]):
        points.append(interpolate_point(mesh, int(raster.face_index[y, x]), raster.bary[y, x]))
        targets.append([(x + 0.5) / raster.width, (y + 0.5) / raster.height])
        cam_idx.append(matches.frontal_view)
    # term 2: matched pairs; pairs whose source pixel misses the mesh are dropped
    kept = 0
    for v, p, q in zip(matches.views, matches.p, matches.q):
        try:
            pt = _raster_lookup(p, raster, mesh)
        except NoIntersection:
            continue
        points.append(pt)
        targets.append(q)
        cam_idx.append(int(v))
        kept += 1
    if kept == 0:
        raise EmptyMatchSet("no match pairs remain after mesh filtering")
    return _Objective(
        points=np.array(points, dtype=np.float64).reshape(-1, 3),
        targets=np.array(targets, dtype=np.float64).reshape(-1, 2),
        cam_idx=np.array(cam_idx, dtype=np.int64),
        cameras=tuple(cameras),
    )


def adaptation_loss(
    transform: SimilarityTransform,
    matches: MatchSet,
    raster: RasterMap,
    mesh: Mesh,
    cameras: list[Camera],
    stride: int = 4,
) -> float:
    """Sum of squared normalized reprojection residuals for a transform."""
    obj = _build_objective(matches, raster, mesh, cameras, stride)
    loss, _ = obj.loss_and_grad(transform.as_vector())
    return loss


def adaptation_loss_grad(
    transform: SimilarityTransform,
    matches: MatchSet,
    raster: RasterMap,
    mesh: Mesh,
    cameras: list[Camera],
    stride: int = 4,
):
    """Loss and its analytic gradient w.r.t. (scale, rot6d, translation)."""
    obj = _build_objective(matches, raster, mesh, cameras, stride)
    return obj.loss_and_grad(transform.as_vector())


@dataclass(frozen=True)
class FitConfig:
    """Gradient-descent settings for the transform fit."""

    max_iterations: int = 5000
    initial_step: float = 0.1
    grad_tol: float = 1e-8
    stride: int = 4
    step_growth: float = 1.5
    min_step: float = 1e-18


@dataclass(frozen=True)
class AdaptationResult:
    transform: SimilarityTransform
    final_loss: float
    iterations: int
    converged: bool
    history: tuple = ()

    def __post_init__(self):
        if self.final_loss < 0:
            raise MeatkitError("loss must be non-negative")

    def to_json(self) -> str:
        return json.dumps(
            {
                "scale": self.transform.scale.tolist(),
                "rot6d": self.transform.rot6d.tolist(),
                "translation": self.transform.translation.tolist(),
                "final_loss": self.final_loss,
                "iterations": self.iterations,
                "converged": self.converged,
            },
            indent=2,
            sort_keys=True,
        )


def initial_transform(frontal_camera: Camera) -> SimilarityTransform:
    """Aligned-axes initialization: unit scale, zero shift, flipped rotation.

    The monocular frame has y and z pointing opposite to the camera
    convention, so R0 = (diag(1,-1,-1) @ R_frontal)^-1.
    """
    r0 = np.linalg.inv(_FLIP_YZ @ frontal_camera.R)
    return SimilarityTransform(np.ones(3), matrix_to_rot6d(r0), np.zeros(3))


def _descend(loss_and_grad, x0: np.ndarray, cfg: FitConfig):
    """Backtracking gradient descent; accepted steps never increase the loss."""
    x = x0.copy()
    f, g = loss_and_grad(x)
    history = [f]
    step = cfg.initial_step
    iterations = 0
    converged = float(np.linalg.norm(g)) < cfg.grad_tol
    while iterations < cfg.max_iterations and not converged:
        while step > cfg.min_step:
            cand = x - step * g
            fc, gc = loss_and_grad(cand)
            if fc <= f:
                break
            step *= 0.5
        else:
            break
        x, f, g = cand, fc, gc
        history.append(f)
        step *= cfg.step_growth
        iterations += 1
        converged = float(np.linalg.norm(g)) < cfg.grad_tol
    return x, f, iterations, converged, tuple(history)


def fit_transform(
    matches: MatchSet,
    raster: RasterMap,
    mesh: Mesh,
    cameras: list[Camera],
    config: FitConfig = FitConfig(),
) -> AdaptationResult:
    """Fit the mesh-to-world similarity transform to the match set."""
    obj = _build_objective(matches, raster, mesh, cameras, config.stride)
    x0 = initial_transform(cameras[matches.frontal_view]).as_vector()
    x, f, iters, converged, history = _descend(obj.loss_and_grad, x0, config)
    return AdaptationResult(
        transform=SimilarityTransform.from_vector(x),
        final_loss=f,
        iterations=iters,
        converged=converged,
        history=history,
    )


@dataclass(frozen=True)
class FrontalFitConfig:
    """Settings for the frontal-camera position fit."""

    max_iterations: int = 2000
    initial_step: float = 1e-2
    grad_tol: float = 1e-10
    fd_step: float = 1e-6
    azimuth_starts: int = 8
    elevation_starts: tuple = (-0.3, 0.0, 0.3)
    initial_positions: tuple | None = None


def frontal_camera_at(position, pelvis, fov: float, width: int, height: int) -> Camera:
    """Look-at camera with fixed field of view, aimed at the pelvis."""
    return camera_from_lookat(position, pelvis, fov, width, height)


def fit_frontal_camera(
    keypoints_3d,
    keypoints_2d,
    fov: float,
    pelvis,
    width: int,
    height: int,
    config: FrontalFitConfig = FrontalFitConfig(),
) -> Camera:
    """Optimize the camera position so projected 3D keypoints match 2D ones.

    Orientation is always the look-at rotation toward the pelvis with world
    up (0, 1, 0) and the field of view is fixed; only the position moves.
    Gradients are central finite differences; several deterministic starts
    around the subject avoid azimuth-mirror local minima.
    """
    kp3 = np.asarray(keypoints_3d, dtype=np.float64).reshape(-1, 3)
    kp2 = np.asarray(keypoints_2d, dtype=np.float64).reshape(-1, 2)
    if kp3.shape[0] != kp2.shape[0] or kp3.shape[0] < 4:
        raise TooFewKeypoints(f"need >= 4 keypoint pairs, got {kp3.shape[0]}")
    g = np.asarray(pelvis, dtype=np.float64).reshape(3)
    f = (height / 2.0) / math.tan(fov / 2.0)
    k_mat = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])

    def objective(pos: np.ndarray) -> float:
        try:
            r = look_at_rotation(pos, g)
        except DegenerateUp:
            return np.inf
        x = (kp3 - pos) @ r.T
        z = np.maximum(x[:, 2], _Z_CLAMP)
        pix = (x @ k_mat.T)[:, :2] / z[:, None]
        return float(((pix - kp2) ** 2).mean())

    def fd_grad(pos: np.ndarray) -> np.ndarray:
        h = config.fd_step
        grad = np.zeros(3)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            grad[i] = (objective(pos + e) - objective(pos - e)) / (2 * h)
        return grad

    if config.initial_positions is not None:
        starts = [np.asarray(p, dtype=np.float64) for p in config.initial_positions]
    else:
        r3 = np.linalg.norm(kp3 - g, axis=1).max()
        r2 = max(np.linalg.norm(kp2 - np.array([width / 2.0, height / 2.0]), axis=1).max(), 1.0)
        dist = max(f * r3 / r2, 1e-3)
        starts = []
        for el in config.elevation_starts:
            for k in range(config.azimuth_starts):
                az = 2.0 * math.pi * k / config.azimuth_starts
                starts.append(
                    g + dist * np.array([math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])
                )

    # short probes from every start, then a full-budget polish of the best one
    loss_grad = lambda p: (objective(p), fd_grad(p))  # noqa: E731
    probe_cfg = FitConfig(
        max_iterations=min(config.max_iterations, 150),
        initial_step=config.initial_step,
        grad_tol=config.grad_tol,
    )
    best_pos, best_f = None, np.inf
    for s in starts:
        if not np.isfinite(objective(s)):
            continue
        pos, fval, _, _, _ = _descend(loss_grad, s, probe_cfg)
        if fval < best_f:
            best_pos, best_f = pos, fval
    if best_pos is None:
        raise DegenerateUp("every start position is degenerate (above/below the pelvis)")
    polish_cfg = FitConfig(
        max_iterations=config.max_iterations,
        initial_step=config.initial_step,
        grad_tol=config.grad_tol,
    )
    best_pos, _, _, _, _ = _descend(loss_grad, best_pos, polish_cfg)
    return frontal_camera_at(best_pos, g, fov, width, height)


def sample_orbit_cameras(
    pelvis,
    distance: float,
    elevation: float,
    fov: float,
    n: int,
    width: int = 1024,
    height: int = 1024,
) -> list[Camera]:
    """n look-at cameras at uniform azimuths on a fixed-elevation circle.

    Camera 0 sits at azimuth 0; every camera is ``distance`` from the pelvis
    and aims straight at it, so the pelvis projects to the principal point.
    """
    if n < 1:
        raise MeatkitError("need at least one camera")
    if distance <= 0:
        raise MeatkitError("distance must be positive")
    g = np.asarray(pelvis, dtype=np.float64).reshape(3)
    cams = []
    for k in range(n):
        az = 2.0 * math.pi * k / n
        eye = g + distance * np.array(
            [math.sin(az) * math.cos(elevation), math.sin(elevation), math.cos(az) * math.cos(elevation)]
        )
        cams.append(camera_from_lookat(eye, g, fov, width, height))
    return cams


def perturb_axis_angle(axis_angles, is_hand, rng, sigma_main: float = 0.06, sigma_hand: float = 0.2) -> np.ndarray:
    """Gaussian joint-rotation noise in axis-angle form, per joint class.

    Axis components get noise with std sigma, the angle with std pi*sigma;
    the pelvis (or any root) should be excluded by the caller. Returns the
    perturbed (J, 3) axis-angle array.
    """
    aa = np.asarray(axis_angles, dtype=np.float64).reshape(-1, 3)
    hand = np.asarray(is_hand, dtype=bool).reshape(-1)
    if hand.shape[0] != aa.shape[0]:
        raise MeatkitError("per-joint class labels must match the joint count")
    out = np.empty_like(aa)
    for j in range(aa.shape[0]):
        sigma = sigma_hand if hand[j] else sigma_main
        angle = np.linalg.norm(aa[j])
        axis = aa[j] / angle if angle > 1e-12 else np.array([1.0, 0.0, 0.0])
        axis = axis + rng.normal(0.0, sigma, size=3)
        na = np.linalg.norm(axis)
        axis = axis / na if na > 1e-12 else np.array([1.0, 0.0, 0.0])
        angle = angle + rng.normal(0.0, math.pi * sigma)
        out[j] = axis * angle
    return out
