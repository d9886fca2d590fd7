"""Deterministic synthetic scenes for benchmarks, the demo and tests."""

from __future__ import annotations

import math

import numpy as np

from .rasterizer import Mesh


def capsule_mesh(n_theta: int = 12, n_z: int = 8, radius: float = 0.35, half_height: float = 0.9,
                 center=(0.0, 0.0, 0.0)) -> Mesh:
    """Closed capsule (cylinder with pole-capped ends) around the y axis.

    A cheap stand-in for a standing subject; with the defaults it has
    roughly 200 faces and fits inside the unit box.
    """
    c = np.asarray(center, dtype=np.float64)
    rows = []
    ys = np.linspace(-half_height, half_height, n_z)
    for y in ys:
        ring = []
        for k in range(n_theta):
            a = 2.0 * math.pi * k / n_theta
            ring.append([radius * math.cos(a), y, radius * math.sin(a)])
        rows.append(ring)
    verts = [v for ring in rows for v in ring]
    top = len(verts)
    verts.append([0.0, half_height + radius, 0.0])
    bot = len(verts)
    verts.append([0.0, -half_height - radius, 0.0])
    faces = []
    for i in range(n_z - 1):
        for k in range(n_theta):
            a = i * n_theta + k
            b = i * n_theta + (k + 1) % n_theta
            faces.append([a, b, a + n_theta])
            faces.append([b, b + n_theta, a + n_theta])
    last = (n_z - 1) * n_theta
    for k in range(n_theta):
        faces.append([last + k, last + (k + 1) % n_theta, top])
        faces.append([(k + 1) % n_theta, k, bot])
    return Mesh(vertices=np.asarray(verts) + c, faces=np.asarray(faces))


def random_blob_mesh(rng: np.random.Generator, n_faces: int = 40, scale: float = 1.0,
                     center=(0.0, 0.0, 0.0)) -> Mesh:
    """Random non-degenerate triangle soup inside a box around ``center``.

    Faces are independent triangles (no shared topology); degenerate ones
    are rejected and redrawn so the Mesh validator always passes.
    """
    c = np.asarray(center, dtype=np.float64)
    tris = []
    while len(tris) < n_faces:
        t = rng.uniform(-scale, scale, size=(3, 3))
        area = 0.5 * np.linalg.norm(np.cross(t[1] - t[0], t[2] - t[0]))
        if area > 1e-3:
            tris.append(t + c)
    verts = np.concatenate(tris, axis=0)
    faces = np.arange(3 * n_faces).reshape(-1, 3)
    return Mesh(vertices=verts, faces=faces)


def human_keypoints() -> tuple[np.ndarray, int, list]:
    """A small fixed skeleton (17 joints) standing at the origin, y up."""
    joints = np.array(
        [
            [0.00, 0.00, 0.00],   # pelvis
            [0.00, 0.25, 0.00],   # spine
            [0.00, 0.50, 0.00],   # chest
            [0.00, 0.70, 0.00],   # neck
            [0.00, 0.85, 0.05],   # head
            [-0.18, 0.60, 0.00],  # l_shoulder
            [0.18, 0.60, 0.00],   # r_shoulder
            [-0.32, 0.35, 0.02],  # l_elbow
            [0.32, 0.35, 0.02],   # r_elbow
            [-0.40, 0.10, 0.05],  # l_wrist
            [0.40, 0.10, 0.05],   # r_wrist
            [-0.10, -0.05, 0.00], # l_hip
            [0.10, -0.05, 0.00],  # r_hip
            [-0.12, -0.45, 0.02], # l_knee
            [0.12, -0.45, 0.02],  # r_knee
            [-0.13, -0.85, 0.00], # l_ankle
            [0.13, -0.85, 0.00],  # r_ankle
        ]
    )
    names = [
        "pelvis", "spine", "chest", "neck", "head",
        "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
        "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
    ]
    return joints, 0, names


HUMAN_BONES = [
    (0, 1), (1, 2), (2, 3), (3, 4),
    (2, 5), (2, 6), (5, 7), (6, 8), (7, 9), (8, 10),
    (0, 11), (0, 12), (11, 13), (12, 14), (13, 15), (14, 16),
]
