"""Synthetic fixtures and scheme dispatch for the fusion benchmark.

Kept separate from the measurement loop so that everything allocated here
counts as benchmark input, not as transient memory of the fusion pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adaptation import sample_orbit_cameras
from .correspondence import build_correspondence_table, build_epipolar_candidates, mesh_depth_range
from .fusion import AttentionParams, FeatureStack, FusionStats, dense_mv_fuse, epipolar_fuse, meat_feat, per_view_self_attention
from .geometry import rig_view_embeddings
from .rasterizer import aggregate_raster, rasterize_mesh
from .synthetic import capsule_mesh

RASTER_FACTOR = 8
ORBIT_DISTANCE = 3.0
ORBIT_ELEVATION = 0.2
ORBIT_FOV = 0.9


@dataclass
class Fixture:
    features: FeatureStack
    table: object
    candidates: list
    embeddings: np.ndarray
    params_embed: AttentionParams
    params_self: AttentionParams


class _SchemeRunner:
    def build_fixture(self, params, seed: int, embed_bands: int, schemes=("mesh", "dense", "epipolar", "self")) -> Fixture:
        rng = np.random.default_rng(seed)
        n, s = params.n_views, params.feature_size
        image_res = s * RASTER_FACTOR
        mesh = capsule_mesh()
        cameras = sample_orbit_cameras(
            (0.0, 0.0, 0.0), ORBIT_DISTANCE, ORBIT_ELEVATION, ORBIT_FOV, n,
            width=image_res, height=image_res,
        )
        table = None
        if "mesh" in schemes:
            aggs = [aggregate_raster(rasterize_mesh(mesh, c, image_res, image_res), mesh, s, s) for c in cameras]
            table = build_correspondence_table(aggs, cameras)
        candidates = []
        if "epipolar" in schemes:
            candidates = [
                build_epipolar_candidates(cameras, v, mesh_depth_range(mesh, cameras[v]), params.depth_samples, s)
                for v in range(n)
            ]
        embeddings = rig_view_embeddings(cameras, bands=embed_bands).astype(np.float32)
        features = FeatureStack(
            data=rng.standard_normal((n, params.channels, s, s)).astype(np.float32),
            view_ids=tuple(range(n)),
        )
        child = np.random.SeedSequence(seed).spawn(2)
        return Fixture(
            features=features,
            table=table,
            candidates=candidates,
            embeddings=embeddings,
            params_embed=AttentionParams.create(params.channels, embeddings.shape[1], int(child[0].generate_state(1)[0])),
            params_self=AttentionParams.create(params.channels, 0, int(child[1].generate_state(1)[0])),
        )

    def run(self, scheme: str, fixture: Fixture) -> FusionStats:
        stats = FusionStats()
        if scheme == "mesh":
            meat_feat(fixture.features, fixture.table, fixture.embeddings, fixture.params_embed, stats)
        elif scheme == "dense":
            dense_mv_fuse(fixture.features, fixture.embeddings, fixture.params_embed, stats)
        elif scheme == "epipolar":
            epipolar_fuse(fixture.features, fixture.candidates, fixture.embeddings, fixture.params_embed, stats)
        elif scheme == "self":
            per_view_self_attention(fixture.features, fixture.params_self, stats)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        return stats


scheme_runner = _SchemeRunner()
