"""Seeded end-to-end synthetic pipeline exercising every module.

Builds an orbit rig around a capsule subject, runs rasterization,
aggregation, correspondence, all four fusion schemes, keypoint
conditioning, cropping and the mesh-adaptation fit on a known ground-truth
transform, writing every intermediate artifact under one directory. All
outputs are a deterministic function of the seed.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import adaptation, bench, correspondence, dataprep, fusion, geometry, rasterizer, synthetic, tensorio
from .cli import _stage_seeds, save_aggregate, save_raster, save_table

N_VIEWS = 8
IMAGE_RES = 128
FEATURE_RES = 16
CHANNELS = 16
DEPTH_SAMPLES = 4
ORBIT_DISTANCE = 3.0
ORBIT_FOV = 0.9


def _inverse_transform_mesh(mesh: rasterizer.Mesh, tf: geometry.SimilarityTransform) -> rasterizer.Mesh:
    r = tf.rotation()
    v = (mesh.vertices - tf.translation) @ r / tf.scale
    return rasterizer.Mesh(vertices=v, faces=mesh.faces)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_demo(out: Path, seed: int) -> None:
    out = Path(out)
    for sub in ("raster", "agg", "kp", "adapt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    # scene: capsule subject at the origin, orbit rig around it
    mesh = synthetic.capsule_mesh()
    rasterizer.save_obj(out / "mesh.obj", mesh)
    cams = adaptation.sample_orbit_cameras(
        (0.0, 0.0, 0.0), ORBIT_DISTANCE, 0.15, ORBIT_FOV, N_VIEWS, width=IMAGE_RES, height=IMAGE_RES
    )
    ids = list(range(N_VIEWS))
    geometry.save_rig(out / "rig.json", ids, cams)
    joints, pelvis_idx, names = synthetic.human_keypoints()
    dataprep.save_keypoints(out / "keypoints.json", joints, pelvis_idx, names)

    # frontal-view selection for a subject facing +z
    front = adaptation.select_frontal_view(cams, joints[pelvis_idx], (0.0, 0.0, 1.0))
    _write_json(out / "frontal.json", {"view": ids[front]})

    # rasterize, aggregate, correspond
    aggs = []
    for vid, cam in zip(ids, cams):
        r = rasterizer.rasterize_mesh(mesh, cam, IMAGE_RES, IMAGE_RES)
        save_raster(str(out / "raster" / f"view{vid:02d}"), r)
        a = rasterizer.aggregate_raster(r, mesh, FEATURE_RES, FEATURE_RES)
        save_aggregate(str(out / "agg" / f"view{vid:02d}"), a)
        aggs.append(a)
    table = correspondence.build_correspondence_table(aggs, cams)
    save_table(str(out / "table"), table)

    # features, embeddings, all fusion schemes
    emb = geometry.rig_view_embeddings(cams).astype(np.float32)
    tensorio.write_tensor(out / "embeddings.tnsr", emb)
    feats = fusion.FeatureStack(
        data=rng.standard_normal((N_VIEWS, CHANNELS, FEATURE_RES, FEATURE_RES)).astype(np.float32),
        view_ids=tuple(ids),
    )
    tensorio.write_tensor(out / "features.tnsr", feats.data)
    seeds = _stage_seeds(seed)
    params_self = fusion.AttentionParams.create(CHANNELS, 0, seeds["self"])
    params_block = fusion.MeatBlockParams(
        feat=fusion.AttentionParams.create(CHANNELS, emb.shape[1], seeds["feat"]),
        vae=fusion.AttentionParams.create(CHANNELS, emb.shape[1], seeds["vae"]),
        self_attn=params_self,
    )
    latent = np.random.default_rng(seeds["latent"]).standard_normal(
        (4, FEATURE_RES * 4, FEATURE_RES * 4)
    ).astype(np.float32)
    ref_scales = fusion.encode_reference_latent(latent, CHANNELS, 2, seeds["latent"])
    fused = fusion.meat_block(feats, table, ref_scales, front, emb, params_block)
    tensorio.write_tensor(out / "fused_mesh.tnsr", fused.data)
    tensorio.write_tensor(out / "fused_self.tnsr", fusion.per_view_self_attention(feats, params_self).data)
    tensorio.write_tensor(
        out / "fused_dense.tnsr",
        fusion.dense_mv_fuse(feats, emb, params_block.feat).data,
    )
    cands = [
        correspondence.build_epipolar_candidates(
            cams, v, correspondence.mesh_depth_range(mesh, cams[v]), DEPTH_SAMPLES, FEATURE_RES
        )
        for v in range(N_VIEWS)
    ]
    tensorio.write_tensor(
        out / "fused_epipolar.tnsr",
        fusion.epipolar_fuse(feats, cands, emb, params_block.feat).data,
    )

    # keypoint conditioning: project, render the frontal view, encode
    coords, visible = dataprep.project_keypoints(cams, joints)
    _write_json(
        out / "kp" / "projected.json",
        {
            "coords": np.where(visible[..., None], coords, -1.0).tolist(),
            "visible": visible.tolist(),
        },
    )
    kp_img = dataprep.render_keypoint_image(
        coords[front], visible[front], IMAGE_RES, IMAGE_RES, bones=synthetic.HUMAN_BONES
    )
    tensorio.write_tensor(out / "kp" / "image.tnsr", kp_img)
    encoder = fusion.KeypointEncoder.create(CHANNELS, seeds["latent"])
    tensorio.write_tensor(out / "kp" / "encoded.tnsr", fusion.keypoint_encode(kp_img, encoder))

    # pelvis-centered crops and adjusted rig
    others = np.delete(joints, pelvis_idx, axis=0)
    crops = [
        dataprep.compute_crop(cam, others, joints[pelvis_idx], 256, view=vid).to_dict()
        for vid, cam in zip(ids, cams)
    ]
    _write_json(out / "crops.json", crops)
    adjusted = [
        dataprep.apply_crop_to_intrinsics(cam, dataprep.CropSpec(**spec))
        for cam, spec in zip(cams, crops)
    ]
    geometry.save_rig(out / "rig_cropped.json", ids, adjusted)

    # mesh adaptation on a known ground-truth transform
    tf0 = adaptation.initial_transform(cams[front])
    wobble = geometry.axis_angle_to_matrix((0.06, -0.04, 0.05))
    tf_gt = geometry.SimilarityTransform(
        scale=(1.03, 0.97, 1.02),
        rot6d=geometry.matrix_to_rot6d(tf0.rotation() @ wobble),
        translation=(0.02, -0.015, 0.01),
    )
    mono = _inverse_transform_mesh(mesh, tf_gt)
    rasterizer.save_obj(out / "adapt" / "mono_mesh.obj", mono)
    ortho = rasterizer.rasterize_mesh_ortho(mono, IMAGE_RES, IMAGE_RES, bounds=((-1.6, 1.6), (-1.6, 1.6)))
    save_raster(str(out / "adapt" / "ortho"), ortho)
    # the fit consumes the frontal-view raster, whose face/bary records apply
    # to the mono mesh vertex-for-vertex (affine maps commute with barycentric
    # interpolation), so the ground-truth transform zeroes the loss
    frontal_raster = rasterizer.rasterize_mesh(mesh, cams[front], IMAGE_RES, IMAGE_RES)
    save_raster(str(out / "adapt" / "frontal_raster"), frontal_raster)
    views, ps, qs = [], [], []
    targets = [v for v in range(N_VIEWS) if v != front]
    k = 0
    for y in range(0, IMAGE_RES, 8):
        for x in range(0, IMAGE_RES, 8):
            if not frontal_raster.mask[y, x]:
                continue
            p = ((x + 0.5) / IMAGE_RES, (y + 0.5) / IMAGE_RES)
            v = targets[k % len(targets)]
            k += 1
            pt = tf_gt.apply(
                rasterizer.interpolate_point(mono, int(frontal_raster.face_index[y, x]), frontal_raster.bary[y, x])
            )
            try:
                pix = geometry.project_point(cams[v], pt)
            except Exception:
                continue
            q = (pix[0] / IMAGE_RES, pix[1] / IMAGE_RES)
            if not (0.0 <= q[0] <= 1.0 and 0.0 <= q[1] <= 1.0):
                continue
            views.append(v)
            ps.append(p)
            qs.append(q)
    matches = adaptation.MatchSet(frontal_view=front, views=np.array(views), p=np.array(ps), q=np.array(qs))
    adaptation.save_matches(out / "adapt" / "matches.json", matches)
    result = adaptation.fit_transform(
        matches, frontal_raster, mono, cams, adaptation.FitConfig(max_iterations=800, stride=8)
    )
    (out / "adapt" / "result.json").write_text(result.to_json() + "\n", encoding="utf-8")

    # analytic complexity counts for the demo-sized problem
    params = bench.ComplexityParams(
        n_views=N_VIEWS, feature_size=FEATURE_RES, channels=CHANNELS, depth_samples=DEPTH_SAMPLES
    )
    _write_json(
        out / "bench_analytic.json",
        {name: counts.to_dict() for name, counts in bench.complexity_counts(params).items()},
    )
