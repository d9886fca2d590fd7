"""Batch command-line front door.

Subcommands wire the library together over stable on-disk formats (see
FORMATS.md). Exit codes: 0 success, 1 usage error, 2 data/validation error.
Config precedence: flags > MEATKIT_* environment variables > defaults; all
randomness flows from a single --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import adaptation, bench, correspondence, dataprep, fusion, geometry, rasterizer, synthetic, tensorio
from .errors import MeatkitError

USAGE_ERROR = 1
DATA_ERROR = 2


def _env(name: str, cast, default):
    raw = os.environ.get(f"MEATKIT_{name}")
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError as e:
        raise MeatkitError(f"bad MEATKIT_{name}={raw!r}: {e}") from e


def _resolve(flag_value, env_name: str, cast, default):
    if flag_value is not None:
        return flag_value
    return _env(env_name, cast, default)


def _vec3(text: str) -> np.ndarray:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected x,y,z")
    return np.array(parts)


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p]


def _apply_threads(n: int) -> None:
    # numpy's BLAS pools are sized at import; this is a best-effort cap and
    # results never depend on it.
    if n <= 0:
        return
    try:
        from threadpoolctl import threadpool_limits  # type: ignore

        threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


# --- raster / aggregate / table file helpers (formats in FORMATS.md) ---


def save_raster(prefix: str, r: rasterizer.RasterMap) -> None:
    tensorio.write_tensor(f"{prefix}.mask.tnsr", r.mask.astype(np.uint8))
    tensorio.write_tensor(f"{prefix}.face.tnsr", r.face_index)
    tensorio.write_tensor(f"{prefix}.bary.tnsr", r.bary)
    tensorio.write_tensor(f"{prefix}.depth.tnsr", r.depth)


def load_raster(prefix: str) -> rasterizer.RasterMap:
    mask = tensorio.read_tensor(f"{prefix}.mask.tnsr").astype(bool)
    face = tensorio.read_tensor(f"{prefix}.face.tnsr")
    bary = tensorio.read_tensor(f"{prefix}.bary.tnsr")
    depth = tensorio.read_tensor(f"{prefix}.depth.tnsr")
    h, w = mask.shape
    return rasterizer.RasterMap(width=w, height=h, mask=mask, face_index=face, bary=bary, depth=depth)


def save_aggregate(prefix: str, a: rasterizer.AggregatedRaster) -> None:
    tensorio.write_tensor(f"{prefix}.point.tnsr", a.point)
    tensorio.write_tensor(f"{prefix}.mask.tnsr", a.mask.astype(np.uint8))
    Path(f"{prefix}.meta.json").write_text(
        json.dumps({"source_factor": a.source_factor}, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_aggregate(prefix: str) -> rasterizer.AggregatedRaster:
    point = tensorio.read_tensor(f"{prefix}.point.tnsr")
    mask = tensorio.read_tensor(f"{prefix}.mask.tnsr").astype(bool)
    meta = json.loads(Path(f"{prefix}.meta.json").read_text(encoding="utf-8"))
    h, w = mask.shape
    return rasterizer.AggregatedRaster(
        width=w, height=h, point=point, mask=mask, source_factor=meta["source_factor"]
    )


def save_table(prefix: str, t: correspondence.CorrespondenceTable) -> None:
    tensorio.write_tensor(f"{prefix}.indices.tnsr", t.indices)
    tensorio.write_tensor(f"{prefix}.valid.tnsr", t.valid.astype(np.uint8))


def load_table(prefix: str) -> correspondence.CorrespondenceTable:
    indices = tensorio.read_tensor(f"{prefix}.indices.tnsr")
    valid = tensorio.read_tensor(f"{prefix}.valid.tnsr").astype(bool)
    n, h, w = valid.shape[0], valid.shape[1], valid.shape[2]
    # M_p is not stored: a masked pixel has an all-invalid row, which fuses
    # identically to M_p = 0, so the or-reduction is behaviorally exact.
    mask = valid.any(axis=(3, 4))
    return correspondence.CorrespondenceTable(
        n_views=n, feature_width=w, feature_height=h, indices=indices, valid=valid, mask=mask
    )


def _stage_seeds(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("feat", "vae", "self", "latent")
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


# --- subcommand handlers ---


def _cmd_rasterize(args) -> int:
    mesh = rasterizer.load_obj(args.mesh)
    if args.ortho:
        r = rasterizer.rasterize_mesh_ortho(mesh, args.width, args.height)
    else:
        ids, cams = geometry.load_rig(args.rig)
        if args.view not in ids:
            raise MeatkitError(f"view {args.view} not in rig {args.rig}")
        r = rasterizer.rasterize_mesh(mesh, cams[ids.index(args.view)], args.width, args.height)
    save_raster(args.out_prefix, r)
    return 0


def _cmd_aggregate(args) -> int:
    mesh = rasterizer.load_obj(args.mesh)
    r = load_raster(args.raster_prefix)
    a = rasterizer.aggregate_raster(r, mesh, args.width, args.height)
    save_aggregate(args.out_prefix, a)
    return 0


def _cmd_correspond(args) -> int:
    ids, cams = geometry.load_rig(args.rig)
    if len(args.agg) != len(cams):
        raise MeatkitError(f"need one --agg per view ({len(cams)}), got {len(args.agg)}")
    aggs = [load_aggregate(p) for p in args.agg]
    table = correspondence.build_correspondence_table(aggs, cams)
    save_table(args.out_prefix, table)
    return 0


def _cmd_fuse(args) -> int:
    seed = _resolve(args.seed, "SEED", int, 0)
    ids, cams = geometry.load_rig(args.rig)
    feats = tensorio.read_tensor(args.features)
    if feats.ndim != 4:
        raise MeatkitError("features tensor must be (n_views, C, H, W)")
    stack = fusion.FeatureStack(data=feats, view_ids=tuple(ids))
    n, c, h, w = stack.data.shape
    if n != len(cams):
        raise MeatkitError("feature view count disagrees with the rig")
    emb = geometry.rig_view_embeddings(cams).astype(np.float32)
    seeds = _stage_seeds(seed)
    params_self = fusion.AttentionParams.create(c, 0, seeds["self"])
    stats = fusion.FusionStats()
    if args.scheme == "self":
        out = fusion.per_view_self_attention(stack, params_self, stats)
    elif args.scheme == "dense":
        out = fusion.dense_mv_fuse(stack, emb, fusion.AttentionParams.create(c, emb.shape[1], seeds["feat"]), stats)
    elif args.scheme == "epipolar":
        if not args.mesh:
            raise MeatkitError("--scheme epipolar requires --mesh for the depth range")
        mesh = rasterizer.load_obj(args.mesh)
        cands = [
            correspondence.build_epipolar_candidates(
                cams, v, correspondence.mesh_depth_range(mesh, cams[v]), args.depth_samples, h
            )
            for v in range(n)
        ]
        out = fusion.epipolar_fuse(stack, cands, emb, fusion.AttentionParams.create(c, emb.shape[1], seeds["feat"]), stats)
    else:  # mesh
        if not args.table:
            raise MeatkitError("--scheme mesh requires --table")
        table = load_table(args.table)
        params = fusion.MeatBlockParams(
            feat=fusion.AttentionParams.create(c, emb.shape[1], seeds["feat"]),
            vae=fusion.AttentionParams.create(c, emb.shape[1], seeds["vae"]),
            self_attn=params_self,
        )
        rng = np.random.default_rng(seeds["latent"])
        latent = rng.standard_normal((4, h * 4, w * 4)).astype(np.float32)
        ref_scales = fusion.encode_reference_latent(latent, c, 2, seeds["latent"])
        ref_view = args.ref_view if args.ref_view is not None else 0
        out = fusion.meat_block(stack, table, ref_scales, ref_view, emb, params, stats)
    tensorio.write_tensor(args.out, out.data)
    print(
        f"fused scheme={args.scheme} q={stats.q_elements} kv={stats.kv_elements} "
        f"map={stats.attn_map_elements}"
    )
    return 0


def _cmd_adapt(args) -> int:
    matches = adaptation.load_matches(args.matches)
    raster = load_raster(args.raster_prefix)
    mesh = rasterizer.load_obj(args.mesh)
    _, cams = geometry.load_rig(args.rig)
    cfg = adaptation.FitConfig(
        max_iterations=args.max_iterations, stride=args.stride, initial_step=args.step
    )
    result = adaptation.fit_transform(matches, raster, mesh, cams, cfg)
    Path(args.out).write_text(result.to_json() + "\n", encoding="utf-8")
    print(f"adapt loss={result.final_loss:.6e} iterations={result.iterations} converged={result.converged}")
    return 0


def _cmd_select_front(args) -> int:
    ids, cams = geometry.load_rig(args.rig)
    idx = adaptation.select_frontal_view(cams, args.pelvis, args.orientation)
    print(ids[idx])
    return 0


def _cmd_crop(args) -> int:
    ids, cams = geometry.load_rig(args.rig)
    joints, pelvis_idx, _ = dataprep.load_keypoints(args.keypoints)
    others = np.delete(joints, pelvis_idx, axis=0)
    crops = []
    adjusted = []
    for vid, cam in zip(ids, cams):
        spec = dataprep.compute_crop(cam, others, joints[pelvis_idx], args.output_size, view=vid)
        crops.append(spec.to_dict())
        adjusted.append(dataprep.apply_crop_to_intrinsics(cam, spec))
    Path(f"{args.out_prefix}.crops.json").write_text(json.dumps(crops, indent=2, sort_keys=True) + "\n",
                                                     encoding="utf-8")
    geometry.save_rig(f"{args.out_prefix}.rig.json", ids, adjusted)
    return 0


def _cmd_orbit(args) -> int:
    cams = adaptation.sample_orbit_cameras(
        args.pelvis, args.distance, args.elevation, args.fov, args.count,
        width=args.width, height=args.height,
    )
    geometry.save_rig(args.out, list(range(args.count)), cams)
    return 0


def _cmd_bench(args) -> int:
    seed = _resolve(args.seed, "SEED", int, 0)
    budget_mb = _resolve(args.budget_mb, "MEM_BUDGET_MB", int, 4096)
    schemes = args.schemes.split(",")
    sizes = [
        bench.ComplexityParams(
            n_views=args.views, feature_size=s, channels=args.channels, depth_samples=args.depth_samples
        )
        for s in _int_list(args.sizes)
    ]
    report = bench.run_benchmark(schemes, sizes, seed=seed, budget_bytes=budget_mb << 20)
    print(bench.format_table(report))
    if args.out:
        # timing and peak-memory measurements stay out of artifacts so
        # re-runs are byte-identical; the stdout table carries both
        Path(args.out).write_text(
            json.dumps(report.to_dict(include_measurements=False), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return 0


def _cmd_demo(args) -> int:
    from . import demo

    seed = _resolve(args.seed, "SEED", int, 0)
    demo.run_demo(Path(args.out), seed)
    print(f"demo artifacts written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meatkit", description="mesh-attention correspondence toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global RNG seed (env MEATKIT_SEED, default 0)")
    common.add_argument("--threads", type=int, default=None, help="cap internal parallelism, 0 = hardware default")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("rasterize", help="mesh + camera -> raster tensors", parents=[common])
    q.add_argument("--mesh", required=True)
    q.add_argument("--rig")
    q.add_argument("--view", type=int, default=0)
    q.add_argument("--ortho", action="store_true", help="frontal parallel-ray raster (no rig needed)")
    q.add_argument("--width", type=int, required=True)
    q.add_argument("--height", type=int, required=True)
    q.add_argument("--out-prefix", required=True)
    q.set_defaults(func=_cmd_rasterize)

    q = sub.add_parser("aggregate", help="raster + mesh -> feature-resolution aggregate", parents=[common])
    q.add_argument("--raster-prefix", required=True)
    q.add_argument("--mesh", required=True)
    q.add_argument("--width", type=int, required=True)
    q.add_argument("--height", type=int, required=True)
    q.add_argument("--out-prefix", required=True)
    q.set_defaults(func=_cmd_aggregate)

    q = sub.add_parser("correspond", help="aggregates + rig -> correspondence table", parents=[common])
    q.add_argument("--rig", required=True)
    q.add_argument("--agg", action="append", required=True, help="aggregate prefix, once per view in id order")
    q.add_argument("--out-prefix", required=True)
    q.set_defaults(func=_cmd_correspond)

    q = sub.add_parser("fuse", help="features + table + rig -> fused features", parents=[common])
    q.add_argument("--features", required=True)
    q.add_argument("--rig", required=True)
    q.add_argument("--scheme", choices=("mesh", "dense", "epipolar", "self"), default="mesh")
    q.add_argument("--table", help="correspondence table prefix (mesh scheme)")
    q.add_argument("--mesh", help="OBJ mesh for the epipolar depth range")
    q.add_argument("--depth-samples", type=int, default=8)
    q.add_argument("--ref-view", type=int, default=None)
    q.add_argument("--out", required=True)
    q.set_defaults(func=_cmd_fuse)

    q = sub.add_parser("adapt", help="matches + ortho raster + rig -> similarity transform", parents=[common])
    q.add_argument("--matches", required=True)
    q.add_argument("--raster-prefix", required=True)
    q.add_argument("--mesh", required=True)
    q.add_argument("--rig", required=True)
    q.add_argument("--stride", type=int, default=4)
    q.add_argument("--max-iterations", type=int, default=5000)
    q.add_argument("--step", type=float, default=0.1)
    q.add_argument("--out", required=True)
    q.set_defaults(func=_cmd_adapt)

    q = sub.add_parser("select-front", help="rig + pelvis + orientation -> frontal view id", parents=[common])
    q.add_argument("--rig", required=True)
    q.add_argument("--pelvis", type=_vec3, required=True)
    q.add_argument("--orientation", type=_vec3, required=True)
    q.set_defaults(func=_cmd_select_front)

    q = sub.add_parser("crop", help="rig + keypoints -> crop specs + adjusted rig", parents=[common])
    q.add_argument("--rig", required=True)
    q.add_argument("--keypoints", required=True)
    q.add_argument("--output-size", type=int, required=True)
    q.add_argument("--out-prefix", required=True)
    q.set_defaults(func=_cmd_crop)

    q = sub.add_parser("orbit", help="pelvis + ring parameters -> rig", parents=[common])
    q.add_argument("--pelvis", type=_vec3, required=True)
    q.add_argument("--distance", type=float, required=True)
    q.add_argument("--elevation", type=float, default=0.0)
    q.add_argument("--fov", type=float, default=0.9)
    q.add_argument("--count", type=int, required=True)
    q.add_argument("--width", type=int, default=1024)
    q.add_argument("--height", type=int, default=1024)
    q.add_argument("--out", required=True)
    q.set_defaults(func=_cmd_orbit)

    q = sub.add_parser("bench", help="complexity counts + measured fusion benchmark", parents=[common])
    q.add_argument("--schemes", default="mesh,dense,epipolar,self")
    q.add_argument("--sizes", default="8,16,32", help="comma-separated feature sizes S")
    q.add_argument("--views", type=int, default=4)
    q.add_argument("--channels", type=int, default=8)
    q.add_argument("--depth-samples", type=int, default=8)
    q.add_argument("--budget-mb", type=int, default=None, help="memory budget (env MEATKIT_MEM_BUDGET_MB)")
    q.add_argument("--out")
    q.set_defaults(func=_cmd_bench)

    q = sub.add_parser("demo", help="seeded end-to-end synthetic pipeline", parents=[common])
    q.add_argument("--out", required=True)
    q.set_defaults(func=_cmd_demo)
    return p


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else USAGE_ERROR
    try:
        _apply_threads(_resolve(args.threads, "THREADS", int, 0))
        return args.func(args)
    except MeatkitError as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_ERROR
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return DATA_ERROR


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
