"""Masked cross-view attention over feature stacks.

The mesh-attention block fuses per-view U-Net-style features in three
residual stages: cross-view attention over the (at most 4N) correspondence
samples, attention into the reference view's encoded latent features, and
per-view self-attention. Pixels whose ray never hits the mesh, or whose
sample set is entirely invalid, pass through bit-exactly. Dense multiview
and depth-sampled (epipolar) attention are provided as runnable baselines
for complexity comparison.

All feature tensors are float32; key sets are reduced in table order so
results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correspondence import CorrespondenceTable, EpipolarCandidates
from .errors import (
    EmptyKeySet,
    MeatkitError,
    NoMatchingScale,
    NonDivisibleResolution,
    ShapeMismatch,
)

FDT = np.float32


@dataclass
class FusionStats:
    """Element counts of the tensors materialized during a fusion pass.

    q/kv count raw per-query and per-key feature elements (the quantities
    the complexity table models); embed_elements is the concatenation
    overhead of the pose embeddings, reported separately.
    """

    q_elements: int = 0
    kv_elements: int = 0
    embed_elements: int = 0
    attn_map_elements: int = 0

    def add(self, q=0, kv=0, embed=0, attn_map=0):
        self.q_elements += int(q)
        self.kv_elements += int(kv)
        self.embed_elements += int(embed)
        self.attn_map_elements += int(attn_map)


@dataclass(frozen=True)
class FeatureStack:
    """Per-view feature tensors, shape (n_views, channels, height, width)."""

    data: np.ndarray
    view_ids: tuple

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=FDT)
        if d.ndim != 4 or d.shape[0] < 1:
            raise ShapeMismatch("feature stack must be (n_views, C, H, W)")
        if not np.isfinite(d).all():
            raise MeatkitError("feature stack must be finite")
        ids = tuple(int(i) for i in self.view_ids)
        if len(ids) != d.shape[0]:
            raise ShapeMismatch("view_ids length must match the view axis")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "view_ids", ids)

    @property
    def n_views(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def spatial(self) -> tuple:
        return self.data.shape[2], self.data.shape[3]


@dataclass(frozen=True)
class MultiScaleFeatures:
    """Encoded reference-view features, ordered coarse to fine."""

    scales: tuple

    def __post_init__(self):
        scales = tuple(np.ascontiguousarray(s, dtype=FDT) for s in self.scales)
        if not scales:
            raise MeatkitError("need at least one scale")
        for s in scales:
            if s.ndim != 3:
                raise ShapeMismatch("each scale must be (C, H, W)")
        hs = [s.shape[1] for s in scales]
        ws = [s.shape[2] for s in scales]
        if any(hs[i] >= hs[i + 1] or ws[i] >= ws[i + 1] for i in range(len(scales) - 1)):
            raise MeatkitError("scales must strictly increase in resolution")
        if any(hs[-1] % h or ws[-1] % w for h, w in zip(hs, ws)):
            raise MeatkitError("every scale must divide the finest resolution")
        for s in scales:
            s.setflags(write=False)
        object.__setattr__(self, "scales", scales)


@dataclass(frozen=True)
class AttentionParams:
    """Projection matrices for one attention stage.

    w_q/w_k/w_v are (d_head, d_in); w_out is (channels, d_head). d_in is
    channels + embedding length for the cross-view stages and plain
    channels for self-attention; one head with d_head = channels.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_out: np.ndarray

    def __post_init__(self):
        mats = {}
        for name in ("w_q", "w_k", "w_v", "w_out"):
            m = np.ascontiguousarray(getattr(self, name), dtype=FDT)
            if m.ndim != 2 or not np.isfinite(m).all():
                raise ShapeMismatch(f"{name} must be a finite 2D matrix")
            mats[name] = m
        if mats["w_k"].shape != mats["w_q"].shape or mats["w_v"].shape != mats["w_q"].shape:
            raise ShapeMismatch("w_q, w_k, w_v must share their shape")
        if mats["w_out"].shape[1] != mats["w_q"].shape[0]:
            raise ShapeMismatch("w_out must consume the head dimension")
        for name, m in mats.items():
            m.setflags(write=False)
            object.__setattr__(self, name, m)

    @property
    def d_head(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def create(cls, channels: int, embed_dim: int, seed: int, zero_out: bool = False) -> "AttentionParams":
        """Seeded Gaussian init; d_head = channels, d_in = channels + embed_dim."""
        rng = np.random.default_rng(seed)
        d_in = channels + embed_dim
        scale = 1.0 / np.sqrt(d_in)
        w = lambda rows, cols, s: (rng.standard_normal((rows, cols)) * s).astype(FDT)  # noqa: E731
        return cls(
            w_q=w(channels, d_in, scale),
            w_k=w(channels, d_in, scale),
            w_v=w(channels, d_in, scale),
            w_out=np.zeros((channels, channels), dtype=FDT) if zero_out
            else w(channels, channels, 1.0 / np.sqrt(channels)),
        )


@dataclass(frozen=True)
class MeatBlockParams:
    """Separate projections for the three stages of the fusion block."""

    feat: AttentionParams
    vae: AttentionParams
    self_attn: AttentionParams

    @classmethod
    def create(cls, channels: int, embed_dim: int, seed: int, zero_out: bool = False) -> "MeatBlockParams":
        ss = np.random.SeedSequence(seed).spawn(3)
        mk = lambda s, e: AttentionParams.create(channels, e, int(s.generate_state(1)[0]), zero_out)  # noqa: E731
        return cls(feat=mk(ss[0], embed_dim), vae=mk(ss[1], embed_dim), self_attn=mk(ss[2], 0))


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis; all -inf rows yield zero weights."""
    mx = logits.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(logits - mx)
    denom = e.sum(axis=-1, keepdims=True)
    return np.where(denom > 0, e / np.where(denom > 0, denom, 1.0), 0.0)


def attention(q, keys, values) -> np.ndarray:
    """Scaled dot-product attention for a single query vector."""
    k = np.asarray(keys, dtype=FDT)
    v = np.asarray(values, dtype=FDT)
    if k.ndim != 2 or k.shape[0] == 0:
        raise EmptyKeySet("attention needs at least one key")
    if v.shape[0] != k.shape[0]:
        raise ShapeMismatch("keys and values must align")
    qv = np.asarray(q, dtype=FDT).reshape(-1)
    logits = (k @ qv) / FDT(np.sqrt(qv.shape[0]))
    return _softmax_rows(logits[None, :])[0] @ v


def _check_embeddings(embeddings, n_views: int) -> np.ndarray:
    emb = np.ascontiguousarray(np.asarray(embeddings, dtype=FDT))
    if emb.ndim == 1:
        raise ShapeMismatch("embeddings must be (n_views, embed_dim)")
    if emb.shape[0] != n_views:
        raise ShapeMismatch("one embedding per view required")
    return emb


def _gather_keys(data: np.ndarray, idx: np.ndarray, valid: np.ndarray, src_views: np.ndarray):
    """Gather key features for sample indices.

    data is (N, C, H, W); idx (..., 2) carries (x, y); src_views broadcasts
    against idx[..., 0]. Invalid indices are clipped for the gather only.
    """
    n, c, h, w = data.shape
    kx = np.clip(idx[..., 0], 0, w - 1)
    ky = np.clip(idx[..., 1], 0, h - 1)
    return data[src_views, :, ky, kx]  # (..., C)


def _masked_attention(q_in, kv_in, valid, params: AttentionParams, stats_map_elems, stats: FusionStats | None):
    """Shared core: project, mask invalid keys, softmax, weighted values.

    q_in: (..., d_in); kv_in: (..., K, d_in); valid: (..., K).
    Returns (delta (..., channels), active (...,) bool).
    """
    if q_in.shape[-1] != params.d_in or kv_in.shape[-1] != params.d_in:
        raise ShapeMismatch(
            f"attention params expect d_in={params.d_in}, got query {q_in.shape[-1]} / keys {kv_in.shape[-1]}"
        )
    qp = q_in @ params.w_q.T
    kp = kv_in @ params.w_k.T
    vp = kv_in @ params.w_v.T
    logits = np.einsum("...d,...kd->...k", qp, kp) / FDT(np.sqrt(params.d_head))
    logits = np.where(valid, logits, -np.inf)
    weights = _softmax_rows(logits)
    if stats is not None:
        stats.add(attn_map=stats_map_elems)
    out = np.einsum("...k,...kd->...d", weights, vp)
    delta = out @ params.w_out.T
    return delta, valid.any(axis=-1)


def meat_feat(
    features: FeatureStack,
    table: CorrespondenceTable,
    embeddings,
    params: AttentionParams,
    stats: FusionStats | None = None,
) -> FeatureStack:
    """Cross-view attention over correspondence samples, masked residual.

    For each target pixel the query is the pixel feature concatenated with
    its view's pose embedding; keys/values are the valid sampled features of
    all views concatenated with their views' embeddings. Pixels with M_p = 0
    or an empty valid key set are returned bit-exactly unchanged.
    """
    f = features.data
    n, c, h, w = f.shape
    if table.n_views != n or (table.feature_height, table.feature_width) != (h, w):
        raise ShapeMismatch("table does not match the feature stack")
    emb = _check_embeddings(embeddings, n)
    src = np.asarray(table.source_views, dtype=np.int64)[None, None, None, :, None]
    key_feat = _gather_keys(f, table.indices, table.valid, src)  # (N,H,W,N,4,C)
    key_emb = np.broadcast_to(emb[np.asarray(table.source_views)][None, None, None, :, None, :], key_feat.shape[:-1] + (emb.shape[1],))
    if stats is not None:
        stats.add(q=n * h * w * c, kv=key_feat.size, embed=n * h * w * emb.shape[1] + key_emb.size)
    kv_in = np.concatenate([key_feat, key_emb], axis=-1).reshape(n, h, w, n * 4, c + emb.shape[1])
    ft = np.moveaxis(f, 1, 3)  # (N, H, W, C)
    q_in = np.concatenate([ft, np.broadcast_to(emb[:, None, None, :], (n, h, w, emb.shape[1]))], axis=-1)
    valid = table.valid.reshape(n, h, w, n * 4)
    delta, has_keys = _masked_attention(q_in, kv_in, valid, params, n * h * w * n * 4, stats)
    active = table.mask & has_keys
    out = np.moveaxis(f, 1, 3).copy()
    out[active] = ft[active] + delta[active]
    return FeatureStack(data=np.moveaxis(out, 3, 1), view_ids=features.view_ids)


def meat_vae(
    features: FeatureStack,
    ref_features: MultiScaleFeatures,
    table: CorrespondenceTable,
    ref_view: int,
    embeddings,
    params: AttentionParams,
    stats: FusionStats | None = None,
) -> FeatureStack:
    """Attention exclusively into the reference view's encoded features.

    Keys are the four grid samples of the reference view at the scale whose
    resolution (and channel count) matches the working feature map. Masked
    or unsampled pixels pass through bit-exactly.
    """
    f = features.data
    n, c, h, w = f.shape
    if table.n_views != n or (table.feature_height, table.feature_width) != (h, w):
        raise ShapeMismatch("table does not match the feature stack")
    if not 0 <= ref_view < n:
        raise ShapeMismatch(f"ref_view {ref_view} outside stack of {n} views")
    emb = _check_embeddings(embeddings, n)
    scale = None
    for s in ref_features.scales:
        if s.shape == (c, h, w):
            scale = s
            break
    if scale is None:
        raise NoMatchingScale(f"no reference scale of shape ({c}, {h}, {w})")
    src_axis = table.source_views.index(ref_view)
    idx = table.indices[:, :, :, src_axis]  # (N, H, W, 4, 2)
    valid = table.valid[:, :, :, src_axis]
    kx = np.clip(idx[..., 0], 0, w - 1)
    ky = np.clip(idx[..., 1], 0, h - 1)
    key_feat = np.moveaxis(scale[:, ky, kx], 0, -1)  # (N, H, W, 4, C)
    key_emb = np.broadcast_to(emb[ref_view], key_feat.shape[:-1] + (emb.shape[1],))
    if stats is not None:
        stats.add(q=n * h * w * c, kv=key_feat.size, embed=n * h * w * emb.shape[1] + key_emb.size)
    kv_in = np.concatenate([key_feat, key_emb], axis=-1)
    ft = np.moveaxis(f, 1, 3)
    q_in = np.concatenate([ft, np.broadcast_to(emb[:, None, None, :], (n, h, w, emb.shape[1]))], axis=-1)
    delta, has_keys = _masked_attention(q_in, kv_in, valid, params, n * h * w * 4, stats)
    active = table.mask & has_keys
    out = np.moveaxis(f, 1, 3).copy()
    out[active] = ft[active] + delta[active]
    return FeatureStack(data=np.moveaxis(out, 3, 1), view_ids=features.view_ids)


def _shared_attention(q_in: np.ndarray, kv_in: np.ndarray, params: AttentionParams,
                      stats: FusionStats | None) -> np.ndarray:
    """Attention where all queries share one key set.

    q_in is (M, d_in), kv_in (K, d_in); returns the (M, channels) residual
    delta. The (M, K) logit map is the attention-map buffer the complexity
    table models, so its element count is recorded.
    """
    if q_in.shape[-1] != params.d_in or kv_in.shape[-1] != params.d_in:
        raise ShapeMismatch(
            f"attention params expect d_in={params.d_in}, got query {q_in.shape[-1]} / keys {kv_in.shape[-1]}"
        )
    qp = q_in @ params.w_q.T
    kp = kv_in @ params.w_k.T
    vp = kv_in @ params.w_v.T
    logits = qp @ kp.T / FDT(np.sqrt(params.d_head))
    if stats is not None:
        stats.add(attn_map=logits.size)
    weights = _softmax_rows(logits)
    return (weights @ vp) @ params.w_out.T


def per_view_self_attention(
    features: FeatureStack,
    params: AttentionParams,
    stats: FusionStats | None = None,
) -> FeatureStack:
    """Full spatial self-attention independently per view, residual added."""
    f = features.data
    n, c, h, w = f.shape
    out = np.empty_like(f)
    for v in range(n):
        tokens = f[v].reshape(c, h * w).T  # (S^2, C)
        if stats is not None:
            stats.add(q=tokens.size, kv=tokens.size)
        delta = _shared_attention(tokens, tokens, params, stats)
        out[v] = (tokens + delta).T.reshape(c, h, w)
    return FeatureStack(data=out, view_ids=features.view_ids)


def dense_mv_fuse(
    features: FeatureStack,
    embeddings,
    params: AttentionParams,
    stats: FusionStats | None = None,
) -> FeatureStack:
    """Dense baseline: every pixel attends over all pixels of all views."""
    f = features.data
    n, c, h, w = f.shape
    emb = _check_embeddings(embeddings, n)
    all_tokens = np.moveaxis(f, 1, 3).reshape(n * h * w, c)
    out = np.empty_like(f)
    for v in range(n):
        # key tensor is built per target view, matching the N C (N S^2) accounting
        all_emb = np.repeat(emb, h * w, axis=0)
        kv_in = np.concatenate([all_tokens, all_emb], axis=-1)  # (N*S^2, d_in)
        tokens = f[v].reshape(c, h * w).T
        if stats is not None:
            stats.add(q=tokens.size, kv=all_tokens.size, embed=tokens.shape[0] * emb.shape[1] + all_emb.size)
        q_in = np.concatenate([tokens, np.broadcast_to(emb[v], (tokens.shape[0], emb.shape[1]))], axis=-1)
        delta = _shared_attention(q_in, kv_in, params, stats)
        out[v] = (tokens + delta).T.reshape(c, h, w)
    return FeatureStack(data=out, view_ids=features.view_ids)


def epipolar_fuse(
    features: FeatureStack,
    candidates: list[EpipolarCandidates],
    embeddings,
    params: AttentionParams,
    stats: FusionStats | None = None,
) -> FeatureStack:
    """Depth-sampling baseline: keys are the N*K*4 candidates per pixel."""
    f = features.data
    n, c, h, w = f.shape
    if len(candidates) != n:
        raise ShapeMismatch("need one candidate set per view")
    emb = _check_embeddings(embeddings, n)
    out = np.moveaxis(f, 1, 3).copy()
    for v, cand in enumerate(candidates):
        if cand.target_view != v or (cand.feature_height, cand.feature_width) != (h, w) or cand.n_views != n:
            raise ShapeMismatch("candidate set does not match the feature stack")
        k = cand.depths.shape[0]
        src = np.arange(n, dtype=np.int64)[None, None, None, :, None]
        key_feat = _gather_keys(f, cand.indices, cand.valid, src)  # (H, W, K, N, 4, C)
        key_emb = np.broadcast_to(emb[None, None, None, :, None, :], key_feat.shape[:-1] + (emb.shape[1],))
        if stats is not None:
            stats.add(q=h * w * c, kv=key_feat.size, embed=h * w * emb.shape[1] + key_emb.size)
        kv_in = np.concatenate([key_feat, key_emb], axis=-1).reshape(h, w, k * n * 4, c + emb.shape[1])
        ft = np.moveaxis(f[v], 0, 2)
        q_in = np.concatenate([ft, np.broadcast_to(emb[v], (h, w, emb.shape[1]))], axis=-1)
        valid = cand.valid.reshape(h, w, k * n * 4)
        delta, has_keys = _masked_attention(q_in, kv_in, valid, params, h * w * k * n * 4, stats)
        out[v][has_keys] += delta[has_keys]
    return FeatureStack(data=np.moveaxis(out, 3, 1), view_ids=features.view_ids)


def meat_block(
    features: FeatureStack,
    table: CorrespondenceTable,
    ref_features: MultiScaleFeatures,
    ref_view: int,
    embeddings,
    params: MeatBlockParams,
    stats: FusionStats | None = None,
) -> FeatureStack:
    """Full fusion block: cross-view, reference-latent, then self-attention."""
    x = meat_feat(features, table, embeddings, params.feat, stats)
    x = meat_vae(x, ref_features, table, ref_view, embeddings, params.vae, stats)
    return per_view_self_attention(x, params.self_attn, stats)


# --- reference-latent encoder and keypoint conditioning ---


def _conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """3x3 (or 1x1) convolution with zero padding for odd kernels."""
    co, ci, kh, kw = weight.shape
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    return (np.einsum("ihwkl,oikl->ohw", win, weight, optimize=True) + bias[:, None, None]).astype(FDT)


@dataclass(frozen=True)
class KeypointEncoder:
    """Three stride-2 stages and a zero-initialized output projection.

    The spatial downsample factor is exactly 8; at construction the output
    projection is all-zero so the conditioning integrates smoothly.
    """

    stages: tuple
    proj_w: np.ndarray
    proj_b: np.ndarray

    def __post_init__(self):
        if len(self.stages) != 3:
            raise MeatkitError("encoder needs exactly three stride-2 stages")

    @property
    def out_channels(self) -> int:
        return self.proj_w.shape[0]

    @classmethod
    def create(cls, out_channels: int, seed: int, widths=(16, 32, 64)) -> "KeypointEncoder":
        rng = np.random.default_rng(seed)
        stages = []
        c_in = 3
        for c_out in widths:
            w = (rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (c_in * 9))).astype(FDT)
            b = np.zeros(c_out, dtype=FDT)
            stages.append((w, b))
            c_in = c_out
        proj_w = np.zeros((out_channels, c_in, 1, 1), dtype=FDT)
        proj_b = np.zeros(out_channels, dtype=FDT)
        return cls(stages=tuple(stages), proj_w=proj_w, proj_b=proj_b)


def keypoint_encode(kp_image: np.ndarray, encoder: KeypointEncoder) -> np.ndarray:
    """Encode a (3, H, W) keypoint rendering to (C, H/8, W/8).

    With a freshly constructed encoder the result is exactly zero; the
    caller adds it onto same-shape U-Net features.
    """
    x = np.ascontiguousarray(kp_image, dtype=FDT)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeMismatch("keypoint image must be (3, H, W)")
    if x.shape[1] % 8 or x.shape[2] % 8:
        raise NonDivisibleResolution("keypoint image size must be divisible by 8")
    for w, b in encoder.stages:
        x = np.maximum(_conv2d(x, w, b, stride=2), 0.0)
    return _conv2d(x, encoder.proj_w, encoder.proj_b, stride=1)


def encode_reference_latent(latent: np.ndarray, channels: int, n_scales: int, seed: int) -> MultiScaleFeatures:
    """Run the fixed seeded residual encoder over a reference latent.

    Produces n_scales feature maps, each downsampled 2x from the previous
    and projected to ``channels`` channels, returned coarse to fine. The
    weights are a deterministic function of the seed; nothing is trained.
    """
    x = np.ascontiguousarray(latent, dtype=FDT)
    if x.ndim != 3:
        raise ShapeMismatch("latent must be (C, H, W)")
    if x.shape[1] % (2 ** n_scales) or x.shape[2] % (2 ** n_scales):
        raise NonDivisibleResolution("latent size must tile the scale pyramid")
    rng = np.random.default_rng(seed)

    def conv_w(co, ci, k):
        return (rng.standard_normal((co, ci, k, k)) * np.sqrt(2.0 / (ci * k * k))).astype(FDT)

    scales = []
    c_in = x.shape[0]
    for _ in range(n_scales):
        w_down = conv_w(channels, c_in, 3)
        x = np.maximum(_conv2d(x, w_down, np.zeros(channels, dtype=FDT), stride=2), 0.0)
        w1 = conv_w(channels, channels, 3)
        w2 = conv_w(channels, channels, 3)
        h = np.maximum(_conv2d(x, w1, np.zeros(channels, dtype=FDT)), 0.0)
        x = x + _conv2d(h, w2, np.zeros(channels, dtype=FDT))
        scales.append(x)
        c_in = channels
    return MultiScaleFeatures(scales=tuple(reversed(scales)))
