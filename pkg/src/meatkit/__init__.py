"""meatkit: cross-view correspondence and mesh-attention fusion at desk scale.

A calibrated multiview rig, a coarse subject mesh and per-view feature maps
go in; rasterized correspondences, masked cross-view attention and
complexity benchmarks come out. See README.md for the tour and FORMATS.md
for the on-disk formats.
"""

from .adaptation import (
    AdaptationResult,
    FitConfig,
    MatchSet,
    adaptation_loss,
    fit_frontal_camera,
    fit_transform,
    reproject,
    sample_orbit_cameras,
    select_frontal_view,
)
from .bench import ComplexityParams, ComplexityReport, complexity_counts, run_benchmark
from .correspondence import (
    CorrespondenceTable,
    EpipolarCandidates,
    SampleIndexSet,
    build_correspondence_table,
    build_epipolar_candidates,
    grid_sample_indices,
    project_to_views,
)
from .dataprep import CropSpec, apply_crop_to_intrinsics, compute_crop, project_keypoints
from .errors import MeatkitError
from .fusion import (
    AttentionParams,
    FeatureStack,
    FusionStats,
    KeypointEncoder,
    MeatBlockParams,
    MultiScaleFeatures,
    attention,
    dense_mv_fuse,
    epipolar_fuse,
    keypoint_encode,
    meat_block,
    meat_feat,
    meat_vae,
    per_view_self_attention,
)
from .geometry import (
    Camera,
    SimilarityTransform,
    ViewEmbedding,
    camera_center,
    harmonic_embed,
    normalize_to_ndc,
    project_point,
    rot6d_to_matrix,
)
from .rasterizer import (
    AggregatedRaster,
    Mesh,
    RasterMap,
    aggregate_raster,
    interpolate_point,
    rasterize_mesh,
    rasterize_mesh_ortho,
)
from .tensorio import read_tensor, write_tensor

__version__ = "0.1.0"
