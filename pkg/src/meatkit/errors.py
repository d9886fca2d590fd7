"""Exception types shared across the package.

Every data/validation failure raised by meatkit derives from MeatkitError so
callers (notably the CLI) can separate usage errors from data errors.
"""


class MeatkitError(Exception):
    """Base class for all data and validation errors raised by meatkit."""


# geometry
class NonPositiveDepth(MeatkitError):
    """Point lies behind or on the camera plane (camera-frame z <= 1e-12)."""


class DegenerateRotation(MeatkitError):
    """6D rotation input is degenerate (zero or parallel basis vectors)."""


class DegenerateUp(MeatkitError):
    """Viewing direction is parallel to the world up vector."""


# rasterizer
class EmptyMesh(MeatkitError):
    """Mesh has no faces to rasterize."""


class InvalidBary(MeatkitError):
    """Barycentric coordinates do not sum to 1 within tolerance."""


class FaceOutOfRange(MeatkitError):
    """Face index outside the mesh's face list."""


class NonDivisibleResolution(MeatkitError):
    """Resolutions do not form an integer pyramid."""


# correspondence
class ResolutionMismatch(MeatkitError):
    """Per-view inputs disagree on feature resolution or view count."""


class InvalidDepthRange(MeatkitError):
    """Depth range must satisfy 0 < near < far."""


# fusion
class EmptyKeySet(MeatkitError):
    """Attention was called with no keys; caller must fall back to identity."""


class ShapeMismatch(MeatkitError):
    """Tensor shapes are inconsistent for the requested fusion operation."""


class NoMatchingScale(MeatkitError):
    """No reference feature scale matches the working feature resolution."""


# adaptation
class ZeroOrientation(MeatkitError):
    """Body orientation vector is (numerically) zero."""


class NoIntersection(MeatkitError):
    """Pixel does not hit the mesh; the match pair must be filtered out."""


class EmptyMatchSet(MeatkitError):
    """No usable match pairs remain after filtering."""


class TooFewKeypoints(MeatkitError):
    """Camera fitting needs at least 4 keypoint pairs."""


# dataprep
class ZeroExtent(MeatkitError):
    """Projected keypoints have no vertical extent around the pelvis."""


# bench
class BudgetExceeded(MeatkitError):
    """Even the smallest requested benchmark size exceeds the memory budget."""
