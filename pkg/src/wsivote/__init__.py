"""Multi-scale tumour segmentation of whole-slide images by seamless tiling and voting."""

__version__ = "0.1.0"

from .colorspace import BackgroundThreshold, ColorStats, image_stats, partial_normalize  # noqa: E402
from .fusion import VoteConfig, fuse, vote  # noqa: E402
from .metrics import directed_hausdorff, evaluate, sweep  # noqa: E402
from .pyramid import build_stack, pyr_down  # noqa: E402
from .tiling import assemble, make_plan, weight_map  # noqa: E402

__all__ = [
    "BackgroundThreshold", "ColorStats", "VoteConfig", "assemble", "build_stack",
    "directed_hausdorff", "evaluate", "fuse", "image_stats", "make_plan",
    "partial_normalize", "pyr_down", "sweep", "vote", "weight_map",
]
