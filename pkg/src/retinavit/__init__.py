"""Vision transformer fed with every level of an image pyramid."""
from .encoder import EncoderConfig, RetinaViT, ViT
from .posembed import posembed_table, sincos2d
from .pyramid import PyramidSpec, build_pyramid, extract_patches, plan_levels, total_token_count

__all__ = [
    "EncoderConfig", "RetinaViT", "ViT", "posembed_table", "sincos2d", "PyramidSpec",
    "build_pyramid", "extract_patches", "plan_levels", "total_token_count",
]
