from .autoencoder import ae_loss, ae_score, ae_score_map, reconstruct
from .detector import METHODS, Detector
from .encoder import (
    FEATURE_DIM,
    PATCH,
    STRIDE,
    decode,
    encode,
    feature_extent,
    feature_shape,
    init_decoder,
    init_encoder,
    patch_features,
)
from .flow import (
    fit_normalization,
    init_flow,
    nvp_forward,
    nvp_inverse,
    nvp_loss,
    nvp_nll,
    nvp_score,
)
from .svdd import (
    initial_radius,
    svdd_hard_loss,
    svdd_init_center,
    svdd_score,
    svdd_soft_loss,
)

__all__ = [
    "FEATURE_DIM",
    "METHODS",
    "PATCH",
    "STRIDE",
    "Detector",
    "ae_loss",
    "ae_score",
    "ae_score_map",
    "decode",
    "encode",
    "feature_extent",
    "feature_shape",
    "fit_normalization",
    "init_decoder",
    "init_encoder",
    "init_flow",
    "initial_radius",
    "nvp_forward",
    "nvp_inverse",
    "nvp_loss",
    "nvp_nll",
    "nvp_score",
    "patch_features",
    "reconstruct",
    "svdd_hard_loss",
    "svdd_init_center",
    "svdd_score",
    "svdd_soft_loss",
]
