"""Training-free stylized abstraction engine.

Distills a subject photo into dual text prompts through a vision-language
feedback loop, performs cross-domain latent reversal with controlled
rectified-flow integration under style-dependent guidance windows, and
evaluates results with KID, cosine scores, and a judge-based benchmark.
"""

from .flow import (
    Direction,
    FlowTrajectory,
    InversionConfig,
    ScheduleWindow,
    conditional_drift,
    cross_domain_reversal,
    eta_at,
    gaussian_pair_field,
    generate,
    invert,
    point_target_field,
)
from .latents import Latent, load_latent, load_latents, save_latent, save_latents
from .metrics import FeatureSet, KidEstimate, cosine_score, kid, mmd2_unbiased, poly_kernel

__version__ = "0.1.0"

__all__ = [
    "Direction",
    "FlowTrajectory",
    "InversionConfig",
    "ScheduleWindow",
    "conditional_drift",
    "cross_domain_reversal",
    "eta_at",
    "gaussian_pair_field",
    "generate",
    "invert",
    "point_target_field",
    "Latent",
    "load_latent",
    "load_latents",
    "save_latent",
    "save_latents",
    "FeatureSet",
    "KidEstimate",
    "cosine_score",
    "kid",
    "mmd2_unbiased",
    "poly_kernel",
    "__version__",
]
