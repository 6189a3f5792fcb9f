from .attention import (
    ADDITIVE,
    LITERAL_HADAMARD,
    MASK_MODES,
    SyncAttention,
    masked_sync_attention,
    pool_region_tokens,
    routing_weights,
)
from .layers import FiLM, RegionInjection, SinusoidalEncoding
from .losses import reconstruction_loss, total_loss
from .network import ModelConfig, ModelOutput, RePCM
from .prior import (
    GaussianParams,
    MoEPrior,
    combine_experts,
    gate_weights,
    kl_diag_gaussian,
    reparameterize,
    update_prototypes,
)

__all__ = [
    "ADDITIVE",
    "LITERAL_HADAMARD",
    "MASK_MODES",
    "FiLM",
    "GaussianParams",
    "ModelConfig",
    "ModelOutput",
    "MoEPrior",
    "RePCM",
    "RegionInjection",
    "SinusoidalEncoding",
    "SyncAttention",
    "combine_experts",
    "gate_weights",
    "kl_diag_gaussian",
    "masked_sync_attention",
    "pool_region_tokens",
    "reconstruction_loss",
    "reparameterize",
    "routing_weights",
    "total_loss",
    "update_prototypes",
]
