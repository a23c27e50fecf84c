"""Edge-guided learnable bidirectional attention maps for image inpainting."""

__version__ = "0.1.0"

from edge_lbam.attention import (
    AttentionParams,
    EdgeGuidanceKernels,
    ForwardResult,
    LayerState,
    ReverseResult,
    convolve_mask,
    edge_lfam_layer,
    edge_lram_layer,
    hard_attention,
    hard_mask_update,
    lfam_layer,
    lram_layer,
    pconv_layer,
    soft_attention,
    soft_mask_update,
    uniform_kernel,
)
from edge_lbam.data import (
    RATIO_BUCKETS,
    InpaintDataset,
    MaskSpec,
    generate_irregular_mask,
)
from edge_lbam.inpaint import InpaintOutput, InpaintUNet, UNetConfig, composite
from edge_lbam.mecnet import EdgePatchDiscriminator, MECNet, MECNetConfig
from edge_lbam.report import evaluate, inpaint_image, visualize_masks
from edge_lbam.train import (
    TrainConfig,
    finetune_joint,
    inpaint_from_checkpoint,
    load_checkpoint,
    mecnet_from_checkpoint,
    train_inpaint,
    train_mecnet,
)

__all__ = [
    "AttentionParams",
    "EdgeGuidanceKernels",
    "EdgePatchDiscriminator",
    "ForwardResult",
    "InpaintDataset",
    "InpaintOutput",
    "InpaintUNet",
    "LayerState",
    "MECNet",
    "MECNetConfig",
    "MaskSpec",
    "RATIO_BUCKETS",
    "ReverseResult",
    "TrainConfig",
    "UNetConfig",
    "composite",
    "convolve_mask",
    "evaluate",
    "finetune_joint",
    "generate_irregular_mask",
    "inpaint_from_checkpoint",
    "inpaint_image",
    "load_checkpoint",
    "mecnet_from_checkpoint",
    "train_inpaint",
    "train_mecnet",
    "visualize_masks",
    "edge_lfam_layer",
    "edge_lram_layer",
    "hard_attention",
    "hard_mask_update",
    "lfam_layer",
    "lram_layer",
    "pconv_layer",
    "soft_attention",
    "soft_mask_update",
    "uniform_kernel",
    "__version__",
]
