"""Multi-scale edge completion: generator, patch discriminator, and losses.

The generator turns (corrupted image, mask, incomplete edges) into a complete
soft edge map.  Two stem convolutions lift the 5-channel input; pooled copies
at several scales run through residual branches; branch outputs merge from
the coarsest scale upward (deconvolution, concatenation, fusion); three final
deconvolutions produce the one-channel sigmoid output.

Variants: ``full`` (all scales), ``single_scale`` (one coarse branch only),
and ``multi_loss`` (full plus a one-channel supervision head at every scale).

The adversarial game here is the sigmoid log form, non-saturating for the
generator; the Wasserstein objective of the inpainting stage lives in
:mod:`edge_lbam.losses`.  Feature matching over the discriminator's five
layers provides the reconstruction term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

VARIANTS = ("full", "single_scale", "multi_loss")


@dataclass(frozen=True)
class MECNetConfig:
    """Architecture knobs for the edge completion generator.

    ``scales`` are feature-map resolutions, ascending; the finest one must be
    a quarter of the input resolution so the two stride-2 decoder stages land
    back on the input grid.
    """

    scales: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_branch: int = 8
    base_channels: int = 64     # stem width
    branch_channels: int = 128  # residual branch width
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.scales or list(self.scales) != sorted(set(self.scales)):
            raise ValueError("scales must be strictly ascending and non-empty")
        if self.variant == "single_scale" and len(self.scales) != 1:
            raise ValueError("single_scale variant takes exactly one scale")
        for a, b in zip(self.scales, self.scales[1:]):
            if b != 2 * a:
                raise ValueError("adjacent scales must differ by a factor of 2")

    @staticmethod
    def full(**kw) -> "MECNetConfig":
        return MECNetConfig(variant="full", **kw)

    @staticmethod
    def single_scale(scale: int = 64, **kw) -> "MECNetConfig":
        return MECNetConfig(scales=(scale,), variant="single_scale", **kw)

    @staticmethod
    def multi_loss(**kw) -> "MECNetConfig":
        return MECNetConfig(variant="multi_loss", **kw)

    @staticmethod
    def desk(variant: str = "full") -> "MECNetConfig":
        """Quarter-width profile for 64x64 smoke training."""
        scales = (16,) if variant == "single_scale" else (2, 4, 8, 16)
        return MECNetConfig(scales=scales, base_channels=16,
                            branch_channels=32, variant=variant)


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with instance normalization, identity skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x: Tensor) -> Tensor:
        return x + self.body(x)


class EdgePrediction(NamedTuple):
    """Generator output: the full-resolution edge map plus any per-scale
    auxiliary maps (``multi_loss`` variant only, coarse to fine)."""

    edges: Tensor
    aux: tuple[Tensor, ...] = ()


class MECNet(nn.Module):
    """Edge completion generator G(image, mask, edges) -> soft edge map."""

    def __init__(self, config: MECNetConfig = MECNetConfig()):
        super().__init__()
        self.config = config
        c_stem = config.base_channels
        c_branch = config.branch_channels
        self.stem = nn.Sequential(
            nn.Conv2d(5, c_stem, 5, padding=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_stem, c_stem, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.branches = nn.ModuleList()
        for _ in config.scales:
            entry = [nn.Conv2d(c_stem, c_branch, 3, padding=1),
                     nn.ReLU(inplace=True)]
            entry += [ResidualBlock(c_branch)
                      for _ in range(config.blocks_per_branch)]
            self.branches.append(nn.Sequential(*entry))
        # coarse-to-fine merging: upsample the running feature by one
        # deconvolution, concatenate the branch output at the next scale, fuse
        self.merge_up = nn.ModuleList()
        self.merge_fuse = nn.ModuleList()
        for _ in config.scales[1:]:
            self.merge_up.append(
                nn.ConvTranspose2d(c_branch, c_branch, 4, stride=2, padding=1))
            self.merge_fuse.append(nn.Sequential(
                nn.Conv2d(2 * c_branch, c_branch, 3, padding=1),
                nn.ReLU(inplace=True)))
        if config.variant == "multi_loss":
            self.aux_heads = nn.ModuleList(
                nn.Conv2d(c_branch, 1, 3, padding=1) for _ in config.scales)
        else:
            self.aux_heads = None
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(c_branch, c_stem, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c_stem, max(c_stem // 2, 8), 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(max(c_stem // 2, 8), 1, 3, stride=1, padding=1),
        )

    def _check_geometry(self, h: int, w: int) -> None:
        for s in self.config.scales:
            if h % s != 0 or w % s != 0:
                raise ValueError(f"scale {s} does not divide input {h}x{w}")
        finest = self.config.scales[-1]
        if h // finest != 4 or w // finest != 4:
            raise ValueError(
                f"finest scale {finest} must be a quarter of the input "
                f"{h}x{w} (two stride-2 decoder stages)")

    def forward(self, image: Tensor, mask: Tensor, edges: Tensor) -> EdgePrediction:
        if image.shape[1] != 3 or mask.shape[1] != 1 or edges.shape[1] != 1:
            raise ValueError("expected 3-channel image, 1-channel mask and edges")
        h, w = image.shape[-2:]
        self._check_geometry(h, w)
        x = self.stem(torch.cat([image, mask, edges], dim=1))
        merged = None
        aux = []
        for i, (s, branch) in enumerate(zip(self.config.scales, self.branches)):
            feat = branch(F.adaptive_avg_pool2d(x, (s, s)))
            if merged is None:
                merged = feat
            else:
                up = self.merge_up[i - 1](merged)
                merged = self.merge_fuse[i - 1](torch.cat([up, feat], dim=1))
            if self.aux_heads is not None:
                aux.append(torch.sigmoid(self.aux_heads[i](merged)))
        out = torch.sigmoid(self.decoder(merged))
        return EdgePrediction(out, tuple(aux))


class EdgePatchDiscriminator(nn.Module):
    """Patch critic on (edge map, image) pairs with exposed layer features.

    Five convolutions, each 4x4: 64/128/256 channels at stride 2, 512 at
    stride 1, then a 1-channel stride-1 score head.  No normalization on the
    first layer or the head; instance normalization in between.  Each output
    score sees a 70x70 input patch.
    """

    KERNELS = (4, 4, 4, 4, 4)
    STRIDES = (2, 2, 2, 1, 1)

    def __init__(self, in_channels: int = 4, base_channels: int = 64):
        super().__init__()
        c = base_channels
        widths = (c, 2 * c, 4 * c, 8 * c)
        self.blocks = nn.ModuleList()
        self.blocks.append(nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True)))
        for w_in, w_out, stride in ((widths[0], widths[1], 2),
                                    (widths[1], widths[2], 2),
                                    (widths[2], widths[3], 1)):
            self.blocks.append(nn.Sequential(
                nn.Conv2d(w_in, w_out, 4, stride=stride, padding=1),
                nn.InstanceNorm2d(w_out),
                nn.LeakyReLU(0.2, inplace=True)))
        self.blocks.append(nn.Conv2d(widths[3], 1, 4, stride=1, padding=1))

    def features(self, edges: Tensor, image: Tensor) -> list[Tensor]:
        """Per-layer feature maps, one entry per convolution (five total)."""
        x = torch.cat([edges, image], dim=1)
        out = []
        for block in self.blocks:
            x = block(x)
            out.append(x)
        return out

    def forward(self, edges: Tensor, image: Tensor) -> Tensor:
        """Patch score logits (no sigmoid)."""
        return self.features(edges, image)[-1]

    @classmethod
    def receptive_field(cls) -> int:
        rf, jump = 1, 1
        for k, s in zip(cls.KERNELS, cls.STRIDES):
            rf += (k - 1) * jump
            jump *= s
        return rf


class MECNetLosses(NamedTuple):
    adversarial: Tensor
    reconstruction: Tensor
    total: Tensor


ALPHA_REC = 10.0


def feature_match_loss(pred_feats: list[Tensor], gt_feats: list[Tensor]) -> Tensor:
    """Sum over discriminator layers of the mean absolute feature difference."""
    if len(pred_feats) != len(gt_feats):
        raise ValueError("feature lists must have equal depth")
    total = None
    for p, g in zip(pred_feats, gt_feats):
        term = (p - g).abs().mean()
        total = term if total is None else total + term
    return total


def mecnet_generator_loss(edges_pred: Tensor, edges_gt: Tensor, image: Tensor,
                          discriminator: EdgePatchDiscriminator,
                          alpha_rec: float = ALPHA_REC) -> MECNetLosses:
    """Generator objective: non-saturating sigmoid adversarial term plus the
    feature-matching reconstruction term weighted by ``alpha_rec``."""
    pred_feats = discriminator.features(edges_pred, image)
    with torch.no_grad():
        gt_feats = discriminator.features(edges_gt, image)
    score = pred_feats[-1]
    adv = F.binary_cross_entropy_with_logits(score, torch.ones_like(score))
    rec = feature_match_loss(pred_feats, gt_feats)
    return MECNetLosses(adv, rec, adv + alpha_rec * rec)


def mecnet_discriminator_loss(edges_pred: Tensor, edges_gt: Tensor, image: Tensor,
                              discriminator: EdgePatchDiscriminator) -> Tensor:
    """Sigmoid log loss: real pairs toward 1, predicted pairs toward 0."""
    real = discriminator(edges_gt, image)
    fake = discriminator(edges_pred.detach(), image)
    return (F.binary_cross_entropy_with_logits(real, torch.ones_like(real))
            + F.binary_cross_entropy_with_logits(fake, torch.zeros_like(fake)))


def multi_loss_objective(prediction: EdgePrediction, edges_gt: Tensor,
                         image: Tensor, discriminator: EdgePatchDiscriminator,
                         alpha_rec: float = ALPHA_REC) -> MECNetLosses:
    """Objective for the ``multi_loss`` variant: the same loss pair at the
    final output and at every auxiliary head, all with equal weight.

    Auxiliary maps are bilinearly upsampled to the target resolution before
    scoring; the coarsest heads are far smaller than the discriminator's
    receptive field, so scoring them natively is not an option.
    """
    terms = [mecnet_generator_loss(prediction.edges, edges_gt, image,
                                   discriminator, alpha_rec)]
    for aux in prediction.aux:
        up = F.interpolate(aux, size=edges_gt.shape[-2:], mode="bilinear",
                           align_corners=False)
        terms.append(mecnet_generator_loss(up, edges_gt, image,
                                           discriminator, alpha_rec))
    n = float(len(terms))
    adv = sum(t.adversarial for t in terms) / n
    rec = sum(t.reconstruction for t in terms) / n
    return MECNetLosses(adv, rec, adv + alpha_rec * rec)
