"""Training objective for the inpainting generator.

Four components: mean-absolute pixel reconstruction, a Wasserstein
adversarial pair with gradient penalty judged by a two-column critic (one
column sees the known regions, the other the filled holes), perceptual
distance on a frozen feature pyramid, and style distance on Gram matrices of
the same features.

The feature pyramid is an interface: any module mapping (B, 3, H, W) to a
list of feature maps works.  Production uses the classic 16-layer pretrained
pyramid via :class:`VGG16FeaturePyramid` (weights loaded from a local file);
tests use :class:`RandomFeaturePyramid`, whose fixed-seed weights need no
downloads.  Either way the pyramid is frozen: gradients flow to its inputs,
never to its weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

FeatureExtractor = Callable[[Tensor], "list[Tensor]"]


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights of the four objective components."""

    lambda1: float = 1.0    # pixel reconstruction
    lambda2: float = 0.1    # adversarial
    lambda3: float = 0.05   # perceptual
    lambda4: float = 120.0  # style


class AdversarialLosses(NamedTuple):
    gen: Tensor
    disc: Tensor
    penalty: Tensor


def l1_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute difference over all pixels and channels."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


def perceptual_loss(pred: Tensor, gt: Tensor, extractor: FeatureExtractor) -> Tensor:
    """Mean over pyramid levels of the per-level mean-squared feature error."""
    pred_feats = extractor(pred)
    gt_feats = extractor(gt)
    total = pred.new_zeros(())
    for p, g in zip(pred_feats, gt_feats):
        total = total + F.mse_loss(p, g)
    return total / len(pred_feats)


def gram_matrix(features: Tensor) -> Tensor:
    """Per-sample channel covariance-like product on the C x (H*W) flattening."""
    b, c = features.shape[:2]
    flat = features.reshape(b, c, -1)
    return flat @ flat.transpose(1, 2)


def style_loss(pred: Tensor, gt: Tensor, extractor: FeatureExtractor) -> Tensor:
    """Mean over levels of the squared Gram difference, scaled by 1/C_i^2.

    The Gram matrices are taken on raw C x (H*W) flattenings; the only
    normalization is the channel-squared factor, so deeper (wider) levels are
    not additionally downweighted by spatial size.
    """
    pred_feats = extractor(pred)
    gt_feats = extractor(gt)
    total = pred.new_zeros(())
    for p, g in zip(pred_feats, gt_feats):
        c = p.shape[1]
        diff = gram_matrix(g) - gram_matrix(p)
        total = total + diff.pow(2).sum(dim=(1, 2)).mean() / (c * c)
    return total / len(pred_feats)


class TwoColumnCritic(nn.Module):
    """Wasserstein critic with a known-region column and a hole column.

    Each column is ``layers`` stride-2 4x4 convolutions with leaky ReLU; the
    final layer is a 1x1 convolution on the channel concatenation of the two
    columns followed by a global mean, giving one score per sample.  No
    normalization layers: the gradient penalty needs per-sample gradients.
    """

    def __init__(self, in_channels: int = 3, base_channels: int = 64,
                 layers: int = 6, max_channels: int = 512):
        super().__init__()
        self.known_column = self._column(in_channels, base_channels, layers, max_channels)
        self.hole_column = self._column(in_channels, base_channels, layers, max_channels)
        last = min(base_channels * 2 ** (layers - 1), max_channels)
        self.head = nn.Conv2d(2 * last, 1, kernel_size=1)

    @staticmethod
    def _column(in_channels, base_channels, layers, max_channels):
        mods = []
        c_in = in_channels
        for i in range(layers):
            c_out = min(base_channels * 2 ** i, max_channels)
            mods.append(nn.Conv2d(c_in, c_out, 4, stride=2, padding=1))
            mods.append(nn.LeakyReLU(0.2, inplace=True))
            c_in = c_out
        return nn.Sequential(*mods)

    def forward(self, image: Tensor, mask: Tensor) -> Tensor:
        known = self.known_column(image * mask)
        hole = self.hole_column(image * (1.0 - mask))
        score = self.head(torch.cat([known, hole], dim=1))
        return score.mean(dim=(1, 2, 3))


def gradient_penalty(critic, pred: Tensor, gt: Tensor, mask: Tensor,
                     generator: Optional[torch.Generator] = None) -> Tensor:
    """E[(||grad of the critic at a random gt/pred mixture|| - 1)^2]."""
    b = gt.shape[0]
    eps = torch.rand((b, 1, 1, 1), generator=generator,
                     dtype=gt.dtype, device=gt.device)
    mixed = (eps * gt + (1.0 - eps) * pred.detach()).requires_grad_(True)
    score = critic(mixed, mask).sum()
    grad = torch.autograd.grad(score, mixed, create_graph=True)[0]
    norm = grad.flatten(1).norm(dim=1)
    return ((norm - 1.0) ** 2).mean()


def adversarial_losses(pred: Tensor, gt: Tensor, critic, mask: Tensor,
                       lambda_gp: float = 10.0,
                       generator: Optional[torch.Generator] = None,
                       with_penalty: bool = True) -> AdversarialLosses:
    """Wasserstein pair: gen side E[D(gt)] - E[D(pred)], critic side its
    negation plus ``lambda_gp`` times the gradient penalty.

    The generator lowers the gen loss only through raising E[D(pred)];
    ``with_penalty=False`` skips the penalty (mixture forward/backward) for
    generator-side updates that never look at the critic loss.
    """
    wasserstein = critic(gt, mask).mean() - critic(pred, mask).mean()
    if with_penalty:
        penalty = gradient_penalty(critic, pred, gt, mask, generator)
    else:
        penalty = gt.new_zeros(())
    return AdversarialLosses(wasserstein, -wasserstein + lambda_gp * penalty, penalty)


def total_loss(l1: Tensor | float, adv: Tensor | float, perc: Tensor | float,
               style: Tensor | float, weights: LossWeights = LossWeights()):
    """Weighted sum of the four components."""
    return (weights.lambda1 * l1 + weights.lambda2 * adv
            + weights.lambda3 * perc + weights.lambda4 * style)


class RandomFeaturePyramid(nn.Module):
    """Fixed-seed random-weight feature pyramid for tests and desk runs.

    Each level is a 3x3 convolution, tanh, and 2x2 average pooling; weights
    come from a dedicated seeded generator and are frozen.  Smooth
    nonlinearity and average pooling keep the whole pyramid differentiable
    everywhere, which finite-difference gradient checks rely on.
    """

    def __init__(self, in_channels: int = 3, levels: int = 3,
                 base_channels: int = 8, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        c_in = in_channels
        for i in range(levels):
            c_out = base_channels * 2 ** i
            conv = nn.Conv2d(c_in, c_out, 3, padding=1, dtype=dtype)
            with torch.no_grad():
                fan_in = c_in * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen,
                                              dtype=dtype) / fan_in ** 0.5)
                conv.bias.zero_()
            self.convs.append(conv)
            c_in = c_out
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for conv in self.convs:
            x = F.avg_pool2d(torch.tanh(conv(x)), 2)
            feats.append(x)
        return feats


class VGG16FeaturePyramid(nn.Module):
    """Pool-1..pool-3 taps of the classic 16-layer pretrained pyramid.

    Weights are loaded from a local state-dict file (no downloads); inputs
    in [0, 1] are normalized with the standard channel statistics inside.
    Requires torchvision.
    """

    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self, weights_path: Optional[str] = None):
        super().__init__()
        try:
            from torchvision.models import vgg16
        except ImportError as e:
            raise ImportError(
                "VGG16FeaturePyramid requires torchvision; install the 'vgg' "
                "extra or use RandomFeaturePyramid") from e
        net = vgg16(weights=None)
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        feats = net.features
        # slices ending at the first three 2x2 max-pool layers
        self.block1 = feats[0:5]
        self.block2 = feats[5:10]
        self.block3 = feats[10:17]
        self.register_buffer("mean", torch.tensor(self.MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self.STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: Tensor) -> list[Tensor]:
        x = (x - self.mean) / self.std
        f1 = self.block1(x)
        f2 = self.block2(f1)
        f3 = self.block3(f2)
        return [f1, f2, f3]
