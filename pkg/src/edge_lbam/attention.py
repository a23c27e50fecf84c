"""Mask/feature interplay primitives: partial convolution and its learnable
attention-map generalizations.

A mask map is a single-channel tensor (1 = known pixel, 0 = hole, soft
nonnegative values once updating becomes learnable).  Mask-path kernels are
plain ``(1, 1, k, k)`` tensors; whether they are trainable is decided by the
caller (``nn.Parameter`` vs. constant).  All mask/edge-path convolutions are
bias-free so the all-zeros mask is a fixed point of every update rule.

The layer functions below are written against explicit weight tensors so they
can be driven at arbitrary sizes/strides by tests and oracles; the network
modules in :mod:`edge_lbam.inpaint` own parameters and call into them.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class LayerState(NamedTuple):
    """The (feature, mask, edge) triple flowing through an edge-guided layer."""

    feature: Tensor
    mask: Tensor
    edge: Tensor


class ForwardResult(NamedTuple):
    feature: Tensor
    mask: Tensor
    attention: Tensor


class EdgeForwardResult(NamedTuple):
    feature: Tensor
    mask: Tensor
    edge: Tensor
    attention: Tensor


class ReverseResult(NamedTuple):
    feature: Tensor
    mask: Tensor
    attention: Tensor


class EdgeReverseResult(NamedTuple):
    feature: Tensor
    mask: Tensor
    edge: Tensor
    attention: Tensor


class EdgeGuidanceKernels(NamedTuple):
    """Mask/edge-path kernels of one edge-guided attention module.

    ``mask`` updates the mask on its own, ``gate_in``/``gate_out`` turn the
    concatenated (mask, edge) pair into the edge attentional gate, and
    ``edge`` propagates the edge map to the next module.
    """

    mask: Tensor      # (1, 1, k, k)
    gate_in: Tensor   # (hidden, 2, k, k), strided with the mask path
    gate_out: Tensor  # (1, hidden, k2, k2), resolution preserving, k2 odd
    edge: Tensor      # (1, 1, k, k)


class AttentionParams(nn.Module):
    """Scalars of the asymmetric-Gaussian attention activation.

    ``a``, ``mu``, ``gamma_l`` and ``gamma_r`` are trainable; ``alpha``, the
    mask-update exponent, is a fixed hyperparameter.  The activation is
    continuous at ``mu`` by construction (both branches evaluate to ``a``).
    """

    def __init__(
        self,
        a: float = 1.1,
        mu: float = 2.0,
        gamma_l: float = 1.0,
        gamma_r: float = 1.0,
        alpha: float = 0.8,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if gamma_l < 0 or gamma_r < 0 or alpha < 0:
            raise ValueError("gamma_l, gamma_r and alpha must be nonnegative")
        self.a = nn.Parameter(torch.tensor(float(a), dtype=dtype))
        self.mu = nn.Parameter(torch.tensor(float(mu), dtype=dtype))
        self.gamma_l = nn.Parameter(torch.tensor(float(gamma_l), dtype=dtype))
        self.gamma_r = nn.Parameter(torch.tensor(float(gamma_r), dtype=dtype))
        self.register_buffer("alpha", torch.tensor(float(alpha), dtype=dtype))

    @torch.no_grad()
    def project_(self) -> None:
        """Clamp the Gaussian sharpness parameters back to >= 0.

        Called by the trainer after each optimizer step; negative gamma would
        turn the activation into an exploding exponential.
        """
        self.gamma_l.clamp_(min=0.0)
        self.gamma_r.clamp_(min=0.0)

    def forward(self, mc: Tensor) -> Tensor:
        return soft_attention(mc, self)

    def extra_repr(self) -> str:
        return (
            f"a={self.a.item():.4g}, mu={self.mu.item():.4g}, "
            f"gamma_l={self.gamma_l.item():.4g}, gamma_r={self.gamma_r.item():.4g}, "
            f"alpha={self.alpha.item():.4g}"
        )


def uniform_kernel(
    size: int = 3,
    dtype: torch.dtype = torch.float32,
    device: Optional[torch.device] = None,
) -> Tensor:
    """Averaging mask kernel with every element ``1/size**2``.

    ``uniform_kernel(3)`` is the fixed partial-convolution kernel (each
    element 1/9).
    """
    return torch.full(
        (1, 1, size, size), 1.0 / (size * size), dtype=dtype, device=device
    )


def _conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"size {size} with kernel {kernel}, stride {stride}, padding {padding} "
            "does not produce an integral output size"
        )
    return span // stride + 1


def convolve_mask(mask: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Convolve a mask map with a single-channel kernel (zero padding).

    Accepts ``(H, W)`` or ``(B, 1, H, W)`` masks and rejects geometry that
    would silently truncate the output.
    """
    squeeze = mask.dim() == 2
    if squeeze:
        mask = mask[None, None]
    if mask.dim() != 4 or mask.shape[1] != 1:
        raise ValueError(f"expected (H, W) or (B, 1, H, W) mask, got {tuple(mask.shape)}")
    if not torch.isfinite(mask).all():
        raise ValueError("mask contains non-finite values")
    _conv_out_size(mask.shape[-2], kernel.shape[-2], stride, padding)
    _conv_out_size(mask.shape[-1], kernel.shape[-1], stride, padding)
    out = F.conv2d(mask, kernel, stride=stride, padding=padding)
    return out[0, 0] if squeeze else out


def hard_attention(mc: Tensor) -> Tensor:
    """Hard feature re-normalization: 1/mc where mc > 0, else 0 (partial conv)."""
    pos = mc > 0
    safe = torch.where(pos, mc, torch.ones_like(mc))
    return torch.where(pos, 1.0 / safe, torch.zeros_like(mc))


def hard_mask_update(mc: Tensor) -> Tensor:
    """Hard mask updating: 1 where mc > 0, else 0 (partial conv)."""
    return (mc > 0).to(mc.dtype)


def soft_mask_update(mc: Tensor, alpha: Tensor | float) -> Tensor:
    """Continuous mask updating ``relu(mc) ** alpha``.

    The subgradient at 0 is taken to be 0, avoiding the infinite derivative
    of ``x**alpha`` at the origin for alpha < 1.
    """
    pos = mc > 0
    safe = torch.where(pos, mc, torch.ones_like(mc))
    return torch.where(pos, safe.pow(alpha), torch.zeros_like(mc))


def soft_attention(mc: Tensor, params: AttentionParams) -> Tensor:
    """Asymmetric Gaussian attention activation.

    ``a * exp(-gamma_l (mc - mu)^2)`` left of ``mu`` and
    ``1 + (a - 1) * exp(-gamma_r (mc - mu)^2)`` from ``mu`` on; differentiable
    in the input and in all four trainable scalars.
    """
    d2 = (mc - params.mu) ** 2
    left = params.a * torch.exp(-params.gamma_l * d2)
    right = 1.0 + (params.a - 1.0) * torch.exp(-params.gamma_r * d2)
    return torch.where(mc < params.mu, left, right)


def _check_feature(feature: Tensor, weights: Tensor) -> None:
    if feature.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) feature, got {tuple(feature.shape)}")
    if feature.shape[1] != weights.shape[1]:
        raise ValueError(
            f"feature has {feature.shape[1]} channels but weights expect {weights.shape[1]}"
        )


def pconv_layer(
    feature: Tensor,
    mask: Tensor,
    weights: Tensor,
    stride: int = 1,
    padding: int = 1,
    mask_kernel: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor]:
    """Partial convolution: masked convolution, hard re-normalization, hard
    mask update.  Bias-free; the non-learnable baseline the attention layers
    generalize.

    ``mask_kernel`` defaults to the uniform kernel of the feature kernel's
    size so the two paths stay resolution aligned.
    """
    _check_feature(feature, weights)
    if mask_kernel is None:
        mask_kernel = uniform_kernel(weights.shape[-1], dtype=mask.dtype, device=mask.device)
    mc = convolve_mask(mask, mask_kernel, stride=stride, padding=padding)
    fc = F.conv2d(feature * mask, weights, stride=stride, padding=padding)
    out = fc * hard_attention(mc)
    return out, hard_mask_update(mc)


def lfam_layer(
    feature: Tensor,
    mask: Tensor,
    weights: Tensor,
    k_m: Tensor,
    params: AttentionParams,
    stride: int = 1,
    padding: int = 1,
    hard: bool = False,
) -> ForwardResult:
    """Learnable forward attention: standard convolution re-normalized by the
    attention map of the learnably convolved mask.

    With ``hard=True`` the soft activations are swapped for the partial-conv
    pair, which (with the uniform kernel, on features that vanish in holes)
    reproduces ``pconv_layer`` exactly.
    """
    _check_feature(feature, weights)
    mc = convolve_mask(mask, k_m, stride=stride, padding=padding)
    fc = F.conv2d(feature, weights, stride=stride, padding=padding)
    if hard:
        attention = hard_attention(mc)
        mask_out = hard_mask_update(mc)
    else:
        attention = soft_attention(mc, params)
        mask_out = soft_mask_update(mc, params.alpha)
    return ForwardResult(fc * attention, mask_out, attention)


def edge_attention_gate(
    mask: Tensor,
    edge: Tensor,
    gate_in: Tensor,
    gate_out: Tensor,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Edge attentional map from the concatenated (mask, edge) pair.

    Two bias-free convolutions; only the first is strided so the gate lands
    at the updated mask's resolution.  A final sigmoid bounds the gate to
    (0, 1) so it can only suppress, never amplify, mask propagation.
    """
    if mask.shape[-2:] != edge.shape[-2:]:
        raise ValueError(
            f"mask {tuple(mask.shape[-2:])} and edge {tuple(edge.shape[-2:])} "
            "resolutions differ"
        )
    hidden = F.conv2d(torch.cat([mask, edge], dim=1), gate_in, stride=stride, padding=padding)
    k2 = gate_out.shape[-1]
    if k2 % 2 != 1:
        raise ValueError("gate_out kernel must be odd-sized (resolution preserving)")
    return torch.sigmoid(F.conv2d(hidden, gate_out, padding=k2 // 2))


def edge_lfam_layer(
    state: LayerState,
    weights: Tensor,
    kernels: EdgeGuidanceKernels,
    params: AttentionParams,
    stride: int = 1,
    padding: int = 0,
) -> EdgeForwardResult:
    """Edge-guided forward attention.

    The intermediate mask (one convolution of the input mask) is gated by the
    edge attentional map before activation, making the mask update
    structure-aware; feature re-normalization and the edge hand-off to the
    next module follow.
    """
    feature, mask, edge = state
    _check_feature(feature, weights)
    m_int = convolve_mask(mask, kernels.mask, stride=stride, padding=padding)
    gate = edge_attention_gate(
        mask, edge, kernels.gate_in, kernels.gate_out, stride=stride, padding=padding
    )
    mc = m_int * gate
    attention = soft_attention(mc, params)
    mask_out = soft_mask_update(mc, params.alpha)
    feature_out = F.conv2d(feature, weights, stride=stride, padding=padding) * attention
    edge_out = F.conv2d(edge, kernels.edge, stride=stride, padding=padding)
    return EdgeForwardResult(feature_out, mask_out, edge_out, attention)


def lram_layer(
    enc_feature: Tensor,
    dec_feature: Tensor,
    rev_mask: Tensor,
    enc_attention: Tensor,
    weights_e: Tensor,
    weights_d: Tensor,
    k_mbar: Tensor,
    params: AttentionParams,
    stride: int = 1,
    padding: int = 1,
    mask_stride: Optional[int] = None,
    mask_padding: Optional[int] = None,
    hard: bool = False,
) -> ReverseResult:
    """Learnable reverse attention for a decoder layer.

    The encoder skip and decoder features are convolved separately; the skip
    is re-normalized by the attention map its encoder layer produced, the
    decoder path by the attention of the convolved reverse mask, and the two
    are summed.  The updated reverse mask feeds the *preceding* decoder layer
    (the mask chain flows opposite to features).
    """
    _check_feature(enc_feature, weights_e)
    _check_feature(dec_feature, weights_d)
    if mask_stride is None:
        mask_stride = stride
    if mask_padding is None:
        mask_padding = padding
    fc_e = F.conv2d(enc_feature, weights_e, stride=stride, padding=padding)
    fc_d = F.conv2d(dec_feature, weights_d, stride=stride, padding=padding)
    if enc_attention.shape[-2:] != fc_e.shape[-2:]:
        raise ValueError(
            f"encoder attention {tuple(enc_attention.shape[-2:])} does not match "
            f"convolved skip feature {tuple(fc_e.shape[-2:])}"
        )
    mc = convolve_mask(rev_mask, k_mbar, stride=mask_stride, padding=mask_padding)
    if hard:
        attention_d = hard_attention(mc)
        mask_out = hard_mask_update(mc)
    else:
        attention_d = soft_attention(mc, params)
        mask_out = soft_mask_update(mc, params.alpha)
    feature_out = fc_e * enc_attention + fc_d * attention_d
    return ReverseResult(feature_out, mask_out, attention_d)


def edge_lram_layer(
    enc_feature: Tensor,
    dec_feature: Tensor,
    rev_mask: Tensor,
    edge: Tensor,
    enc_attention: Tensor,
    weights_e: Tensor,
    weights_d: Tensor,
    kernels: EdgeGuidanceKernels,
    params: AttentionParams,
    stride: int = 1,
    padding: int = 1,
    mask_stride: Optional[int] = None,
    mask_padding: Optional[int] = None,
) -> EdgeReverseResult:
    """Edge-guided reverse attention: LRAM with the reverse-mask update gated
    by the edge attentional map.  Both the updated reverse mask and the
    propagated edge map feed the preceding module.
    """
    _check_feature(enc_feature, weights_e)
    _check_feature(dec_feature, weights_d)
    if rev_mask.shape[-2:] != edge.shape[-2:]:
        raise ValueError(
            f"reverse mask {tuple(rev_mask.shape[-2:])} and edge "
            f"{tuple(edge.shape[-2:])} resolutions differ"
        )
    if mask_stride is None:
        mask_stride = stride
    if mask_padding is None:
        mask_padding = padding
    fc_e = F.conv2d(enc_feature, weights_e, stride=stride, padding=padding)
    fc_d = F.conv2d(dec_feature, weights_d, stride=stride, padding=padding)
    if enc_attention.shape[-2:] != fc_e.shape[-2:]:
        raise ValueError(
            f"encoder attention {tuple(enc_attention.shape[-2:])} does not match "
            f"convolved skip feature {tuple(fc_e.shape[-2:])}"
        )
    m_int = convolve_mask(rev_mask, kernels.mask, stride=mask_stride, padding=mask_padding)
    gate = edge_attention_gate(
        rev_mask, edge, kernels.gate_in, kernels.gate_out,
        stride=mask_stride, padding=mask_padding,
    )
    mc = m_int * gate
    attention_d = soft_attention(mc, params)
    mask_out = soft_mask_update(mc, params.alpha)
    feature_out = fc_e * enc_attention + fc_d * attention_d
    edge_out = F.conv2d(edge, kernels.edge, stride=mask_stride, padding=mask_padding)
    return EdgeReverseResult(feature_out, mask_out, edge_out, attention_d)
