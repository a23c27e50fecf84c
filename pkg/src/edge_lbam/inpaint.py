"""U-Net inpainting network with bidirectional attention variants.

The backbone is a 14-layer encoder/decoder (4x4 kernels, stride 2, padding 1,
zero bias, no bottleneck) at 256x256; shallower power-of-two ladders follow
the same recipe down to a 2x2 innermost map.  Attention modules attach to
every encoder layer except the innermost and every decoder layer except the
innermost: six forward modules and six reverse modules at full depth.

Feature flow and mask flow run in opposite directions through the decoder,
so the reverse mask chain is computed as a pre-pass: the chain starts from
(1 - mask, predicted edges) at full resolution, enters the last decoder
layer, and propagates toward the innermost one via stride-2 convolutions.
Each decoder module then merges the attention-weighted encoder skip with the
reverse-attention-weighted decoder stream at its input resolution before the
backbone deconvolution lifts the result one rung up the ladder.

Variant lattice (encoder mode x decoder mode):

=============== ============ ================= ==================
variant         encoder      decoder           edge usage
=============== ============ ================= ==================
BF              hard_fixed   plain             none
BF+BR           hard_fixed   hard_reverse      none
LFAM            learnable    plain             none
LFAM+BR         learnable    hard_reverse      none
LBAM            learnable    learnable_reverse none
LBAM(E)         learnable    learnable_reverse input concatenation
Edge-LFAM       edge         plain             attention gating
Edge-LFAM+BR    edge         hard_reverse      attention gating
Edge-LFAM+LRAM  edge         learnable_reverse attention gating
Edge-LBAM       edge         edge_reverse      attention gating
=============== ============ ================= ==================
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import (
    AttentionParams,
    EdgeGuidanceKernels,
    LayerState,
    convolve_mask,
    edge_attention_gate,
    edge_lfam_layer,
    edge_lram_layer,
    hard_mask_update,
    lfam_layer,
    lram_layer,
    soft_mask_update,
    uniform_kernel,
)

ENCODER_MODES = ("hard_fixed", "learnable", "edge")
DECODER_MODES = ("plain", "hard_reverse", "learnable_reverse", "edge_reverse")

# variant -> (encoder mode, decoder mode, edge concatenated to the input)
VARIANT_MODES = {
    "BF": ("hard_fixed", "plain", False),
    "BF+BR": ("hard_fixed", "hard_reverse", False),
    "LFAM": ("learnable", "plain", False),
    "LFAM+BR": ("learnable", "hard_reverse", False),
    "LBAM": ("learnable", "learnable_reverse", False),
    "LBAM(E)": ("learnable", "learnable_reverse", True),
    "Edge-LFAM": ("edge", "plain", False),
    "Edge-LFAM+BR": ("edge", "hard_reverse", False),
    "Edge-LFAM+LRAM": ("edge", "learnable_reverse", False),
    "Edge-LBAM": ("edge", "edge_reverse", False),
}

VARIANTS = tuple(VARIANT_MODES)

FULL_CHANNELS = (64, 128, 256, 512, 512, 512, 512)
DESK_CHANNELS = (16, 32, 64, 128, 128)
GATE_HIDDEN = 8
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class UNetConfig:
    """Backbone geometry and variant selection.

    ``channels`` lists encoder output widths, one per encoder layer; the
    decoder mirrors them.  The ladder fixes the input resolution to
    ``2 ** (len(channels) + 1)`` so the innermost map is 2x2.
    """

    num_layers: int = 14
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    channels: tuple[int, ...] = FULL_CHANNELS
    variant: str = "Edge-LBAM"

    def __post_init__(self):
        if self.variant not in VARIANT_MODES:
            raise ValueError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if (self.kernel, self.stride, self.padding) != (4, 2, 1):
            raise ValueError("backbone is fixed to 4x4 kernels, stride 2, padding 1")
        if len(self.channels) < 3:
            raise ValueError("need at least three encoder layers")
        if self.num_layers != 2 * len(self.channels):
            raise ValueError(
                f"num_layers must be twice the encoder depth: "
                f"{2 * len(self.channels)} for {len(self.channels)} channels")

    @property
    def encoder_mode(self) -> str:
        return VARIANT_MODES[self.variant][0]

    @property
    def decoder_mode(self) -> str:
        return VARIANT_MODES[self.variant][1]

    @property
    def edge_input(self) -> bool:
        return VARIANT_MODES[self.variant][2]

    @property
    def uses_edge(self) -> bool:
        return (self.edge_input or self.encoder_mode == "edge"
                or self.decoder_mode == "edge_reverse")

    @property
    def resolution(self) -> int:
        return 2 ** (len(self.channels) + 1)

    @staticmethod
    def full(variant: str = "Edge-LBAM") -> "UNetConfig":
        return UNetConfig(variant=variant)

    @staticmethod
    def desk(variant: str = "Edge-LBAM") -> "UNetConfig":
        """Quarter-width 10-layer ladder for 64x64 smoke training."""
        return UNetConfig(num_layers=2 * len(DESK_CHANNELS),
                          channels=DESK_CHANNELS, variant=variant)


class InpaintOutput(NamedTuple):
    """``raw`` is the tanh output in [-1, 1]; ``composited`` copies known
    pixels from the input and fills holes from the prediction, in [0, 1]."""

    raw: Tensor
    composited: Tensor


class MaskRecord(NamedTuple):
    layer: int            # 1-based index into the 2n-layer stack
    kind: str             # "forward" or "reverse"
    mask: Tensor          # updated (reverse) mask map at that layer
    attention: Tensor     # the attention map that gated the features


@dataclass
class ForwardTrace:
    entries: list


def composite(image: Tensor, mask: Tensor, prediction: Tensor) -> Tensor:
    """Copy known pixels from ``image``; take hole pixels from ``prediction``.
    All inputs in [0, 1]; idempotent in ``prediction``."""
    return mask * image + (1.0 - mask) * prediction


def _conv_weight(out_ch: int, in_ch: int, k: int) -> nn.Parameter:
    w = torch.empty(out_ch, in_ch, k, k)
    nn.init.kaiming_uniform_(w, a=math.sqrt(5))
    return nn.Parameter(w)


def _deconv_weight(in_ch: int, out_ch: int, k: int) -> nn.Parameter:
    w = torch.empty(in_ch, out_ch, k, k)
    nn.init.kaiming_uniform_(w, a=math.sqrt(5))
    return nn.Parameter(w)


class _EdgeGateParams(nn.Module):
    """Learnable kernels of one edge attention gate plus edge propagation.

    The edge hand-off kernel is learnable only when a later module consumes
    the propagated edges; at the end of a chain it stays a fixed buffer so
    no parameter sits outside the gradient graph.
    """

    def __init__(self, kernel: int, propagate_edge: bool = True):
        super().__init__()
        self.gate_in = _conv_weight(GATE_HIDDEN, 2, kernel)
        self.gate_out = _conv_weight(1, GATE_HIDDEN, 3)
        if propagate_edge:
            self.edge_kernel = nn.Parameter(uniform_kernel(kernel))
        else:
            self.register_buffer("edge_kernel", uniform_kernel(kernel))

    def bundle(self, mask_kernel: Tensor) -> EdgeGuidanceKernels:
        return EdgeGuidanceKernels(mask_kernel, self.gate_in,
                                   self.gate_out, self.edge_kernel)


class EncoderBlock(nn.Module):
    """One encoder rung: strided zero-bias convolution with the mode's mask
    machinery, then batch normalization and a leaky ReLU."""

    def __init__(self, in_ch: int, out_ch: int, mode: str, kernel: int = 4,
                 stride: int = 2, padding: int = 1, propagate_edge: bool = True):
        super().__init__()
        if mode not in ENCODER_MODES:
            raise ValueError(f"unknown encoder mode {mode!r}")
        self.mode = mode
        self.stride = stride
        self.padding = padding
        self.weight = _conv_weight(out_ch, in_ch, kernel)
        if mode == "hard_fixed":
            self.register_buffer("fixed_kernel", uniform_kernel(kernel))
        else:
            self.mask_kernel = nn.Parameter(uniform_kernel(kernel))
            self.attention = AttentionParams()
        if mode == "edge":
            self.gate = _EdgeGateParams(kernel, propagate_edge)
        self.norm = nn.BatchNorm2d(out_ch)

    def forward(self, state: LayerState):
        feature, mask, edge = state
        if self.mode == "hard_fixed":
            # partial-convolution behaviour: holes contribute nothing
            result = lfam_layer(feature * mask, mask, self.weight,
                                self.fixed_kernel, None, self.stride,
                                self.padding, hard=True)
            edge_out = None
        elif self.mode == "learnable":
            result = lfam_layer(feature, mask, self.weight, self.mask_kernel,
                                self.attention, self.stride, self.padding)
            edge_out = None
        else:
            result = edge_lfam_layer(
                state, self.weight, self.gate.bundle(self.mask_kernel),
                self.attention, self.stride, self.padding)
            edge_out = result.edge
        out = F.leaky_relu(self.norm(result.feature), LEAKY_SLOPE)
        return LayerState(out, result.mask, edge_out), result.attention


class PlainEncoder(nn.Module):
    """Innermost encoder rung: convolution only, no attention module."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 4,
                 stride: int = 2, padding: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride, padding, bias=False)
        self.norm = nn.BatchNorm2d(out_ch)

    def forward(self, state: LayerState):
        out = F.leaky_relu(self.norm(self.conv(state.feature)), LEAKY_SLOPE)
        return LayerState(out, None, None), None


class PlainDecoder(nn.Module):
    """Innermost decoder rung: deconvolution only, no attention module."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 4,
                 stride: int = 2, padding: int = 1):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(in_ch, out_ch, kernel, stride,
                                         padding, bias=False)
        self.norm = nn.BatchNorm2d(out_ch)

    def forward(self, feature: Tensor) -> Tensor:
        return F.leaky_relu(self.norm(self.deconv(feature)), LEAKY_SLOPE)


class DecoderBlock(nn.Module):
    """One decoder rung with reverse attention.

    The encoder skip and the incoming decoder stream are merged at the input
    resolution (3x3 stride-1 convolutions, gated per mode), then the zero-bias
    backbone deconvolution doubles the resolution.  The reverse mask enters at
    twice the merge resolution and is reduced by a stride-2 kernel.
    """

    def __init__(self, skip_ch: int, dec_ch: int, out_ch: int, mode: str,
                 kernel: int = 4, stride: int = 2, padding: int = 1,
                 final: bool = False, propagate_edge: bool = True):
        super().__init__()
        if mode not in DECODER_MODES:
            raise ValueError(f"unknown decoder mode {mode!r}")
        self.mode = mode
        self.final = final
        self.mask_stride = stride
        self.mask_padding = padding
        self.weight_e = _conv_weight(skip_ch, skip_ch, 3)
        self.weight_d = _conv_weight(skip_ch, dec_ch, 3)
        self.deconv_weight = _deconv_weight(skip_ch, out_ch, kernel)
        if mode == "hard_reverse":
            self.register_buffer("rev_kernel", uniform_kernel(kernel))
        elif mode in ("learnable_reverse", "edge_reverse"):
            self.rev_kernel = nn.Parameter(uniform_kernel(kernel))
            self.attention = AttentionParams()
        if mode == "edge_reverse":
            self.gate = _EdgeGateParams(kernel, propagate_edge)
        self.norm = None if final else nn.BatchNorm2d(out_ch)

    def mask_step(self, rev_mask: Tensor, edge: Optional[Tensor]):
        """Advance the reverse chain one rung toward the innermost layer.

        Mirrors the update the merge op performs, for the pre-pass; the two
        stay consistent because they share kernels and activation functions.
        """
        if self.mode == "plain":
            raise RuntimeError("plain decoder blocks carry no reverse chain")
        if self.mode == "edge_reverse":
            m_int = convolve_mask(rev_mask, self.rev_kernel,
                                  stride=self.mask_stride, padding=self.mask_padding)
            gate = edge_attention_gate(rev_mask, edge, self.gate.gate_in,
                                       self.gate.gate_out, stride=self.mask_stride,
                                       padding=self.mask_padding)
            mask_out = soft_mask_update(m_int * gate, self.attention.alpha)
            edge_out = F.conv2d(edge, self.gate.edge_kernel,
                                stride=self.mask_stride, padding=self.mask_padding)
            return mask_out, edge_out
        mc = convolve_mask(rev_mask, self.rev_kernel, stride=self.mask_stride,
                           padding=self.mask_padding)
        if self.mode == "hard_reverse":
            return hard_mask_update(mc), None
        return soft_mask_update(mc, self.attention.alpha), None

    def forward(self, skip: Tensor, dec: Tensor, rev_mask: Optional[Tensor],
                enc_attention: Optional[Tensor], edge: Optional[Tensor]):
        if self.mode == "plain":
            merged = (F.conv2d(skip, self.weight_e, padding=1)
                      + F.conv2d(dec, self.weight_d, padding=1))
            rev_out, rev_attention = None, None
        elif self.mode == "edge_reverse":
            result = edge_lram_layer(
                skip, dec, rev_mask, edge, enc_attention, self.weight_e,
                self.weight_d, self.gate.bundle(self.rev_kernel),
                self.attention, stride=1, padding=1,
                mask_stride=self.mask_stride, mask_padding=self.mask_padding)
            merged, rev_out, rev_attention = result.feature, result.mask, result.attention
        else:
            result = lram_layer(
                skip, dec, rev_mask, enc_attention, self.weight_e,
                self.weight_d, self.rev_kernel,
                getattr(self, "attention", None), stride=1, padding=1,
                mask_stride=self.mask_stride, mask_padding=self.mask_padding,
                hard=self.mode == "hard_reverse")
            merged, rev_out, rev_attention = result.feature, result.mask, result.attention
        out = F.conv_transpose2d(merged, self.deconv_weight, stride=2, padding=1)
        if self.final:
            return torch.tanh(out), rev_out, rev_attention
        return F.leaky_relu(self.norm(out), LEAKY_SLOPE), rev_out, rev_attention


class InpaintUNet(nn.Module):
    """The assembled inpainting network; see the module docstring."""

    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        ch = config.channels
        n = len(ch)
        in_ch = 4 if config.edge_input else 3
        widths = (in_ch,) + ch
        self.encoder = nn.ModuleList(
            EncoderBlock(widths[i], widths[i + 1], config.encoder_mode,
                         config.kernel, config.stride, config.padding,
                         propagate_edge=i < n - 2)
            for i in range(n - 1))
        self.inner_encoder = PlainEncoder(ch[-2], ch[-1], config.kernel,
                                          config.stride, config.padding)
        self.inner_decoder = PlainDecoder(ch[-1], ch[-2], config.kernel,
                                          config.stride, config.padding)
        blocks = []
        for idx in range(n - 1):
            skip_ch = ch[n - 2 - idx]
            out_ch = ch[n - 3 - idx] if idx < n - 2 else 3
            blocks.append(DecoderBlock(skip_ch, skip_ch, out_ch,
                                       config.decoder_mode, config.kernel,
                                       config.stride, config.padding,
                                       final=idx == n - 2,
                                       propagate_edge=idx > 0))
        self.decoder = nn.ModuleList(blocks)

    def _validate(self, image: Tensor, mask: Tensor, edge_hat: Optional[Tensor]):
        res = self.config.resolution
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError("image must be (B, 3, H, W)")
        if image.shape[-2:] != (res, res):
            raise ValueError(f"variant ladder expects {res}x{res} input, "
                             f"got {tuple(image.shape[-2:])}")
        if mask.shape != (image.shape[0], 1, res, res):
            raise ValueError("mask must be (B, 1, H, W) matching the image")
        if not torch.all((mask == 0) | (mask == 1)):
            raise ValueError("mask must be binary")
        if self.config.uses_edge:
            if edge_hat is None:
                raise ValueError(
                    f"variant {self.config.variant} requires an edge map")
            if edge_hat.shape != mask.shape:
                raise ValueError("edge map must match the mask shape")
            if edge_hat.min() < 0 or edge_hat.max() > 1:
                raise ValueError("edge map values must lie in [0, 1]")

    def forward(self, image: Tensor, mask: Tensor,
                edge_hat: Optional[Tensor] = None, trace: bool = False
                ) -> Union[InpaintOutput, tuple[InpaintOutput, ForwardTrace]]:
        """Inpaint ``image`` ([0, 1]) under a binary known-pixel ``mask``.

        ``edge_hat`` is the completed edge map in [0, 1]; required for
        variants that consume edges, ignored by the rest.
        """
        self._validate(image, mask, edge_hat)
        cfg = self.config
        n = len(cfg.channels)
        records = []

        x = image * 2.0 - 1.0
        if cfg.edge_input:
            x = torch.cat([x, edge_hat * 2.0 - 1.0], dim=1)
        state = LayerState(x, mask, edge_hat if cfg.encoder_mode == "edge" else None)
        skips, attentions = [], []
        for i, block in enumerate(self.encoder):
            state, attention = block(state)
            skips.append(state.feature)
            attentions.append(attention)
            if trace:
                records.append(MaskRecord(i + 1, "forward", state.mask, attention))
        state, _ = self.inner_encoder(state)

        rev_inputs: list = [None] * len(self.decoder)
        if cfg.decoder_mode != "plain":
            rm = 1.0 - mask
            re = edge_hat if cfg.decoder_mode == "edge_reverse" else None
            for idx in range(len(self.decoder) - 1, -1, -1):
                rev_inputs[idx] = (rm, re)
                if idx > 0:
                    rm, re = self.decoder[idx].mask_step(rm, re)

        h = self.inner_decoder(state.feature)
        for idx, block in enumerate(self.decoder):
            skip = skips[n - 2 - idx]
            enc_attention = attentions[n - 2 - idx]
            rm, re = rev_inputs[idx] if rev_inputs[idx] is not None else (None, None)
            h, rev_mask_out, rev_attention = block(skip, h, rm, enc_attention, re)
            if trace and rev_mask_out is not None:
                records.append(MaskRecord(n + 2 + idx, "reverse",
                                          rev_mask_out, rev_attention))

        pred = (h + 1.0) / 2.0
        output = InpaintOutput(h, composite(image, mask, pred))
        if trace:
            return output, ForwardTrace(records)
        return output

    def project_attention_(self) -> None:
        """Clamp all attention shape parameters to their valid ranges."""
        for module in self.modules():
            if isinstance(module, AttentionParams):
                module.project_()

    def attention_parameter_blocks(self):
        """Named attention parameter modules, for gradient diagnostics."""
        for name, module in self.named_modules():
            if isinstance(module, AttentionParams):
                yield name, module


def collect_mask_maps(trace: Optional[ForwardTrace]) -> list[tuple[int, Tensor]]:
    """Visualization-ready mask maps from a traced forward pass.

    Each entry is (absolute layer index, map): values clamped to be
    non-negative, scaled into [0, 1] when they exceed it, and max-reduced
    across channels.  Forward entries come first, then reverse entries,
    each group in layer order.
    """
    if trace is None:
        raise ValueError("tracing was not enabled for this forward pass")
    out = []
    ordered = sorted(trace.entries, key=lambda r: (r.kind != "forward", r.layer))
    for record in ordered:
        if record.mask is None:
            continue
        v = record.mask.detach().clamp(min=0)
        peak = v.max()
        if peak > 1:
            v = v / peak
        v = v.max(dim=1, keepdim=True).values
        out.append((record.layer, v))
    return out
