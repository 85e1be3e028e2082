"""
Multiple-frame local / non-local context mining.

For pyramid level i and the two propagated references F_t (ref1) and F_{t-1} (ref2):
    cl_ref1  = OffsetDiversity(Warp(F_t^i, v_t^i), v_t^i)
    cl_ref2  = MultiScaleRefine(Warp(c_prev^i, v_t^i))       c_prev = cl_ref1 of the previous frame
    cnl_ref1 = MHLCA(y^i, F_t^i)
    cnl_ref2 = MHLCA(y^i, F_{t-1}^i)
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from src.architectures.attention import AttentionConfig, MultiHeadLinearCrossAttention
from src.architectures.building_blocks import initialize, zero_conv
from src.architectures.motion import (MultiScaleRefine, OffsetDiversity, downsample_flow,
                                      second_reference_context, warp)
from src.utilities.exceptions import ConfigError, DimensionError, ReferenceUnavailable
from src.utilities.tensor_ops import DTYPE, LEAKY_SLOPE, leaky_relu, resample

CONTEXT_MODES = ('base', 'nlc', 'mnlc')


@dataclass
class MultiScaleFeatures:
    scales: List[torch.Tensor]

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.scales[i]

    def __len__(self):
        return len(self.scales)


@dataclass
class ContextSet:
    cl_ref1: torch.Tensor
    cl_ref2: torch.Tensor
    cnl_ref1: torch.Tensor
    cnl_ref2: torch.Tensor

    def streams(self) -> List[torch.Tensor]:
        return [self.cl_ref1, self.cl_ref2, self.cnl_ref1, self.cnl_ref2]

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(s).all()) for s in self.streams())


class FeaturePyramid(nn.Module):
    """conv / down2+conv / down2+conv ladder turning a propagated feature into three scales."""

    def __init__(self, in_channels: int, channels: Sequence[int], slope: float = LEAKY_SLOPE):
        super().__init__()
        self.slope = slope
        chans = [in_channels] + list(channels)
        self.convs = nn.ModuleList([
            nn.Conv2d(chans[i], chans[i + 1], 3, padding=1, padding_mode='replicate')
            for i in range(len(channels))
        ])
        self.apply(initialize)
        self.to(DTYPE)

    def averaging_init(self):
        """Every conv averages its inputs; a constant feature stays constant at every scale."""
        with torch.no_grad():
            for conv in self.convs:
                conv.weight.fill_(1.0 / (conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]))
                conv.bias.zero_()

    def forward(self, f_prop: torch.Tensor) -> MultiScaleFeatures:
        h, w = f_prop.shape[-2:]
        if h % 4 or w % 4:
            raise DimensionError(f"Propagated feature extents must be divisible by 4, got {h} x {w}")
        scales = []
        x = f_prop
        for i, conv in enumerate(self.convs):
            if i > 0:
                x = resample(x, 'down2')
            x = leaky_relu(conv(x), self.slope)
            scales.append(x)
        return MultiScaleFeatures(scales)


def build_pyramid(f_prop: torch.Tensor, pyramid: FeaturePyramid) -> MultiScaleFeatures:
    return pyramid(f_prop)


class LocalContextMiner(nn.Module):
    """Offset diversity and multi-scale refine, one pair per pyramid level."""

    def __init__(self, channels: Sequence[int], groups: int = 4, max_residue_magnitude: float = 2.0,
                 slope: float = LEAKY_SLOPE):
        super().__init__()
        self.offset_diversity = nn.ModuleList([
            OffsetDiversity(c, groups, max_residue_magnitude=max_residue_magnitude, slope=slope) for c in channels
        ])
        self.refine = nn.ModuleList([MultiScaleRefine(c, slope) for c in channels])

    def forward(self, feat_ref1: torch.Tensor, v_i: torch.Tensor, c_prev: Optional[torch.Tensor],
                scale: int, with_second_reference: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
        cl_ref1 = self.offset_diversity[scale](warp(feat_ref1, v_i), v_i)
        if not with_second_reference:
            return cl_ref1, torch.zeros_like(cl_ref1)
        try:
            cl_ref2 = second_reference_context(c_prev, v_i, self.refine[scale])
        except ReferenceUnavailable:
            cl_ref2 = cl_ref1
        return cl_ref1, cl_ref2


class NonLocalContextMiner(nn.Module):
    """One MHLCA per pyramid level, shared by both references."""

    def __init__(self, query_channels: Sequence[int], channels: Sequence[int], num_heads: int = 4,
                 slope: float = LEAKY_SLOPE):
        super().__init__()
        self.attention = nn.ModuleList([
            MultiHeadLinearCrossAttention(qc, c, AttentionConfig(c, num_heads), slope)
            for qc, c in zip(query_channels, channels)
        ])

    def forward(self, y_i: torch.Tensor, feat_ref1: torch.Tensor, feat_ref2: Optional[torch.Tensor],
                scale: int, with_second_reference: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
        cnl_ref1 = self.attention[scale](y_i, feat_ref1)
        if not with_second_reference:
            return cnl_ref1, torch.zeros_like(cnl_ref1)
        if feat_ref2 is None or feat_ref2 is feat_ref1:
            return cnl_ref1, cnl_ref1
        return cnl_ref1, self.attention[scale](y_i, feat_ref2)


def mine_local_contexts(local_miner: LocalContextMiner,
                        feats_t1: MultiScaleFeatures,
                        v_t: torch.Tensor,
                        c_prev: Optional[List[torch.Tensor]],
                        mode: str = 'mnlc') -> List[Tuple[torch.Tensor, torch.Tensor]]:
    """(cl_ref1, cl_ref2) for every scale. Identical on encoder and decoder side."""
    out = []
    for i in range(len(feats_t1)):
        v_i = downsample_flow(v_t, i)
        prev_i = c_prev[i] if c_prev is not None else None
        out.append(local_miner(feats_t1[i], v_i, prev_i, i, with_second_reference=(mode == 'mnlc')))
    return out


def mine_contexts(y_i: torch.Tensor,
                  feats_t1: MultiScaleFeatures,
                  feats_t2: Optional[MultiScaleFeatures],
                  v_t: torch.Tensor,
                  c_prev: Optional[List[torch.Tensor]],
                  scale: int,
                  local_miner: LocalContextMiner,
                  nonlocal_miner: NonLocalContextMiner,
                  mode: str = 'mnlc',
                  local: Optional[Tuple[torch.Tensor, torch.Tensor]] = None) -> ContextSet:
    """
    ContextSet at pyramid level `scale`.

    feats_t2 / c_prev may be None at the first P-frame; the second-reference streams
    then duplicate the first-reference ones. `local` takes precomputed local contexts
    so the encoder and decoder passes of one frame share them.
    """
    if mode not in CONTEXT_MODES:
        raise ConfigError(f"Invalid context mode: {mode}")
    if y_i.shape[-2:] != feats_t1[scale].shape[-2:]:
        raise DimensionError(f"y at scale {scale} has extent {tuple(y_i.shape[-2:])}, "
                             f"reference features {tuple(feats_t1[scale].shape[-2:])}")
    if local is None:
        v_i = downsample_flow(v_t, scale)
        prev_i = c_prev[scale] if c_prev is not None else None
        local = local_miner(feats_t1[scale], v_i, prev_i, scale, with_second_reference=(mode == 'mnlc'))
    cl_ref1, cl_ref2 = local

    if mode == 'base':
        zeros = torch.zeros_like(cl_ref1)
        return ContextSet(cl_ref1, torch.zeros_like(cl_ref1), zeros, zeros)

    feat_ref2 = feats_t2[scale] if feats_t2 is not None else None
    cnl_ref1, cnl_ref2 = nonlocal_miner(y_i, feats_t1[scale], feat_ref2, scale,
                                        with_second_reference=(mode == 'mnlc'))
    return ContextSet(cl_ref1, cl_ref2, cnl_ref1, cnl_ref2)


class ContextFusion(nn.Module):
    """
    Channel-concatenates [y, cl_ref1, cl_ref2, cnl_ref1, cnl_ref2] and fuses them with
    two 3x3 convs, added to a 1x1 projection of y. The second conv starts at zero, so an
    untrained fusion passes the projection of y through.
    """

    def __init__(self, y_channels: int, context_channels: int, out_channels: int, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.slope = slope
        self.y_channels = y_channels
        self.context_channels = context_channels
        in_channels = y_channels + 4 * context_channels
        self.projection = nn.Conv2d(y_channels, out_channels, 1)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = zero_conv(out_channels, out_channels)

        self.apply(initialize)
        self.to(DTYPE)

    def forward(self, y_i: torch.Tensor, ctx: ContextSet) -> torch.Tensor:
        streams = ctx.streams()
        for s in streams:
            if s.shape[-2:] != y_i.shape[-2:] or s.shape[1] != self.context_channels:
                raise DimensionError(f"Context stream {tuple(s.shape)} does not match y {tuple(y_i.shape)} "
                                     f"with {self.context_channels} context channels")
        if y_i.shape[1] != self.y_channels:
            raise DimensionError(f"Expected {self.y_channels} channels for y, got {y_i.shape[1]}")
        body = self.conv2(leaky_relu(self.conv1(torch.cat([y_i] + streams, dim=1)), self.slope))
        return self.projection(y_i) + body


def fuse(y_i: torch.Tensor, ctx: ContextSet, fusion: ContextFusion) -> torch.Tensor:
    return fusion(y_i, ctx)
