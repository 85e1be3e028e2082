"""
Motion compensation: backward bilinear warping, offset-diversity refinement of
the warped reference, and the multi-scale refine used for the second-reference
local context.
"""
from typing import Optional, Tuple

import torch
import torch.nn as nn

from src.architectures.building_blocks import ResBlock, SubpelUp, initialize
from src.utilities.exceptions import DimensionError, ReferenceUnavailable
from src.utilities.tensor_ops import DTYPE, LEAKY_SLOPE, leaky_relu, resample, softmax


def check_motion_field(v: torch.Tensor, height: int, width: int):
    if v.dim() != 4 or v.shape[1] != 2 or tuple(v.shape[-2:]) != (height, width):
        raise DimensionError(f"Motion field must be N x 2 x {height} x {width}, got {tuple(v.shape)}")
    if not torch.isfinite(v).all():
        raise ValueError("Motion field contains non-finite values")
    if v.abs().max() > max(height, width):
        raise ValueError(f"Motion magnitude exceeds frame extent {max(height, width)}")


def warp(f: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """
    Sample f at (x - dx, y - dy) with bilinear interpolation and clamp-to-edge borders.

    Written as two nested lerps on gathered corners: a constant image stays constant
    for any flow and integer flows reduce to exact index shifts.

    Args:
        f: (N, C, H, W) or (C, H, W)
        v: (N, 2, H, W) or (2, H, W), displacement in pixels, channel 0 = dx
    """
    squeezed = f.dim() == 3
    if squeezed:
        f, v = f.unsqueeze(0), v.unsqueeze(0)
    n, c, h, w = f.shape
    check_motion_field(v, h, w)

    ys, xs = torch.meshgrid(torch.arange(h, dtype=f.dtype), torch.arange(w, dtype=f.dtype), indexing='ij')
    sample_x = (xs - v[:, 0]).clamp(0, w - 1)
    sample_y = (ys - v[:, 1]).clamp(0, h - 1)

    x0 = sample_x.floor()
    y0 = sample_y.floor()
    ax = (sample_x - x0).unsqueeze(1)
    ay = (sample_y - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = f.reshape(n, c, h * w)

    def gather(yi, xi):
        index = (yi * w + xi).view(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, index).view(n, c, h, w)

    f00, f01 = gather(y0, x0), gather(y0, x1)
    f10, f11 = gather(y1, x0), gather(y1, x1)
    top = f00 + ax * (f01 - f00)
    bottom = f10 + ax * (f11 - f10)
    out = top + ay * (bottom - top)
    return out.squeeze(0) if squeezed else out


def downsample_flow(v: torch.Tensor, scale: int) -> torch.Tensor:
    """Flow for pyramid level `scale`: average-pooled 2^scale times, magnitudes divided by 2^scale."""
    for _ in range(scale):
        v = resample(v, 'down2')
    return v / (2 ** scale)


def blend_candidates(f: torch.Tensor, offsets: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """
    sum_g masks[:, g] * warp(f, offsets[:, g])

    Args:
        f: (N, C, H, W)
        offsets: (N, G, 2, H, W)
        masks: (N, G, H, W)
    """
    out = 0
    for g in range(offsets.shape[1]):
        out = out + masks[:, g:g + 1] * warp(f, offsets[:, g])
    return out


class OffsetDiversity(nn.Module):
    """
    Predicts G residual offset fields and G softmax masks from (warped feature, flow)
    and blends the G re-sampled candidates. The prediction head ends in a
    zero-initialized conv: zero offsets and uniform masks at start.
    """

    def __init__(self,
                 channels: int,
                 groups: int = 4,
                 hidden_channels: Optional[int] = None,
                 max_residue_magnitude: float = 2.0,
                 slope: float = LEAKY_SLOPE):
        super().__init__()
        self.groups = groups
        self.slope = slope
        self.max_residue_magnitude = max_residue_magnitude
        hidden_channels = hidden_channels or channels

        self.conv_offset = nn.Sequential(
            nn.Conv2d(channels + 2, hidden_channels, 3, padding=1),
            nn.LeakyReLU(slope),
            nn.Conv2d(hidden_channels, hidden_channels, 3, padding=1),
            nn.LeakyReLU(slope),
            nn.Conv2d(hidden_channels, 3 * groups, 3, padding=1),
        )
        self.conv_offset[-1].zero_init = True

        self.apply(initialize)
        self.to(DTYPE)

    def predict(self, f_warped: torch.Tensor, v: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        n, _, h, w = f_warped.shape
        raw = self.conv_offset(torch.cat([f_warped, v], dim=1))
        offsets = self.max_residue_magnitude * torch.tanh(raw[:, :2 * self.groups])
        masks = softmax(raw[:, 2 * self.groups:], axis=1)
        return offsets.view(n, self.groups, 2, h, w), masks

    def forward(self, f_warped: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        offsets, masks = self.predict(f_warped, v)
        return blend_candidates(f_warped, offsets, masks)


class MultiScaleRefine(nn.Module):
    """down2 -> res block -> subpel up2, added to the input as a skip, then a res block."""

    def __init__(self, channels: int, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.low_block = ResBlock(channels, slope)
        self.up = SubpelUp(channels, channels, zero=True)
        self.high_block = ResBlock(channels, slope)

        self.apply(initialize)
        self.to(DTYPE)

    def forward(self, c_warped: torch.Tensor) -> torch.Tensor:
        low = self.low_block(resample(c_warped, 'down2'))
        return self.high_block(c_warped + self.up(low))


def second_reference_context(c_prev: Optional[torch.Tensor],
                             v_t: torch.Tensor,
                             refine: MultiScaleRefine) -> torch.Tensor:
    """
    Local context of the older reference, reusing the context stored while coding
    the previous frame. Costs no motion bits: only v_t, already transmitted, is used.
    """
    if c_prev is None:
        raise ReferenceUnavailable("no stored local context from the previous frame")
    return refine(warp(c_prev, v_t))


def motion_side_bits(v_t: torch.Tensor, bits_per_pixel: float) -> float:
    """Fixed-cost model for carrying v_t as side information."""
    return float(bits_per_pixel) * v_t.shape[-2] * v_t.shape[-1]
