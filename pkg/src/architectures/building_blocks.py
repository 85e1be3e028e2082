import torch
import torch.nn as nn
import torch.nn.functional as F

from src.utilities.tensor_ops import LEAKY_SLOPE, leaky_relu


def initialize(module: nn.Module):
    """
    Weight init used via model.apply(initialize). Fan-in normal with unit gain, zero bias:
    most convs in the ladders are not followed by an activation, so a LeakyReLU gain would
    double the feature variance at every layer.
    Layers flagged with `zero_init = True` start at zero so residual paths begin as identity.
    """
    if isinstance(module, nn.Conv2d):
        if getattr(module, 'zero_init', False):
            nn.init.zeros_(module.weight)
        else:
            nn.init.kaiming_normal_(module.weight, mode='fan_in', nonlinearity='linear')
        if module.bias is not None:
            nn.init.constant_(module.bias, 0)


def zero_conv(in_channels: int, out_channels: int, kernel_size: int = 3, **kwargs) -> nn.Conv2d:
    conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2, **kwargs)
    conv.zero_init = True
    return conv


class ResBlock(nn.Module):
    """conv3x3 -> LeakyReLU -> conv3x3 added to the input; the second conv starts at zero."""

    def __init__(self, channels: int, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.slope = slope
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = zero_conv(channels, channels)

    def forward(self, x):
        return x + self.conv2(leaky_relu(self.conv1(x), self.slope))


class DepthwiseResBlock(nn.Module):
    """
    Depth-wise 3x3 conv -> 1x1 expand -> LeakyReLU -> 1x1, plus a skip path
    (1x1 projection when the channel count changes). Used for the attention
    embeddings and the attention output fusion.
    """

    def __init__(self, in_channels: int, out_channels: int, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.slope = slope
        self.depthwise = nn.Conv2d(in_channels, in_channels, 3, padding=1, groups=in_channels)
        self.pointwise_in = nn.Conv2d(in_channels, out_channels, 1)
        self.pointwise_out = nn.Conv2d(out_channels, out_channels, 1)
        self.skip = nn.Identity() if in_channels == out_channels else nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        residual = self.pointwise_out(leaky_relu(self.pointwise_in(self.depthwise(x)), self.slope))
        return self.skip(x) + residual


class SubpelUp(nn.Module):
    """conv to 4C followed by pixel shuffle (x2 upsampling)."""

    def __init__(self, in_channels: int, out_channels: int, zero: bool = False):
        super().__init__()
        self.conv = zero_conv(in_channels, out_channels * 4) if zero else nn.Conv2d(in_channels, out_channels * 4, 3, padding=1)

    def forward(self, x):
        return F.pixel_shuffle(self.conv(x), 2)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
