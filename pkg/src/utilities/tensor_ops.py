"""
Shape-checked float64 primitives on top of torch autograd.

Every op accepts C x H x W or N x C x H x W tensors where images are involved and
raises DimensionError instead of letting torch broadcast silently.
"""
from typing import Optional, Union

import torch
import torch.nn.functional as F

from src.utilities.exceptions import DimensionError, UsageError

DTYPE = torch.float64
LEAKY_SLOPE = 0.01


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def _batched(x: torch.Tensor):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise DimensionError(f"Expected C x H x W or N x C x H x W tensor, got shape {tuple(x.shape)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs matrices, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"Inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return torch.matmul(a, b)


def softmax(x: torch.Tensor, axis: int) -> torch.Tensor:
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.dim()}")
    # torch subtracts the running max internally
    return torch.softmax(x, dim=axis)


def conv2d(x: torch.Tensor,
           weight: torch.Tensor,
           bias: Optional[torch.Tensor] = None,
           stride: int = 1,
           padding: Optional[int] = None,
           groups: int = 1) -> torch.Tensor:
    """
    Zero-padded cross-correlation. padding=None selects same-size mode (k-1)/2.
    """
    xb, squeezed = _batched(x)
    if weight.dim() != 4 or weight.shape[-1] != weight.shape[-2]:
        raise DimensionError(f"Expected square C_out x C_in x k x k kernel, got {tuple(weight.shape)}")
    k = weight.shape[-1]
    if k % 2 == 0:
        raise DimensionError(f"Kernel size must be odd, got {k}")
    if xb.shape[1] != weight.shape[1] * groups:
        raise DimensionError(f"Input has {xb.shape[1]} channels, kernel expects {weight.shape[1] * groups}")
    if padding is None:
        padding = (k - 1) // 2
    out = F.conv2d(xb, weight, bias=bias, stride=stride, padding=padding, groups=groups)
    return out.squeeze(0) if squeezed else out


def depthwise_conv2d(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    channels = x.shape[-3]
    if weight.shape[0] != channels or weight.shape[1] != 1:
        raise DimensionError(f"Depthwise kernel must be {channels} x 1 x k x k, got {tuple(weight.shape)}")
    return conv2d(x, weight, bias=bias, groups=channels)


def _check_elementwise(a: torch.Tensor, b: Union[torch.Tensor, float]):
    if isinstance(b, torch.Tensor) and b.dim() > 0 and a.dim() > 0 and a.shape != b.shape:
        raise DimensionError(f"Elementwise ops need equal shapes or a scalar, got {tuple(a.shape)} and {tuple(b.shape)}")


def add(a: torch.Tensor, b: Union[torch.Tensor, float]) -> torch.Tensor:
    _check_elementwise(a, b)
    return a + b


def mul(a: torch.Tensor, b: Union[torch.Tensor, float]) -> torch.Tensor:
    _check_elementwise(a, b)
    return a * b


def scale(a: torch.Tensor, factor: float) -> torch.Tensor:
    return a * factor


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    return F.leaky_relu(x, negative_slope=slope)


def resample(x: torch.Tensor, mode: str) -> torch.Tensor:
    """down2: 2x2 average pool. up2: bilinear x2 (half-pixel centers)."""
    xb, squeezed = _batched(x)
    if mode == 'down2':
        h, w = xb.shape[-2:]
        if h % 2 or w % 2:
            raise DimensionError(f"down2 needs even extents, got {h} x {w}")
        out = F.avg_pool2d(xb, kernel_size=2, stride=2)
    elif mode == 'up2':
        out = F.interpolate(xb, scale_factor=2, mode='bilinear', align_corners=False)
    else:
        raise ValueError(f"Invalid resample mode: {mode}")
    return out.squeeze(0) if squeezed else out


def backward(root: torch.Tensor) -> None:
    if root.numel() != 1:
        raise UsageError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    if root.grad_fn is None and not root.requires_grad:
        raise UsageError("backward root is not part of an autograd graph")
    root.backward()
