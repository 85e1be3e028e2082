import warnings

import torch
import torch.nn.functional as F

from src.utilities.exceptions import DimensionError, MetricUndefinedError
from src.utilities.tensor_ops import DTYPE

MAX_PSNR = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _as_batch(a: torch.Tensor, b: torch.Tensor, detach: bool = True):
    if a.shape != b.shape:
        raise DimensionError(f"Frames differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.dim() != 4:
        raise DimensionError(f"Expected C x H x W or N x C x H x W frames, got {tuple(a.shape)}")
    if detach:
        a, b = a.detach(), b.detach()
    return a.to(DTYPE), b.to(DTYPE)


def mse(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = _as_batch(a, b)
    return float(((a - b) ** 2).mean())


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0, max_psnr: float = MAX_PSNR) -> float:
    """Per-channel PSNR averaged over channels, each capped at max_psnr."""
    a, b = _as_batch(a, b)
    per_channel = ((a - b) ** 2).mean(dim=(0, 2, 3))
    values = []
    for m in per_channel.tolist():
        if m == 0:
            values.append(max_psnr)
        else:
            values.append(min(max_psnr, 10.0 * torch.log10(torch.tensor(peak ** 2 / m, dtype=DTYPE)).item()))
    return float(sum(values) / len(values))


def _fspecial_gauss_1d(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=DTYPE) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return g.view(1, 1, 1, size)


def _gaussian_filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    """Separable valid-mode blur, one window per channel."""
    channels = x.shape[1]
    horizontal = win.repeat(channels, 1, 1, 1)
    vertical = horizontal.transpose(-1, -2)
    return F.conv2d(F.conv2d(x, horizontal, groups=channels), vertical, groups=channels)


def _ssim(x: torch.Tensor, y: torch.Tensor, win: torch.Tensor, data_range: float = 1.0):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu1 = _gaussian_filter(x, win)
    mu2 = _gaussian_filter(y, win)
    mu1_sq, mu2_sq, mu1_mu2 = mu1.pow(2), mu2.pow(2), mu1 * mu2
    sigma1_sq = _gaussian_filter(x * x, win) - mu1_sq
    sigma2_sq = _gaussian_filter(y * y, win) - mu2_sq
    sigma12 = _gaussian_filter(x * y, win) - mu1_mu2

    cs_map = (2 * sigma12 + c2) / (sigma1_sq + sigma2_sq + c2)
    ssim_map = ((2 * mu1_mu2 + c1) / (mu1_sq + mu2_sq + c1)) * cs_map
    return ssim_map.flatten(2).mean(-1), cs_map.flatten(2).mean(-1)


def ms_ssim_levels(height: int, width: int, win_size: int = WIN_SIZE) -> int:
    """Largest l <= 5 such that the coarsest scale still fits the window with margin."""
    smaller = min(height, width)
    levels = 0
    for l in range(1, len(MS_SSIM_WEIGHTS) + 1):
        if smaller > (win_size - 1) * 2 ** (l - 1):
            levels = l
    return levels


def ms_ssim_tensor(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """
    Multi-scale SSIM with the standard five weights, 11x11 Gaussian window (sigma 1.5).

    Frames too small for five scales use fewer scales with renormalized weights and
    emit a warning; frames smaller than one window raise MetricUndefinedError.
    """
    x, y = _as_batch(a, b, detach=False)
    levels = ms_ssim_levels(*x.shape[-2:])
    if levels == 0:
        raise MetricUndefinedError(f"Frames of {tuple(x.shape[-2:])} are too small for an {WIN_SIZE}x{WIN_SIZE} window")
    weights = torch.tensor(MS_SSIM_WEIGHTS[:levels], dtype=DTYPE)
    if levels < len(MS_SSIM_WEIGHTS):
        warnings.warn(f"Frames of {tuple(x.shape[-2:])} allow only {levels} MS-SSIM scales; weights renormalized")
        weights = weights / weights.sum()

    win = _fspecial_gauss_1d(WIN_SIZE, WIN_SIGMA)
    mcs = []
    for i in range(levels):
        ssim_per_channel, cs = _ssim(x, y, win, data_range)
        if i < levels - 1:
            mcs.append(torch.relu(cs))
            padding = [s % 2 for s in x.shape[2:]]
            x = F.avg_pool2d(x, kernel_size=2, padding=padding)
            y = F.avg_pool2d(y, kernel_size=2, padding=padding)
    ssim_per_channel = torch.relu(ssim_per_channel)
    stacked = torch.stack(mcs + [ssim_per_channel], dim=0)
    value = torch.prod(stacked ** weights.view(-1, 1, 1), dim=0)
    return value.mean()


def ms_ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    return float(ms_ssim_tensor(a.detach(), b.detach(), data_range))
