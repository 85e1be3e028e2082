"""
Conditional Gaussian entropy model: quantization, per-element likelihoods, rate
estimates and the symbol tables handed to the range coder.
"""
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from src.compression.range_coder import (PRECISION, RangeDecoder, RangeEncoder,
                                         pmf_to_quantized_cdf)
from src.utilities.exceptions import BitstreamError, DimensionError

SIGMA_MIN = 0.04
LIKELIHOOD_FLOOR = 2.0 ** -32
MAX_ALPHABET_EXTENT = 64
ESCAPE_CHUNK_BITS = 15


def standardized_cumulative(x: torch.Tensor) -> torch.Tensor:
    # erfc keeps precision in the tails
    return 0.5 * torch.erfc(-(2 ** -0.5) * x)


def quantize(y: torch.Tensor,
             mode: str,
             mu: Optional[torch.Tensor] = None,
             generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    train: y + u, u ~ U(-0.5, 0.5) drawn from `generator`
    eval:  round(y - mu) + mu
    """
    if mode == 'train':
        noise = torch.rand(y.shape, generator=generator, dtype=y.dtype) - 0.5
        return y + noise
    if mode == 'eval':
        if mu is None:
            return torch.round(y)
        return torch.round(y - mu) + mu
    raise ValueError(f"Invalid quantization mode: {mode}")


def _check_parameters(y_hat: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor):
    if y_hat.shape != mu.shape or y_hat.shape != sigma.shape:
        raise DimensionError(f"Latent {tuple(y_hat.shape)}, means {tuple(mu.shape)} and scales "
                             f"{tuple(sigma.shape)} must match")
    if bool((sigma < SIGMA_MIN).any()):
        raise ValueError(f"Scales must be clamped at sigma_min={SIGMA_MIN}")


def likelihood(y_hat: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Probability mass of the unit bin around y_hat, floored at 2^-32."""
    _check_parameters(y_hat, mu, sigma)
    values = torch.abs(y_hat - mu)
    upper = standardized_cumulative((0.5 - values) / sigma)
    lower = standardized_cumulative((-0.5 - values) / sigma)
    return torch.clamp(upper - lower, min=LIKELIHOOD_FLOOR)


def rate_estimate(y_hat: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Total estimated bits, -sum log2 p(y_hat). Differentiable in mu, sigma and y_hat."""
    return -torch.log2(likelihood(y_hat, mu, sigma)).sum()


def clamp_scales(raw: torch.Tensor) -> torch.Tensor:
    return torch.clamp(nn.functional.softplus(raw), min=SIGMA_MIN)


def alphabet_extent(sigma: np.ndarray) -> np.ndarray:
    """Per-element half width A of the coded alphabet [-A, A]."""
    return np.clip(np.ceil(6.0 * np.asarray(sigma, dtype=np.float64)), 1, MAX_ALPHABET_EXTENT).astype(np.int64)


def build_cdfs(sigma: np.ndarray) -> List[np.ndarray]:
    """
    One quantized cumulative table per element over [-A, A] plus a trailing escape
    symbol carrying the tail mass. Both sides call this with bit-identical scales.
    """
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    extents = alphabet_extent(sigma)
    tables: List[Optional[np.ndarray]] = [None] * sigma.size
    for extent in np.unique(extents):
        idx = np.nonzero(extents == extent)[0]
        s = torch.from_numpy(sigma[idx]).unsqueeze(1)
        k = torch.arange(-extent, extent + 1, dtype=torch.float64).unsqueeze(0)
        pmf = standardized_cumulative((k + 0.5) / s) - standardized_cumulative((k - 0.5) / s)
        tail = 2.0 * standardized_cumulative((-extent - 0.5) / s)
        cdf = pmf_to_quantized_cdf(torch.cat([pmf, tail], dim=1).numpy(), PRECISION)
        for row, i in enumerate(idx):
            tables[i] = cdf[row]
    return tables


def _encode_escape(encoder: RangeEncoder, magnitude: int, negative: bool):
    encoder.encode_literal(int(negative), 1)
    while True:
        chunk = magnitude & ((1 << ESCAPE_CHUNK_BITS) - 1)
        magnitude >>= ESCAPE_CHUNK_BITS
        encoder.encode_literal(chunk, ESCAPE_CHUNK_BITS)
        encoder.encode_literal(int(magnitude > 0), 1)
        if magnitude == 0:
            break


def _decode_escape(decoder: RangeDecoder) -> Tuple[int, bool]:
    negative = bool(decoder.decode_literal(1))
    magnitude, shift = 0, 0
    while True:
        magnitude |= decoder.decode_literal(ESCAPE_CHUNK_BITS) << shift
        shift += ESCAPE_CHUNK_BITS
        if not decoder.decode_literal(1):
            break
        if shift > 60:
            raise BitstreamError("Escape value does not terminate")
    return magnitude, negative


class GaussianConditional(nn.Module):
    """
    Per-element Gaussian with decoder-computable means and scales.

    forward() gives (y_hat, likelihoods) for training/evaluation; compress() and
    decompress() produce and consume the actual range-coded payload.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        self.generator = torch.Generator().manual_seed(seed)

    def reseed(self, seed: int):
        self.generator.manual_seed(seed)

    def forward(self, y: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor,
                training: Optional[bool] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        if training is None:
            training = self.training
        y_hat = quantize(y, 'train' if training else 'eval', mu, self.generator)
        return y_hat, likelihood(y_hat, mu, sigma)

    @staticmethod
    def symbols(y_hat: torch.Tensor, mu: torch.Tensor) -> np.ndarray:
        return torch.round(y_hat - mu).detach().reshape(-1).numpy().astype(np.int64)

    def compress_into(self, encoder: RangeEncoder, y_hat: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor):
        _check_parameters(y_hat, mu, sigma)
        sigma_np = sigma.detach().reshape(-1).numpy()
        tables = build_cdfs(sigma_np)
        extents = alphabet_extent(sigma_np)
        for symbol, cdf, extent in zip(self.symbols(y_hat, mu), tables, extents):
            if abs(symbol) <= extent:
                encoder.encode_symbol(int(symbol + extent), cdf)
            else:
                encoder.encode_symbol(int(2 * extent + 1), cdf)
                _encode_escape(encoder, int(abs(symbol) - extent - 1), symbol < 0)

    def decompress_from(self, decoder: RangeDecoder, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
        sigma_np = sigma.detach().reshape(-1).numpy()
        tables = build_cdfs(sigma_np)
        extents = alphabet_extent(sigma_np)
        out = np.empty(sigma_np.size, dtype=np.int64)
        for i, (cdf, extent) in enumerate(zip(tables, extents)):
            index = decoder.decode_symbol(cdf)
            if index <= 2 * extent:
                out[i] = index - extent
            else:
                magnitude, negative = _decode_escape(decoder)
                value = int(extent) + 1 + magnitude
                out[i] = -value if negative else value
        symbols = torch.from_numpy(out).to(mu.dtype).view(mu.shape)
        return symbols + mu.detach()

    def compress(self, y_hat: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> bytes:
        encoder = RangeEncoder()
        self.compress_into(encoder, y_hat, mu, sigma)
        return encoder.finish()

    def decompress(self, data: bytes, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
        decoder = RangeDecoder(data)
        y_hat = self.decompress_from(decoder, mu, sigma)
        decoder.finish()
        return y_hat


def bits_to_bpp(bits: float, height: int, width: int) -> float:
    return float(bits) / (height * width)

