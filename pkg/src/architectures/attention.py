"""
Cross attention between current-frame features (queries) and reference features
(keys/values): the quadratic reference form and the two-softmax linear form.
"""
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from src.architectures.building_blocks import DepthwiseResBlock, initialize
from src.utilities.exceptions import ConfigError, DimensionError
from src.utilities.tensor_ops import DTYPE, LEAKY_SLOPE, matmul, softmax


@dataclass
class AttentionConfig:
    embed_dim: int
    num_heads: int = 4

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_heads < 1:
            raise ConfigError(f"embed_dim and num_heads must be positive, got {self.embed_dim}, {self.num_heads}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


class QKV(NamedTuple):
    q: torch.Tensor  # (..., L, d)
    k: torch.Tensor  # (..., L', d)
    v: torch.Tensor  # (..., L', d)


class AttentionResult(NamedTuple):
    output: torch.Tensor
    similarity: torch.Tensor


def _check_qkv(q, k, v):
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"Keys and values differ in length: {tuple(k.shape)} vs {tuple(v.shape)}")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"Queries and keys differ in width: {tuple(q.shape)} vs {tuple(k.shape)}")


def vanilla_cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> AttentionResult:
    """Softmax(Q K^T) V with a row softmax; keeps the L x L' similarity for inspection."""
    _check_qkv(q, k, v)
    similarity = softmax(matmul(q, k.transpose(-1, -2)), axis=-1)
    return AttentionResult(matmul(similarity, v), similarity)


def linear_cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """
    Softmax_2(Q) (Softmax_1(K)^T V).

    Q is normalized over channels, K over positions, so every row of the implicit
    similarity Softmax_2(Q) Softmax_1(K)^T sums to one. The d x d key-value product
    is formed first; no L x L' buffer exists. No 1/sqrt(d) scaling.

    Args:
        q: (..., L, d)
        k: (..., L', d)
        v: (..., L', d)
    Returns:
        (..., L, d)
    """
    _check_qkv(q, k, v)
    q_normed = softmax(q, axis=-1)
    k_normed = softmax(k, axis=-2)
    key_value = matmul(k_normed.transpose(-1, -2), v)
    return matmul(q_normed, key_value)


def implicit_similarity(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Materialized Softmax_2(Q) Softmax_1(K)^T. Debug/probe use only."""
    return matmul(softmax(q, axis=-1), softmax(k, axis=-2).transpose(-1, -2))


def op_count(mode: str, height: int, width: int, d: int, num_heads: int = 1) -> int:
    """Multiply-adds of one attention evaluation with L = L' = H*W."""
    if min(height, width, d, num_heads) < 1:
        raise ValueError(f"Dimensions must be positive, got H={height}, W={width}, d={d}, heads={num_heads}")
    length = height * width
    if mode == 'vanilla':
        return 2 * length * length * d
    if mode == 'linear':
        head_dim = d // num_heads
        return 2 * length * head_dim * head_dim * num_heads
    raise ValueError(f"Invalid attention mode: {mode}")


def flatten_positions(x: torch.Tensor) -> torch.Tensor:
    """(N, C, H, W) -> (N, H*W, C)"""
    return x.flatten(2).transpose(1, 2)


class MultiHeadLinearCrossAttention(nn.Module):
    """
    Non-local context from one reference: queries embedded from the current
    features y, keys/values from the reference features, linear attention per
    head, heads concatenated and passed through a depth-wise res block.
    """

    def __init__(self,
                 query_channels: int,
                 reference_channels: int,
                 config: AttentionConfig,
                 slope: float = LEAKY_SLOPE):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.query_embedding = DepthwiseResBlock(query_channels, d, slope)
        self.kv_trunk = DepthwiseResBlock(reference_channels, d, slope)
        # a per-channel key offset cancels in the softmax over positions
        self.key_head = nn.Conv2d(d, d, 1, bias=False)
        self.value_head = nn.Conv2d(d, d, 1)
        self.output_block = DepthwiseResBlock(d, d, slope)

        self.apply(initialize)
        self.to(DTYPE)

    def embed_q(self, y: torch.Tensor) -> torch.Tensor:
        return flatten_positions(self.query_embedding(y))

    def embed_kv(self, f: torch.Tensor):
        trunk = self.kv_trunk(f)
        return flatten_positions(self.key_head(trunk)), flatten_positions(self.value_head(trunk))

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        n, length, _ = x.shape
        return x.view(n, length, self.config.num_heads, self.config.head_dim).transpose(1, 2)

    def _merge_heads(self, x: torch.Tensor) -> torch.Tensor:
        n, _, length, _ = x.shape
        return x.transpose(1, 2).reshape(n, length, self.config.embed_dim)

    def qkv(self, y: torch.Tensor, f_ref: torch.Tensor) -> QKV:
        if y.shape[-2:] != f_ref.shape[-2:]:
            raise DimensionError(f"Query and reference scales differ: {tuple(y.shape)} vs {tuple(f_ref.shape)}")
        k, v = self.embed_kv(f_ref)
        return QKV(self.embed_q(y), k, v)

    def forward(self, y: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
        n, _, h, w = y.shape
        q, k, v = self.qkv(y, f_ref)
        attended = linear_cross_attention(self._split_heads(q), self._split_heads(k), self._split_heads(v))
        merged = self._merge_heads(attended).transpose(1, 2).reshape(n, self.config.embed_dim, h, w)
        return self.output_block(merged)

    @torch.no_grad()
    def attention_argmax(self, y: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
        """Per query position, the key position with the largest head-averaged implicit similarity. (N, L)"""
        q, k, _ = self.qkv(y, f_ref)
        similarity = implicit_similarity(self._split_heads(q), self._split_heads(k)).mean(dim=1)
        return similarity.argmax(dim=-1)
