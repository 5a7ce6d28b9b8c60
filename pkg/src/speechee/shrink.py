"""Shrinking Unit: stacked strided 1-D convolutions that shorten encoder states."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .encoder import length_mask


@dataclass(frozen=True)
class ShrinkConfig:
    layers: int = 2
    stride: int = 2
    kernel: int = 3

    def __post_init__(self):
        if self.layers < 0 or self.stride < 1:
            raise ValueError("layers must be >= 0 and stride >= 1")
        if self.kernel % 2 == 0:
            raise ValueError("kernel width must be odd")


def shrunk_length(T, layers: int, stride: int):
    """Nested ceil: ceil(...ceil(T / m).../ m), ``layers`` times."""
    for _ in range(layers):
        T = -(-T // stride)
    return T


class ShrinkingUnit(nn.Module):
    def __init__(self, dim: int, cfg: ShrinkConfig = ShrinkConfig()):
        super().__init__()
        self.cfg = cfg
        self.convs = nn.ModuleList(
            nn.Conv1d(dim, dim, cfg.kernel, stride=cfg.stride, padding=(cfg.kernel - 1) // 2)
            for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(dim) if cfg.layers else nn.Identity()

    def forward(self, h: torch.Tensor, lengths: torch.Tensor | None = None):
        """``h``: (B, T, d). Returns shrunk states and their lengths.

        Each layer is a strided convolution followed by GELU; a LayerNorm
        rescales the final output for the decoder's cross-attention.

        With zero layers this is the identity (the "w/o SU" ablation).
        """
        if lengths is None:
            lengths = torch.full((h.shape[0],), h.shape[1], dtype=torch.long)
        if not self.convs:
            return h, lengths
        x = h.transpose(1, 2)
        for conv in self.convs:
            x = x * length_mask(lengths, x.shape[-1])[:, None, :]
            x = F.gelu(conv(x))
            lengths = shrunk_length(lengths, 1, self.cfg.stride)
        x = self.norm(x.transpose(1, 2))
        return x * length_mask(lengths, x.shape[1])[..., None], lengths
