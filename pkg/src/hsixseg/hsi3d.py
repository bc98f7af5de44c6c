"""Paired spatial/spectral attention and the volumetric block for the HSI branch.

The attention module shares one set of queries and keys between a spatial
branch (token attention against rank-reduced keys/values, N x p) and a
spectral branch (channel-affinity attention, C x C), so no N x N matrix is
ever formed.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .primitives import ChannelLayerNorm, softmax


class PairedAttention(nn.Module):
    """Shared-query/key spatial + spectral attention on an (H, W, D, C) cube.

    The token-axis rank reducers are learned (tokens -> rank) linear maps,
    which ties the module to a fixed token count N = H * W * D.
    """

    def __init__(self, channels: int, tokens: int, rank: int):
        super().__init__()
        if channels % 2 != 0:
            raise ValueError(f"channels must be even for the halving maps, got {channels}")
        if not 1 <= rank <= tokens:
            raise ValueError(f"rank ({rank}) must be in [1, tokens={tokens}]")
        self.tokens = tokens
        self.scale = 1.0 / math.sqrt(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v_spa = nn.Linear(channels, channels, bias=False)
        self.to_v_spe = nn.Linear(channels, channels, bias=False)
        self.reduce_k = nn.Linear(tokens, rank, bias=False)
        self.reduce_v = nn.Linear(tokens, rank, bias=False)
        self.out_spa = nn.Linear(channels, channels // 2)
        self.out_spe = nn.Linear(channels, channels // 2)

    def attention(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Spatial (N, p) and spectral (C, C) attention maps for tokens (N, C)."""
        q = self.to_q(t)
        k = self.to_k(t)
        k_proj = self.reduce_k(k.transpose(0, 1)).transpose(0, 1)  # (p, C)
        spatial = softmax(q @ k_proj.transpose(0, 1), scale=self.scale, dim=-1)
        spectral = softmax(q.transpose(0, 1) @ k, scale=self.scale, dim=-1)
        return spatial, spectral

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        H, W, D, C = x.shape
        n = H * W * D
        if n != self.tokens:
            raise ValueError(f"expected {self.tokens} tokens, got {n} from shape {tuple(x.shape)}")
        t = x.reshape(n, C)
        spatial, spectral = self.attention(t)
        v_proj = self.reduce_v(self.to_v_spa(t).transpose(0, 1)).transpose(0, 1)  # (p, C)
        y_spa = spatial @ v_proj
        y_spe = self.to_v_spe(t) @ spectral
        out = torch.cat([self.out_spa(y_spa), self.out_spe(y_spe)], dim=-1)
        return out.reshape(H, W, D, C)


class VolumetricFfn(nn.Module):
    """3x3x3 conv -> ReLU -> 3x3x3 conv over (H, W, D), same-padding.

    The hidden width is channels // 2 to keep the dense 27-tap convolutions
    affordable.
    """

    def __init__(self, channels: int):
        super().__init__()
        hidden = max(1, channels // 2)
        self.conv_in = nn.Conv3d(channels, hidden, 3, padding=1)
        self.conv_out = nn.Conv3d(hidden, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (H, W, D, C) -> (1, C, H, W, D)
        v = x.permute(3, 0, 1, 2).unsqueeze(0)
        v = self.conv_out(F.relu(self.conv_in(v)))
        return v.squeeze(0).permute(1, 2, 3, 0)


class Dcn3dBlock(nn.Module):
    """X2 = LN(attn(X)) + X; Xout = Conv1(FFN(X2)) + X2 on an (H, W, D, C) cube."""

    def __init__(self, channels: int, tokens: int, rank: int):
        super().__init__()
        self.attn = PairedAttention(channels, tokens, rank)
        self.norm = ChannelLayerNorm(channels)
        self.ffn = VolumetricFfn(channels)
        self.conv1 = nn.Conv3d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[2] < 1:
            raise ValueError(f"expected an (H, W, D, C) cube with D >= 1, got {tuple(x.shape)}")
        x2 = self.norm(self.attn(x)) + x
        v = self.conv1(self.ffn(x2).permute(3, 0, 1, 2).unsqueeze(0))
        return v.squeeze(0).permute(1, 2, 3, 0) + x2
