"""Cross-modality feature enhancement and exchange.

Each modality computes spatial (N x p) and spectral (C x C) attention maps
from its own tokens; the maps are then swapped across modalities to
re-aggregate the other modality's values, rectified features are fused by
channel-halving maps and concatenation, and residuals restore the inputs'
shapes. Both modalities are presented on the shared H x W token grid; the
HSI cube enters through a learned reduction over its flattened depth axis
and its rectified map is broadcast back across depth for the residual.
"""

import math

import torch
import torch.nn as nn

from .primitives import softmax


class DepthReduce(nn.Module):
    """Learned (H, W, D, C) -> (H, W, C) map over the flattened (D*C) axis."""

    def __init__(self, depth: int, channels: int):
        super().__init__()
        self.depth = depth
        self.proj = nn.Linear(depth * channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        H, W, D, C = x.shape
        if D != self.depth:
            raise ValueError(f"expected depth {self.depth}, got {D}")
        return self.proj(x.reshape(H, W, D * C))


class ModalityHead(nn.Module):
    """Per-modality Q/K/V projections and token-axis rank reducers."""

    def __init__(self, channels: int, tokens: int, rank: int):
        super().__init__()
        if not 1 <= rank <= tokens:
            raise ValueError(f"rank ({rank}) must be in [1, tokens={tokens}]")
        self.scale = 1.0 / math.sqrt(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v_spa = nn.Linear(channels, channels, bias=False)
        self.to_v_spe = nn.Linear(channels, channels, bias=False)
        self.reduce_k = nn.Linear(tokens, rank, bias=False)
        self.reduce_v = nn.Linear(tokens, rank, bias=False)

    def attention_maps(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Spatial (N, p) and spectral (C, C) row-stochastic attention maps."""
        q = self.to_q(t)
        k = self.to_k(t)
        k_proj = self.reduce_k(k.transpose(0, 1)).transpose(0, 1)
        spatial = softmax(q @ k_proj.transpose(0, 1), scale=self.scale, dim=-1)
        spectral = softmax(q.transpose(0, 1) @ k, scale=self.scale, dim=-1)
        return spatial, spectral

    def values(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Rank-reduced spatial values (p, C) and spectral values (N, C)."""
        v_proj = self.reduce_v(self.to_v_spa(t).transpose(0, 1)).transpose(0, 1)
        return v_proj, self.to_v_spe(t)


def cross_rectify(
    hsi_maps: tuple[torch.Tensor, torch.Tensor],
    x_maps: tuple[torch.Tensor, torch.Tensor],
    hsi_values: tuple[torch.Tensor, torch.Tensor],
    x_values: tuple[torch.Tensor, torch.Tensor],
) -> tuple[tuple[torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]:
    """Re-aggregate each modality's values under the other's attention maps.

    Args:
        hsi_maps, x_maps: (SA, SE) pairs, SA (N, p), SE (C, C).
        hsi_values, x_values: (V_proj, V_spe) pairs, V_proj (p, C), V_spe (N, C).

    Returns:
        ((hsi_rec_spa, hsi_rec_spe), (x_rec_spa, x_rec_spe)), all (N, C).
    """
    sa_hsi, se_hsi = hsi_maps
    sa_x, se_x = x_maps
    if sa_hsi.shape[0] != sa_x.shape[0]:
        raise ValueError("token counts of the two modalities must match")
    hsi_rec_spa = sa_x @ hsi_values[0]
    x_rec_spa = sa_hsi @ x_values[0]
    hsi_rec_spe = hsi_values[1] @ se_x
    x_rec_spe = x_values[1] @ se_hsi
    return (hsi_rec_spa, hsi_rec_spe), (x_rec_spa, x_rec_spe)


class CmfexBlock(nn.Module):
    """Full cross-exchange stage: attention swap, fusion maps, residuals.

    mode selects which rectification paths are active: "full" uses both and
    fuses with channel-halving maps; "spa"/"spe" use a single path with a
    full-width map (ablation variants).
    """

    def __init__(self, channels: int, tokens: int, rank: int, hsi_depth: int,
                 mode: str = "full"):
        super().__init__()
        if mode not in ("full", "spa", "spe"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "full" and channels % 2 != 0:
            raise ValueError("channels must be even for the halving maps")
        self.mode = mode
        self.depth_reduce = DepthReduce(hsi_depth, channels)
        self.hsi_head = ModalityHead(channels, tokens, rank)
        self.x_head = ModalityHead(channels, tokens, rank)
        half = channels // 2 if mode == "full" else channels
        if mode in ("full", "spa"):
            self.hsi_out_spa = nn.Linear(channels, half)
            self.x_out_spa = nn.Linear(channels, half)
        if mode in ("full", "spe"):
            self.hsi_out_spe = nn.Linear(channels, half)
            self.x_out_spe = nn.Linear(channels, half)

    def reduce(self, x_hsi: torch.Tensor) -> torch.Tensor:
        return self.depth_reduce(x_hsi)

    def forward(self, x_hsi: torch.Tensor, x_x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        H, W, D, C = x_hsi.shape
        if x_x.shape[:2] != (H, W):
            raise ValueError("spatial grids of the two modalities must agree")
        n = H * W
        t_hsi = self.depth_reduce(x_hsi).reshape(n, C)
        t_x = x_x.reshape(n, C)

        hsi_maps = self.hsi_head.attention_maps(t_hsi)
        x_maps = self.x_head.attention_maps(t_x)
        hsi_vals = self.hsi_head.values(t_hsi)
        x_vals = self.x_head.values(t_x)
        (h_spa, h_spe), (x_spa, x_spe) = cross_rectify(hsi_maps, x_maps, hsi_vals, x_vals)

        if self.mode == "full":
            hsi_rec = torch.cat([self.hsi_out_spa(h_spa), self.hsi_out_spe(h_spe)], dim=-1)
            x_rec = torch.cat([self.x_out_spa(x_spa), self.x_out_spe(x_spe)], dim=-1)
        elif self.mode == "spa":
            hsi_rec = self.hsi_out_spa(h_spa)
            x_rec = self.x_out_spa(x_spa)
        else:
            hsi_rec = self.hsi_out_spe(h_spe)
            x_rec = self.x_out_spe(x_spe)

        y_hsi = x_hsi + hsi_rec.reshape(H, W, 1, C)
        y_x = x_x + x_rec.reshape(H, W, C)
        return y_hsi, y_x
