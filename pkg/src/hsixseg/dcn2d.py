"""Multi-group deformable aggregation and the 2D block built on it.

The aggregation follows y(p) = sum_g w_g sum_k m_gk x_g(p + p_k + dp_gk):
channels are split into G groups, each group gathers K bilinear samples at
learned per-location offsets around the fixed kernel lattice, weights them
by learned modulation scalars, and projects the result back to C channels
with a location-independent matrix; group outputs are summed.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .primitives import ChannelLayerNorm, Mlp


def kernel_lattice(kernel_size: int, dtype=torch.get_default_dtype()) -> torch.Tensor:
    """Fixed (K, 2) lattice of (dy, dx) offsets for a k x k kernel, row-major.

    k=3 yields {(-1,-1), (-1,0), ..., (1,1)}.
    """
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
    r = kernel_size // 2
    pts = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    return torch.tensor(pts, dtype=dtype)


def dcn_aggregate(
    x: torch.Tensor,
    offsets: torch.Tensor,
    modulation: torch.Tensor,
    group_weights: torch.Tensor,
    lattice: torch.Tensor,
) -> torch.Tensor:
    """Deformable multi-group aggregation on an (H, W, C) map.

    Args:
        x: (H, W, C) input, C divisible by G.
        offsets: (H, W, G, K, 2) sampling offsets in pixels, (dy, dx).
        modulation: (H, W, G, K) raw modulation scalars (not normalized).
        group_weights: (G, C, C') per-group projection, C' = C // G.
        lattice: (K, 2) fixed kernel offsets.

    Returns:
        (H, W, C) aggregated map. Samples outside the grid read as zero.
    """
    H, W, C = x.shape
    G, K = modulation.shape[2], modulation.shape[3]
    if C % G != 0:
        raise ValueError(f"channels ({C}) must be divisible by groups ({G})")
    cg = C // G
    if group_weights.shape != (G, C, cg):
        raise ValueError("group_weights shape must be (G, C, C//G)")

    base_y = torch.arange(H, dtype=x.dtype).view(H, 1, 1, 1)
    base_x = torch.arange(W, dtype=x.dtype).view(1, W, 1, 1)
    py = base_y + lattice[:, 0] + offsets[..., 0]  # (H, W, G, K)
    px = base_x + lattice[:, 1] + offsets[..., 1]

    xg = x.view(H * W, G, cg).permute(1, 0, 2)  # (G, HW, C')

    y0 = torch.floor(py)
    x0 = torch.floor(px)
    wy = py - y0
    wx = px - x0

    gathered = torch.zeros(H, W, G, K, cg, dtype=x.dtype)
    for dy, dx, w in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        yi = (y0 + dy).long()
        xi = (x0 + dx).long()
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1))  # (H, W, G, K)
        flat = idx.permute(2, 0, 1, 3).reshape(G, H * W * K, 1).expand(-1, -1, cg)
        vals = torch.gather(xg, 1, flat).view(G, H, W, K, cg).permute(1, 2, 0, 3, 4)
        vals = vals * valid.unsqueeze(-1)
        gathered = gathered + w.unsqueeze(-1) * vals

    summed = (gathered * modulation.unsqueeze(-1)).sum(dim=3)  # (H, W, G, C')
    return torch.einsum("hwgc,goc->hwo", summed, group_weights)


class OffsetHead(nn.Module):
    """Predicts per-location offsets and modulation from the input map.

    A 3x3 depthwise convolution followed by a linear projection. The linear
    layer is zero-initialized with modulation bias 1, so a fresh head yields
    zero offsets and unit modulation everywhere.
    """

    def __init__(self, channels: int, groups: int, kernel_points: int):
        super().__init__()
        self.groups = groups
        self.kernel_points = kernel_points
        self.dw = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.proj = nn.Linear(channels, groups * kernel_points * 3)
        nn.init.zeros_(self.proj.weight)
        with torch.no_grad():
            bias = torch.zeros(groups * kernel_points * 3)
            bias[2 * groups * kernel_points:] = 1.0  # modulation slots
            self.proj.bias.copy_(bias)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        H, W, C = x.shape
        h = self.dw(x.permute(2, 0, 1).unsqueeze(0)).squeeze(0).permute(1, 2, 0)
        out = self.proj(h)
        G, K = self.groups, self.kernel_points
        offsets = out[..., : 2 * G * K].reshape(H, W, G, K, 2)
        modulation = out[..., 2 * G * K:].reshape(H, W, G, K)
        return offsets, modulation


class DeformableAggregation(nn.Module):
    """Offset head plus the multi-group deformable aggregation."""

    def __init__(self, channels: int, groups: int, kernel_size: int):
        super().__init__()
        if channels % groups != 0:
            raise ValueError(f"channels ({channels}) must be divisible by groups ({groups})")
        self.head = OffsetHead(channels, groups, kernel_size * kernel_size)
        cg = channels // groups
        w = torch.empty(groups, channels, cg)
        nn.init.uniform_(w, -cg**-0.5, cg**-0.5)
        self.group_weights = nn.Parameter(w)
        self.register_buffer("lattice", kernel_lattice(kernel_size))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        offsets, modulation = self.head(x)
        return dcn_aggregate(x, offsets, modulation, self.group_weights, self.lattice)


class Dcn2dBlock(nn.Module):
    """X1 = LN(DCN(Xx)) + Xx; Xout = LN(FFN(X1)) + X1, FFN = MLP(GELU(MLP))."""

    def __init__(self, channels: int, groups: int, kernel_size: int, ffn_ratio: float = 2.0):
        super().__init__()
        self.dcn = DeformableAggregation(channels, groups, kernel_size)
        self.norm1 = ChannelLayerNorm(channels)
        self.ffn = Mlp(channels, int(channels * ffn_ratio), channels)
        self.norm2 = ChannelLayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x1 = self.norm1(self.dcn(x)) + x
        return self.norm2(self.ffn(x1)) + x1
