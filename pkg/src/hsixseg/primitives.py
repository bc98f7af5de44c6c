"""Differentiable numerical building blocks shared by all network blocks.

Everything here operates on channels-last tensors: 2D feature maps are
(H, W, C), feature cubes are (H, W, D, C). All functions are pure and
differentiable through torch autograd.
"""

import math

import torch
import torch.nn.functional as F

LAYER_NORM_EPS = 1e-5


def bilinear_sample(field: torch.Tensor, y: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Sample a single-channel field (H, W) at fractional coordinates.

    Locations outside [0, H-1] x [0, W-1] contribute zero (zero padding).
    `y` and `x` may be scalars or tensors of any matching shape; the result
    has that shape. Differentiable w.r.t. the field values and the
    coordinates.
    """
    if field.dim() != 2:
        raise ValueError(f"field must be 2D (H, W), got shape {tuple(field.shape)}")
    y = torch.as_tensor(y, dtype=field.dtype)
    x = torch.as_tensor(x, dtype=field.dtype)
    if not (torch.isfinite(y).all() and torch.isfinite(x).all()):
        raise ValueError("sample coordinates must be finite")
    H, W = field.shape

    y0 = torch.floor(y)
    x0 = torch.floor(x)
    wy = y - y0
    wx = x - x0

    out = torch.zeros(torch.broadcast_shapes(y.shape, x.shape), dtype=field.dtype)
    for dy, dx, w in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        yi = (y0 + dy).long()
        xi = (x0 + dx).long()
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        vals = field[yi.clamp(0, H - 1), xi.clamp(0, W - 1)]
        out = out + w * torch.where(valid, vals, torch.zeros((), dtype=field.dtype))
    return out


def softmax(v: torch.Tensor, scale: float = 1.0, dim: int = -1) -> torch.Tensor:
    """Exp-normalize of scale * v along `dim`, stabilised by max-shift."""
    if v.numel() == 0 or v.shape[dim] == 0:
        raise ValueError("softmax over an empty vector is undefined")
    z = v * scale
    z = z - z.amax(dim=dim, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor,
               eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    """Layer normalization over the trailing (channel) axis, then affine."""
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ValueError("gain/bias length must match the channel axis")
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Affine map over the trailing axis: x @ weight^T + bias."""
    y = x @ weight.transpose(-1, -2)
    if bias is not None:
        y = y + bias
    return y


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def mlp(x: torch.Tensor, w1: torch.Tensor, b1: torch.Tensor,
        w2: torch.Tensor, b2: torch.Tensor) -> torch.Tensor:
    """Two affine maps with a GELU in between."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)


class ChannelLayerNorm(torch.nn.Module):
    """Layer normalization over the trailing channel axis with learned affine."""

    def __init__(self, channels: int, eps: float = LAYER_NORM_EPS):
        super().__init__()
        self.gain = torch.nn.Parameter(torch.ones(channels))
        self.bias = torch.nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Mlp(torch.nn.Module):
    """linear -> GELU -> linear over the trailing axis."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = torch.nn.Linear(in_dim, hidden_dim)
        self.fc2 = torch.nn.Linear(hidden_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(gelu(self.fc1(x)))


def dwconv2d(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Depthwise k x k convolution with same-padding on an (H, W, C) map.

    `kernel` has shape (C, k, k); each output channel depends only on the
    same input channel.
    """
    C, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kernel.shape[1:]}")
    if x.shape[-1] != C:
        raise ValueError("channel count mismatch between input and kernel")
    # (H, W, C) -> (1, C, H, W) for conv2d with groups=C
    xc = x.permute(2, 0, 1).unsqueeze(0)
    w = kernel.unsqueeze(1)  # (C, 1, k, k)
    y = F.conv2d(xc, w, padding=k // 2, groups=C)
    return y.squeeze(0).permute(1, 2, 0)
