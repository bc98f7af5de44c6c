"""The complete two-branch fusion network.

Wiring: a 1x1-conv stem projects both modalities to the first stage width,
four encoder stages each run parallel per-modality blocks, a cross-exchange
module and a fusion module; the spatial resolution is halved exactly once,
before the second stage. A lightweight all-MLP decoder turns the four fused
maps into full-resolution class logits.

Because the attention modules use learned token-axis rank reducers, a model
instance is bound to the tile size recorded in its config; larger scenes are
processed tile by tile.
"""

import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cmfex import CmfexBlock, DepthReduce
from .dcn2d import Dcn2dBlock
from .hsi3d import Dcn3dBlock
from .primitives import ChannelLayerNorm, Mlp, gelu, silu, softmax

DCN_KERNELS = (3, 3, 7, 7)


@dataclass
class ModelConfig:
    bands: int = 24
    x_channels: int = 1
    num_classes: int = 6
    tile_size: int = 32
    stage_depths: tuple = (2, 2, 2, 2)
    stage_channels: tuple = (24, 48, 64, 96)
    groups_per_stage: tuple = (2, 4, 4, 4)
    dcn_kernel_per_stage: tuple = DCN_KERNELS
    attention_rank: int = 16
    hsi_depth_schedule: tuple = (2, 1, 1, 1)
    decoder_width: int = 64
    ffn_ratio: float = 2.0
    # ablation switches
    x_block: str = "dcn"      # "dcn" | "vit"
    hsi_block: str = "epa"    # "epa" | "dcn2d" | "vit"
    cmfex_mode: str = "full"  # "full" | "spa" | "spe" | "none"
    use_ffm: bool = True

    def __post_init__(self):
        self.stage_depths = tuple(self.stage_depths)
        self.stage_channels = tuple(self.stage_channels)
        self.groups_per_stage = tuple(self.groups_per_stage)
        self.dcn_kernel_per_stage = tuple(self.dcn_kernel_per_stage)
        self.hsi_depth_schedule = tuple(self.hsi_depth_schedule)
        if self.tile_size % 2 != 0:
            raise ValueError("tile_size must be even (one 2x downsample)")
        if len(self.stage_depths) != 4 or any(d < 1 for d in self.stage_depths):
            raise ValueError("stage_depths must be 4 positive integers")
        if self.dcn_kernel_per_stage != DCN_KERNELS:
            raise ValueError(f"dcn_kernel_per_stage is fixed at {DCN_KERNELS}")
        for c, g in zip(self.stage_channels, self.groups_per_stage):
            if c % 2 != 0:
                raise ValueError(f"stage channels must be even, got {c}")
            if c % g != 0:
                raise ValueError(f"stage channels ({c}) must be divisible by groups ({g})")
        prev = self.bands
        for d in self.hsi_depth_schedule:
            if d < 1 or prev % d != 0:
                raise ValueError(
                    f"hsi_depth_schedule entries must divide the preceding depth "
                    f"({prev} -> {d})")
            prev = d
        for i in range(4):
            if self.attention_rank > self.stage_tokens_2d(i):
                raise ValueError("attention_rank exceeds the stage token count")
        if self.x_block not in ("dcn", "vit"):
            raise ValueError(f"unknown x_block {self.x_block!r}")
        if self.hsi_block not in ("epa", "dcn2d", "vit"):
            raise ValueError(f"unknown hsi_block {self.hsi_block!r}")
        if self.cmfex_mode not in ("full", "spa", "spe", "none"):
            raise ValueError(f"unknown cmfex_mode {self.cmfex_mode!r}")

    def stage_hw(self, i: int) -> int:
        return self.tile_size if i == 0 else self.tile_size // 2

    def stage_tokens_2d(self, i: int) -> int:
        return self.stage_hw(i) ** 2

    def stage_tokens_3d(self, i: int) -> int:
        return self.stage_tokens_2d(i) * self.hsi_depth_schedule[i]

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


class Stem(nn.Module):
    """1x1 conv + batch norm + SiLU per branch, projecting to one width."""

    def __init__(self, bands: int, x_channels: int, out_channels: int):
        super().__init__()
        if bands < 1:
            raise ValueError("need at least one spectral band")
        self.x_conv = nn.Conv2d(x_channels, out_channels, 1)
        self.x_bn = nn.BatchNorm2d(out_channels)
        self.h_conv = nn.Conv3d(1, out_channels, 1)
        self.h_bn = nn.BatchNorm3d(out_channels)

    def forward(self, hsi: torch.Tensor, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # hsi (H, W, B) -> cube (H, W, B, C); x (H, W, Cx) -> map (H, W, C)
        h = hsi.permute(2, 0, 1)[None, None]  # (1, 1, B, H, W) -> treat depth-first
        h = h.permute(0, 1, 3, 4, 2)          # (1, 1, H, W, B)
        h = silu(self.h_bn(self.h_conv(h)))
        h = h.squeeze(0).permute(1, 2, 3, 0)  # (H, W, B, C)
        v = x.permute(2, 0, 1).unsqueeze(0)
        v = silu(self.x_bn(self.x_conv(v)))
        v = v.squeeze(0).permute(1, 2, 0)
        return h, v


class VitBlock(nn.Module):
    """Plain single-head transformer block over flattened tokens.

    Ablation baseline for both branches; mirrors the DCN block's
    post-norm residual layout.
    """

    def __init__(self, channels: int, ffn_ratio: float = 2.0):
        super().__init__()
        self.qkv = nn.Linear(channels, 3 * channels, bias=False)
        self.proj = nn.Linear(channels, channels)
        self.norm1 = ChannelLayerNorm(channels)
        self.ffn = Mlp(channels, int(channels * ffn_ratio), channels)
        self.norm2 = ChannelLayerNorm(channels)
        self.scale = channels ** -0.5

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = x.shape
        t = x.reshape(-1, shape[-1])
        q, k, v = self.qkv(t).chunk(3, dim=-1)
        attn = softmax(q @ k.transpose(0, 1), scale=self.scale, dim=-1)
        y = self.proj(attn @ v).reshape(shape)
        x1 = self.norm1(y) + x
        return self.norm2(self.ffn(x1)) + x1


class SliceDcn2dBlock(nn.Module):
    """A 2D block applied independently to every depth slice of a cube.

    Used by the ablation variant that processes the HSI branch with the 2D
    operator; weights are shared across slices.
    """

    def __init__(self, channels: int, groups: int, kernel_size: int, ffn_ratio: float = 2.0):
        super().__init__()
        self.block = Dcn2dBlock(channels, groups, kernel_size, ffn_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        slices = [self.block(x[:, :, d]) for d in range(x.shape[2])]
        return torch.stack(slices, dim=2)


class Ffm(nn.Module):
    """Channel concat, then a depthwise feedforward path plus a shortcut map.

    DWFFN = MLP(DWConv3x3(GELU(MLP(cat)))); output = DWFFN(cat) + MLP(cat),
    mapping (H, W, 2C) -> (H, W, C).
    """

    def __init__(self, channels: int):
        super().__init__()
        self.fc_in = nn.Linear(2 * channels, channels)
        self.dw = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.fc_out = nn.Linear(channels, channels)
        self.shortcut = nn.Linear(2 * channels, channels)

    def forward(self, y_hsi_2d: torch.Tensor, y_x: torch.Tensor) -> torch.Tensor:
        if y_hsi_2d.shape != y_x.shape:
            raise ValueError("fusion inputs must share (H, W, C)")
        cat = torch.cat([y_hsi_2d, y_x], dim=-1)
        h = gelu(self.fc_in(cat))
        h = self.dw(h.permute(2, 0, 1).unsqueeze(0)).squeeze(0).permute(1, 2, 0)
        return self.fc_out(h) + self.shortcut(cat)


class DepthConv(nn.Module):
    """Strided 1x1xS convolution shrinking the spectral depth axis."""

    def __init__(self, channels: int, in_depth: int, out_depth: int):
        super().__init__()
        if in_depth % out_depth != 0:
            raise ValueError(f"depth {in_depth} not divisible by target {out_depth}")
        s = in_depth // out_depth
        self.conv = nn.Conv3d(channels, channels, (1, 1, s), stride=(1, 1, s))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        v = x.permute(3, 0, 1, 2).unsqueeze(0)
        return self.conv(v).squeeze(0).permute(1, 2, 3, 0)


class EncoderStage(nn.Module):
    def __init__(self, cfg: ModelConfig, index: int, in_channels: int, in_depth: int):
        super().__init__()
        c = cfg.stage_channels[index]
        d = cfg.hsi_depth_schedule[index]
        self.index = index

        # Entry transitions: single 2x spatial reduction before stage 2,
        # linear channel projection, strided depth shrink for the cube.
        if index == 1:
            self.x_down = nn.Conv2d(in_channels, in_channels, 3, stride=2, padding=1)
            self.h_down = nn.Conv3d(in_channels, in_channels, (3, 3, 1),
                                    stride=(2, 2, 1), padding=(1, 1, 0))
        else:
            self.x_down = self.h_down = None
        if in_channels != c:
            self.x_proj = nn.Linear(in_channels, c)
            self.h_proj = nn.Linear(in_channels, c)
        else:
            self.x_proj = self.h_proj = None
        self.depth_conv = DepthConv(c, in_depth, d) if in_depth != d else None

        tokens_2d = cfg.stage_tokens_2d(index)
        tokens_3d = cfg.stage_tokens_3d(index)
        g = cfg.groups_per_stage[index]
        k = cfg.dcn_kernel_per_stage[index]

        def x_block():
            if cfg.x_block == "dcn":
                return Dcn2dBlock(c, g, k, cfg.ffn_ratio)
            return VitBlock(c, cfg.ffn_ratio)

        def hsi_block():
            if cfg.hsi_block == "epa":
                return Dcn3dBlock(c, tokens_3d, cfg.attention_rank)
            if cfg.hsi_block == "dcn2d":
                return SliceDcn2dBlock(c, g, k, cfg.ffn_ratio)
            return VitBlock(c, cfg.ffn_ratio)

        self.x_blocks = nn.ModuleList([x_block() for _ in range(cfg.stage_depths[index])])
        self.h_blocks = nn.ModuleList([hsi_block() for _ in range(cfg.stage_depths[index])])

        if cfg.cmfex_mode != "none":
            self.cmfex = CmfexBlock(c, tokens_2d, cfg.attention_rank, d, cfg.cmfex_mode)
            self.depth_reduce = None
        else:
            self.cmfex = None
            self.depth_reduce = DepthReduce(d, c)
        self.ffm = Ffm(c) if cfg.use_ffm else None

    def forward(self, h: torch.Tensor, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if self.x_down is not None:
            if h.shape[0] % 2 != 0 or h.shape[1] % 2 != 0:
                raise ValueError("spatial size must be even at the downsample")
            x = self.x_down(x.permute(2, 0, 1).unsqueeze(0)).squeeze(0).permute(1, 2, 0)
            h = self.h_down(h.permute(3, 0, 1, 2).unsqueeze(0)).squeeze(0).permute(1, 2, 3, 0)
        if self.x_proj is not None:
            x = self.x_proj(x)
            h = self.h_proj(h)
        if self.depth_conv is not None:
            h = self.depth_conv(h)

        for hb, xb in zip(self.h_blocks, self.x_blocks):
            h = hb(h)
            x = xb(x)

        if self.cmfex is not None:
            y_h, y_x = self.cmfex(h, x)
            y_h_2d = self.cmfex.reduce(y_h)
        else:
            y_h, y_x = h, x
            y_h_2d = self.depth_reduce(y_h)
        fused = self.ffm(y_h_2d, y_x) if self.ffm is not None else 0.5 * (y_h_2d + y_x)
        return y_h, y_x, fused


class AllMlpDecoder(nn.Module):
    """Per-stage channel unification, upsample, concat, fuse, classify."""

    def __init__(self, stage_channels, width: int, num_classes: int):
        super().__init__()
        self.unify = nn.ModuleList([nn.Linear(c, width) for c in stage_channels])
        self.fuse = nn.Linear(4 * width, width)
        self.classify = nn.Linear(width, num_classes)

    def forward(self, fused: list[torch.Tensor], out_hw: tuple[int, int]) -> torch.Tensor:
        ups = []
        for f, lin in zip(fused, self.unify):
            u = lin(f).permute(2, 0, 1).unsqueeze(0)
            if u.shape[-2:] != out_hw:
                u = F.interpolate(u, size=out_hw, mode="bilinear", align_corners=False)
            ups.append(u.squeeze(0).permute(1, 2, 0))
        cat = torch.cat(ups, dim=-1)
        return self.classify(gelu(self.fuse(cat)))


class HsiXSegNet(nn.Module):
    """Stem -> four encoder stages -> all-MLP decoder, full-resolution logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = Stem(cfg.bands, cfg.x_channels, cfg.stage_channels[0])
        stages = []
        in_c, in_d = cfg.stage_channels[0], cfg.bands
        for i in range(4):
            stages.append(EncoderStage(cfg, i, in_c, in_d))
            in_c, in_d = cfg.stage_channels[i], cfg.hsi_depth_schedule[i]
        self.stages = nn.ModuleList(stages)
        self.decoder = AllMlpDecoder(cfg.stage_channels, cfg.decoder_width, cfg.num_classes)

    def encode(self, hsi: torch.Tensor, x: torch.Tensor) -> list[torch.Tensor]:
        h, v = self.stem(hsi, x)
        fused = []
        for stage in self.stages:
            h, v, f = stage(h, v)
            fused.append(f)
        return fused

    def forward(self, hsi: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        if hsi.shape[:2] != x.shape[:2]:
            raise ValueError("modalities must share the spatial grid")
        fused = self.encode(hsi, x)
        return self.decoder(fused, hsi.shape[:2])

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def save_checkpoint(path, model: HsiXSegNet) -> None:
    """Write config plus all named weight arrays to a single .npz container.

    Array names are the dotted module paths from ``state_dict``; float
    arrays are stored as little-endian float32.
    """
    arrays = {}
    for name, tensor in model.state_dict().items():
        a = tensor.detach().cpu().numpy()
        if a.dtype.kind == "f":
            a = a.astype("<f4")
        arrays[name] = a
    arrays["__config__"] = np.frombuffer(model.cfg.to_json().encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> HsiXSegNet:
    with np.load(path) as data:
        cfg = ModelConfig.from_json(bytes(data["__config__"]).decode())
        model = HsiXSegNet(cfg)
        state = {}
        for name in data.files:
            if name == "__config__":
                continue
            a = data[name]
            state[name] = torch.from_numpy(a.copy())
        model.load_state_dict(state)
    model.eval()
    return model
