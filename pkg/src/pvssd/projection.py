"""BEV-map backbone with per-stage fusion of voxel-derived BEV features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import Conv2d, LayerNorm, Module
from .autodiff.tensor import ShapeError, Tensor


@dataclass
class BackbonePlan:
    """Five stages; stage 0 reduces by 4 (two stride-2 convs), stage 1 keeps resolution."""
    channels: tuple = (32, 64, 128, 256, 256)
    strides: tuple = (4, 1, 2, 2, 2)
    in_channels: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.channels) != 5 or len(self.strides) != 5 or min(self.channels) < 1:
            raise ValueError("BackbonePlan needs five channel widths and five strides")
        if self.strides[0] not in (1, 2, 4) or any(s not in (1, 2) for s in self.strides[1:]):
            raise ValueError(f"BackbonePlan: unsupported strides {self.strides}")

    def resolutions(self, size: int) -> list[int]:
        out, cur = [], size
        for s in self.strides:
            if cur % s:
                raise ValueError(f"BackbonePlan: resolution {cur} not divisible by stride {s}")
            cur //= s
            out.append(cur)
        return out


class ConvBlock(Module):
    """3x3 conv, layer norm over channels, GeLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1):
        self.conv = Conv2d(c_in, c_out, 3, rng, stride=stride)
        self.norm = LayerNorm(c_out, axis=0)

    def forward(self, x: Tensor) -> Tensor:
        return F.gelu(self.norm(self.conv(x)))


class BackboneStage(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        if stride == 4:
            self.blocks = [ConvBlock(c_in, c_out, rng, 2), ConvBlock(c_out, c_out, rng, 2)]
        else:
            self.blocks = [ConvBlock(c_in, c_out, rng, stride), ConvBlock(c_out, c_out, rng)]
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] % self.stride or x.shape[2] % self.stride:
            raise ShapeError("backbone_stage", x.shape, detail=f"not divisible by stride {self.stride}")
        for b in self.blocks:
            x = b(x)
        return x


class FuseStage(Module):
    """Concatenate BEV and voxel maps, then 1x1 and 3x3 convs back to the BEV width."""

    def __init__(self, c_bev: int, c_vox: int, rng: np.random.Generator, stage: int = 0):
        self.squeeze = Conv2d(c_bev + c_vox, c_bev, 1, rng)
        self.mix = Conv2d(c_bev, c_bev, 3, rng)
        self.stage = stage

    def forward(self, bev: Tensor, vox: Tensor) -> Tensor:
        if bev.shape[1:] != vox.shape[1:]:
            raise ShapeError("fuse_stage", bev.shape, vox.shape, detail=f"resolution mismatch at stage {self.stage}")
        return self.mix(self.squeeze(F.concat([bev, vox], axis=0)))


class ProjectionBranch(Module):
    def __init__(self, plan: BackbonePlan, voxel_channels: tuple, rng: np.random.Generator):
        self.plan = plan
        ch = (plan.in_channels,) + plan.channels
        self.stages = [BackboneStage(ch[i], ch[i + 1], plan.strides[i], rng) for i in range(5)]
        self.fuse = [FuseStage(plan.channels[s], voxel_channels[s - 1], rng, s) for s in range(1, 5)]

    def forward(self, bev: Tensor, voxel_feats: list[Tensor]) -> list[Tensor]:
        """Post-fusion features of stages 1-4."""
        if len(voxel_feats) != 4:
            raise ValueError(f"projection branch expects 4 voxel maps, got {len(voxel_feats)}")
        x = self.stages[0](bev)
        outs = []
        for s in range(1, 5):
            x = self.fuse[s - 1](self.stages[s](x), voxel_feats[s - 1])
            outs.append(x)
        return outs
