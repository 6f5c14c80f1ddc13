"""Full two-branch detector: voxel branch, projection backbone, fusion neck and SSD head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff.nn import Module
from .autodiff.tensor import Tensor
from .head import DEFAULT_ANCHORS, AnchorGrid, HeadOutput, SSDHead, generate_anchors
from .neck import Neck, NeckPlan
from .preprocess import GridSpec, VoxelSet, VoxelSpec
from .projection import BackbonePlan, ProjectionBranch
from .voxel_branch import StagePlan, VoxelBranch


@dataclass
class ModelSpec:
    grid: GridSpec
    voxels: VoxelSpec
    stages: StagePlan
    backbone: BackbonePlan
    neck: NeckPlan
    anchors: tuple = DEFAULT_ANCHORS

    def check(self) -> list[int]:
        """Validate that both branches land on the same ladder; returns stage 1-4 resolutions."""
        if self.grid.width != self.grid.height:
            raise ValueError("model: only square BEV grids are supported")
        gx, gy, _ = self.voxels.grid_dims
        if (gx, gy) != (self.grid.width, self.grid.height):
            raise ValueError(f"model: voxel grid {(gx, gy)} differs from BEV grid {(self.grid.width, self.grid.height)}")
        bev_res = self.backbone.resolutions(self.grid.width)[1:]
        vox_res = [d[0] for d in self.stages.grid_ladder(self.voxels.grid_dims)[1:]]
        if bev_res != vox_res:
            raise ValueError(f"model: backbone ladder {bev_res} != voxel ladder {vox_res}")
        return bev_res


class PVSSD(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        res = spec.check()
        self.resolutions = res
        self.voxel = VoxelBranch(spec.stages, spec.voxels.grid_dims, rng)
        self.projection = ProjectionBranch(spec.backbone, spec.stages.bev_channels, rng)
        dense = tuple(c * d[2] for c, d in zip(spec.stages.channels[1:], self.voxel.ladder[1:]))
        self.neck = Neck(spec.neck, dense, spec.backbone.channels[1:], tuple(res), rng)
        self.head = SSDHead(spec.neck.out_channels, 2 * len(spec.anchors), rng)

    @property
    def output_resolution(self) -> int:
        return self.resolutions[self.spec.neck.out_stage]

    def anchors(self) -> AnchorGrid:
        r = self.output_resolution
        return generate_anchors(self.spec.grid.range, r, r, self.spec.anchors)

    def features(self, bev: np.ndarray, voxels: VoxelSet, rng: np.random.Generator):
        """Per-stage voxel maps, fused backbone maps and the neck output."""
        vbev = self.voxel(voxels, rng)
        stages = self.projection(Tensor(bev), [v.features for v in vbev])
        return vbev, stages, self.neck([v.dense for v in vbev], stages)

    def forward(self, bev: np.ndarray, voxels: VoxelSet, rng: np.random.Generator) -> HeadOutput:
        return self.head(self.features(bev, voxels, rng)[2])
