"""Point-wise voxel encoders, weight-driven re-voxelization and voxel-to-BEV conversion.

Point features are ``(C, V, N)`` tensors paired with a boolean ``(V, N)``
mask of real points. Padding slots are kept at exactly zero throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import Conv2d, LayerNorm, Linear, Module
from .autodiff.tensor import ShapeError, Tensor
from .preprocess import POINT_FEATURES, VoxelSet, encode_points, group_by_key, pack_groups


def _mask_tensor(mask: np.ndarray) -> Tensor:
    return Tensor(np.asarray(mask, dtype=np.float64)[None])


class FCBlock(Module):
    """Linear, GeLU, layer norm over channels."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.linear = Linear(c_in, c_out, rng)
        self.norm = LayerNorm(c_out, axis=0)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return F.mul(self.norm(F.gelu(self.linear(x))), _mask_tensor(mask))


class VFE(Module):
    """Per-point block to ``c_out/2`` concatenated with the voxel's masked max."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        if c_out % 2:
            raise ValueError(f"VFE: c_out must be even, got {c_out}")
        self.c_in, self.c_out = c_in, c_out
        self.block = FCBlock(c_in, c_out // 2, rng)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        if x.shape[0] != self.c_in or x.shape[1:] != mask.shape:
            raise ShapeError("vfe", x.shape, mask.shape, detail=f"expects ({self.c_in}, V, N) and mask (V, N)")
        h = self.block(x, mask)
        half, v, n = h.shape
        pooled = F.maxpool_over_points(h, mask)
        spread = F.broadcast_to(F.reshape(pooled, (half, v, 1)), (half, v, n))
        return F.mul(F.concat([h, spread], axis=0), _mask_tensor(mask))


class PointWeightHead(Module):
    """Linear stack ending in one logit per point, softmax-normalized over each voxel."""

    def __init__(self, widths: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return F.softmax(x, axis=-1, mask=mask[None])


class PFW(Module):
    """Reweights every point by a per-voxel softmax weight (C -> C/2 -> 1)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.head = PointWeightHead([channels, max(channels // 2, 1), 1], rng)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return F.mul(x, self.head(x, mask))


class ScoringHead(PointWeightHead):
    """Three linear layers C -> C/2 -> C/4 -> 1 used to rank points for re-voxelization."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__([channels, max(channels // 2, 1), max(channels // 4, 1), 1], rng)


class SVFE(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.vfe = VFE(c_in, c_out, rng)
        self.fc = FCBlock(c_out, c_out, rng)
        self.pfw = PFW(c_out, rng)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return self.pfw(self.fc(self.vfe(x, mask), mask), mask)


@dataclass
class StagePlan:
    """Voxel-branch schedule for stages 0-4 (stage 0 has no merge)."""
    channels: tuple = (32, 64, 128, 256, 256)
    planar_factors: tuple = (4, 2, 2, 2)
    depth_factors: tuple = (4, 2, 2, 2)
    points_per_voxel: tuple = (32, 32, 32, 32)
    oversample: float = 2.0
    bev_channels: Optional[tuple] = None   # per stage 1-4; defaults to channels[1:]

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        for name in ("planar_factors", "depth_factors", "points_per_voxel"):
            val = tuple(int(v) for v in getattr(self, name))
            if len(val) != 4 or min(val) < 1:
                raise ValueError(f"StagePlan.{name} needs four positive entries, got {val}")
            setattr(self, name, val)
        if len(self.channels) != 5 or min(self.channels) < 4 or any(c % 2 for c in self.channels):
            raise ValueError(f"StagePlan.channels needs five even widths >= 4, got {self.channels}")
        if self.oversample <= 0:
            raise ValueError("StagePlan.oversample must be positive")
        if self.bev_channels is None:
            self.bev_channels = self.channels[1:]
        self.bev_channels = tuple(int(c) for c in self.bev_channels)
        if len(self.bev_channels) != 4:
            raise ValueError("StagePlan.bev_channels needs four entries")

    def k_keep(self, stage: int, fine_cap: int) -> int:
        """Points kept per fine voxel before merging into stage ``stage`` (1-4)."""
        f = self.planar_factors[stage - 1]
        k = math.ceil(self.points_per_voxel[stage - 1] * self.oversample / (f * f))
        return int(min(max(k, 1), fine_cap))

    def grid_ladder(self, grid_dims: tuple) -> list[tuple]:
        """Voxel grid ``(gx, gy, gz)`` for stages 0-4; each factor must divide exactly."""
        dims = [tuple(int(d) for d in grid_dims)]
        for s in range(4):
            gx, gy, gz = dims[-1]
            f, fz = self.planar_factors[s], self.depth_factors[s]
            if gx % f or gy % f or gz % fz:
                raise ValueError(f"StagePlan: grid {dims[-1]} not divisible by ({f}, {f}, {fz}) at stage {s + 1}")
            dims.append((gx // f, gy // f, gz // fz))
        return dims


@dataclass
class PointStage:
    """Point features of one stage plus the bookkeeping needed to merge further."""
    features: Tensor          # (C, V, N)
    mask: np.ndarray          # (V, N)
    coords: np.ndarray        # (V, 3) (ix, iy, iz)
    raw: np.ndarray           # (V, N, 4) source points, zero padding
    point_index: np.ndarray   # (V, N) row in the original cloud, -1 padding
    grid: tuple = field(default=(0, 0, 0))


def stage_from_voxelset(vs: VoxelSet, grid: tuple) -> PointStage:
    raw = np.ascontiguousarray(vs.features[:4].transpose(1, 2, 0))
    return PointStage(Tensor(vs.features), vs.mask, vs.coords, raw, vs.point_index, tuple(grid))


def topk_per_voxel(weights: np.ndarray, mask: np.ndarray, k: int) -> np.ndarray:
    """Boolean ``(V, N)`` selecting each voxel's ``k`` largest real weights, ties to the lower index."""
    key = np.where(mask, -weights, np.inf)
    order = np.argsort(key, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(mask.shape[1])[None].repeat(len(mask), 0), axis=1)
    return (rank < k) & mask


def revoxelize(stage: PointStage, weights: Tensor, factors: tuple, k_keep: int, target: int,
               rng: np.random.Generator) -> PointStage:
    """Merge fine voxels into coarse ones, keeping high-weight points.

    ``weights`` is the ``(1, V, N)`` scoring softmax. The kept features are
    scaled by their weights (the only path for gradients to the scorer) and
    concatenated with a fresh 10-dim geometric encoding relative to the
    coarse voxel.
    """
    fx, fy, fz = factors
    c, v, n = stage.features.shape
    grid = (stage.grid[0] // fx, stage.grid[1] // fy, stage.grid[2] // fz)
    if v == 0:
        empty = np.zeros((0, target), bool)
        feats = Tensor(np.zeros((c + POINT_FEATURES, 0, target)))
        return PointStage(feats, empty, np.zeros((0, 3), np.int64), np.zeros((0, target, 4)),
                          np.full((0, target), -1, np.int64), grid)
    keep = topk_per_voxel(weights.data[0], stage.mask, k_keep)
    coarse = stage.coords // np.array([fx, fy, fz])
    ckeys = (coarse[:, 2] * grid[1] + coarse[:, 1]) * grid[0] + coarse[:, 0]
    uniq, vrank, _ = group_by_key(ckeys)
    flat = np.nonzero(keep.reshape(-1))[0]                 # kept slots, (voxel, point) row-major
    table = pack_groups(vrank[flat // n], len(uniq), target, rng, candidates=flat)
    new_mask = table >= 0
    safe = np.where(new_mask, table, 0)
    raw = np.where(new_mask[..., None], stage.raw.reshape(-1, 4)[safe], 0.0)
    pidx = np.where(new_mask, stage.point_index.reshape(-1)[safe], -1)
    weighted = F.reshape(F.mul(stage.features, weights), (c, v * n))
    learned = F.gather_columns(weighted, table)
    geo = Tensor(encode_points(raw, new_mask))
    coords = np.stack([uniq % grid[0], (uniq // grid[0]) % grid[1], uniq // (grid[0] * grid[1])], axis=1)
    return PointStage(F.concat([learned, geo], axis=0), new_mask, coords.astype(np.int64), raw, pidx, grid)


@dataclass
class VoxelBEV:
    dense: Tensor      # (C * D', H', W') before the projection convs
    features: Tensor   # (C', H', W')
    depth: int


class VoxelToBEV(Module):
    """Masked max per voxel, scatter to ``(C, D', H', W')``, flatten depth, then 1x1 and 3x3 convs."""

    def __init__(self, channels: int, depth: int, c_out: int, rng: np.random.Generator):
        self.channels, self.depth = channels, depth
        self.reduce = Conv2d(channels * depth, c_out, 1, rng)
        self.mix = Conv2d(c_out, c_out, 3, rng)

    def forward(self, stage: PointStage) -> VoxelBEV:
        gx, gy, gz = stage.grid
        c = stage.features.shape[0]
        if c != self.channels or gz != self.depth:
            raise ShapeError("voxel_to_bev", stage.features.shape, stage.grid,
                             detail=f"expects {self.channels} channels and depth {self.depth}")
        pooled = F.maxpool_over_points(stage.features, stage.mask)         # (C, V)
        ix, iy, iz = stage.coords.T
        target = (iz * gy + iy) * gx + ix
        dense = F.reshape(F.scatter_columns(pooled, target, gz * gy * gx), (c * gz, gy, gx))
        return VoxelBEV(dense, self.mix(self.reduce(dense)), gz)


class VoxelBranch(Module):
    """Stage-0 SVFE, then four (score, re-voxelize, SVFE, to-BEV) stages."""

    def __init__(self, plan: StagePlan, grid_dims: tuple, rng: np.random.Generator):
        self.plan = plan
        self.ladder = plan.grid_ladder(grid_dims)
        ch = plan.channels
        self.svfe = [SVFE(POINT_FEATURES, ch[0], rng)]
        self.scorers = []
        self.to_bev = []
        for s in range(1, 5):
            self.scorers.append(ScoringHead(ch[s - 1], rng))
            self.svfe.append(SVFE(ch[s - 1] + POINT_FEATURES, ch[s], rng))
            self.to_bev.append(VoxelToBEV(ch[s], self.ladder[s][2], plan.bev_channels[s - 1], rng))

    def forward(self, vs: VoxelSet, rng: np.random.Generator) -> list[VoxelBEV]:
        stage = stage_from_voxelset(vs, self.ladder[0])
        stage.features = self.svfe[0](stage.features, stage.mask)
        outs = []
        for s in range(1, 5):
            weights = self.scorers[s - 1](stage.features, stage.mask)
            f, fz = self.plan.planar_factors[s - 1], self.plan.depth_factors[s - 1]
            k = self.plan.k_keep(s, stage.mask.shape[1])
            stage = revoxelize(stage, weights, (f, f, fz), k, self.plan.points_per_voxel[s - 1], rng)
            stage.features = self.svfe[s](stage.features, stage.mask)
            outs.append(self.to_bev[s - 1](stage))
        return outs
