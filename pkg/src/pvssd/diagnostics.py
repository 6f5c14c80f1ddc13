"""Finite-difference gradient checks for every network block on small float64 inputs."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Linear, Tensor, grad_check
from .autodiff import functional as F
from .geometry import RangeSpec
from .head import SSDHead, detection_losses, direction_loss, focal_loss, generate_anchors, loc_loss, match_anchors
from .neck import AlignStage, AttentionFuse, MSPFusion
from .preprocess import VoxelSpec, voxelize
from .projection import BackboneStage, FuseStage
from .voxel_branch import PFW, SVFE, VFE, ScoringHead, StagePlan, VoxelBranch, VoxelToBEV, stage_from_voxelset

BLOCK_TOLERANCE = 1e-4
LINEAR_TOLERANCE = 1e-8


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _probe(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.normal(size=out.shape))
    return lambda y: F.sum(F.mul(y, w))


def _points(rng, c, v, n):
    mask = np.arange(n)[None] < rng.integers(1, n + 1, size=v)[:, None]
    return Tensor(rng.normal(size=(c, v, n)) * mask, requires_grad=True), mask


def _module_check(block, inputs, call, rng, max_per_param=None):
    probe = _probe(call(), rng)
    return grad_check(lambda: probe(call()), list(inputs) + block.parameters(), max_per_param=max_per_param,
                      rng=np.random.default_rng(0))


def check_linear(rng):
    lin = Linear(4, 3, rng)
    x = _param(rng, 4, 5)
    return _module_check(lin, [x], lambda: lin(x), rng)


def check_vfe(rng):
    x, m = _points(rng, 6, 3, 4)
    b = VFE(6, 8, rng)
    return _module_check(b, [x], lambda: b(x, m), rng)


def check_pfw(rng):
    x, m = _points(rng, 6, 3, 4)
    b = PFW(6, rng)
    return _module_check(b, [x], lambda: b(x, m), rng)


def check_scoring(rng):
    x, m = _points(rng, 8, 3, 5)
    b = ScoringHead(8, rng)
    return _module_check(b, [x], lambda: b(x, m), rng)


def check_svfe(rng):
    x, m = _points(rng, 6, 3, 4)
    b = SVFE(6, 8, rng)
    return _module_check(b, [x], lambda: b(x, m), rng)


def check_voxel_to_bev(rng):
    spec = VoxelSpec(RangeSpec(0, 0.8, 0, 0.8, 0, 0.5), (0.2, 0.2, 0.25), 10, 3)
    st = stage_from_voxelset(voxelize(rng.uniform([0, 0, 0, 0], [0.8, 0.8, 0.5, 1], (12, 4)), spec, rng),
                             spec.grid_dims)
    st.features = Tensor(rng.normal(size=(3,) + st.mask.shape) * st.mask, requires_grad=True)
    b = VoxelToBEV(3, spec.grid_dims[2], 2, rng)
    return _module_check(b, [st.features], lambda: b(st).features, rng)


def check_voxel_branch(rng):
    spec = VoxelSpec(RangeSpec(0, 1.6, 0, 1.6, 0, 2.0), (0.1, 0.1, 0.125), 50, 4)
    plan = StagePlan(channels=(4,) * 5, planar_factors=(2,) * 4, depth_factors=(2,) * 4,
                     points_per_voxel=(4,) * 4, bev_channels=(2,) * 4)
    b = VoxelBranch(plan, spec.grid_dims, rng)
    cloud = np.array([[0.05, 0.05, 0.05, 0.1], [0.06, 0.04, 0.07, 0.5], [0.55, 0.35, 0.3, 0.2],
                      [0.54, 0.33, 0.31, 0.9], [1.25, 1.45, 1.6, 0.4], [0.95, 0.15, 0.9, 0.7]])
    vs = voxelize(cloud, spec, rng)
    probes = [Tensor(rng.normal(size=o.features.shape)) for o in b(vs, np.random.default_rng(0))]

    def f():
        outs = b(vs, np.random.default_rng(0))
        total = F.sum(F.mul(outs[0].features, probes[0]))
        for o, p in zip(outs[1:], probes[1:]):
            total = F.add(total, F.sum(F.mul(o.features, p)))
        return total

    return grad_check(f, b.parameters(), max_per_param=6, rng=np.random.default_rng(1))


def check_backbone_stage(rng):
    b = BackboneStage(2, 3, 2, rng)
    x = _param(rng, 2, 8, 8)
    return _module_check(b, [x], lambda: b(x), rng)


def check_fuse_stage(rng):
    b = FuseStage(3, 2, rng)
    x, v = _param(rng, 3, 5, 5), _param(rng, 2, 5, 5)
    return _module_check(b, [x, v], lambda: b(x, v), rng)


def check_msp(rng):
    b = MSPFusion(4, 3, rng)
    v, x = _param(rng, 4, 3, 3), _param(rng, 3, 3, 3)
    return _module_check(b, [v, x], lambda: b(v, x), rng)


def check_align(rng):
    b = AlignStage(2, 3, 2, 8, rng)
    x = _param(rng, 2, 2, 2)
    return _module_check(b, [x], lambda: b(x), rng)


def check_attention(rng):
    b = AttentionFuse(3, 2, rng)
    xs = [_param(rng, 2, 8, 8) for _ in range(3)]
    return _module_check(b, xs, lambda: b(xs), rng)


def check_head(rng):
    area = RangeSpec(0, 12.8, -6.4, 6.4, -3, 1)
    grid = generate_anchors(area, 8, 8)
    gts = np.array([[3.0, 1.0, -1.0, 1.6, 3.9, 1.5, 0.2], [9.0, -3.0, -0.6, 0.6, 1.7, 1.7, -2.0]])
    assign = match_anchors(grid, gts, np.array([0, 1]))
    b = SSDHead(3, 4, rng)
    x = _param(rng, 3, 8, 8)
    return grad_check(lambda: detection_losses(b(x), assign)["total"], [x] + b.parameters(), max_per_param=20,
                      rng=np.random.default_rng(0))


def check_loc_loss(rng):
    x = Tensor(rng.normal(0, 1.5, size=(7, 5)), requires_grad=True)
    t = rng.normal(size=(7, 5))
    return grad_check(lambda: loc_loss(x, t, 4), [x])


def check_focal_loss(rng):
    x = Tensor(rng.uniform(0.05, 0.95, size=12), requires_grad=True)
    lab = rng.integers(-1, 2, size=12)
    return grad_check(lambda: focal_loss(x, lab, 3), [x])


def check_direction_loss(rng):
    x = Tensor(rng.uniform(0.05, 0.95, size=6), requires_grad=True)
    bits = rng.integers(0, 2, size=6).astype(float)
    return grad_check(lambda: direction_loss(x, bits), [x])


CHECKS = {
    "linear": (check_linear, LINEAR_TOLERANCE),
    "vfe": (check_vfe, BLOCK_TOLERANCE),
    "pfw": (check_pfw, BLOCK_TOLERANCE),
    "revox_scoring": (check_scoring, BLOCK_TOLERANCE),
    "svfe": (check_svfe, BLOCK_TOLERANCE),
    "voxel_to_bev": (check_voxel_to_bev, BLOCK_TOLERANCE),
    "voxel_branch": (check_voxel_branch, BLOCK_TOLERANCE),
    "backbone_stage": (check_backbone_stage, BLOCK_TOLERANCE),
    "fuse_stage": (check_fuse_stage, BLOCK_TOLERANCE),
    "msp_fusion": (check_msp, BLOCK_TOLERANCE),
    "align_stage": (check_align, BLOCK_TOLERANCE),
    "attention_fuse": (check_attention, BLOCK_TOLERANCE),
    "head": (check_head, BLOCK_TOLERANCE),
    "loc_loss": (check_loc_loss, BLOCK_TOLERANCE),
    "focal_loss": (check_focal_loss, BLOCK_TOLERANCE),
    "dir_loss": (check_direction_loss, BLOCK_TOLERANCE),
}


def run_gradchecks(seed: int = 0) -> list[tuple[str, float, float]]:
    """``(block, max relative error, tolerance)`` for each registered check."""
    out = []
    for i, (name, (fn, tol)) in enumerate(CHECKS.items()):
        out.append((name, float(fn(np.random.default_rng([seed, i]))), tol))
    return out
