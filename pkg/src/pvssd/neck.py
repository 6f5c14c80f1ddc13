"""Multi-scale fusion neck: interleaved voxel/BEV canvases, resolution alignment, attention merge."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import Conv2d, Deconv2d, Module
from .autodiff.tensor import ShapeError, Tensor


@dataclass
class NeckPlan:
    out_channels: int = 256
    out_stage: int = 0   # index into the four neck inputs whose native resolution is the target

    def __post_init__(self):
        if self.out_channels < 1 or not 0 <= self.out_stage < 4:
            raise ValueError("NeckPlan: bad out_channels or out_stage")


def interleave(a: Tensor, b: Tensor) -> Tensor:
    """``(C, 2H, 2W)`` canvas: even rows copy ``a`` by nearest neighbour, odd rows copy ``b``.

    Each 2x2 block holds ``a`` at offset (0, 0) and its neighbour (0, 1), and
    ``b`` at (1, 1) and its neighbour (1, 0).
    """
    if a.shape != b.shape:
        raise ShapeError("interleave", a.shape, b.shape)
    h2 = 2 * a.shape[1]
    even = np.zeros((1, h2, 1))
    even[0, 0::2] = 1.0
    return F.add(F.mul(F.nearest_upsample(a, 2), Tensor(even)), F.mul(F.nearest_upsample(b, 2), Tensor(1.0 - even)))


class MSPFusion(Module):
    def __init__(self, c_vox: int, c_bev: int, rng: np.random.Generator):
        self.project = Conv2d(c_vox, c_bev, 1, rng)
        self.spatial = Conv2d(c_bev, c_bev, 3, rng)
        self.point = Conv2d(c_bev, c_bev, 1, rng)

    def canvas(self, vox: Tensor, bev: Tensor) -> Tensor:
        if vox.shape[1:] != bev.shape[1:]:
            raise ShapeError("msp_fusion", vox.shape, bev.shape, detail="resolution mismatch")
        return interleave(self.project(vox), bev)

    def forward(self, vox: Tensor, bev: Tensor) -> Tensor:
        return self.point(self.spatial(self.canvas(vox, bev)))


class AlignStage(Module):
    """Bring a ``from_res`` map to ``to_res`` (halve once, keep, or double repeatedly), then 1x1 to ``c_out``."""

    def __init__(self, c_in: int, c_out: int, from_res: int, to_res: int, rng: np.random.Generator):
        self.from_res, self.to_res = from_res, to_res
        self.down = None
        self.up = []
        if from_res == 2 * to_res:
            self.down = Conv2d(c_in, c_in, 3, rng, stride=2)
        elif from_res != to_res:
            n, r = 0, from_res
            while r < to_res:
                r, n = 2 * r, n + 1
            if r != to_res:
                raise ValueError(f"align_stage: cannot reach {to_res} from {from_res}")
            for _ in range(n):
                self.up.append(Conv2d(c_in, c_in, 3, rng))
                self.up.append(Deconv2d(c_in, c_in, rng))
        self.out = Conv2d(c_in, c_out, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.from_res or x.shape[2] != self.from_res:
            raise ShapeError("align_stage", x.shape, detail=f"expects resolution {self.from_res}")
        if self.down is not None:
            x = self.down(x)
        for layer in self.up:
            x = layer(x)
        return self.out(x)


class AttentionFuse(Module):
    """One 3x3 conv to a single logit map per source; per-pixel softmax over sources."""

    def __init__(self, n_sources: int, channels: int, rng: np.random.Generator):
        if n_sources < 2:
            raise ValueError("attention_fuse needs at least two sources")
        self.score = [Conv2d(channels, 1, 3, rng) for _ in range(n_sources)]

    def weights(self, sources: list[Tensor]) -> Tensor:
        logits = F.concat([conv(s) for conv, s in zip(self.score, sources)], axis=0)
        return F.softmax(logits, axis=0)

    def forward(self, sources: list[Tensor]) -> Tensor:
        if len(sources) != len(self.score):
            raise ShapeError("attention_fuse", *[s.shape for s in sources])
        w = self.weights(sources)
        out = None
        for i, s in enumerate(sources):
            term = F.mul(s, F.slice_channels(w, i, i + 1))
            out = term if out is None else F.add(out, term)
        return out


class Neck(Module):
    def __init__(self, plan: NeckPlan, vox_channels: tuple, bev_channels: tuple, resolutions: tuple,
                 rng: np.random.Generator):
        self.plan = plan
        target = resolutions[plan.out_stage]
        self.msp = [MSPFusion(cv, cb, rng) for cv, cb in zip(vox_channels, bev_channels)]
        self.align = [AlignStage(cb, plan.out_channels, 2 * r, target, rng)
                      for cb, r in zip(bev_channels, resolutions)]
        self.attention = AttentionFuse(len(resolutions), plan.out_channels, rng)

    def forward(self, vox_feats: list[Tensor], bev_feats: list[Tensor]) -> Tensor:
        aligned = [al(msp(v, b)) for msp, al, v, b in zip(self.msp, self.align, vox_feats, bev_feats)]
        return self.attention(aligned)
