"""Point-cloud preprocessing: range crop, BEV raster, hard voxelization, augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dataset import DETECTION_CLASSES, FrameAnnotation, GTDatabase, ObjectLabel
from .geometry import Box3D, RangeSpec, bev_iou, points_in_box, rotate_points_z

LOG64 = math.log(64.0)
POINT_FEATURES = 10


def filter_range(cloud: np.ndarray, rng_spec: RangeSpec) -> np.ndarray:
    """Keep points whose x, y, z lie in the closed range; order preserved."""
    c = np.asarray(cloud)
    keep = ((c[:, 0] >= rng_spec.x_min) & (c[:, 0] <= rng_spec.x_max)
            & (c[:, 1] >= rng_spec.y_min) & (c[:, 1] <= rng_spec.y_max)
            & (c[:, 2] >= rng_spec.z_min) & (c[:, 2] <= rng_spec.z_max))
    return c[keep]


# --------------------------------------------------------------------------- BEV map

@dataclass(frozen=True)
class GridSpec:
    range: RangeSpec
    dx: float
    dy: float
    width: int   # cells along x
    height: int  # cells along y

    def __post_init__(self):
        if abs(self.width * self.dx - (self.range.x_max - self.range.x_min)) > 1e-9:
            raise ValueError(f"GridSpec: {self.width} x {self.dx} does not span the x-range")
        if abs(self.height * self.dy - (self.range.y_max - self.range.y_min)) > 1e-9:
            raise ValueError(f"GridSpec: {self.height} x {self.dy} does not span the y-range")

    @classmethod
    def from_cell(cls, rng_spec: RangeSpec, dx: float, dy: Optional[float] = None) -> "GridSpec":
        dy = dx if dy is None else dy
        w = int(round((rng_spec.x_max - rng_spec.x_min) / dx))
        h = int(round((rng_spec.y_max - rng_spec.y_min) / dy))
        return cls(rng_spec, dx, dy, w, h)

    def cell_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Column (x) and row (y) indices; points on the max boundary land in the last cell."""
        ix = np.floor((points[:, 0] - self.range.x_min) / self.dx).astype(np.int64)
        iy = np.floor((points[:, 1] - self.range.y_min) / self.dy).astype(np.int64)
        return np.clip(ix, 0, self.width - 1), np.clip(iy, 0, self.height - 1)


@dataclass
class BEVMap:
    data: np.ndarray    # (3, H, W): density, height, intensity
    counts: np.ndarray  # (H, W) points per cell

    @property
    def density(self):
        return self.data[0]

    @property
    def height(self):
        return self.data[1]

    @property
    def intensity(self):
        return self.data[2]

    def to_rgb8(self) -> np.ndarray:
        """``(H, W, 3)`` uint8 raster, channel value x 255 rounded."""
        return np.rint(np.clip(self.data, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def density_channel(counts: np.ndarray) -> np.ndarray:
    return np.minimum(1.0, np.log(counts + 1.0) / LOG64)


def encode_bev_map(cloud: np.ndarray, grid: GridSpec) -> BEVMap:
    """Per cell: normalised log density, max normalised height, max reflectance.

    Height is stored as ``(z - z_min) / (z_max - z_min)`` so every channel lies
    in [0, 1]; reflectance is clamped to [0, 1].
    """
    h, w = grid.height, grid.width
    counts = np.zeros(h * w)
    zg = np.zeros(h * w)
    zb = np.zeros(h * w)
    pts = np.asarray(cloud)
    if len(pts):
        ix, iy = grid.cell_index(pts)
        flat = iy * w + ix
        counts = np.bincount(flat, minlength=h * w).astype(np.float64)
        zr = grid.range
        hnorm = np.clip((pts[:, 2] - zr.z_min) / (zr.z_max - zr.z_min), 0.0, 1.0)
        np.maximum.at(zg, flat, hnorm)
        np.maximum.at(zb, flat, np.clip(pts[:, 3], 0.0, 1.0))
    data = np.stack([density_channel(counts), zg, zb]).reshape(3, h, w)
    return BEVMap(data, counts.reshape(h, w))


# --------------------------------------------------------------------------- voxels

@dataclass(frozen=True)
class VoxelSpec:
    range: RangeSpec
    voxel_size: tuple[float, float, float]
    max_voxels: int
    max_points: int

    def __post_init__(self):
        if self.max_voxels <= 0 or self.max_points <= 0:
            raise ValueError("VoxelSpec: max_voxels and max_points must be positive")
        dims = self.range.extent / np.asarray(self.voxel_size, dtype=np.float64)
        if np.any(np.abs(dims - np.round(dims)) > 1e-6):
            raise ValueError(f"VoxelSpec: voxel size {self.voxel_size} does not tile the range ({dims})")

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        """Number of voxels along (x, y, z)."""
        d = np.round(self.range.extent / np.asarray(self.voxel_size, dtype=np.float64)).astype(int)
        return int(d[0]), int(d[1]), int(d[2])

    def voxel_index(self, points: np.ndarray) -> np.ndarray:
        size = np.asarray(self.voxel_size, dtype=np.float64)
        idx = np.floor((points[:, :3] - self.range.lower) / size).astype(np.int64)
        return np.clip(idx, 0, np.asarray(self.grid_dims) - 1)


@dataclass
class VoxelSet:
    """Dense ``(10, V, N)`` point features plus per-voxel bookkeeping.

    ``point_index`` maps every slot to its row in the source cloud (-1 for padding).
    """
    features: np.ndarray     # (10, V, N)
    coords: np.ndarray       # (V, 3) integer (ix, iy, iz)
    counts: np.ndarray       # (V,)
    point_index: np.ndarray  # (V, N)
    dropped_voxels: int = 0

    @property
    def mask(self) -> np.ndarray:
        return self.point_index >= 0

    @property
    def num_voxels(self) -> int:
        return len(self.coords)


def encode_points(raw: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``(V, N, 4)`` raw points + mask -> ``(10, V, N)`` features with zeroed padding."""
    m = mask[..., None].astype(np.float64)
    n = np.maximum(mask.sum(axis=1), 1)[:, None]
    centre = (raw[..., :3] * m).sum(axis=1) / n                      # (V, 3)
    centre_b = np.broadcast_to(centre[:, None, :], raw[..., :3].shape)
    rel = raw[..., :3] - centre_b
    feats = np.concatenate([raw[..., :4], centre_b, rel], axis=-1) * m
    return np.ascontiguousarray(feats.transpose(2, 0, 1))


def group_by_key(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unique keys in first-encounter order, the rank of each element, and group counts."""
    uniq, first, inverse, counts = np.unique(keys, return_index=True, return_inverse=True, return_counts=True)
    order = np.argsort(first, kind="stable")
    rank_of_sorted = np.empty_like(order)
    rank_of_sorted[order] = np.arange(len(order))
    return uniq[order], rank_of_sorted[inverse.reshape(-1)], counts[order]


def pack_groups(rank: np.ndarray, n_groups: int, cap: int, rng: np.random.Generator,
                candidates: Optional[np.ndarray] = None) -> np.ndarray:
    """Slot table ``(n_groups, cap)`` of element indices grouped by ``rank``.

    Elements keep their input order; groups larger than ``cap`` are randomly
    subsampled (sorted afterwards so slot order still follows input order).
    """
    idx = np.arange(len(rank)) if candidates is None else candidates
    order = np.lexsort((idx, rank))
    rank_s, idx_s = rank[order], idx[order]
    starts = np.searchsorted(rank_s, np.arange(n_groups))
    ends = np.searchsorted(rank_s, np.arange(n_groups), side="right")
    table = np.full((n_groups, cap), -1, dtype=np.int64)
    for g in np.nonzero(ends - starts > cap)[0]:
        members = idx_s[starts[g]:ends[g]]
        table[g] = np.sort(rng.choice(members, size=cap, replace=False))
    small = ends - starts <= cap
    pos = np.arange(len(rank_s)) - starts[rank_s]
    sel = small[rank_s]
    table[rank_s[sel], pos[sel]] = idx_s[sel]
    return table


def voxelize(cloud: np.ndarray, spec: VoxelSpec, rng: np.random.Generator) -> VoxelSet:
    pts = np.asarray(cloud, dtype=np.float64)
    n_cap = spec.max_points
    if len(pts) == 0:
        return VoxelSet(np.zeros((POINT_FEATURES, 0, n_cap)), np.zeros((0, 3), np.int64),
                        np.zeros(0, np.int64), np.zeros((0, n_cap), np.int64))
    vidx = spec.voxel_index(pts)
    gx, gy, _ = spec.grid_dims
    keys = (vidx[:, 2] * gy + vidx[:, 1]) * gx + vidx[:, 0]
    uniq, rank, _ = group_by_key(keys)
    dropped = max(len(uniq) - spec.max_voxels, 0)
    n_vox = len(uniq) - dropped
    keep = rank < n_vox
    table = pack_groups(rank[keep], n_vox, n_cap, rng, candidates=np.nonzero(keep)[0])
    mask = table >= 0
    raw = np.where(mask[..., None], pts[np.where(mask, table, 0)], 0.0)
    k = uniq[:n_vox]
    coords = np.stack([k % gx, (k // gx) % gy, k // (gx * gy)], axis=1).astype(np.int64)
    return VoxelSet(encode_points(raw, mask), coords, mask.sum(axis=1), table, dropped)


# --------------------------------------------------------------------------- augmentation

@dataclass
class AugmentParams:
    samples_per_class: dict = field(default_factory=lambda: {"Car": 15, "Cyclist": 15})
    rotation_range: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    translation_range: tuple[float, float] = (0.0, 0.5)
    scale_range: tuple[float, float] = (0.95, 1.05)
    flip_prob: float = 0.5
    perturb_trials: int = 10


def _scene_boxes(ann: FrameAnnotation) -> list[Box3D]:
    return [o.box for o in ann.objects if o.box is not None]


def paste_samples(cloud, ann: FrameAnnotation, gtdb: GTDatabase, params: AugmentParams, rng):
    """Insert database objects whose footprint does not touch any box already in the scene."""
    boxes = _scene_boxes(ann)
    objects = list(ann.objects)
    cloud = np.asarray(cloud)
    for label in DETECTION_CLASSES:
        pool = gtdb.by_class(label)
        want = min(params.samples_per_class.get(label, 0), len(pool))
        if want <= 0:
            continue
        for i in rng.choice(len(pool), size=want, replace=False):
            entry = pool[int(i)]
            if any(bev_iou(entry.box, b) > 0.0 for b in boxes):
                continue
            cloud = np.concatenate([cloud[~points_in_box(cloud, entry.box)], entry.points], axis=0)
            boxes.append(entry.box)
            objects.append(ObjectLabel(label, entry.box, 0, 0.0, bbox_height=100.0))
    return cloud, FrameAnnotation(ann.frame_id, objects)


def perturb_boxes(cloud, ann: FrameAnnotation, params: AugmentParams, rng):
    """Rotate each box with its points about its own centre and shift it; colliding draws are retried."""
    cloud = np.array(cloud, dtype=np.float64, copy=True)
    objects = list(ann.objects)
    for k, obj in enumerate(objects):
        if obj.box is None:
            continue
        own = points_in_box(cloud, obj.box)
        others = [o.box for j, o in enumerate(objects) if j != k and o.box is not None]
        for _ in range(max(params.perturb_trials, 1)):
            dtheta = rng.uniform(*params.rotation_range)
            shift = rng.uniform(*params.translation_range, size=3)
            b = obj.box
            moved = Box3D(b.x + shift[0], b.y + shift[1], b.z + shift[2], b.w, b.l, b.h, b.yaw + dtheta)
            if not any(bev_iou(moved, o) > 0.0 for o in others):
                break
        else:
            continue
        if dtheta == 0.0 and not shift.any():
            continue
        pts = rotate_points_z(cloud[own], dtheta, (obj.box.x, obj.box.y))
        pts[:, :3] += shift
        cloud[own] = pts
        # foreign points now covered by the moved object are occluded by it
        covered = points_in_box(cloud, moved) & ~own
        cloud = cloud[~covered]
        objects[k] = replace(obj, box=moved)
    return cloud, FrameAnnotation(ann.frame_id, objects)


def flip_scene(cloud, ann: FrameAnnotation):
    """Mirror across the x axis: y -> -y, yaw -> -yaw."""
    out = np.array(cloud, dtype=np.float64, copy=True)
    out[:, 1] = -out[:, 1]
    objects = []
    for o in ann.objects:
        b = o.box
        objects.append(o if b is None else replace(o, box=Box3D(b.x, -b.y, b.z, b.w, b.l, b.h, -b.yaw)))
    return out, FrameAnnotation(ann.frame_id, objects)


def scale_scene(cloud, ann: FrameAnnotation, s: float):
    out = np.array(cloud, dtype=np.float64, copy=True)
    out[:, :3] *= s
    objects = []
    for o in ann.objects:
        b = o.box
        objects.append(o if b is None else replace(
            o, box=Box3D(b.x * s, b.y * s, b.z * s, b.w * s, b.l * s, b.h * s, b.yaw)))
    return out, FrameAnnotation(ann.frame_id, objects)


def augment_scene(cloud, ann: FrameAnnotation, gtdb: Optional[GTDatabase], params: AugmentParams,
                  rng: np.random.Generator):
    """Database paste, per-box rotation/shift, random flip, global scale, in that order."""
    if gtdb is not None:
        cloud, ann = paste_samples(cloud, ann, gtdb, params, rng)
    cloud, ann = perturb_boxes(cloud, ann, params, rng)
    if rng.random() < params.flip_prob:
        cloud, ann = flip_scene(cloud, ann)
    s = rng.uniform(*params.scale_range)
    return scale_scene(cloud, ann, s)
