"""Byte-stable on-disk cache of preprocessed frames.

``np.savez`` stamps zip members with the wall clock, so archives are written
here with a fixed timestamp instead; ``np.load`` reads them unchanged.
"""
from __future__ import annotations

import io
import zipfile
from pathlib import Path

import numpy as np

from .preprocess import BEVMap, VoxelSet

_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_npz_stable(path, **arrays) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    return path


def bev_path(cache_dir, frame_id: str) -> Path:
    return Path(cache_dir) / f"{frame_id}.bev.npz"


def voxel_path(cache_dir, frame_id: str) -> Path:
    return Path(cache_dir) / f"{frame_id}.vox.npz"


def save_frame(cache_dir, frame_id: str, bev: BEVMap, vs: VoxelSet) -> tuple[Path, Path]:
    a = save_npz_stable(bev_path(cache_dir, frame_id), data=bev.data, counts=bev.counts)
    b = save_npz_stable(voxel_path(cache_dir, frame_id), features=vs.features, coords=vs.coords,
                        counts=vs.counts, point_index=vs.point_index,
                        dropped=np.array([vs.dropped_voxels], dtype=np.int64))
    return a, b


def load_frame(cache_dir, frame_id: str) -> tuple[BEVMap, VoxelSet]:
    with np.load(bev_path(cache_dir, frame_id), allow_pickle=False) as z:
        bev = BEVMap(z["data"], z["counts"])
    with np.load(voxel_path(cache_dir, frame_id), allow_pickle=False) as z:
        vs = VoxelSet(z["features"], z["coords"], z["counts"], z["point_index"], int(z["dropped"][0]))
    return bev, vs
