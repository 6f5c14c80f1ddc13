"""KITTI-format frame I/O and the ground-truth sampling database.

Point clouds are ``(N, 4)`` float64 arrays of ``(x, y, z, reflectance)`` in
the LiDAR frame.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Box3D, normalize_angle, points_in_box

log = logging.getLogger(__name__)

DETECTION_CLASSES = ("Car", "Cyclist")
POINT_BYTES = 16


class KittiFormatError(ValueError):
    pass


# --------------------------------------------------------------------------- velodyne

def read_velodyne_bin(path, return_rejected: bool = False):
    """Decode little-endian float32 quadruples; non-finite points are dropped and counted."""
    raw = Path(path).read_bytes()
    tail = len(raw) % POINT_BYTES
    if tail:
        raise KittiFormatError(
            f"{path}: truncated point record at byte offset {len(raw) - tail} "
            f"({tail} trailing bytes, file length {len(raw)})")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    finite = np.isfinite(pts).all(axis=1)
    rejected = int((~finite).sum())
    if rejected:
        log.warning("%s: dropped %d non-finite points", path, rejected)
        pts = pts[finite]
    return (pts, rejected) if return_rejected else pts


def write_velodyne_bin(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 4)
    Path(path).write_bytes(pts.tobytes())


# --------------------------------------------------------------------------- calibration

@dataclass
class Calibration:
    """Camera/LiDAR transforms: ``x_rect = R0 @ (Tr_velo_to_cam @ [x_lidar; 1])``."""

    P2: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))
    R0_rect: np.ndarray = field(default_factory=lambda: np.eye(3))
    Tr_velo_to_cam: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))

    @classmethod
    def identity(cls) -> "Calibration":
        return cls()

    @classmethod
    def kitti_like(cls) -> "Calibration":
        """Pure axis permutation between LiDAR (x fwd, y left, z up) and camera (x right, y down, z fwd)."""
        tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
        return cls(Tr_velo_to_cam=tr)

    def _velo_to_rect_4x4(self) -> np.ndarray:
        r0 = np.eye(4)
        r0[:3, :3] = self.R0_rect
        tr = np.eye(4)
        tr[:3, :4] = self.Tr_velo_to_cam
        return r0 @ tr

    def lidar_to_rect(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        hom = np.hstack([pts, np.ones((len(pts), 1))])
        return (hom @ self._velo_to_rect_4x4().T)[:, :3]

    def rect_to_lidar(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        hom = np.hstack([pts, np.ones((len(pts), 1))])
        return (hom @ np.linalg.inv(self._velo_to_rect_4x4()).T)[:, :3]


def read_calib(path) -> Calibration:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, _, rest = line.partition(":")
        try:
            values[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError:
            raise KittiFormatError(f"{path}:{lineno}: non-numeric calibration entry {key!r}") from None
    try:
        tr_key = "Tr_velo_to_cam" if "Tr_velo_to_cam" in values else "Tr_velo_cam"
        r0_key = "R0_rect" if "R0_rect" in values else "R_rect"
        return Calibration(P2=values.get("P2", np.hstack([np.eye(3), np.zeros((3, 1))]).ravel()).reshape(3, 4),
                           R0_rect=values[r0_key].reshape(3, 3),
                           Tr_velo_to_cam=values[tr_key].reshape(3, 4))
    except (KeyError, ValueError) as exc:
        raise KittiFormatError(f"{path}: incomplete calibration ({exc})") from None


def write_calib(path, calib: Calibration) -> None:
    def row(name, m):
        return name + ": " + " ".join(repr(float(v)) for v in np.asarray(m).ravel())

    lines = [row(f"P{i}", calib.P2) for i in range(4)]
    lines += [row("R0_rect", calib.R0_rect), row("Tr_velo_to_cam", calib.Tr_velo_to_cam),
              row("Tr_imu_to_velo", np.hstack([np.eye(3), np.zeros((3, 1))]))]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- labels

@dataclass
class ObjectLabel:
    label: str
    box: Optional[Box3D]
    occlusion: int = 0
    truncation: float = 0.0
    bbox_height: float = 0.0
    alpha: float = 0.0
    bbox: tuple = (0.0, 0.0, 0.0, 0.0)
    score: Optional[float] = None

    @property
    def ignorable(self) -> bool:
        return self.label not in DETECTION_CLASSES or self.box is None


@dataclass
class FrameAnnotation:
    frame_id: str
    objects: list[ObjectLabel] = field(default_factory=list)

    def boxes(self, classes: Sequence[str] = DETECTION_CLASSES) -> list[Box3D]:
        return [o.box for o in self.objects if o.label in classes and o.box is not None]

    def box_array(self, classes: Sequence[str] = DETECTION_CLASSES) -> np.ndarray:
        b = self.boxes(classes)
        return np.array([x.to_array() for x in b]).reshape(-1, 7)


def camera_to_lidar_box(loc_cam, dims_hwl, rotation_y: float, calib: Calibration) -> Box3D:
    """KITTI camera-frame bottom-centre box -> LiDAR-frame centre box."""
    h, w, l = dims_hwl
    bottom = calib.rect_to_lidar(np.asarray(loc_cam, dtype=np.float64))[0]
    return Box3D(bottom[0], bottom[1], bottom[2] + h / 2.0, w, l, h, -rotation_y)


def lidar_to_camera_box(box: Box3D, calib: Calibration) -> tuple[np.ndarray, tuple, float]:
    bottom = np.array([box.x, box.y, box.z - box.h / 2.0])
    loc = calib.lidar_to_rect(bottom)[0]
    return loc, (box.h, box.w, box.l), normalize_angle(-box.yaw)


def parse_label_row(line: str, calib: Calibration, where: str = "") -> ObjectLabel:
    parts = line.split()
    if len(parts) not in (15, 16):
        raise KittiFormatError(f"{where}: expected 15 or 16 fields, got {len(parts)}")
    try:
        nums = [float(v) for v in parts[1:]]
    except ValueError:
        raise KittiFormatError(f"{where}: non-numeric field in {line!r}") from None
    label = parts[0]
    trunc, occ, alpha = nums[0], int(nums[1]), nums[2]
    bbox = tuple(nums[3:7])
    h, w, l = nums[7:10]
    loc = nums[10:13]
    ry = nums[13]
    score = nums[14] if len(nums) == 15 else None
    box = None
    if h > 0 and w > 0 and l > 0 and label != "DontCare":
        box = camera_to_lidar_box(loc, (h, w, l), ry, calib)
    return ObjectLabel(label=label, box=box, occlusion=occ, truncation=trunc,
                       bbox_height=bbox[3] - bbox[1], alpha=alpha, bbox=bbox, score=score)


def read_kitti_labels(label_path, calib: Calibration, frame_id: Optional[str] = None) -> FrameAnnotation:
    path = Path(label_path)
    objects = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if line.strip():
            objects.append(parse_label_row(line, calib, where=f"{path}:{lineno}"))
    return FrameAnnotation(frame_id or path.stem, objects)


def format_label_row(obj: ObjectLabel, calib: Calibration, with_score: bool = False) -> str:
    if obj.box is None:
        loc, dims, ry = np.array([-1000.0, -1000.0, -1000.0]), (-1.0, -1.0, -1.0), -10.0
    else:
        loc, dims, ry = lidar_to_camera_box(obj.box, calib)
    fields = [obj.label, f"{obj.truncation:.6f}", str(int(obj.occlusion)), f"{obj.alpha:.6f}"]
    fields += [f"{v:.6f}" for v in obj.bbox]
    fields += [f"{v:.6f}" for v in dims]
    fields += [f"{v:.6f}" for v in loc]
    fields.append(f"{ry:.6f}")
    if with_score:
        fields.append(f"{(obj.score if obj.score is not None else 0.0):.6f}")
    return " ".join(fields)


def write_kitti_labels(path, annotation: FrameAnnotation, calib: Calibration, with_score: bool = False) -> None:
    rows = [format_label_row(o, calib, with_score) for o in annotation.objects]
    Path(path).write_text("".join(r + "\n" for r in rows))


def detection_to_result_row(label: str, box: Box3D, score: float, calib: Calibration) -> str:
    """One KITTI result-file row; truncation/occlusion are -1 and the 2-D bbox is a zero placeholder."""
    loc, (h, w, l), ry = lidar_to_camera_box(box, calib)
    alpha = normalize_angle(ry - math.atan2(loc[0], loc[2]))
    return (f"{label} -1 -1 {alpha:.6f} 0.00 0.00 0.00 0.00 {h:.6f} {w:.6f} {l:.6f} "
            f"{loc[0]:.6f} {loc[1]:.6f} {loc[2]:.6f} {ry:.6f} {score:.6f}")


# --------------------------------------------------------------------------- dataset layout

class KittiDataset:
    """``root/{training,testing}/{velodyne,label_2,calib}`` plus ``root/ImageSets/<split>.txt``."""

    def __init__(self, root, subset: str = "training"):
        self.root = Path(root)
        self.base = self.root / subset

    def split_ids(self, split: str) -> list[str]:
        path = self.root / "ImageSets" / f"{split}.txt"
        if not path.exists():
            raise FileNotFoundError(f"split file {path} not found")
        return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]

    def calib(self, frame_id: str) -> Calibration:
        return read_calib(self.base / "calib" / f"{frame_id}.txt")

    def cloud(self, frame_id: str) -> np.ndarray:
        return read_velodyne_bin(self.base / "velodyne" / f"{frame_id}.bin")

    def annotation(self, frame_id: str, calib: Optional[Calibration] = None) -> FrameAnnotation:
        calib = calib or self.calib(frame_id)
        path = self.base / "label_2" / f"{frame_id}.txt"
        if not path.exists():
            return FrameAnnotation(frame_id)
        return read_kitti_labels(path, calib, frame_id)

    def frame(self, frame_id: str):
        calib = self.calib(frame_id)
        return self.cloud(frame_id), self.annotation(frame_id, calib), calib


def write_kitti_frame(root, frame_id: str, cloud: np.ndarray, annotation: FrameAnnotation,
                      calib: Calibration, subset: str = "training") -> None:
    base = Path(root) / subset
    for sub in ("velodyne", "label_2", "calib"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    write_velodyne_bin(base / "velodyne" / f"{frame_id}.bin", cloud)
    write_calib(base / "calib" / f"{frame_id}.txt", calib)
    write_kitti_labels(base / "label_2" / f"{frame_id}.txt", annotation, calib)


# --------------------------------------------------------------------------- GT database

@dataclass
class GTEntry:
    label: str
    box: Box3D
    points: np.ndarray
    frame_id: str = ""

    @property
    def empty(self) -> bool:
        return len(self.points) == 0


@dataclass
class GTDatabase:
    entries: list[GTEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def by_class(self, label: str, include_empty: bool = False) -> list[GTEntry]:
        return [e for e in self.entries if e.label == label and (include_empty or not e.empty)]

    INDEX = "index.txt"
    BLOB = "points.bin"

    def save(self, directory) -> Path:
        """Index rows: ``label frame x y z w l h yaw offset count flag`` (offset/count in points)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        rows = []
        offset = 0
        with open(d / self.BLOB, "wb") as fh:
            for e in self.entries:
                pts = np.ascontiguousarray(e.points, dtype="<f8").reshape(-1, 4)
                fh.write(pts.tobytes())
                b = e.box
                params = " ".join(repr(float(v)) for v in (b.x, b.y, b.z, b.w, b.l, b.h, b.yaw))
                flag = "empty" if e.empty else "ok"
                rows.append(f"{e.label}\t{e.frame_id or '-'}\t{params}\t{offset}\t{len(pts)}\t{flag}")
                offset += len(pts)
        (d / self.INDEX).write_text("".join(r + "\n" for r in rows))
        return d

    @classmethod
    def load(cls, directory) -> "GTDatabase":
        d = Path(directory)
        blob = np.fromfile(d / cls.BLOB, dtype="<f8").reshape(-1, 4)
        entries = []
        for lineno, line in enumerate((d / cls.INDEX).read_text().splitlines(), 1):
            if not line:
                continue
            try:
                label, frame, params, offset, count, _flag = line.split("\t")
                vals = [float(v) for v in params.split()]
                off, cnt = int(offset), int(count)
            except ValueError:
                raise KittiFormatError(f"{d / cls.INDEX}:{lineno}: malformed index row") from None
            if off + cnt > len(blob):
                raise KittiFormatError(f"{d / cls.INDEX}:{lineno}: entry overruns point blob")
            box = Box3D(*vals)
            entries.append(GTEntry(label, box, blob[off:off + cnt].copy(), "" if frame == "-" else frame))
        return cls(entries)


def build_gt_database(frames: Iterable[tuple[np.ndarray, FrameAnnotation]]) -> GTDatabase:
    """Crop every labelled box's points (DontCare and box-less labels skipped), in input order."""
    db = GTDatabase()
    for cloud, ann in frames:
        for obj in ann.objects:
            if obj.box is None or obj.label == "DontCare":
                continue
            pts = cloud[points_in_box(cloud, obj.box)]
            if len(pts) == 0:
                log.info("frame %s: %s box has no points; stored as flagged", ann.frame_id, obj.label)
            db.entries.append(GTEntry(obj.label, obj.box, pts.copy(), ann.frame_id))
    return db
