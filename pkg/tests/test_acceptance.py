"""Acceptance checks; the terminal summary prints one PASS/FAIL line per criterion."""
import math
import time

import numpy as np
import pytest

from oracles import brute_topk, naive_ap_r40, raster_iou
from pvssd import cli
from pvssd.autodiff import Tensor, no_grad
from pvssd.config import kitti_preset
from pvssd.diagnostics import CHECKS, run_gradchecks
from pvssd.evaluation import compute_ap_r40
from pvssd.geometry import KITTI_RANGE, Box3D, bev_iou, iou_3d, points_in_box
from pvssd.head import Detection, decode_boxes, direction_loss, encode_boxes, focal_loss, smooth_l1, total_loss
from pvssd.model import PVSSD
from pvssd.preprocess import GridSpec, VoxelSpec, encode_bev_map, flip_scene, perturb_boxes, scale_scene, voxelize
from pvssd.preprocess import AugmentParams
from pvssd.synthetic import random_scene
from pvssd.train import prepare_frame
from pvssd.voxel_branch import topk_per_voxel
from test_evaluation import planted_set, to_oracle
from test_geometry import as_tuple, random_box
from test_preprocess import BOXES, check_voxel_invariants, scene


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.1f}s, budget {self.seconds}s"


@pytest.mark.criterion(1, "BEV encoding exactness")
def test_bev_encoding_exactness():
    grid = GridSpec.from_cell(KITTI_RANGE, 0.1)
    with Budget(1):
        pts = np.array([
            [0.05, -30.35, -1.0, 0.8],
            [1.05, 0.05, -3.0, 0.2], [1.06, 0.06, 0.0, 0.4],
            [5.01, 5.01, 1.0, 0.9], [5.02, 5.02, -2.0, 0.1], [5.03, 5.03, -2.5, 0.3],
        ])
        bev = encode_bev_map(pts, grid)
        np.testing.assert_allclose(bev.data[:, 0, 0], [math.log(2) / math.log(64), 0.5, 0.8], atol=1e-9)
        assert abs(bev.data[0, 0, 0] - 0.166667) < 1e-6
        np.testing.assert_allclose(bev.data[:, 304, 10], [math.log(3) / math.log(64), 0.75, 0.4], atol=1e-9)
        np.testing.assert_allclose(bev.data[:, 354, 50], [math.log(4) / math.log(64), 1.0, 0.9], atol=1e-9)
        for n, want in ((62, math.log(63) / math.log(64)), (63, 1.0), (64, 1.0), (500, 1.0)):
            cell = encode_bev_map(np.tile([[10.05, 0.05, -1.0, 0.5]], (n, 1)), grid).data[0, 304, 100]
            assert abs(cell - want) < 1e-9


@pytest.mark.criterion(2, "voxelizer invariants on 100 random clouds")
def test_voxelizer_invariants():
    rng = np.random.default_rng(20)
    spec = VoxelSpec(KITTI_RANGE, (0.1, 0.1, 0.125), 16000, 12)
    with Budget(10):
        for i in range(100):
            n = int(rng.integers(1, 3000))
            if i % 4 == 0:   # dense clusters overfill voxels
                centre = rng.uniform([1, -29, -2.5], [59, 29, 0.5])
                xyz = centre + rng.normal(0, 0.08, size=(n, 3))
            else:
                xyz = rng.uniform([0, -30.4, -3], [60.8, 30.4, 1], size=(n, 3))
            pts = np.column_stack([xyz, rng.random(n)])
            pts = pts[np.all((pts[:, :3] >= spec.range.lower) & (pts[:, :3] <= spec.range.upper), axis=1)]
            check_voxel_invariants(pts, spec, voxelize(pts, spec, rng))


@pytest.mark.criterion(3, "gradient checks for every block")
def test_gradient_checks():
    with Budget(300):
        results = run_gradchecks(0)
    assert [r[0] for r in results] == list(CHECKS)
    for name, err, tol in results:
        assert tol <= 1e-4 and err < tol, f"{name}: {err:.3e} >= {tol:.0e}"


@pytest.mark.criterion(4, "608 input shape ladder 152/76/38/19, neck (256,152,152)")
def test_shape_ladder():
    cfg = kitti_preset()
    rng = np.random.default_rng(0)
    cloud, ann = random_scene(rng, cfg.range, 3, ground_points=20000)
    with Budget(30):
        pf = prepare_frame(cloud, ann, cfg.grid(), cfg.voxel_spec(), ("Car", "Cyclist"), rng)
        assert pf.bev.data.shape == (3, 608, 608)
        assert cfg.voxel_spec().grid_dims == (608, 608, 32)
        model = PVSSD(cfg.model_spec(), rng)
        with no_grad():
            vbev, stages, neck = model.features(pf.bev.data, pf.voxels, rng)
    assert [s.shape[1:] for s in stages] == [(152, 152), (76, 76), (38, 38), (19, 19)]
    assert [v.features.shape[1:] for v in vbev] == [(152, 152), (76, 76), (38, 38), (19, 19)]
    assert neck.shape == (256, 152, 152)


@pytest.mark.criterion(5, "top-K selection vs full-sort oracle")
def test_topk_oracle():
    rng = np.random.default_rng(21)
    with Budget(5):
        for trial in range(100):
            v, n = int(rng.integers(1, 8)), int(rng.integers(1, 33))
            mask = rng.random((v, n)) < 0.75
            w = rng.random((v, n))
            if trial % 2:
                w = np.round(w * 4) / 4
            k = int(rng.integers(1, n + 2))
            sel = topk_per_voxel(w, mask, k)
            for i in range(v):
                assert list(np.nonzero(sel[i])[0]) == brute_topk(w[i], mask[i], k)


@pytest.mark.criterion(6, "rotated IoU vs raster oracle, symmetry, self-IoU")
def test_rotated_iou_oracle():
    rng = np.random.default_rng(22)
    with Budget(30):
        for _ in range(200):
            a, b = random_box(rng, 1.5), random_box(rng, 1.5)
            v = bev_iou(a, b)
            assert abs(v - raster_iou(as_tuple(a), as_tuple(b))) < 1e-3
            assert abs(v - bev_iou(b, a)) < 1e-12
            assert abs(bev_iou(a, a) - 1.0) < 1e-12
            assert abs(iou_3d(a, a) - 1.0) < 1e-12


@pytest.mark.criterion(7, "loss analytic values")
def test_loss_values():
    one = Tensor(np.array(1.0))
    with Budget(1):
        assert abs(focal_loss(Tensor(np.array([0.5])), np.array([1]), 1, alpha=0.25, gamma=2.0).item()
                   - 0.043321) < 1e-6
        assert abs(smooth_l1(0.5) - 0.125) < 1e-12
        assert abs(smooth_l1(2.0) - 1.5) < 1e-12
        assert abs(direction_loss(Tensor(np.array([0.5])), np.array([1.0])).item() - math.log(2)) < 1e-9
        assert abs(total_loss(one, one, one).item() - 3.2) < 1e-12


@pytest.mark.slow
@pytest.mark.criterion(8, "toy overfit: loss < 1.0, every planted box recovered")
def test_overfit_recovery(tmp_path, capsys):
    with Budget(15 * 60):
        code = cli.main(["train-toy", "--out", str(tmp_path), "--seed", "0", "--steps", "500"])
    capsys.readouterr()
    assert code == 0
    cfg = cli.load_config(tmp_path / "config.yaml")
    assert cfg.optim.lr == 0.003 and cfg.data.synthetic_frames == 8
    log = np.loadtxt(tmp_path / "loss.tsv", skiprows=1)
    assert len(log) == 500 and log[-1, 4] < 1.0
    model = cli.build_model(cfg, tmp_path / "checkpoint")
    frames = cli.load_frames(cfg, "train", None)
    dets = cli.run_detection(cfg, model, frames)
    for (fid, _, ann, _), found in zip(frames, dets):
        gts = [o.box for o in ann.objects]
        assert 1 <= len(gts) <= 3
        free = list(range(len(gts)))
        for d in sorted(found, key=lambda d: -d.score):
            ious = [bev_iou(d.box, gts[j]) for j in free]
            assert ious and max(ious) >= 0.5, f"frame {fid}: unmatched detection {d}"
            free.pop(int(np.argmax(ious)))
        assert not free, f"frame {fid}: {len(free)} planted box(es) missed"


@pytest.mark.criterion(9, "box encode/decode round trip")
def test_encode_round_trip():
    rng = np.random.default_rng(23)
    with Budget(1):
        anchor = np.array([0, 0, 0, 1.6, 3.9, 1.56, 0.0])
        res, _ = encode_boxes(anchor, anchor + [1, 0, 0, 0, 0, 0, 0])
        assert abs(res[0] - 0.23722) < 1e-5
        a = np.column_stack([rng.uniform(-50, 50, (1000, 3)), rng.uniform(0.3, 5, (1000, 3)),
                             rng.choice([0, math.pi / 2], 1000)])
        g = np.column_stack([a[:, :3] + rng.normal(0, 2, (1000, 3)), rng.uniform(0.3, 5, (1000, 3)),
                             rng.uniform(-math.pi, math.pi, 1000)])
        r, bits = encode_boxes(a, g)
        back = decode_boxes(a, r, bits)
        assert np.abs(back[:, :6] - g[:, :6]).max() < 1e-9
        assert np.abs((back[:, 6] - g[:, 6] + math.pi) % (2 * math.pi) - math.pi).max() < 1e-9


@pytest.mark.criterion(10, "AP@R40 vs naive reference")
def test_ap_r40_oracle():
    with Budget(5):
        for seed in range(4):
            fd, fg = planted_set(np.random.default_rng(seed))
            for diff in ("easy", "moderate", "hard"):
                for mode, iou in (("bev", bev_iou), ("3d", iou_3d)):
                    assert compute_ap_r40(fd, fg, "Car", diff, mode) == naive_ap_r40(to_oracle(fd, fg, diff), 0.7, iou)
        rng = np.random.default_rng(24)
        fd, fg = planted_set(rng)
        perfect = [[Detection("Car", g.box, rng.random()) for g in gts] for gts in fg]
        assert compute_ap_r40(perfect, fg, "Car", "hard", "3d") == 1.0
        base = compute_ap_r40(fd, fg, "Car", "moderate", "3d")
        warped = [[Detection(d.label, d.box, math.atan(5 * d.score) + 2) for d in dets] for dets in fd]
        assert compute_ap_r40(warped, fg, "Car", "moderate", "3d") == base


@pytest.mark.criterion(11, "bit-identical train-toy logs and preprocess caches")
def test_determinism(tmp_path, capsys):
    with Budget(120):
        for name in ("a", "b"):
            assert cli.main(["train-toy", "--steps", "10", "--seed", "4", "--out", str(tmp_path / name)]) == 0
            assert cli.main(["preprocess", "--seed", "4", "--out", str(tmp_path / name / "cache")]) == 0
    capsys.readouterr()
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "loss.tsv").read_bytes() == (b / "loss.tsv").read_bytes()
    assert (a / "loss.tsv").read_text().count("\n") == 11
    assert (a / "checkpoint" / "params.bin").read_bytes() == (b / "checkpoint" / "params.bin").read_bytes()
    cached = sorted(p.name for p in (a / "cache").iterdir())
    assert len(cached) == 16
    for name in cached:
        assert (a / "cache" / name).read_bytes() == (b / "cache" / name).read_bytes()


@pytest.mark.criterion(12, "augmentation invariants")
def test_augmentation_invariants():
    rng = np.random.default_rng(25)
    with Budget(10):
        cloud, ann = scene(rng, BOXES)
        c2, a2 = flip_scene(*flip_scene(cloud, ann))
        np.testing.assert_array_equal(c2, cloud)
        for o0, o2 in zip(ann.objects, a2.objects):
            np.testing.assert_array_equal(o2.box.to_array(), o0.box.to_array())

        own = [set(np.nonzero(points_in_box(cloud, o.box))[0]) for o in ann.objects]
        carrier = cloud.copy()
        carrier[:, 3] = np.arange(len(cloud))
        for seed in range(5):
            moved, ann_m = perturb_boxes(carrier, ann, AugmentParams(), np.random.default_rng(seed))
            for k, obj in enumerate(ann_m.objects):
                assert set(moved[points_in_box(moved, obj.box), 3].astype(int)) == own[k]

        for s in (0.95, 1.0, 1.05):
            c3, _ = scale_scene(cloud, ann, s)
            i, j = rng.integers(0, len(cloud), size=(2, 500))
            d0 = np.linalg.norm(cloud[i, :3] - cloud[j, :3], axis=1)
            d1 = np.linalg.norm(c3[i, :3] - c3[j, :3], axis=1)
            assert np.abs(d1 - s * d0).max() < 1e-9


def test_all_criteria_present():
    nums = sorted(m.args[0] for f in globals().values() if callable(f)
                  for m in getattr(f, "pytestmark", []) if m.name == "criterion")
    assert nums == list(range(1, 13))
