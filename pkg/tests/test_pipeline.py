import numpy as np
import pytest

from pvssd.autodiff import no_grad
from pvssd.cache import load_frame, save_frame, save_npz_stable
from pvssd.config import toy_preset
from pvssd.geometry import points_in_box
from pvssd.model import PVSSD
from pvssd.report import plot_loss_curve, plot_pr_curves
from pvssd.synthetic import GROUND_Z, synthetic_frames
from pvssd.train import TrainingError, prepare_frame, train

CFG = toy_preset()
NAMES = tuple(a.name for a in CFG.anchors)


def prepared(count=2, seed=0):
    return [prepare_frame(c, a, CFG.grid(), CFG.voxel_spec(), NAMES, np.random.default_rng(i))
            for i, (c, a) in enumerate(synthetic_frames(seed, count, CFG.range))]


def test_synthetic_frames_deterministic_and_prefix_stable():
    a = synthetic_frames(3, 4, CFG.range)
    b = synthetic_frames(3, 2, CFG.range)
    for (ca, aa), (cb, ab) in zip(a, b):
        assert ca.tobytes() == cb.tobytes()
        assert [o.box for o in aa.objects] == [o.box for o in ab.objects]
    assert [ann.frame_id for _, ann in a] == ["000000", "000001", "000002", "000003"]


def test_synthetic_boxes_populated_and_grounded():
    for cloud, ann in synthetic_frames(0, 8, CFG.range):
        assert 1 <= len(ann.objects) <= 3
        for o in ann.objects:
            assert points_in_box(cloud, o.box).sum() >= 20
            assert o.box.z - o.box.h / 2 == pytest.approx(GROUND_Z, abs=1e-9)
            assert CFG.range.x_min < o.box.x < CFG.range.x_max
        assert np.all(np.isfinite(cloud))


def test_stable_npz_bytes_and_round_trip(tmp_path):
    pf = prepared(1)[0]
    a1, b1 = save_frame(tmp_path / "one", pf.frame_id, pf.bev, pf.voxels)
    a2, b2 = save_frame(tmp_path / "two", pf.frame_id, pf.bev, pf.voxels)
    assert a1.read_bytes() == a2.read_bytes() and b1.read_bytes() == b2.read_bytes()
    bev, vs = load_frame(tmp_path / "one", pf.frame_id)
    np.testing.assert_array_equal(bev.data, pf.bev.data)
    np.testing.assert_array_equal(vs.features, pf.voxels.features)
    np.testing.assert_array_equal(vs.point_index, pf.voxels.point_index)
    assert vs.dropped_voxels == pf.voxels.dropped_voxels


def test_npz_key_order_irrelevant(tmp_path):
    x, y = np.arange(3), np.eye(2)
    p = save_npz_stable(tmp_path / "a.npz", x=x, y=y)
    q = save_npz_stable(tmp_path / "b.npz", y=y, x=x)
    assert p.read_bytes() == q.read_bytes()


def test_toy_model_shapes():
    pf = prepared(1)[0]
    model = PVSSD(CFG.model_spec(), np.random.default_rng(0))
    with no_grad():
        vbev, stages, neck = model.features(pf.bev.data, pf.voxels, np.random.default_rng(0))
        out = model(pf.bev.data, pf.voxels, np.random.default_rng(0))
    assert [s.shape[1:] for s in stages] == [(32, 32), (16, 16), (8, 8), (4, 4)]
    assert neck.shape == (32, 32, 32)
    assert [v.depth for v in vbev] == [8, 4, 2, 1]
    n_anchor = model.anchors().boxes.shape[0]
    assert n_anchor == 4 * 32 * 32
    assert out.flat_cls().shape == (n_anchor,)
    assert out.flat_box().shape == (7, n_anchor)


def test_initial_scores_match_prior():
    pf = prepared(1)[0]
    model = PVSSD(CFG.model_spec(), np.random.default_rng(1))
    with no_grad():
        logits = model(pf.bev.data, pf.voxels, np.random.default_rng(0)).flat_cls().data
    prob = 1.0 / (1.0 + np.exp(-logits))
    assert abs(float(np.median(prob)) - 0.01) < 0.005


def test_train_deterministic_and_zero_steps():
    frames = prepared(2)
    runs = []
    for _ in range(2):
        model = PVSSD(CFG.model_spec(), np.random.default_rng(5))
        runs.append(train(model, frames, 3, np.random.default_rng(6)))
    assert runs[0] == runs[1]
    assert all(np.isfinite(r["total"]) for r in runs[0])
    model = PVSSD(CFG.model_spec(), np.random.default_rng(5))
    before = [p.data.copy() for p in model.parameters()]
    assert train(model, frames, 0, np.random.default_rng(6)) == []
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))


def test_train_requires_frames():
    model = PVSSD(CFG.model_spec(), np.random.default_rng(5))
    with pytest.raises(TrainingError, match="no training frames"):
        train(model, [], 1, np.random.default_rng(0))


def test_non_finite_loss_raises():
    frames = prepared(1)
    model = PVSSD(CFG.model_spec(), np.random.default_rng(5))
    model.parameters()[0].data[...] = np.nan
    with pytest.raises(TrainingError, match="non-finite loss at step 0"):
        train(model, frames, 1, np.random.default_rng(0))


def test_figures_written(tmp_path):
    hist = [{"loc": 1.0 / (i + 1), "cls": 0.5, "dir": 0.7, "total": 2.0 / (i + 1)} for i in range(5)]
    p = plot_loss_curve(hist, tmp_path / "loss.png")
    q = plot_pr_curves({"Car": (np.array([0.5, 1.0]), np.array([1.0, 0.5]))}, tmp_path / "pr.png")
    r = plot_pr_curves({}, tmp_path / "empty.png")
    for f in (p, q, r):
        assert f.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
