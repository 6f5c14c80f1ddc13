import numpy as np
import pytest

from pvssd.autodiff import ShapeError, Tensor, grad_check
from pvssd.autodiff import functional as F
from pvssd.neck import AlignStage, AttentionFuse, MSPFusion, interleave
from pvssd.projection import BackbonePlan, BackboneStage, FuseStage, ProjectionBranch


def probe_of(t, rng):
    w = Tensor(rng.normal(size=t.shape))
    return lambda out: F.sum(F.mul(out, w))


def rand(rng, *shape, grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


def test_resolution_ladder():
    plan = BackbonePlan()
    assert plan.resolutions(608) == [152, 152, 76, 38, 19]
    assert BackbonePlan(channels=(4, 4, 4, 4, 4)).resolutions(608) == [152, 152, 76, 38, 19]
    with pytest.raises(ValueError):
        plan.resolutions(600)


def test_stage0_quarter_resolution():
    rng = np.random.default_rng(0)
    out = BackboneStage(3, 8, 4, rng)(rand(rng, 3, 32, 32, grad=False))
    assert out.shape == (8, 8, 8)


def test_zero_input_zero_output():
    rng = np.random.default_rng(1)
    st = BackboneStage(4, 4, 2, rng)
    assert np.all(st(Tensor(np.zeros((4, 8, 8)))).data == 0.0)


def test_backbone_stage_gradcheck():
    rng = np.random.default_rng(2)
    st = BackboneStage(2, 3, 2, rng)
    x = rand(rng, 2, 8, 8)
    probe = probe_of(st(x), rng)
    assert grad_check(lambda: probe(st(x)), [x] + st.parameters()) < 1e-4


def test_fuse_identity_and_reachability():
    rng = np.random.default_rng(3)
    fuse = FuseStage(4, 3, rng, stage=1)
    bev = rand(rng, 4, 6, 6)
    vox = rand(rng, 3, 6, 6)
    out = fuse(bev, vox)
    loss = F.sum(F.mul(out, Tensor(rng.normal(size=out.shape))))
    loss.backward()
    assert np.abs(bev.grad).sum() > 0 and np.abs(vox.grad).sum() > 0
    fuse.squeeze.set_identity()
    fuse.mix.set_identity()
    np.testing.assert_array_equal(fuse(bev, Tensor(np.zeros((3, 6, 6)))).data, bev.data)


def test_fuse_mismatch_names_stage():
    rng = np.random.default_rng(4)
    with pytest.raises(ShapeError, match="stage 3"):
        FuseStage(2, 2, rng, stage=3)(rand(rng, 2, 4, 4), rand(rng, 2, 2, 2))


def test_fuse_gradcheck():
    rng = np.random.default_rng(5)
    fuse = FuseStage(3, 2, rng)
    bev, vox = rand(rng, 3, 5, 5), rand(rng, 2, 5, 5)
    probe = probe_of(fuse(bev, vox), rng)
    assert grad_check(lambda: probe(fuse(bev, vox)), [bev, vox] + fuse.parameters()) < 1e-4


def test_projection_branch_shapes_zero_and_gradcheck():
    rng = np.random.default_rng(6)
    plan = BackbonePlan(channels=(3, 3, 3, 3, 3))
    br = ProjectionBranch(plan, (2, 2, 2, 2), rng)
    res = plan.resolutions(32)[1:]
    vox = [Tensor(np.zeros((2, r, r))) for r in res]
    outs = br(Tensor(np.zeros((3, 32, 32))), vox)
    assert [o.shape[1] for o in outs] == [8, 4, 2, 1]
    assert all(np.all(o.data == 0.0) for o in outs)
    bev = rand(rng, 3, 32, 32)
    vox = [rand(rng, 2, r, r) for r in res]
    probes = [Tensor(rng.normal(size=o.shape)) for o in outs]

    def f():
        os_ = br(bev, vox)
        total = F.sum(F.mul(os_[0], probes[0]))
        for o, p in zip(os_[1:], probes[1:]):
            total = F.add(total, F.sum(F.mul(o, p)))
        return total

    assert grad_check(f, br.parameters(), max_per_param=5, rng=np.random.default_rng(0)) < 1e-4


def test_interleave_constant_and_membership():
    rng = np.random.default_rng(7)
    c = Tensor(np.full((2, 3, 3), 1.5))
    np.testing.assert_array_equal(interleave(c, c).data, 1.5)
    a, b = rand(rng, 2, 4, 5, grad=False), rand(rng, 2, 4, 5, grad=False)
    cv = interleave(a, b).data
    assert cv.shape == (2, 8, 10)
    for i in range(8):
        for j in range(10):
            src = a if i % 2 == 0 else b
            np.testing.assert_array_equal(cv[:, i, j], src.data[:, i // 2, j // 2])


def test_msp_shapes_and_gradcheck():
    rng = np.random.default_rng(8)
    msp = MSPFusion(6, 3, rng)
    assert msp(rand(rng, 6, 19, 19, grad=False), rand(rng, 3, 19, 19, grad=False)).shape == (3, 38, 38)
    v, b = rand(rng, 6, 3, 3), rand(rng, 3, 3, 3)
    probe = probe_of(msp(v, b), rng)
    assert grad_check(lambda: probe(msp(v, b)), [v, b] + msp.parameters()) < 1e-4
    with pytest.raises(ShapeError):
        msp(rand(rng, 6, 3, 3), rand(rng, 3, 4, 4))


@pytest.mark.parametrize("src,dst", [(304, 152), (152, 152), (38, 152), (76, 152)])
def test_align_shapes(src, dst):
    rng = np.random.default_rng(9)
    al = AlignStage(2, 5, src, dst, rng)
    assert al(rand(rng, 2, src, src, grad=False)).shape == (5, dst, dst)
    assert len(al.up) == (2 * {38: 2, 76: 1}.get(src, 0))


def test_align_unreachable():
    with pytest.raises(ValueError):
        AlignStage(2, 2, 48, 152, np.random.default_rng(0))


def test_align_gradcheck():
    rng = np.random.default_rng(10)
    al = AlignStage(2, 3, 2, 8, rng)
    x = rand(rng, 2, 2, 2)
    probe = probe_of(al(x), rng)
    assert grad_check(lambda: probe(al(x)), [x] + al.parameters()) < 1e-4


def test_attention_identical_sources_and_normalization():
    rng = np.random.default_rng(11)
    att = AttentionFuse(2, 4, rng)
    s = rand(rng, 4, 6, 6, grad=False)
    np.testing.assert_allclose(att([s, s]).data, s.data, atol=1e-12)
    srcs = [rand(rng, 4, 6, 6, grad=False) for _ in range(2)]
    np.testing.assert_allclose(att.weights(srcs).data.sum(axis=0), 1.0, atol=1e-12)


def test_attention_shift_invariance():
    rng = np.random.default_rng(12)
    att = AttentionFuse(3, 4, rng)
    srcs = [rand(rng, 4, 5, 5, grad=False) for _ in range(3)]
    base = att(srcs).data
    for conv in att.score:
        conv.bias.data = conv.bias.data + 2.5
    np.testing.assert_allclose(att(srcs).data, base, atol=1e-9)


def test_attention_gradcheck():
    rng = np.random.default_rng(13)
    att = AttentionFuse(3, 2, rng)
    srcs = [rand(rng, 2, 8, 8) for _ in range(3)]
    probe = probe_of(att(srcs), rng)
    assert grad_check(lambda: probe(att(srcs)), srcs + att.parameters()) < 1e-4
