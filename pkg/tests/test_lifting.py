import math

import numpy as np
import pytest

from mvcond.autograd import Tensor, grad_check, ops
from mvcond.autograd.tensor import DimensionError
from mvcond.camera import RelativePose
from mvcond.config import ModelConfig
from mvcond.gradsuite import SMALL
from mvcond.lifting import LiftingNet, _interp_matrix

CFG = ModelConfig()


@pytest.fixture(scope="module")
def net():
    return LiftingNet(CFG, np.random.default_rng(0))


def pose_sensitive(rng):
    """A lifting net whose zero-initialised cross-attention outputs have been trained away from zero."""
    m = LiftingNet(CFG, np.random.default_rng(4))
    for blk in m.projector.blocks:
        if blk.kind == "cross":
            blk.attn.out.weight.data = rng.normal(0, 0.1, size=blk.attn.out.weight.shape).astype(np.float32)
    return m


def zeroed(net):
    for p in net.parameters().values():
        p.data = np.zeros_like(p.data)
    return net


def images(rng, n, res=64):
    return rng.uniform(size=(n, res, res, 3)).astype(np.float32)


class TestEncoder:
    def test_shape(self, net, rng):
        z = net.encode(images(rng, 2))
        assert z.shape == (2, 16, 16, CFG.latent_dim)

    def test_single_image(self, net, rng):
        assert net.encode(images(rng, 1)[0]).shape == (1, 16, 16, CFG.latent_dim)

    def test_zero_parameters(self, rng):
        z = zeroed(LiftingNet(CFG, np.random.default_rng(1))).encode(images(rng, 1))
        assert not np.any(z.data)

    def test_wrong_resolution(self, net, rng):
        with pytest.raises(DimensionError):
            net.encode(images(rng, 1, res=32))

    def test_gradient(self, rng):
        m = LiftingNet(SMALL, np.random.default_rng(2)).astype(np.float64)
        x = Tensor(rng.uniform(size=(1, 16, 16, 3)), dtype=np.float64)
        target = rng.normal(size=(1, 4, 4, SMALL.latent_dim))
        params = [m.encoder.conv1.weight, m.encoder.conv3.bias]
        err = grad_check(lambda: ops.mse(m.encoder(x), target), params, max_coords=10, rng=rng)
        assert err < 1e-4


class TestLift:
    def test_shapes(self, net, rng):
        z = net.encode(images(rng, 1))
        (tp,) = net.lift(z, [RelativePose(0.1, 0.5, 0.0)])
        for plane in tp.planes():
            assert plane.shape == (16, 16, CFG.feature_dim)

    def test_zero_parameters(self, rng):
        m = zeroed(LiftingNet(CFG, np.random.default_rng(1)))
        (tp,) = m.lift(m.encode(images(rng, 1)), [RelativePose(0.2, 1.0, 0.1)])
        for plane in tp.planes():
            assert not np.any(plane.data)

    def test_pose_path_starts_as_no_op(self, rng):
        m = LiftingNet(CFG, np.random.default_rng(4))
        z = m.encode(images(rng, 1))
        z2 = Tensor(np.concatenate([z.data, z.data]))
        a, b = m.lift(z2, [RelativePose(0.0, 0.3, 0.0), RelativePose(0.4, 2.0, 0.0)])
        np.testing.assert_array_equal(a.xy.data, b.xy.data)

    def test_pose_changes_output(self, rng):
        m = pose_sensitive(rng)
        z = m.encode(images(rng, 1))
        z2 = Tensor(np.concatenate([z.data, z.data]))
        a, b = m.lift(z2, [RelativePose(0.0, 0.3, 0.0), RelativePose(0.4, 2.0, 0.0)])
        assert not np.allclose(a.xy.data, b.xy.data)

    def test_no_view_conditioning_ignores_pose(self, rng):
        m = pose_sensitive(rng)
        z = m.encode(images(rng, 1))
        z2 = Tensor(np.concatenate([z.data, z.data]))
        a, b = m.lift(z2, [RelativePose(0.0, 0.3, 0.0), RelativePose(0.4, 2.0, 0.0)], view_conditioning=False)
        np.testing.assert_array_equal(a.xy.data, b.xy.data)

    def test_triplane_resampling(self, rng):
        cfg = ModelConfig(image_res=32, latent_res=8, triplane_res=12, window=4, shift=2)
        m = LiftingNet(cfg, np.random.default_rng(0))
        (tp,) = m.lift(m.encode(images(rng, 1, res=32)), [RelativePose(0.0, 0.0, 0.0)])
        assert tp.resolution == 12


class TestLiftAll:
    def test_single_equals_lift(self, net, rng):
        img = images(rng, 1)
        rp = RelativePose(0.1, 0.7, 0.0)
        (a,) = net.lift_all([(img[0], rp)])
        (b,) = net.lift(net.encode(img), [rp])
        np.testing.assert_array_equal(a.yz.data, b.yz.data)

    def test_permutation(self, net, rng):
        imgs = images(rng, 3)
        rps = [RelativePose(0.0, 0.5 * k, 0.0) for k in range(3)]
        out = net.lift_all(list(zip(imgs, rps)))
        perm = [2, 0, 1]
        out_p = net.lift_all([(imgs[i], rps[i]) for i in perm])
        for j, i in enumerate(perm):
            np.testing.assert_allclose(out_p[j].xz.data, out[i].xz.data, atol=1e-5)
        assert len({tp.xy.shape for tp in out}) == 1

    def test_elementwise(self, net, rng):
        imgs = images(rng, 3)
        rps = [RelativePose(0.0, 0.5 * k, 0.0) for k in range(3)]
        out = net.lift_all(list(zip(imgs, rps)))
        imgs2 = imgs.copy()
        imgs2[1] = rng.uniform(size=imgs2[1].shape)
        out2 = net.lift_all(list(zip(imgs2, rps)))
        np.testing.assert_allclose(out2[0].xy.data, out[0].xy.data, atol=1e-6)
        np.testing.assert_allclose(out2[2].xy.data, out[2].xy.data, atol=1e-6)
        assert not np.allclose(out2[1].xy.data, out[1].xy.data)

    def test_empty(self, net):
        from mvcond.autograd import ContractError

        with pytest.raises(ContractError):
            net.lift_all([])


class TestInterpMatrix:
    @pytest.mark.parametrize("n_out, n_in", [(4, 4), (7, 3), (3, 7), (1, 5), (1, 4), (5, 1)])
    def test_rows_sum_to_one(self, n_out, n_in):
        A = _interp_matrix(n_out, n_in)
        np.testing.assert_allclose(A.sum(axis=1), 1.0)

    def test_identity_and_linear_exact(self):
        np.testing.assert_allclose(_interp_matrix(5, 5), np.eye(5))
        x = np.linspace(-1, 2, 4)
        np.testing.assert_allclose(_interp_matrix(10, 4) @ x, np.linspace(-1, 2, 10))
