import numpy as np
import pytest

import triplift.diffcore as dc
from triplift.diffcore import TapeTensor
from triplift.triplane import Triplane, sample_triplane, tv_loss


def make_triplane(f=4, nh=5, nw=6, nz=3, fill=None, rng=None):
    tri = Triplane.create(f, nh, nw, nz, rng=rng)
    if fill is not None:
        for plane in tri.planes:
            plane.data[...] = fill
    return tri


def test_plane_shape_consistency_enforced():
    with pytest.raises(ValueError):
        Triplane(
            hw=TapeTensor(np.zeros((4, 5, 6))),
            hz=TapeTensor(np.zeros((4, 5, 3))),
            wz=TapeTensor(np.zeros((4, 7, 3))),
        )
    with pytest.raises(ValueError):
        Triplane(
            hw=TapeTensor(np.zeros((4, 5, 6))),
            hz=TapeTensor(np.zeros((2, 5, 3))),
            wz=TapeTensor(np.zeros((4, 6, 3))),
        )


def test_sample_all_ones():
    tri = make_triplane(fill=1.0)
    pts = np.random.default_rng(0).uniform(-1, 1, size=(20, 3))
    out = sample_triplane(tri, pts)
    np.testing.assert_allclose(out.data, 1.0, atol=1e-12)


def test_sample_constant_planes_multiply():
    tri = make_triplane(f=3)
    a = np.array([1.5, -2.0, 0.5])
    b = np.array([2.0, 0.25, -1.0])
    c = np.array([3.0, 4.0, 2.0])
    tri.hw.data[...] = a[:, None, None]
    tri.hz.data[...] = b[:, None, None]
    tri.wz.data[...] = c[:, None, None]
    pts = np.random.default_rng(1).uniform(-1, 1, size=(11, 3))
    out = sample_triplane(tri, pts)
    np.testing.assert_allclose(out.data, np.tile(a * b * c, (11, 1)), atol=1e-12)


def test_sample_zero_plane_annihilates():
    tri = make_triplane(rng=np.random.default_rng(2))
    tri.hz.data[...] = 0.0
    pts = np.random.default_rng(3).uniform(-1, 1, size=(9, 3))
    np.testing.assert_array_equal(sample_triplane(tri, pts).data, 0.0)


def test_sample_at_lattice_node_is_product_of_node_features():
    rng = np.random.default_rng(4)
    tri = make_triplane(f=2, nh=4, nw=5, nz=3, rng=rng)
    # lattice node (ih, iw, iz) -> normalized coords with border-center convention
    ih, iw, iz = 2, 3, 1
    g = np.array([
        2 * ih / (4 - 1) - 1,
        2 * iw / (5 - 1) - 1,
        2 * iz / (3 - 1) - 1,
    ])
    out = sample_triplane(tri, g[None, :]).data[0]
    expect = tri.hw.data[:, ih, iw] * tri.hz.data[:, ih, iz] * tri.wz.data[:, iw, iz]
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_sample_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    tri = make_triplane(f=2, nh=3, nw=4, nz=3, rng=rng)
    pts = rng.uniform(-0.95, 0.95, size=(6, 3))

    def build():
        out = sample_triplane(tri, pts)
        return dc.mean(dc.mul(out, out))

    err = dc.check_gradients(build, list(tri.planes))
    assert err < dc.REL_TOL


def test_tv_zero_for_constant_planes():
    tri = make_triplane(fill=2.5)
    assert tv_loss(tri).item() == 0.0


def test_tv_single_channel_2x2_plane():
    # plane [[0,1],[0,1]]: row diffs 0, column diffs 1 and 1 -> sum 2
    tri = Triplane(
        hw=TapeTensor(np.array([[[0.0, 1.0], [0.0, 1.0]]]), requires_grad=True),
        hz=TapeTensor(np.full((1, 2, 3), 0.7), requires_grad=True),
        wz=TapeTensor(np.full((1, 2, 3), -0.2), requires_grad=True),
    )
    # enumerate the four difference terms of the hw plane by hand
    plane = tri.hw.data[0]
    per_plane_sum = 0.0
    for i in range(2):
        for j in range(2):
            if i > 0:
                per_plane_sum += (plane[i, j] - plane[i - 1, j]) ** 2
            if j > 0:
                per_plane_sum += (plane[i, j] - plane[i, j - 1]) ** 2
    assert per_plane_sum == 2.0
    expect = (per_plane_sum / 4) / 3.0  # own-cell-count normalization, 3-plane average
    assert abs(tv_loss(tri).item() - expect) < 1e-12


def test_tv_quadratic_scaling():
    rng = np.random.default_rng(6)
    tri = make_triplane(rng=rng)
    base = tv_loss(tri).item()
    lam = 3.7
    for plane in tri.planes:
        plane.data *= lam
    scaled = tv_loss(tri).item()
    assert abs(scaled - lam ** 2 * base) < 1e-9 * max(1.0, scaled)


def test_tv_nonnegative_and_zero_iff_constant():
    rng = np.random.default_rng(7)
    for _ in range(5):
        tri = make_triplane(rng=rng)
        assert tv_loss(tri).item() > 0.0
    flat = make_triplane(fill=-3.0)
    assert tv_loss(flat).item() == 0.0


def test_tv_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    tri = make_triplane(f=2, nh=3, nw=3, nz=2, rng=rng)
    err = dc.check_gradients(lambda: tv_loss(tri), list(tri.planes))
    assert err < dc.REL_TOL


def test_default_shape_profiles():
    paper = Triplane.create(128, 200, 200, 16)
    assert paper.hw.shape == (128, 200, 200)
    assert paper.hz.shape == (128, 200, 16)
    assert paper.wz.shape == (128, 200, 16)
    toy = Triplane.create(16, 48, 48, 8)
    assert toy.resolutions == (48, 48, 8)
