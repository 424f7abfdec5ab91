import numpy as np
import pytest

import triplift.diffcore as dc
from triplift import renderer as rnd
from triplift.diffcore import TapeTensor
from triplift.encoder import FeaturePyramid
from triplift.geometry import Camera, ContractionParams, intrinsics_from_fov, look_at_pose
from triplift.triplane import Triplane


def unit_contraction(radius=10.0):
    return ContractionParams([1.0 / radius] * 3)


def make_pyramid(constants, h=8, w=8, requires_grad=False):
    maps = [[TapeTensor(np.full((len(c), h, w), 0.0) + np.asarray(c)[:, None, None],
                        requires_grad=requires_grad)]
            for c in constants]
    return FeaturePyramid(maps=maps, strides=(4,))


def camera_at(position, target, width=32, height=32, fov=60.0):
    return Camera(intrinsics_from_fov(width, height, fov), look_at_pose(position, target),
                  width, height)


# ---------------------------------------------------------------------------
# decoder


def test_decode_outputs_in_unit_interval():
    mlp = rnd.RendererMLP(4, 2, hidden=8, layers=3, seed=0)
    rng = np.random.default_rng(0)
    f_t = TapeTensor(rng.normal(size=(10, 4)), requires_grad=True)
    f_pif = TapeTensor(rng.normal(size=(10, 4)), requires_grad=True)
    c, s = rnd.decode_point(mlp, f_t, f_pif)
    assert np.all((c.data > 0) & (c.data < 1))
    assert np.all((s.data > 0) & (s.data < 1))
    assert c.shape == (10, 3) and s.shape == (10, 1)


def test_decode_zero_network_gives_half():
    mlp = rnd.RendererMLP(4, 2, hidden=8, layers=3, seed=0)
    for w, b in zip(mlp.weights, mlp.biases):
        w.data[...] = 0.0
        b.data[...] = 0.0
    f_t = TapeTensor(np.random.default_rng(1).normal(size=(5, 4)))
    f_pif = TapeTensor(np.zeros((5, 4)))
    c, s = rnd.decode_point(mlp, f_t, f_pif)
    np.testing.assert_allclose(c.data, 0.5, atol=1e-15)
    np.testing.assert_allclose(s.data, 0.5, atol=1e-15)


def test_decode_rejects_wrong_width():
    mlp = rnd.RendererMLP(4, 2, hidden=8, layers=3)
    with pytest.raises(dc.ShapeError):
        rnd.decode_point(mlp, TapeTensor(np.zeros((3, 4))), TapeTensor(np.zeros((3, 5))))


def test_decode_density_gradient_matches_fd():
    mlp = rnd.RendererMLP(3, 2, hidden=6, layers=3, seed=2)
    rng = np.random.default_rng(3)
    f_t = TapeTensor(rng.normal(size=(4, 3)), requires_grad=True)
    f_pif = TapeTensor(rng.normal(size=(4, 4)), requires_grad=True)

    def build():
        _, s = rnd.decode_point(mlp, f_t, f_pif)
        return dc.mean(s)

    err = dc.check_gradients(build, [f_t, f_pif] + [t for _, t in mlp.named_parameters()],
                             sample=10, rng=np.random.default_rng(0))
    assert err < dc.REL_TOL


def test_renderer_mlp_input_width_contract():
    mlp = rnd.RendererMLP(128, 128, hidden=128, layers=5)
    assert mlp.input_width == 384
    raw_out = mlp.weights[-1].shape[1]
    assert raw_out == 4


# ---------------------------------------------------------------------------
# projected image features


def ego_like_cameras(point, seeing):
    """Six cameras; those in ``seeing`` look at `point`, the rest look away."""
    cams = []
    for i in range(6):
        pos = np.array([np.cos(i), np.sin(i), 1.0]) * 2.0
        if i in seeing:
            cams.append(camera_at(pos, point))
        else:
            cams.append(camera_at(pos, pos + (pos - np.asarray(point))))
    return cams


def test_pif_zero_cameras_zero_padding():
    point = np.array([[30.0, 0.0, 1.0]])
    cams = ego_like_cameras(point[0], seeing=set())
    pyr = make_pyramid([np.full(3, c + 1.0) for c in range(6)])
    out = rnd.extract_pif(point, pyr, cams)
    assert out.shape == (1, 6)
    np.testing.assert_array_equal(out.data, 0.0)


def test_pif_one_camera_pads_second_slot():
    point = np.array([[5.0, 0.0, 1.0]])
    cams = ego_like_cameras(point[0], seeing={3})
    pyr = make_pyramid([np.full(3, c + 1.0) for c in range(6)])
    out = rnd.extract_pif(point, pyr, cams)
    np.testing.assert_allclose(out.data[0, :3], 4.0, atol=1e-12)
    np.testing.assert_array_equal(out.data[0, 3:], 0.0)


def test_pif_two_cameras_ordered_by_index():
    point = np.array([[5.0, 0.0, 1.0]])
    cams = ego_like_cameras(point[0], seeing={2, 5})
    pyr = make_pyramid([np.full(3, c + 1.0) for c in range(6)])
    out = rnd.extract_pif(point, pyr, cams)
    np.testing.assert_allclose(out.data[0, :3], 3.0, atol=1e-12)
    np.testing.assert_allclose(out.data[0, 3:], 6.0, atol=1e-12)


def test_pif_three_visible_keeps_first_two():
    point = np.array([[5.0, 0.0, 1.0]])
    cams = ego_like_cameras(point[0], seeing={1, 2, 4})
    pyr = make_pyramid([np.full(3, c + 1.0) for c in range(6)])
    out = rnd.extract_pif(point, pyr, cams)
    np.testing.assert_allclose(out.data[0, :3], 2.0, atol=1e-12)
    np.testing.assert_allclose(out.data[0, 3:], 3.0, atol=1e-12)


# ---------------------------------------------------------------------------
# sampling


def test_sample_coarse_deterministic_midpoints():
    t = rnd.sample_coarse(0.0, 1.0, 2)
    np.testing.assert_allclose(t, [[0.25, 0.75]], atol=1e-15)


def test_sample_coarse_bounds_and_order():
    rng = np.random.default_rng(4)
    jitter = rng.random((8, 16))
    t = rnd.sample_coarse(2.0, 50.0, 16, jitter=jitter)
    assert np.all(t >= 2.0) and np.all(t <= 50.0)
    assert np.all(np.diff(t, axis=1) > 0)


def test_sample_coarse_one_per_bin():
    rng = np.random.default_rng(5)
    near, far, n = 1.0, 9.0, 8
    t = rnd.sample_coarse(near, far, n, jitter=rng.random((4, n)))
    width = (far - near) / n
    bins = np.floor((t - near) / width).astype(int)
    expect = np.tile(np.arange(n), (4, 1))
    np.testing.assert_array_equal(bins, expect)


def test_sample_fine_point_mass():
    t_c = np.array([[1.0, 2.0, 3.0, 4.0]])
    w = np.array([[0.0, 1.0, 0.0, 0.0]])  # all mass on segment [2, 3]
    rng = np.random.default_rng(6)
    t = rnd.sample_fine(t_c, w, 16, far=5.0, u=rng.random((1, 16)))
    fine = np.setdiff1d(t[0], t_c[0])
    assert fine.size == 16
    assert np.all((fine >= 2.0) & (fine <= 3.0))


def test_sample_fine_uniform_weights_ks():
    segs = 8
    t_c = np.linspace(0.0, 1.0, segs, endpoint=False)[None, :]
    w = np.ones((1, segs))
    rng = np.random.default_rng(7)
    draws = rnd.sample_fine(np.repeat(t_c, 100, axis=0), np.repeat(w, 100, axis=0),
                            100, far=1.0, u=rng.random((100, 100)))
    fine = np.sort(draws.reshape(-1))
    fine = fine[~np.isin(fine, t_c[0])][:10000]
    # empirical CDF of 1e4 draws vs uniform on [0, 1]
    ecdf = np.arange(1, fine.size + 1) / fine.size
    sup = np.max(np.abs(ecdf - fine))
    assert sup < 0.05


def test_sample_fine_all_zero_weights_uniform_fallback():
    t_c = np.array([[0.0, 1.0, 2.0, 3.0]])
    w = np.zeros((1, 4))
    t = rnd.sample_fine(t_c, w, 8, far=4.0)
    assert t.shape == (1, 12)
    fine = np.setdiff1d(t[0], t_c[0])
    # uniform fallback spreads over all segments
    assert np.histogram(fine, bins=[0, 1, 2, 3, 4])[0].min() >= 1


def test_sample_fine_sorted_and_sized():
    rng = np.random.default_rng(8)
    t_c = np.sort(rng.uniform(0, 10, size=(5, 6)), axis=1)
    w = rng.random((5, 6))
    t = rnd.sample_fine(t_c, w, 7, far=12.0, u=rng.random((5, 7)))
    assert t.shape == (5, 13)
    assert np.all(np.diff(t, axis=1) >= 0)


# ---------------------------------------------------------------------------
# compositing


def as_batch(colors, sigma, t, far):
    c = TapeTensor(np.asarray(colors, dtype=np.float64), requires_grad=True)
    s = TapeTensor(np.asarray(sigma, dtype=np.float64), requires_grad=True)
    return rnd.composite(c, s, np.asarray(t, dtype=np.float64), far)


def test_composite_empty_space():
    t = np.linspace(0.1, 5.0, 16)[None, :]
    batch = as_batch(np.full((1, 16, 3), 0.7), np.zeros((1, 16)), t, far=6.0)
    np.testing.assert_array_equal(batch.rgb.data, 0.0)
    np.testing.assert_array_equal(batch.weight_sum.data, 0.0)
    np.testing.assert_allclose(batch.trans.data, 1.0, atol=1e-15)
    assert batch.background.all()


def test_composite_opaque_first_hit():
    t = np.array([[1.5, 1e5]])
    colors = np.array([[[0.2, 0.4, 0.6], [0.9, 0.9, 0.9]]])
    sigma = np.array([[1.0, 1.0]])  # sigma*delta huge for the first segment
    batch = as_batch(colors, sigma, t, far=2e5)
    np.testing.assert_allclose(batch.rgb.data[0], [0.2, 0.4, 0.6], atol=1e-12)
    np.testing.assert_allclose(batch.depth[0], 1.5, atol=1e-9)


def test_composite_two_sample_closed_form():
    # sigma=1, delta=1 each: alpha1 = 1-e^-1 = 0.6321, T2 = e^-1, w2 = 0.2325
    t = np.array([[0.0, 1.0]])
    c1, c2 = np.array([1.0, 0.0, 0.5]), np.array([0.0, 1.0, 0.25])
    colors = np.stack([c1, c2])[None]
    sigma = np.array([[1.0, 1.0]])
    batch = as_batch(colors, sigma, t, far=2.0)
    a1 = 1 - np.exp(-1.0)
    w2 = np.exp(-1.0) * (1 - np.exp(-1.0))
    assert abs(a1 - 0.6321) < 1e-4 and abs(w2 - 0.2325) < 1e-4
    np.testing.assert_allclose(batch.rgb.data[0], a1 * c1 + w2 * c2, atol=1e-12)
    np.testing.assert_allclose(batch.weights.data[0], [a1, w2], atol=1e-12)


def test_composite_transmittance_identity():
    # exp(-cumsum) formulation against the product formulation
    rng = np.random.default_rng(9)
    t = np.sort(rng.uniform(0.1, 9.0, size=(6, 12)), axis=1)
    sigma = rng.uniform(0.0, 1.0, size=(6, 12))
    colors = rng.uniform(0, 1, size=(6, 12, 3))
    batch = as_batch(colors, sigma, t, far=10.0)
    alpha = 1.0 - np.exp(-sigma * batch.delta)
    trans_prod = np.cumprod(np.concatenate([np.ones((6, 1)), 1 - alpha], axis=1), axis=1)[:, :-1]
    np.testing.assert_allclose(batch.trans.data, trans_prod, atol=1e-12)
    np.testing.assert_allclose(batch.weights.data, trans_prod * alpha, atol=1e-12)


def test_composite_constant_density_analytic():
    sigma_val, length, n = 0.5, 4.0, 1024
    t = rnd.sample_coarse(0.0, length, n)
    batch = as_batch(np.full((1, n, 3), 0.3), np.full((1, n), sigma_val), t, far=length)
    expect = 1.0 - np.exp(-sigma_val * length)
    assert abs(batch.weight_sum.data[0] - expect) < 1e-3


def test_composite_weights_subprobability():
    rng = np.random.default_rng(10)
    for _ in range(5):
        t = np.sort(rng.uniform(0.1, 20.0, size=(4, 24)), axis=1)
        sigma = rng.uniform(0, 1, size=(4, 24))
        batch = as_batch(rng.uniform(0, 1, (4, 24, 3)), sigma, t, far=25.0)
        w = batch.weights.data
        assert np.all(w >= 0)
        assert np.all(batch.weight_sum.data <= 1.0 + 1e-6)


def test_composite_rejects_unsorted():
    t = np.array([[2.0, 1.0]])
    with pytest.raises(ValueError):
        as_batch(np.zeros((1, 2, 3)), np.zeros((1, 2)), t, far=3.0)


def test_composite_gradients_match_fd():
    rng = np.random.default_rng(11)
    t = np.sort(rng.uniform(0.2, 5.0, size=(3, 6)), axis=1)
    colors = TapeTensor(rng.uniform(0.1, 0.9, size=(3, 6, 3)), requires_grad=True)
    sigma = TapeTensor(rng.uniform(0.05, 0.95, size=(3, 6)), requires_grad=True)

    def build():
        batch = rnd.composite(colors, sigma, t, far=6.0)
        return dc.mean(batch.rgb)

    err = dc.check_gradients(build, [colors, sigma])
    assert err < dc.REL_TOL


# ---------------------------------------------------------------------------
# distortion loss


def _distortion_oracle(w, edges):
    # direct double sum per ray, then mean
    total = 0.0
    rays = w.shape[0]
    for r in range(rays):
        mids = 0.5 * (edges[r, 1:] + edges[r, :-1])
        seg = np.diff(edges[r])
        inter = 0.0
        for i in range(w.shape[1]):
            for j in range(w.shape[1]):
                inter += w[r, i] * w[r, j] * abs(mids[i] - mids[j])
        total += inter + (w[r] ** 2 * seg).sum() / 3.0
    return total / rays


def test_distortion_zero_weights():
    w = TapeTensor(np.zeros((2, 5)), requires_grad=True)
    edges = np.tile(np.linspace(0, 1, 6), (2, 1))
    assert rnd.distortion_loss(w, edges).item() == 0.0


def test_distortion_single_point_mass():
    # w=1 on one segment of normalized length 0.1 -> w^2 * 0.1 / 3
    w = TapeTensor(np.array([[0.0, 1.0, 0.0]]), requires_grad=True)
    edges = np.array([[0.0, 0.3, 0.4, 1.0]])
    got = rnd.distortion_loss(w, edges).item()
    assert abs(got - 0.1 / 3.0) < 1e-9


def test_distortion_two_point_masses():
    w = TapeTensor(np.array([[0.5, 0.0, 0.25]]), requires_grad=True)
    edges = np.array([[0.05, 0.15, 0.85, 0.95]])
    # masses at mids 0.1 and 0.9: the cross pair contributes 2 * w_i * w_j * 0.8
    got = rnd.distortion_loss(w, edges).item()
    expect = 2 * 0.5 * 0.25 * 0.8 + (0.5 ** 2 * 0.1 + 0.25 ** 2 * 0.1) / 3.0
    assert abs(got - expect) < 1e-9


def test_distortion_matches_double_sum_oracle():
    rng = np.random.default_rng(12)
    w_np = rng.uniform(0, 0.3, size=(4, 9))
    edges = np.sort(rng.uniform(0, 1, size=(4, 10)), axis=1)
    w = TapeTensor(w_np, requires_grad=True)
    got = rnd.distortion_loss(w, edges).item()
    assert abs(got - _distortion_oracle(w_np, edges)) < 1e-9


def test_distortion_gradients_match_fd():
    rng = np.random.default_rng(13)
    w = TapeTensor(rng.uniform(0, 0.3, size=(3, 7)), requires_grad=True)
    edges = np.sort(rng.uniform(0, 1, size=(3, 8)), axis=1)
    err = dc.check_gradients(lambda: rnd.distortion_loss(w, edges), [w])
    assert err < dc.REL_TOL


# ---------------------------------------------------------------------------
# full renders


def black_renderer_setup(seed=0):
    tri = Triplane.create(4, 8, 8, 4, rng=np.random.default_rng(seed))
    renderer = rnd.Renderer.create(4, 2, unit_contraction(), hidden=8, layers=3, seed=seed)
    return tri, renderer


def test_render_zero_density_black_image():
    tri, renderer = black_renderer_setup()
    # drive the density output hard negative: sigmoid -> ~0
    renderer.mlp.weights[-1].data[...] = 0.0
    renderer.mlp.biases[-1].data[...] = [0.0, 0.0, 0.0, -40.0]
    cam = camera_at((12.0, 0, 4.0), (0, 0, 0), width=16, height=12)
    opts = rnd.RenderOptions(num_coarse=8, near=0.5, far=30.0)
    rgb, depth, background = renderer.render_image(tri, cam, opts)
    assert np.max(np.abs(rgb)) < 1e-12
    assert background.all()
    assert np.max(np.abs(depth)) < 1e-6


def test_render_deterministic_across_calls_and_workers():
    tri, renderer = black_renderer_setup(seed=3)
    cam = camera_at((10.0, 2.0, 5.0), (0, 0, 0), width=16, height=12)
    opts = rnd.RenderOptions(num_coarse=8, num_fine=8, near=0.5, far=30.0,
                             stratified=True, seed=11, chunk=37)
    a = renderer.render_image(tri, cam, opts)
    b = renderer.render_image(tri, cam, opts)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    opts_workers = rnd.RenderOptions(num_coarse=8, num_fine=8, near=0.5, far=30.0,
                                     stratified=True, seed=11, chunk=17, workers=4)
    c = renderer.render_image(tri, cam, opts_workers)
    for x, y in zip(a, c):
        assert np.array_equal(x, y)


def test_render_end_to_end_gradients():
    tri, renderer = black_renderer_setup(seed=5)
    rng = np.random.default_rng(6)
    cams = ego_like_cameras(np.array([3.0, 0.0, 1.0]), seeing={0, 1})
    pyr = make_pyramid([rng.normal(size=2) for _ in range(6)], requires_grad=True)
    origins = np.tile(np.array([8.0, 1.0, 3.0]), (2, 1))
    dirs = np.array([[-1.0, 0, -0.2], [-1.0, 0.1, -0.3]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t = rnd.sample_coarse(0.5, 25.0, 8, rays=2)

    def build():
        batch = renderer.render_rays(tri, origins, dirs, t, 25.0, pyramid=pyr,
                                     cameras=cams, bn_training=True)
        return dc.mean(batch.rgb)

    params = list(tri.planes)
    params += [t_ for _, t_ in renderer.named_parameters()]
    params += [pyr.maps[i][0] for i in range(6)]
    err = dc.check_gradients(build, params, sample=6, rng=np.random.default_rng(0))
    assert err < dc.REL_TOL
