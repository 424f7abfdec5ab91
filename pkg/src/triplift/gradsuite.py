"""Finite-difference verification suites, grouped by module.

Each check builds a tiny double-precision problem, runs one backward pass,
and compares every (or a sampled subset of) coordinate against central
differences. Used by the ``gradcheck`` CLI command and the acceptance tests.
"""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import TapeTensor, check_gradients
from .encoder import (DeformableAttention, EncoderConfig, FeatureExtractor,
                      ImageToTriplaneEncoder, ReferencePoints)
from .geometry import ContractionParams
from .renderer import Renderer, composite, distortion_loss, sample_coarse
from .toyworld import make_rig
from .training import color_loss, total_loss
from .triplane import Triplane, sample_triplane, tv_loss


def _p(rng, *shape):
    return TapeTensor(rng.normal(size=shape), requires_grad=True)


def _diffcore_checks():
    rng = np.random.default_rng(1000)
    checks = []

    a = _p(rng, 3, 4)
    b = TapeTensor(rng.normal(size=(3, 4)) + 3.0, requires_grad=True)
    checks.append(("diffcore.add", lambda: dc.mean(dc.mul(dc.add(a, b), dc.add(a, b))), [a, b]))
    checks.append(("diffcore.sub", lambda: dc.mean(dc.mul(dc.sub(a, b), a)), [a, b]))
    checks.append(("diffcore.mul", lambda: dc.mean(dc.mul(a, b)), [a, b]))
    checks.append(("diffcore.div", lambda: dc.mean(dc.div(a, b)), [a, b]))
    checks.append(("diffcore.relu", lambda: dc.mean(dc.relu(a)), [a]))
    checks.append(("diffcore.sigmoid", lambda: dc.mean(dc.sigmoid(a)), [a]))
    checks.append(("diffcore.exp", lambda: dc.mean(dc.exp(a)), [a]))
    checks.append(("diffcore.softmax", lambda: dc.mean(dc.mul(dc.softmax(a), b)), [a]))
    mask = rng.random((3, 4)) > 0.3
    checks.append(("diffcore.masked_softmax",
                   lambda: dc.mean(dc.mul(dc.masked_softmax(a, mask), b)), [a]))

    x = _p(rng, 3, 4)
    w = _p(rng, 4, 2)
    bias = _p(rng, 2)
    checks.append(("diffcore.linear",
                   lambda: dc.mean(dc.mul(dc.linear(x, w, bias), dc.linear(x, w, bias))),
                   [x, w, bias]))
    checks.append(("diffcore.matmul", lambda: dc.mean(dc.matmul(x, w)), [x, w]))

    checks.append(("diffcore.sum_axis",
                   lambda: dc.mean(dc.mul(dc.tsum(a, axis=1), dc.tsum(a, axis=1))), [a]))
    checks.append(("diffcore.cumsum", lambda: dc.mean(dc.mul(dc.cumsum(a, axis=1), b)), [a]))
    checks.append(("diffcore.cumsum_exclusive",
                   lambda: dc.mean(dc.mul(dc.cumsum(a, axis=1, exclusive=True), b)), [a]))
    checks.append(("diffcore.concat",
                   lambda: dc.mean(dc.mul(dc.concat([a, x], axis=0), dc.concat([a, x], axis=0))),
                   [a, x]))
    checks.append(("diffcore.reshape",
                   lambda: dc.mean(dc.mul(dc.reshape(a, (4, 3)), dc.reshape(a, (4, 3)))), [a]))
    checks.append(("diffcore.permute",
                   lambda: dc.mean(dc.mul(dc.permute(a, (1, 0)), dc.permute(a, (1, 0)))), [a]))
    checks.append(("diffcore.slice_axis",
                   lambda: dc.mean(dc.mul(dc.slice_axis(a, 1, 1, 3), dc.slice_axis(a, 1, 1, 3))),
                   [a]))
    idx = np.array([2, 0, 1, 0])
    checks.append(("diffcore.gather_rows",
                   lambda: dc.mean(dc.mul(dc.gather_rows(a, idx), dc.gather_rows(a, idx))), [a]))
    s = _p(rng, 3)
    checks.append(("diffcore.scale_last", lambda: dc.mean(dc.scale_last(a, s)), [a, s]))

    grid = _p(rng, 2, 5, 6)
    coords = TapeTensor(rng.uniform(-0.9, 0.9, size=(6, 2)), requires_grad=True)

    def bilinear_loss():
        out, _ = dc.bilinear_sample2d(grid, coords)
        return dc.mean(dc.mul(out, out))

    checks.append(("diffcore.bilinear_sample2d", bilinear_loss, [grid, coords]))

    img = _p(rng, 2, 6, 6)
    kern = _p(rng, 3, 2, 3, 3)
    checks.append(("diffcore.conv2d",
                   lambda: dc.mean(dc.mul(dc.conv2d(img, kern, 2, 1), dc.conv2d(img, kern, 2, 1))),
                   [img, kern]))
    cb = _p(rng, 2)
    checks.append(("diffcore.add_channel_bias",
                   lambda: dc.mean(dc.mul(dc.add_channel_bias(img, cb),
                                          dc.add_channel_bias(img, cb))), [img, cb]))
    checks.append(("diffcore.upsample2x",
                   lambda: dc.mean(dc.mul(dc.upsample2x(img), dc.upsample2x(img))), [img]))

    xb = _p(rng, 6, 3)
    state = dc.BatchNormState.create(3)
    state.gamma = TapeTensor(rng.normal(size=3) + 1.0, requires_grad=True)
    state.beta = _p(rng, 3)
    wb = dc.constant(rng.normal(size=(6, 3)))
    checks.append(("diffcore.batch_norm",
                   lambda: dc.mean(dc.mul(dc.batch_norm(xb, state, True), wb)),
                   [xb, state.gamma, state.beta]))
    return checks


def _triplane_checks():
    rng = np.random.default_rng(2000)
    tri = Triplane.create(2, 4, 4, 3, rng=rng)
    pts = rng.uniform(-0.9, 0.9, size=(5, 3))
    checks = [
        ("triplane.sample",
         lambda: dc.mean(dc.mul(sample_triplane(tri, pts), sample_triplane(tri, pts))),
         list(tri.planes)),
        ("triplane.tv_loss", lambda: tv_loss(tri), list(tri.planes)),
    ]
    return checks


def _encoder_checks():
    rng = np.random.default_rng(3000)
    cfg = EncoderConfig(image_height=16, image_width=16, feat_channels=4, extractor_hidden=4,
                        strides=(4, 8), plane_channels=4, n_h=6, n_w=6, n_z=3,
                        n_self=2, n_perp=1)
    extractor = FeatureExtractor(cfg, rng)
    image = rng.uniform(0, 1, size=(1, 3, 16, 16))

    def extractor_loss():
        pyr = extractor.forward(image)
        return dc.add(dc.mean(dc.mul(pyr.maps[0][0], pyr.maps[0][0])),
                      dc.mean(dc.mul(pyr.maps[0][1], pyr.maps[0][1])))

    ex_params = [t for _, t in extractor.named_parameters()]

    attn = DeformableAttention(4, 3, num_slots=3, heads=2, rng=rng)
    attn.w_off.data[...] = rng.normal(scale=0.1, size=attn.w_off.shape)
    attn.w_logit.data[...] = rng.normal(scale=0.5, size=attn.w_logit.shape)
    vmap = _p(rng, 3, 5, 5)
    refs = ReferencePoints(
        map_index=np.zeros((4, 3), np.int32),
        coords=rng.uniform(-0.8, 0.8, size=(4, 3, 2)),
        valid=rng.random((4, 3)) > 0.2,
        slot=np.tile(np.arange(3, dtype=np.int32), (4, 1)),
        num_slots=3,
    )
    q = _p(rng, 4, 4)

    def attn_loss():
        out = attn(q, refs, [vmap])
        return dc.mean(dc.mul(out, out))

    attn_params = [q, vmap, attn.w_off, attn.b_off, attn.w_logit, attn.b_logit,
                   attn.w_val[0], attn.w_val[1], attn.w_out, attn.b_out]
    return [
        ("encoder.extract_features", extractor_loss, ex_params),
        ("encoder.deform_attn", attn_loss, attn_params),
    ]


def _renderer_checks():
    rng = np.random.default_rng(4000)
    t = np.sort(rng.uniform(0.2, 5.0, size=(2, 5)), axis=1)
    colors = TapeTensor(rng.uniform(0.1, 0.9, size=(2, 5, 3)), requires_grad=True)
    sigma = TapeTensor(rng.uniform(0.05, 0.95, size=(2, 5)), requires_grad=True)

    def composite_loss():
        batch = composite(colors, sigma, t, far=6.0)
        return dc.mean(batch.rgb)

    w = TapeTensor(rng.uniform(0, 0.3, size=(2, 6)), requires_grad=True)
    edges = np.sort(rng.uniform(0, 1, size=(2, 7)), axis=1)

    tri = Triplane.create(3, 4, 4, 3, rng=rng)
    contraction = ContractionParams([0.1, 0.1, 0.2])
    renderer = Renderer.create(3, 2, contraction, hidden=6, layers=3, seed=4)
    # keep every relu preactivation well away from its kink: central
    # differences are invalid within h of a non-differentiable point
    for plane in tri.planes:
        plane.data[...] = rng.normal(scale=0.6, size=plane.shape)
    for b in renderer.mlp.biases:
        b.data += rng.normal(scale=0.3, size=b.shape)
    origins = np.tile(np.array([8.0, 0.5, 2.0]), (2, 1))
    dirs = np.array([[-1.0, 0.05, -0.1], [-0.9, -0.2, -0.15]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t_rays = sample_coarse(0.5, 20.0, 4, rays=2)

    def render_loss():
        batch = renderer.render_rays(tri, origins, dirs, t_rays, 20.0)
        return dc.mean(batch.rgb)

    return [
        ("renderer.composite", composite_loss, [colors, sigma]),
        ("renderer.distortion_loss", lambda: distortion_loss(w, edges), [w]),
        ("renderer.render_rays", render_loss,
         list(tri.planes) + [p for _, p in renderer.named_parameters()]),
    ]


def _training_checks():
    rng = np.random.default_rng(5000)
    pred = TapeTensor(rng.uniform(0, 1, size=(4, 3)), requires_grad=True)
    gt = rng.uniform(0, 1, size=(4, 3))
    tri = Triplane.create(2, 3, 3, 2, rng=rng)
    t = np.sort(rng.uniform(0.3, 4.0, size=(4, 5)), axis=1)
    colors = TapeTensor(rng.uniform(0.2, 0.8, size=(4, 5, 3)), requires_grad=True)
    sigma = TapeTensor(rng.uniform(0.1, 0.9, size=(4, 5)), requires_grad=True)

    def loss():
        batch = composite(colors, sigma, t, far=5.0)
        edges = np.concatenate([t, np.full((4, 1), 5.0)], axis=1)
        s_edges = (edges - 0.3) / 4.7
        total, _ = total_loss(batch.rgb, gt, tri, batch, s_edges, 1e-2, 1e-2)
        return total

    return [
        ("training.color_loss", lambda: color_loss(pred, gt), [pred]),
        ("training.total_loss", loss, [colors, sigma] + list(tri.planes)),
    ]


def end_to_end_check(sample: int = 4, seed: int = 0):
    """Full pipeline at the acceptance shapes: six 32x32 images through the
    encoder into 16x16x4 planes (8 channels), two rays of 8 samples, full
    objective. Returns the max relative error over sampled coordinates of
    every parameter group."""
    rng = np.random.default_rng(seed)
    contraction = ContractionParams([1 / 20, 1 / 20, 1 / 8])
    cfg = EncoderConfig(image_height=32, image_width=32, feat_channels=8,
                        extractor_hidden=8, strides=(4, 8), plane_channels=8,
                        n_h=16, n_w=16, n_z=4, n_self=2, n_perp=2)
    encoder = ImageToTriplaneEncoder(cfg, contraction, seed=seed)
    renderer = Renderer.create(8, 8, contraction, hidden=16, layers=3, seed=seed)
    # evaluate at a differentiable point: nudge biases and projections off
    # zero (relu kinks) but keep the offset heads at their exact zero init so
    # every sampling position rests strictly inside its bilinear cell, away
    # from clamp borders
    for name, t_ in encoder.named_parameters() + renderer.named_parameters():
        if "w_off" in name or "b_off" in name:
            continue
        t_.data += rng.normal(scale=0.02, size=t_.shape)
    rig = make_rig("ego-6", {"width": 32, "height": 32})
    images = rng.uniform(0, 1, size=(6, 3, 32, 32))
    origins = np.tile(np.array([0.4, 0.1, 1.5]), (2, 1))
    dirs = np.array([[1.0, 0.15, -0.05], [0.6, -0.8, -0.1]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t = sample_coarse(0.5, 50.0, 8, rays=2)
    gt = rng.uniform(0, 1, size=(2, 3))

    def build():
        pyramid = encoder.extract_features(images)
        tri = encoder.encode(images, rig.cameras, training=True, pyramid=pyramid)
        batch = renderer.render_rays(tri, origins, dirs, t, 50.0, pyramid=pyramid,
                                     cameras=rig.cameras, bn_training=True)
        edges = np.concatenate([batch.t, np.full((2, 1), 50.0)], axis=1)
        s_edges = (edges - 0.5) / 49.5
        total, _ = total_loss(batch.rgb, gt, tri, batch, s_edges, 1e-3, 1e-3)
        return total

    params = [t_ for _, t_ in encoder.named_parameters()]
    params += [t_ for _, t_ in renderer.named_parameters()]
    return check_gradients(build, params, sample=sample, rng=np.random.default_rng(123))


MODULES = {
    "diffcore": _diffcore_checks,
    "triplane": _triplane_checks,
    "encoder": _encoder_checks,
    "renderer": _renderer_checks,
    "training": _training_checks,
}


def run_suite(module: str | None = None, inject_fault: bool = False,
              include_end_to_end: bool = True):
    """[(check name, max relative error)] for the selected module(s)."""
    names = [module] if module else list(MODULES)
    results = []
    for name in names:
        builder = MODULES.get(name)
        if builder is None:
            return []
        for check_name, build, params in builder():
            err = check_gradients(build, params, sample=24, rng=np.random.default_rng(7))
            results.append((check_name, err))
    if inject_fault:
        # deliberately corrupted backward rule: multiply gradient by 1.01
        rng = np.random.default_rng(9)
        a = TapeTensor(rng.normal(size=(3, 3)), requires_grad=True)
        b = rng.normal(size=(3, 3))

        def corrupted():
            from .diffcore.tape import record, result_of
            out = result_of([a], a.data * b)
            record(out, [a], lambda g: (g * b * 1.01,))
            return dc.mean(out)

        err = check_gradients(corrupted, [a])
        results.append(("fault_injection.corrupted_mul", err))
    if module is None and include_end_to_end:
        results.append(("end_to_end.loss", end_to_end_check()))
    return results
