"""Volume rendering from a triplane: per-point color/density decoding with
optional projected image features, coarse/fine ray sampling, compositing, and
the ray-compactness regularizer."""
from __future__ import annotations

from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import numpy as np

from . import diffcore as dc
from .diffcore import BatchNormState, TapeTensor
from .encoder import FeaturePyramid, _feature_coords
from .geometry import Camera, ContractionParams, contract, project_to_camera, ray_directions
from .triplane import Triplane, sample_triplane
from .rng import generator

PIF_SLOTS = 2  # at most two cameras see any point on an outward-facing rig
BACKGROUND_WEIGHT_THRESHOLD = 0.5
_DEPTH_EPS = 1e-6


@contextmanager
def _tape_paused():
    from .diffcore import tape as _tape_mod
    saved = list(_tape_mod._TAPE_STACK)
    _tape_mod._TAPE_STACK.clear()
    try:
        yield
    finally:
        _tape_mod._TAPE_STACK.extend(saved)


# ---------------------------------------------------------------------------
# decoder


class RendererMLP:
    """Plain MLP mapping triplane + projected image features to RGB and a
    sigmoid-bounded density in [0, 1]. View directions are not an input."""

    def __init__(self, plane_channels: int, feat_channels: int, hidden: int = 32,
                 layers: int = 4, seed: int = 0, dtype=np.float64,
                 density_bias: float = -4.0):
        self.plane_channels = plane_channels
        self.feat_channels = feat_channels
        self.input_width = plane_channels + PIF_SLOTS * feat_channels
        rng = generator("renderer-init", seed)
        widths = [self.input_width] + [hidden] * (layers - 1) + [4]
        self.weights: list[TapeTensor] = []
        self.biases: list[TapeTensor] = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / w_in)
            self.weights.append(TapeTensor(
                rng.uniform(-bound, bound, size=(w_in, w_out)).astype(dtype),
                requires_grad=True))
            self.biases.append(TapeTensor(np.zeros(w_out, dtype=dtype), requires_grad=True))
        # start nearly transparent: density grows where evidence demands it,
        # which is far better conditioned than carving initial fog away
        self.biases[-1].data[3] = density_bias

    def named_parameters(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"mlp.layer{i}.weight", w), (f"mlp.layer{i}.bias", b)]
        return out

    def forward(self, x: TapeTensor) -> TapeTensor:
        if x.shape[1] != self.input_width:
            raise dc.ShapeError(
                f"renderer input width {x.shape[1]} != {self.input_width} "
                f"(= {self.plane_channels} + {PIF_SLOTS}*{self.feat_channels})"
            )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = dc.linear(x, w, b)
            if i < len(self.weights) - 1:
                x = dc.gelu(x)
        return dc.sigmoid(x)


def decode_point(mlp: RendererMLP, plane_feats: TapeTensor, pif_feats: TapeTensor):
    """(color [n,3], density [n,1]), all sigmoid-squashed into (0, 1)."""
    raw = mlp.forward(dc.concat([plane_feats, pif_feats], axis=1))
    return dc.slice_axis(raw, 1, 0, 3), dc.slice_axis(raw, 1, 3, 4)


# ---------------------------------------------------------------------------
# projected image features


def extract_pif(points: np.ndarray, pyramid: FeaturePyramid,
                cameras: list[Camera]) -> TapeTensor:
    """Sample the finest feature level of every camera seeing each point and
    concatenate the first two hits in camera-index order, zero-padded."""
    if len(cameras) != pyramid.num_cameras:
        raise ValueError(
            f"extract_pif: {len(cameras)} cameras but pyramid has {pyramid.num_cameras}")
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    feat_channels = pyramid.level_shape(0)[0]
    stride = pyramid.strides[0]

    sampled = []
    valid_cols = []
    for ci, cam in enumerate(cameras):
        uv, valid = project_to_camera(pts, cam)
        coords = np.clip(_feature_coords(uv, stride, cam.width, cam.height), -1.0, 1.0)
        coords[~valid] = 0.0
        feats, _ = dc.bilinear_sample2d(pyramid.maps[ci][0], dc.constant(coords))
        sampled.append(feats)
        valid_cols.append(valid)
    valid = np.stack(valid_cols, axis=1)  # [n, num_cameras]

    # slot s takes the (s+1)-th valid camera in index order
    rank = np.cumsum(valid, axis=1) - 1
    dtype = sampled[0].dtype
    slots = []
    for s in range(PIF_SLOTS):
        pick = valid & (rank == s)  # [n, cams] one-hot (or all-zero) rows
        acc = None
        for ci in range(len(cameras)):
            mask = dc.constant(pick[:, ci].astype(dtype))
            term = dc.scale_last(sampled[ci], mask)
            acc = term if acc is None else dc.add(acc, term)
        slots.append(acc if acc is not None else dc.constant(np.zeros((n, feat_channels))))
    return dc.concat(slots, axis=1)


# ---------------------------------------------------------------------------
# ray sampling


def sample_coarse(near: float, far: float, count: int, jitter: np.ndarray | None = None,
                  rays: int = 1) -> np.ndarray:
    """Stratified samples [rays, count]: one per equal bin of [near, far].
    ``jitter`` in [0,1) per (ray, bin); None places bin midpoints."""
    if count < 2:
        raise ValueError(f"sample_coarse: need at least 2 samples, got {count}")
    if jitter is None:
        jitter = np.full((rays, count), 0.5)
    else:
        jitter = np.asarray(jitter)
        rays = jitter.shape[0]
    width = (far - near) / count
    edges = near + width * np.arange(count)
    return edges[None, :] + jitter * width


def sample_fine(t_coarse: np.ndarray, weights: np.ndarray, count: int, far: float,
                u: np.ndarray | None = None) -> np.ndarray:
    """Inverse-CDF samples from the piecewise-constant density proportional to
    coarse weights over coarse segments, merged and sorted with the coarse
    samples. All-zero weight rows fall back to a uniform density."""
    t_coarse = np.asarray(t_coarse, dtype=np.float64)
    w = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
    rays, segs = t_coarse.shape
    edges = np.concatenate([t_coarse, np.full((rays, 1), far)], axis=1)  # [R, S+1]
    total = w.sum(axis=1, keepdims=True)
    uniform = np.full_like(w, 1.0 / segs)
    pdf = np.where(total > 0, w / np.where(total > 0, total, 1.0), uniform)
    cdf = np.concatenate([np.zeros((rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if u is None:
        u = (np.arange(count) + 0.5)[None, :] / count
        u = np.broadcast_to(u, (rays, count))
    u = np.clip(np.asarray(u), 0.0, 1.0 - 1e-12)
    idx = np.maximum((u[:, :, None] >= cdf[:, None, :-1]).sum(axis=2) - 1, 0)  # [R, count]
    rows = np.arange(rays)[:, None]
    c0 = cdf[rows, idx]
    c1 = cdf[rows, idx + 1]
    frac = np.where(c1 > c0, (u - c0) / np.where(c1 > c0, c1 - c0, 1.0), 0.5)
    t_new = edges[rows, idx] + frac * (edges[rows, idx + 1] - edges[rows, idx])
    return np.sort(np.concatenate([t_coarse, t_new], axis=1), axis=1)


# ---------------------------------------------------------------------------
# compositing


@dataclass
class RaySampleBatch:
    """Per-ray sampling state and composited outputs."""

    t: np.ndarray            # [R, S] sorted sample distances (meters)
    delta: np.ndarray        # [R, S] segment lengths, last segment to `far`
    rgb: TapeTensor          # [R, 3]
    weights: TapeTensor      # [R, S]
    trans: TapeTensor        # [R, S] transmittance before each sample
    weight_sum: TapeTensor   # [R]
    depth: np.ndarray        # [R] expected termination depth (weight-normalized)
    depth_raw: np.ndarray    # [R] unnormalized expected depth
    background: np.ndarray   # [R] accumulated weight below threshold


def composite(colors: TapeTensor, sigma: TapeTensor, t: np.ndarray, far: float) -> RaySampleBatch:
    """Alpha-composite per-sample colors/densities along each ray.

    colors [R, S, 3]; sigma [R, S] in [0, 1]; t [R, S] sorted ascending.
    """
    t = np.asarray(t, dtype=np.float64)
    rays, samples = t.shape
    if np.any(np.diff(t, axis=1) < 0):
        raise ValueError("composite: sample distances must be sorted ascending")
    if colors.shape != (rays, samples, 3) or sigma.shape != (rays, samples):
        raise dc.ShapeError(
            f"composite: colors {colors.shape} / sigma {sigma.shape} "
            f"do not match t {t.shape}")
    delta = np.concatenate([np.diff(t, axis=1), far - t[:, -1:]], axis=1)
    sd = dc.mul(sigma, dc.constant(delta.astype(sigma.dtype)))
    alpha = dc.sub(dc.constant(np.ones_like(t, dtype=sigma.dtype)),
                   dc.exp(dc.scale(sd, -1.0)))
    trans = dc.exp(dc.scale(dc.cumsum(sd, axis=1, exclusive=True), -1.0))
    weights = dc.mul(trans, alpha)
    rgb = dc.tsum(dc.scale_last(colors, weights), axis=1)
    weight_sum = dc.tsum(weights, axis=1)
    wsum = weight_sum.data
    depth_raw = np.sum(weights.data * t, axis=1)
    depth = depth_raw / np.maximum(wsum, _DEPTH_EPS)
    return RaySampleBatch(
        t=t,
        delta=delta,
        rgb=rgb,
        weights=weights,
        trans=trans,
        weight_sum=weight_sum,
        depth=depth,
        depth_raw=depth_raw,
        background=wsum < BACKGROUND_WEIGHT_THRESHOLD,
    )


def distortion_loss(weights: TapeTensor, s_edges: np.ndarray) -> TapeTensor:
    """Mean over rays of the weight-compactness penalty
    sum_ij w_i w_j |mid_i - mid_j| + (1/3) sum_i w_i^2 (s_{i+1} - s_i),
    with ``s_edges`` [R, S+1] the segment endpoints normalized to [0, 1]."""
    s_edges = np.asarray(s_edges, dtype=np.float64)
    rays, samples = weights.shape
    if s_edges.shape != (rays, samples + 1):
        raise dc.ShapeError(f"distortion_loss: edges {s_edges.shape} vs weights {weights.shape}")
    mids = 0.5 * (s_edges[:, 1:] + s_edges[:, :-1]).astype(weights.dtype)
    seg = np.diff(s_edges, axis=1).astype(weights.dtype)
    # mids are ascending, so sum_ij w_i w_j |m_i - m_j| folds into prefix sums
    w_prefix = dc.cumsum(weights, axis=1, exclusive=True)
    wm_prefix = dc.cumsum(dc.mul(weights, dc.constant(mids)), axis=1, exclusive=True)
    inter = dc.mul(weights, dc.sub(dc.mul(dc.constant(mids), w_prefix), wm_prefix))
    intra = dc.mul(dc.mul(weights, weights), dc.constant(seg))
    total = dc.add(dc.scale(dc.tsum(inter), 2.0), dc.scale(dc.tsum(intra), 1.0 / 3.0))
    return dc.scale(total, 1.0 / rays)


# ---------------------------------------------------------------------------
# full renderer


@dataclass
class RenderOptions:
    num_coarse: int = 32
    num_fine: int = 0       # > 0 enables the second, density-proportional pass
    near: float = 0.5
    far: float = 60.0
    stratified: bool = False
    seed: int = 0
    use_pif: bool = False
    chunk: int = 4096
    workers: int = 1

    @property
    def double(self) -> bool:
        return self.num_fine > 0


@dataclass
class Renderer:
    """Decoder MLP plus the normalization applied to projected image features."""

    mlp: RendererMLP
    pif_bn: BatchNormState
    contraction: ContractionParams

    @classmethod
    def create(cls, plane_channels: int, feat_channels: int, contraction: ContractionParams,
               hidden: int = 32, layers: int = 4, seed: int = 0, dtype=np.float64) -> "Renderer":
        return cls(
            mlp=RendererMLP(plane_channels, feat_channels, hidden, layers, seed, dtype),
            pif_bn=BatchNormState.create(PIF_SLOTS * feat_channels, dtype=dtype),
            contraction=contraction,
        )

    def named_parameters(self):
        return self.mlp.named_parameters() + [
            ("pif_bn.gamma", self.pif_bn.gamma),
            ("pif_bn.beta", self.pif_bn.beta),
        ]

    def named_states(self):
        return [("pif_bn", self.pif_bn)]

    def decode_at(self, tri: Triplane, points: np.ndarray,
                  pyramid: FeaturePyramid | None, cameras: list[Camera] | None,
                  bn_training: bool):
        """Color/density for raw world points [n, 3]."""
        grid = contract(points, self.contraction)
        plane_feats = sample_triplane(tri, grid)
        n = points.shape[0]
        width = PIF_SLOTS * self.mlp.feat_channels
        if pyramid is not None:
            pif = extract_pif(points, pyramid, cameras)
            pif = dc.batch_norm(pif, self.pif_bn, training=bn_training)
        else:
            pif = dc.constant(np.zeros((n, width), dtype=plane_feats.dtype))
        return decode_point(self.mlp, plane_feats, pif)

    def render_rays(self, tri: Triplane, origins: np.ndarray, dirs: np.ndarray,
                    t: np.ndarray, far: float, pyramid: FeaturePyramid | None = None,
                    cameras: list[Camera] | None = None,
                    bn_training: bool = False) -> RaySampleBatch:
        rays, samples = t.shape
        points = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
        color, sigma = self.decode_at(tri, points, pyramid, cameras, bn_training)
        colors = dc.reshape(color, (rays, samples, 3))
        sig = dc.reshape(sigma, (rays, samples))
        return composite(colors, sig, t, far)

    def render_ray_batch(self, tri: Triplane, origins: np.ndarray, dirs: np.ndarray,
                         opts: RenderOptions, pyramid: FeaturePyramid | None = None,
                         cameras: list[Camera] | None = None, bn_training: bool = False,
                         jitter: np.ndarray | None = None,
                         fine_u: np.ndarray | None = None) -> RaySampleBatch:
        """Coarse (optionally plus fine) sampling and compositing for a ray batch."""
        rays = origins.shape[0]
        t = sample_coarse(opts.near, opts.far, opts.num_coarse, jitter=jitter, rays=rays)
        pyr = pyramid if opts.use_pif else None
        if opts.double:
            with _tape_paused():
                coarse = self.render_rays(tri, origins, dirs, t, opts.far, pyr, cameras,
                                          bn_training=False)
            t = sample_fine(t, coarse.weights.data, opts.num_fine, opts.far, u=fine_u)
        return self.render_rays(tri, origins, dirs, t, opts.far, pyr, cameras, bn_training)

    def render_image(self, tri: Triplane, camera: Camera, opts: RenderOptions,
                     pyramid: FeaturePyramid | None = None,
                     cameras: list[Camera] | None = None):
        """Full-frame render, detached from any tape.

        Returns (rgb [H,W,3], depth [H,W], background [H,W]); depth is the
        weight-normalized expected termination distance, with low-opacity
        pixels flagged background.
        """
        h, w = camera.height, camera.width
        pix = np.stack(np.meshgrid(np.arange(w), np.arange(h)), axis=-1).reshape(-1, 2)
        dirs = ray_directions(camera, pix.astype(np.float64))
        origins = np.broadcast_to(camera.position, dirs.shape)
        n = dirs.shape[0]

        # all stochastic draws happen up front so chunking and worker count
        # cannot influence the output
        if opts.stratified:
            rng = generator("render", opts.seed, h, w)
            jitter = rng.random((n, opts.num_coarse))
            fine_u = rng.random((n, opts.num_fine)) if opts.double else None
        else:
            jitter = None
            fine_u = None

        rgb = np.zeros((n, 3), dtype=np.float64)
        depth = np.zeros(n, dtype=np.float64)
        background = np.zeros(n, dtype=bool)
        spans = [(s, min(s + opts.chunk, n)) for s in range(0, n, opts.chunk)]

        def run(span):
            s, e = span
            batch = self.render_ray_batch(
                tri, origins[s:e], dirs[s:e], opts, pyramid, cameras,
                bn_training=False,
                jitter=None if jitter is None else jitter[s:e],
                fine_u=None if fine_u is None else fine_u[s:e],
            )
            rgb[s:e] = batch.rgb.data
            depth[s:e] = batch.depth
            background[s:e] = batch.background

        # inference only: detach from any active tape before dispatching, so
        # worker threads never touch the (single-writer) recording stack
        with _tape_paused():
            if opts.workers > 1:
                with ThreadPoolExecutor(max_workers=opts.workers) as pool:
                    list(pool.map(run, spans))
            else:
                for span in spans:
                    run(span)
        return rgb.reshape(h, w, 3), depth.reshape(h, w), background.reshape(h, w)
