"""Lift six surround-view images to a parameterized triplane.

Pipeline: a small strided-conv pyramid with top-down lateral merges produces
multi-scale pixel-aligned features per camera; deformable cross-attention
pulls those features onto the three planes along precomputed geometric
reference points; deformable self-attention and per-cell MLPs mix the planes.
Block layout: 3 x (cross + self + MLP), then 2 x (self + MLP), every sublayer
with a residual connection and batch normalization.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import BatchNormState, TapeTensor
from .geometry import Camera, ContractionParams, project_to_camera, uncontract
from .rng import generator
from .triplane import Triplane

EGO_CAMERAS = 6

# paper-scale anchors for the per-plane reference slice counts
_HW_SLICES, _HW_PERP_RES = 4, 16
_SIDE_SLICES, _SIDE_PERP_RES = 32, 200


def cross_slice_counts(n_h: int, n_w: int, n_z: int,
                       override: tuple[int, int, int] | None = None) -> tuple[int, int, int]:
    """Reference slices per plane, proportional to the perpendicular resolution."""
    if override is not None:
        return tuple(int(v) for v in override)
    return (
        max(1, round(_HW_SLICES * n_z / _HW_PERP_RES)),
        max(1, round(_SIDE_SLICES * n_w / _SIDE_PERP_RES)),
        max(1, round(_SIDE_SLICES * n_h / _SIDE_PERP_RES)),
    )


@dataclass
class EncoderConfig:
    image_height: int = 64
    image_width: int = 64
    feat_channels: int = 16
    extractor_hidden: int = 16
    strides: tuple[int, ...] = (4, 8)
    plane_channels: int = 16
    n_h: int = 48
    n_w: int = 48
    n_z: int = 8
    heads: int = 2
    cross_blocks: int = 3
    self_only_blocks: int = 2
    mlp_hidden: int = 0  # 0 -> 2x plane channels
    n_self: int = 4
    r_self: float = 2.0
    n_perp: int = 4
    cross_slices: tuple[int, int, int] | None = None
    self_seed: int = 0
    pre_norm: bool = False

    @property
    def num_levels(self) -> int:
        return len(self.strides)

    @property
    def plane_shapes(self) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
        return ((self.n_h, self.n_w), (self.n_h, self.n_z), (self.n_w, self.n_z))

    @property
    def slice_counts(self) -> tuple[int, int, int]:
        return cross_slice_counts(self.n_h, self.n_w, self.n_z, self.cross_slices)


def paper_encoder_config() -> EncoderConfig:
    """Full-scale configuration (not exercised by the toy training loops)."""
    return EncoderConfig(
        image_height=928,
        image_width=1600,
        feat_channels=128,
        extractor_hidden=64,
        strides=(8, 16, 32, 64),
        plane_channels=128,
        n_h=200,
        n_w=200,
        n_z=16,
    )


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return TapeTensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _xavier_uniform(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return TapeTensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return TapeTensor(np.zeros(shape, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# multi-scale feature extraction


@dataclass
class FeaturePyramid:
    """Per-camera multi-scale feature maps, finest level first."""

    maps: list[list[TapeTensor]]  # [camera][level] -> [F, H/stride, W/stride]
    strides: tuple[int, ...]

    @property
    def num_cameras(self) -> int:
        return len(self.maps)

    @property
    def num_levels(self) -> int:
        return len(self.strides)

    def level_shape(self, level: int) -> tuple:
        return self.maps[0][level].shape

    def flat_maps(self) -> list[TapeTensor]:
        """Maps ordered camera-major: index = camera * num_levels + level."""
        return [m for per_cam in self.maps for m in per_cam]


class FeatureExtractor:
    """Strided-conv pyramid with 1x1 lateral projections and top-down merge."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        self.config = config
        strides = config.strides
        if any(s & (s - 1) for s in strides) or list(strides) != sorted(strides):
            raise ValueError(f"strides must be ascending powers of two, got {strides}")
        hidden = config.extractor_hidden
        self.stem: list[tuple[TapeTensor, TapeTensor]] = []
        c_in = 3
        for _ in range(int(np.log2(strides[0]))):
            k = _he_uniform(rng, (hidden, c_in, 3, 3), c_in * 9, dtype)
            self.stem.append((k, _zeros(hidden, dtype)))
            c_in = hidden
        self.stages: list[tuple[TapeTensor, TapeTensor]] = []
        for _ in range(len(strides) - 1):
            k = _he_uniform(rng, (hidden, hidden, 3, 3), hidden * 9, dtype)
            self.stages.append((k, _zeros(hidden, dtype)))
        self.laterals: list[tuple[TapeTensor, TapeTensor]] = []
        for _ in strides:
            k = _xavier_uniform(rng, (config.feat_channels, hidden, 1, 1), hidden,
                                config.feat_channels, dtype)
            self.laterals.append((k, _zeros(config.feat_channels, dtype)))

    def named_parameters(self):
        out = []
        for i, (k, b) in enumerate(self.stem):
            out += [(f"extractor.stem{i}.kernel", k), (f"extractor.stem{i}.bias", b)]
        for i, (k, b) in enumerate(self.stages):
            out += [(f"extractor.stage{i}.kernel", k), (f"extractor.stage{i}.bias", b)]
        for i, (k, b) in enumerate(self.laterals):
            out += [(f"extractor.lateral{i}.kernel", k), (f"extractor.lateral{i}.bias", b)]
        return out

    def _backbone(self, image: TapeTensor) -> list[TapeTensor]:
        x = image
        for k, b in self.stem:
            x = dc.gelu(dc.add_channel_bias(dc.conv2d(x, k, stride=2, padding=1), b))
        feats = [x]
        for k, b in self.stages:
            x = dc.gelu(dc.add_channel_bias(dc.conv2d(x, k, stride=2, padding=1), b))
            feats.append(x)
        return feats

    def forward(self, images) -> FeaturePyramid:
        """images: [num_cameras, 3, H, W] array (or list of [3, H, W]) in [0, 1]."""
        if isinstance(images, (list, tuple)):
            shapes = {np.shape(im) for im in images}
            if len(shapes) != 1:
                raise ValueError(f"extract_features: images differ in shape: {sorted(shapes)}")
            images = np.stack([np.asarray(im) for im in images])
        images = np.asarray(images, dtype=self.stem[0][0].dtype)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"extract_features: expected [n,3,H,W], got {images.shape}")
        per_camera = []
        for cam_img in images:
            feats = self._backbone(dc.constant(cam_img))
            # top-down: start from the coarsest lateral, upsample and add
            levels: list[TapeTensor | None] = [None] * len(feats)
            prev = None
            for li in reversed(range(len(feats))):
                k, b = self.laterals[li]
                lateral = dc.add_channel_bias(dc.conv2d(feats[li], k, stride=1, padding=0), b)
                prev = lateral if prev is None else dc.add(lateral, dc.upsample2x(prev))
                levels[li] = prev
            per_camera.append(levels)
        return FeaturePyramid(maps=per_camera, strides=tuple(self.config.strides))


# ---------------------------------------------------------------------------
# reference points


@dataclass
class ReferencePoints:
    """Per-query reference entries for deformable attention.

    Entries carry a canonical ``slot`` identity so the learned offset and
    logit heads attach to the entry, not to its storage position; permuting a
    query's entry list therefore cannot change the result.
    """

    map_index: np.ndarray  # [n, E] which value map each entry samples
    coords: np.ndarray     # [n, E, 2] base sampling position in [-1, 1]
    valid: np.ndarray      # [n, E]
    slot: np.ndarray       # [n, E] canonical head-slot id in [0, num_slots)
    num_slots: int

    def __post_init__(self):
        n, e = self.map_index.shape
        assert self.coords.shape == (n, e, 2)
        assert self.valid.shape == (n, e) and self.slot.shape == (n, e)

    def permuted(self, rng: np.random.Generator) -> "ReferencePoints":
        """Same references with each query's entry list stored in a new order."""
        n, e = self.map_index.shape
        perm = np.argsort(rng.random((n, e)), axis=1)
        rows = np.arange(n)[:, None]
        return ReferencePoints(
            map_index=self.map_index[rows, perm],
            coords=self.coords[rows, perm],
            valid=self.valid[rows, perm],
            slot=self.slot[rows, perm],
            num_slots=self.num_slots,
        )

    def with_invalid_duplicates(self) -> "ReferencePoints":
        return ReferencePoints(
            map_index=np.concatenate([self.map_index, self.map_index], axis=1),
            coords=np.concatenate([self.coords, self.coords], axis=1),
            valid=np.concatenate([self.valid, np.zeros_like(self.valid)], axis=1),
            slot=np.concatenate([self.slot, self.slot], axis=1),
            num_slots=self.num_slots,
        )


def plane_cell_centers(rows: int, cols: int) -> np.ndarray:
    """[rows*cols, 2] normalized (row, col) centers, border cells at -1/+1."""
    r = 2.0 * np.arange(rows) / max(rows - 1, 1) - 1.0
    c = 2.0 * np.arange(cols) / max(cols - 1, 1) - 1.0
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def slice_coordinates(count: int) -> np.ndarray:
    """Uniformly spaced slice centers along a perpendicular axis in (-1, 1)."""
    return -1.0 + (np.arange(count) + 0.5) * 2.0 / count


def lifted_grid_points(plane: str, rows: int, cols: int, slices: int) -> np.ndarray:
    """[rows*cols, slices, 3] grid-space points for one plane's cells."""
    centers = plane_cell_centers(rows, cols)
    n = centers.shape[0]
    perp = slice_coordinates(slices)
    pts = np.zeros((n, slices, 3))
    if plane == "hw":
        pts[:, :, 0] = centers[:, 0:1]
        pts[:, :, 1] = centers[:, 1:2]
        pts[:, :, 2] = perp[None, :]
    elif plane == "hz":
        pts[:, :, 0] = centers[:, 0:1]
        pts[:, :, 2] = centers[:, 1:2]
        pts[:, :, 1] = perp[None, :]
    elif plane == "wz":
        pts[:, :, 1] = centers[:, 0:1]
        pts[:, :, 2] = centers[:, 1:2]
        pts[:, :, 0] = perp[None, :]
    else:
        raise ValueError(f"unknown plane {plane!r}")
    return pts


# reference points are pulled strictly inside the sampling domain so the
# (clamped, one-sidedly flat) border of bilinear sampling is never the resting
# position of a zero-initialized offset head
REF_CLAMP_MARGIN = 0.01
# minimum fractional-index distance of any reference coordinate from a grid
# node; bilinear interpolation is non-differentiable exactly on the lattice
REF_LATTICE_MARGIN = 0.005


def _nudge_off_lattice(coords: np.ndarray, rows: int, cols: int,
                       margin: float = REF_LATTICE_MARGIN) -> np.ndarray:
    """Push (u, v) coords a hair off exact grid nodes of a rows x cols map."""
    out = coords.copy()
    for axis, size in ((0, cols), (1, rows)):
        if size < 2:
            continue
        idx = (out[..., axis] + 1.0) * 0.5 * (size - 1)
        base = np.floor(idx)
        frac = idx - base
        idx = np.where(frac < margin, base + margin, idx)
        idx = np.where(frac > 1.0 - margin, base + 1.0 - margin, idx)
        idx = np.clip(idx, margin, size - 1 - margin)
        out[..., axis] = 2.0 * idx / (size - 1) - 1.0
    return out


def _feature_coords(uv: np.ndarray, stride: int, width: int, height: int) -> np.ndarray:
    """Continuous image coords -> normalized coords on a strided feature map."""
    fw, fh = width // stride, height // stride
    fx = uv[:, 0] / stride - 0.5
    fy = uv[:, 1] / stride - 0.5
    u = 2.0 * fx / max(fw - 1, 1) - 1.0
    v = 2.0 * fy / max(fh - 1, 1) - 1.0
    return np.stack([u, v], axis=1)


def build_cross_reference_points(
    config: EncoderConfig,
    cameras: list[Camera],
    contraction: ContractionParams,
) -> dict[str, ReferencePoints]:
    """Per plane: every cell is lifted to ``n_k`` grid points along its
    perpendicular axis, mapped back to the world, and projected into every
    camera; each (slice, camera) pair is one canonical reference slot.
    Value-map index = camera * num_levels + assigned level."""
    num_cams = len(cameras)
    levels = config.num_levels
    strides = np.asarray(config.strides, dtype=np.float64)
    out: dict[str, ReferencePoints] = {}
    for plane, (rows, cols), slices in zip(("hw", "hz", "wz"), config.plane_shapes,
                                           config.slice_counts):
        grid_pts = lifted_grid_points(plane, rows, cols, slices)  # [n, m, 3]
        n = grid_pts.shape[0]
        flat = grid_pts.reshape(-1, 3)
        norms = np.linalg.norm(flat, axis=1)
        reachable = norms < 1.0 - 1e-9
        world = np.zeros_like(flat)
        if reachable.any():
            world[reachable] = uncontract(flat[reachable], contraction)
        # world-space extent of one cell along the plane's first axis, used to
        # match the projected footprint to a pyramid level
        step = np.zeros(3)
        axis0 = {"hw": 0, "hz": 0, "wz": 1}[plane]
        step[axis0] = 2.0 / max(rows - 1, 1)
        shifted = flat + step
        shift_norm = np.linalg.norm(shifted, axis=1, keepdims=True)
        shifted *= np.where(shift_norm >= 1.0 - 1e-9, (1.0 - 1e-6) / shift_norm, 1.0)
        world_shift = np.zeros_like(flat)
        if reachable.any():
            world_shift[reachable] = uncontract(shifted[reachable], contraction)
        cell_size = np.linalg.norm(world_shift - world, axis=1)

        E = slices * num_cams
        map_index = np.zeros((n, E), dtype=np.int32)
        coords = np.zeros((n, E, 2))
        valid = np.zeros((n, E), dtype=bool)
        slot = np.tile(np.arange(E, dtype=np.int32)[None, :], (n, 1))
        for ci, cam in enumerate(cameras):
            uv, vis = project_to_camera(world, cam)
            vis &= reachable
            depth = (world - cam.position) @ cam.optical_axis
            fx = cam.intrinsics[0, 0]
            with np.errstate(divide="ignore", invalid="ignore"):
                footprint = np.where(depth > 1e-6, fx * cell_size / np.maximum(depth, 1e-6), 0.0)
            level = np.argmin(np.abs(strides[None, :] - footprint[:, None]), axis=1)
            cols_idx = np.arange(slices) * num_cams + ci  # slot = slice * num_cams + camera
            map_index[:, cols_idx] = (ci * levels + level).reshape(n, slices)
            fcs = np.stack(
                [
                    _nudge_off_lattice(
                        _feature_coords(uv, int(s), cam.width, cam.height),
                        cam.height // int(s), cam.width // int(s))
                    for s in config.strides
                ],
                axis=0,
            )  # [L, n*m, 2] normalized coords per level
            picked = fcs[level, np.arange(level.size)]
            # image-border points can land up to half a feature cell outside
            # the border cell centers; clamp to the sampling domain
            lim = 1.0 - REF_CLAMP_MARGIN
            coords[:, cols_idx] = np.clip(picked.reshape(n, slices, 2), -lim, lim)
            valid[:, cols_idx] = vis.reshape(n, slices)
        coords[~valid] = 0.0
        out[plane] = ReferencePoints(map_index, coords, valid, slot, num_slots=E)
    return out


def build_self_reference_points(config: EncoderConfig, seed: int) -> ReferencePoints:
    """Queries are all plane cells stacked (hw, hz, wz); each cell references
    random samples in its own neighborhood plus the projections of random
    perpendicular-axis samples onto the other two planes."""
    rng = generator("selfref", seed)
    shapes = config.plane_shapes
    k_self = config.n_self + 2 * config.n_perp
    blocks = []
    for pi, (plane, (rows, cols)) in enumerate(zip(("hw", "hz", "wz"), shapes)):
        centers = plane_cell_centers(rows, cols)
        n = centers.shape[0]
        coords = np.zeros((n, k_self, 2))
        map_index = np.zeros((n, k_self), dtype=np.int32)
        # neighborhood samples on the home plane: offsets measured in cells
        cell = np.array([2.0 / max(rows - 1, 1), 2.0 / max(cols - 1, 1)])
        off = rng.uniform(-config.r_self, config.r_self, size=(n, config.n_self, 2)) * cell
        own = centers[:, None, :] + off
        # stored as (u=col, v=row) for bilinear sampling
        coords[:, : config.n_self, 0] = own[:, :, 1]
        coords[:, : config.n_self, 1] = own[:, :, 0]
        map_index[:, : config.n_self] = pi
        # perpendicular samples land on the other two planes; the shared-axis
        # coordinates carry neighborhood jitter as well, so projections sit at
        # generic positions instead of exactly on the sibling plane's lattice
        perp = rng.uniform(-1.0, 1.0, size=(n, config.n_perp))
        others = {"hw": ("hz", "wz"), "hz": ("hw", "wz"), "wz": ("hw", "hz")}[plane]
        for oi, other in enumerate(others):
            sl = slice(config.n_self + oi * config.n_perp, config.n_self + (oi + 1) * config.n_perp)
            jitter = rng.uniform(-config.r_self, config.r_self,
                                 size=(n, config.n_perp, 2)) * cell
            jittered = centers[:, None, :] + jitter
            a, b = _project_to_plane(plane, jittered, perp, other)
            coords[:, sl, 0] = b
            coords[:, sl, 1] = a
            map_index[:, sl] = {"hw": 0, "hz": 1, "wz": 2}[other]
        lim = 1.0 - REF_CLAMP_MARGIN
        coords = np.clip(coords, -lim, lim)
        for mi, (target_rows, target_cols) in enumerate(shapes):
            sel = map_index == mi
            if sel.any():
                coords[sel] = _nudge_off_lattice(coords[sel], target_rows, target_cols)
        blocks.append((map_index, coords))
    map_index = np.concatenate([b[0] for b in blocks], axis=0)
    coords = np.concatenate([b[1] for b in blocks], axis=0)
    n_total = map_index.shape[0]
    return ReferencePoints(
        map_index=map_index,
        coords=coords,
        valid=np.ones((n_total, k_self), dtype=bool),
        slot=np.tile(np.arange(k_self, dtype=np.int32)[None, :], (n_total, 1)),
        num_slots=k_self,
    )


def _project_to_plane(home: str, centers: np.ndarray, perp: np.ndarray, target: str):
    """(row, col) coords on ``target`` of 3D points built from ``home`` plane
    coordinates (shape [n, 2] or [n, k, 2]) and perpendicular values [n, k]."""
    n, k = perp.shape
    if centers.ndim == 2:
        centers = np.broadcast_to(centers[:, None, :], (n, k, 2))
    c0, c1 = centers[..., 0], centers[..., 1]
    if home == "hw":
        h, w, z = c0, c1, perp
    elif home == "hz":
        h, z, w = c0, c1, perp
    else:
        w, z, h = c0, c1, perp
    if target == "hw":
        return h, w
    if target == "hz":
        return h, z
    return w, z


# ---------------------------------------------------------------------------
# deformable attention


class DeformableAttention:
    """Attention over a small set of sampled keys per query.

    Offsets and logits are linear in the query, indexed by each reference
    entry's canonical slot; sampled values go through per-head value
    projections, a masked softmax over valid entries, and an output
    projection. Queries whose references are all invalid yield exactly zero.
    """

    def __init__(self, channels: int, value_channels: int, num_slots: int, heads: int,
                 rng: np.random.Generator, dtype=np.float64):
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.value_channels = value_channels
        self.num_slots = num_slots
        self.heads = heads
        self.head_dim = channels // heads
        # offsets start at zero so initial sampling happens exactly at the
        # reference points; logits start at zero for uniform attention
        self.w_off = _zeros((channels, heads * num_slots * 2), dtype)
        self.b_off = _zeros(heads * num_slots * 2, dtype)
        self.w_logit = _zeros((channels, heads * num_slots), dtype)
        self.b_logit = _zeros(heads * num_slots, dtype)
        self.w_val = [
            _xavier_uniform(rng, (value_channels, self.head_dim), value_channels,
                            self.head_dim, dtype)
            for _ in range(heads)
        ]
        self.b_val = [_zeros(self.head_dim, dtype) for _ in range(heads)]
        self.w_out = _xavier_uniform(rng, (channels, channels), channels, channels, dtype)
        self.b_out = _zeros(channels, dtype)

    def named_parameters(self, prefix: str):
        out = [
            (f"{prefix}.w_off", self.w_off),
            (f"{prefix}.b_off", self.b_off),
            (f"{prefix}.w_logit", self.w_logit),
            (f"{prefix}.b_logit", self.b_logit),
            (f"{prefix}.w_out", self.w_out),
            (f"{prefix}.b_out", self.b_out),
        ]
        for h in range(self.heads):
            out += [(f"{prefix}.w_val{h}", self.w_val[h]), (f"{prefix}.b_val{h}", self.b_val[h])]
        return out

    def __call__(self, queries: TapeTensor, refs: ReferencePoints,
                 value_maps: list[TapeTensor], return_weights: bool = False):
        n, C = queries.shape
        H, S = self.heads, self.num_slots
        E = refs.map_index.shape[1]
        if C != self.channels:
            raise dc.ShapeError(f"deform_attn: query width {C} != {self.channels}")
        if refs.num_slots != S:
            raise dc.ShapeError(f"deform_attn: refs have {refs.num_slots} slots, layer has {S}")

        off = dc.linear(queries, self.w_off, self.b_off)      # [n, H*S*2]
        logits = dc.linear(queries, self.w_logit, self.b_logit)  # [n, H*S]

        # gather per-entry offsets/logits by canonical slot, head-major layout
        rows = np.arange(n, dtype=np.intp)
        slot = refs.slot.astype(np.intp)
        # flat index for entry (h, i, e) into [n, H, S] storage
        idx_he = (rows[None, :, None] * H + np.arange(H, dtype=np.intp)[:, None, None]) * S \
            + slot[None, :, :]
        idx_flat = idx_he.reshape(-1)

        off_flat = dc.reshape(off, (n * H * S, 2))
        d_off = dc.gather_rows(off_flat, idx_flat)  # [(H*n*E), 2]
        logit_flat = dc.reshape(logits, (n * H * S, 1))
        d_logit = dc.gather_rows(logit_flat, idx_flat)  # [(H*n*E), 1]

        base = np.broadcast_to(refs.coords[None, :, :, :], (H, n, E, 2)).reshape(-1, 2)
        sample_pos = dc.add(d_off, dc.constant(base.astype(queries.dtype)))

        # sample every value map at its entries, then restore (h, i, e) order
        map_flat = np.broadcast_to(refs.map_index[None], (H, n, E)).reshape(-1)
        pieces = []
        order = []
        for m, vmap in enumerate(value_maps):
            sel = np.nonzero(map_flat == m)[0]
            if sel.size == 0:
                continue
            piece, _ = dc.bilinear_sample2d(vmap, dc.gather_rows(sample_pos, sel))
            pieces.append(piece)
            order.append(sel)
        order = np.concatenate(order)
        inverse = np.argsort(order, kind="stable")
        sampled = dc.gather_rows(dc.concat(pieces, axis=0), inverse)  # [(H*n*E), C_v]

        weights = dc.masked_softmax(
            dc.reshape(d_logit, (H * n, E)),
            np.broadcast_to(refs.valid[None], (H, n, E)).reshape(H * n, E),
            axis=1,
        )  # [(H*n), E]

        head_outputs = []
        per_head_weights = []
        for h in range(self.heads):
            v = dc.slice_axis(sampled, 0, h * n * E, (h + 1) * n * E)
            v = dc.linear(v, self.w_val[h], self.b_val[h])          # [n*E, hd]
            w_h = dc.slice_axis(weights, 0, h * n, (h + 1) * n)     # [n, E]
            per_head_weights.append(w_h)
            v3 = dc.reshape(v, (n, E, self.head_dim))
            head_outputs.append(dc.tsum(dc.scale_last(v3, w_h), axis=1))  # [n, hd]
        merged = dc.concat(head_outputs, axis=1)  # [n, C]
        out = dc.linear(merged, self.w_out, self.b_out)
        # dead queries (no valid reference) must emit exactly zero
        alive = refs.valid.any(axis=1).astype(out.dtype)
        out = dc.scale_last(out, dc.constant(alive))
        if return_weights:
            return out, per_head_weights
        return out


# ---------------------------------------------------------------------------
# encoder stack


class _Mlp:
    def __init__(self, channels: int, hidden: int, rng, dtype):
        self.w1 = _he_uniform(rng, (channels, hidden), channels, dtype)
        self.b1 = _zeros(hidden, dtype)
        self.w2 = _xavier_uniform(rng, (hidden, channels), hidden, channels, dtype)
        self.b2 = _zeros(channels, dtype)

    def named_parameters(self, prefix):
        return [(f"{prefix}.w1", self.w1), (f"{prefix}.b1", self.b1),
                (f"{prefix}.w2", self.w2), (f"{prefix}.b2", self.b2)]

    def __call__(self, x: TapeTensor) -> TapeTensor:
        return dc.linear(dc.gelu(dc.linear(x, self.w1, self.b1)), self.w2, self.b2)


class ImageToTriplaneEncoder:
    """Owns all encoder parameters and runs the image-to-triplane stack."""

    def __init__(self, config: EncoderConfig, contraction: ContractionParams,
                 seed: int = 0, dtype=np.float64):
        self.config = config
        self.contraction = contraction
        self.dtype = dtype
        rng = generator("encoder-init", seed)
        c = config.plane_channels
        hidden = config.mlp_hidden or 2 * c
        self.extractor = FeatureExtractor(config, rng, dtype)
        self.embeddings = {
            name: TapeTensor(
                rng.uniform(-0.5, 0.5, size=(rows * cols, c)).astype(dtype),
                requires_grad=True,
            )
            for name, (rows, cols) in zip(("hw", "hz", "wz"), config.plane_shapes)
        }
        n_hw, n_hz, n_wz = config.slice_counts
        slots = {"hw": n_hw * EGO_CAMERAS, "hz": n_hz * EGO_CAMERAS, "wz": n_wz * EGO_CAMERAS}
        self.cross: list[dict[str, DeformableAttention]] = []
        self.cross_bn: list[BatchNormState] = []
        for _ in range(config.cross_blocks):
            self.cross.append({
                name: DeformableAttention(c, config.feat_channels, slots[name],
                                          config.heads, rng, dtype)
                for name in ("hw", "hz", "wz")
            })
            self.cross_bn.append(BatchNormState.create(c, dtype=dtype))
        k_self = config.n_self + 2 * config.n_perp
        total_blocks = config.cross_blocks + config.self_only_blocks
        self.selfattn = [
            DeformableAttention(c, c, k_self, config.heads, rng, dtype)
            for _ in range(total_blocks)
        ]
        self.self_bn = [BatchNormState.create(c, dtype=dtype) for _ in range(total_blocks)]
        self.mlps = [_Mlp(c, hidden, rng, dtype) for _ in range(total_blocks)]
        self.mlp_bn = [BatchNormState.create(c, dtype=dtype) for _ in range(total_blocks)]
        self.self_refs = build_self_reference_points(config, config.self_seed)
        self._cross_cache: dict[bytes, dict[str, ReferencePoints]] = {}

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self):
        out = list(self.extractor.named_parameters())
        for name, emb in self.embeddings.items():
            out.append((f"embedding.{name}", emb))
        for bi, block in enumerate(self.cross):
            for name, attn in block.items():
                out += attn.named_parameters(f"cross{bi}.{name}")
            out += [(f"cross{bi}.bn.gamma", self.cross_bn[bi].gamma),
                    (f"cross{bi}.bn.beta", self.cross_bn[bi].beta)]
        for bi, attn in enumerate(self.selfattn):
            out += attn.named_parameters(f"self{bi}")
            out += [(f"self{bi}.bn.gamma", self.self_bn[bi].gamma),
                    (f"self{bi}.bn.beta", self.self_bn[bi].beta)]
        for bi, mlp in enumerate(self.mlps):
            out += mlp.named_parameters(f"mlp{bi}")
            out += [(f"mlp{bi}.bn.gamma", self.mlp_bn[bi].gamma),
                    (f"mlp{bi}.bn.beta", self.mlp_bn[bi].beta)]
        return out

    def named_states(self):
        out = []
        for bi, st in enumerate(self.cross_bn):
            out.append((f"cross{bi}.bn", st))
        for bi, st in enumerate(self.self_bn):
            out.append((f"self{bi}.bn", st))
        for bi, st in enumerate(self.mlp_bn):
            out.append((f"mlp{bi}.bn", st))
        return out

    def parameter_census(self) -> dict[str, int]:
        census = {}
        for name, t in self.named_parameters():
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"non-finite parameter {name}")
            census[name] = t.size
        census["__total__"] = sum(v for k, v in census.items() if k != "__total__")
        return census

    # -- geometry caches -------------------------------------------------------

    def cross_references(self, cameras: list[Camera]) -> dict[str, ReferencePoints]:
        key = b"".join(np.ascontiguousarray(c.cam_to_world).tobytes()
                       + np.ascontiguousarray(c.intrinsics).tobytes() for c in cameras)
        if key not in self._cross_cache:
            self._cross_cache[key] = build_cross_reference_points(
                self.config, cameras, self.contraction)
        return self._cross_cache[key]

    # -- forward ---------------------------------------------------------------

    def extract_features(self, images: np.ndarray) -> FeaturePyramid:
        return self.extractor.forward(images)

    def encode(self, images: np.ndarray, cameras: list[Camera],
               training: bool = True, pyramid: FeaturePyramid | None = None) -> Triplane:
        if len(cameras) != EGO_CAMERAS or len(images) != EGO_CAMERAS:
            raise ValueError(
                f"encode: expected {EGO_CAMERAS} cameras with matching images, "
                f"got {len(cameras)} cameras / {len(images)} images"
            )
        cfg = self.config
        if pyramid is None:
            pyramid = self.extract_features(images)
        feature_maps = pyramid.flat_maps()
        cross_refs = self.cross_references(cameras)
        shapes = dict(zip(("hw", "hz", "wz"), cfg.plane_shapes))
        sizes = {k: r * c for k, (r, c) in shapes.items()}
        planes = {k: self.embeddings[k] for k in ("hw", "hz", "wz")}

        def run_sublayer(x, sub_out, state):
            if cfg.pre_norm:
                return dc.add(x, sub_out)
            return dc.batch_norm(dc.add(x, sub_out), state, training)

        def split(joint):
            parts = {}
            offset = 0
            for k in ("hw", "hz", "wz"):
                parts[k] = dc.slice_axis(joint, 0, offset, offset + sizes[k])
                offset += sizes[k]
            return parts

        total = cfg.cross_blocks + cfg.self_only_blocks
        for bi in range(total):
            if bi < cfg.cross_blocks:
                attended = {}
                for k in ("hw", "hz", "wz"):
                    q = planes[k]
                    if cfg.pre_norm:
                        q = dc.batch_norm(q, self.cross_bn[bi], training)
                    attended[k] = self.cross[bi][k](q, cross_refs[k], feature_maps)
                joint = dc.concat([dc.add(planes[k], attended[k]) for k in ("hw", "hz", "wz")],
                                  axis=0)
                if not cfg.pre_norm:
                    joint = dc.batch_norm(joint, self.cross_bn[bi], training)
                planes = split(joint)

            value_maps = [
                dc.permute(dc.reshape(planes[k], (shapes[k][0], shapes[k][1], cfg.plane_channels)),
                           (2, 0, 1))
                for k in ("hw", "hz", "wz")
            ]
            joint = dc.concat([planes[k] for k in ("hw", "hz", "wz")], axis=0)
            q = dc.batch_norm(joint, self.self_bn[bi], training) if cfg.pre_norm else joint
            sub = self.selfattn[bi](q, self.self_refs, value_maps)
            joint = run_sublayer(joint, sub, self.self_bn[bi])

            q = dc.batch_norm(joint, self.mlp_bn[bi], training) if cfg.pre_norm else joint
            joint = run_sublayer(joint, self.mlps[bi](q), self.mlp_bn[bi])
            planes = split(joint)

        def to_plane(x, rows, cols):
            return dc.permute(dc.reshape(x, (rows, cols, cfg.plane_channels)), (2, 0, 1))

        return Triplane(
            hw=to_plane(planes["hw"], *shapes["hw"]),
            hz=to_plane(planes["hz"], *shapes["hz"]),
            wz=to_plane(planes["wz"], *shapes["wz"]),
        )
