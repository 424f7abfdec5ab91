"""Loss assembly, Adam with warmup+cosine schedule, metrics, and the
per-scene / cross-scene training loops."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, TapeTensor
from .encoder import EncoderConfig, FeaturePyramid, ImageToTriplaneEncoder
from .geometry import Camera, ContractionParams, ray_directions
from .renderer import RaySampleBatch, RenderOptions, Renderer, distortion_loss
from .rng import generator
from .toyworld import SceneDataset, SceneRecord
from .triplane import Triplane, tv_loss


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    mode: str = "cross-scene"  # "per-scene" | "cross-scene"
    epochs: int = 1
    scenes_per_epoch: int = 0  # 0 -> every training scene each epoch
    steps: int = 0             # per-scene mode: optimization steps (0 -> epochs)
    views_per_scene: int = 3
    rays_per_view: int = 512   # 0 -> all pixels of each chosen view
    learning_rate: float = 5e-5
    warmup_steps: int = 1000
    lambda_tv: float = 1e-3
    lambda_dist: float = 1e-3
    seed: int = 0
    scene_index: int = 0       # per-scene mode: which scene to fit
    holdout_views: int = 1     # supervision views reserved for evaluation
    holdout_scenes: int = 0    # trailing scenes reserved for evaluation
    near: float = 0.5
    far: float = 60.0
    num_coarse: int = 32
    num_fine: int = 0
    stratified: bool = True
    use_pif: bool = True
    dtype: str = "float32"
    contraction_scale: tuple[float, float, float] | None = None
    # model shape
    plane_channels: int = 16
    n_h: int = 48
    n_w: int = 48
    n_z: int = 8
    feat_channels: int = 16
    extractor_hidden: int = 16
    strides: tuple[int, ...] = (4, 8)
    heads: int = 2
    renderer_hidden: int = 32
    renderer_layers: int = 4
    plane_init_range: float = 0.1
    # bookkeeping
    eval_every: int = 0        # 0 -> evaluate only at the end
    total_steps: int = 0       # resolved by train()
    log_every: int = 1
    # per-scene coarse-to-fine: number of 2x plane upsamplings, spread over
    # the first 60% of training (0 disables; final resolution is n_h/n_w/n_z)
    coarse_to_fine: int = 0

    # Adam constants (community defaults; configurable)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["strides"] = list(self.strides)
        if self.contraction_scale is not None:
            d["contraction_scale"] = list(self.contraction_scale)
        return d

    def validate(self) -> None:
        if self.mode not in ("per-scene", "cross-scene"):
            raise ValueError(f"mode must be per-scene or cross-scene, got {self.mode!r}")
        for name in ("lambda_tv", "lambda_dist"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")


def resolve_contraction(config: TrainConfig, dataset: SceneDataset | None) -> ContractionParams:
    if config.contraction_scale is not None:
        return ContractionParams(np.asarray(config.contraction_scale, dtype=np.float64))
    if dataset is None:
        raise ValueError("contraction_scale must be set when no dataset is given")
    radius = dataset.scenes[0].radius
    return ContractionParams([1.0 / radius, 1.0 / radius, 1.0 / (0.4 * radius)])


# ---------------------------------------------------------------------------
# losses


def color_loss(pred: TapeTensor, gt: np.ndarray) -> TapeTensor:
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise dc.ShapeError(f"color_loss: prediction {pred.shape} vs target {gt.shape}")
    diff = dc.sub(pred, dc.constant(gt.astype(pred.dtype)))
    return dc.mean(dc.mul(diff, diff))


def total_loss(pred: TapeTensor, gt: np.ndarray, tri: Triplane, batch: RaySampleBatch,
               s_edges: np.ndarray, lambda_tv: float, lambda_dist: float):
    """Color + weighted regularizers; returns (scalar, per-term breakdown)."""
    l_color = color_loss(pred, gt)
    l_tv = tv_loss(tri)
    l_dist = distortion_loss(batch.weights, s_edges)
    total = dc.add(dc.add(l_color, dc.scale(l_tv, lambda_tv)), dc.scale(l_dist, lambda_dist))
    parts = {
        "L_color": l_color.item(),
        "L_TV": l_tv.item(),
        "L_dist": l_dist.item(),
        "total": total.item(),
    }
    return total, parts


# ---------------------------------------------------------------------------
# optimizer and schedule


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero."""
    if step < 0:
        raise ValueError("step must be >= 0")
    peak = config.learning_rate
    warm = config.warmup_steps
    total = config.total_steps
    if total <= warm:
        raise ValueError(f"total steps {total} must exceed warmup {warm}")
    if step < warm:
        return peak * step / warm
    frac = (step - warm) / (total - warm)
    return peak * 0.5 * (1.0 + np.cos(np.pi * min(frac, 1.0)))


class Adam:
    """Bias-corrected Adam over named parameters; skips (and counts)
    steps containing non-finite gradients."""

    def __init__(self, params: list[tuple[str, TapeTensor]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(t.data) for name, t in params}
        self.v = {name: np.zeros_like(t.data) for name, t in params}
        self.step_count = 0
        self.skipped = 0

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.zero_grad()

    def step(self, lr: float) -> bool:
        grads = {}
        for name, t in self.params:
            g = t.grad
            if g is None:
                g = np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                return False
            grads[name] = g
        self.step_count += 1
        t_ = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params:
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** t_)
            vhat = self.v[name] / (1 - b2 ** t_)
            p.data = p.data - (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
        return True


def optim_step(optimizer: Adam, lr: float) -> bool:
    """Apply one update then clear gradients; False when skipped."""
    ok = optimizer.step(lr)
    optimizer.zero_grad()
    return ok


# ---------------------------------------------------------------------------
# image metrics


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def _box_sum(img: np.ndarray, k: int) -> np.ndarray:
    pad = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    pad[1:, 1:] = np.cumsum(np.cumsum(img, axis=0), axis=1)
    return pad[k:, k:] - pad[:-k, k:] - pad[k:, :-k] + pad[:-k, :-k]


def ssim(pred: np.ndarray, target: np.ndarray, window: int = 7,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Uniform-window SSIM on [0,1] images, averaged over valid windows."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    c1, c2 = k1 ** 2, k2 ** 2
    n = window * window
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx = _box_sum(x, window) / n
        my = _box_sum(y, window) / n
        vx = _box_sum(x * x, window) / n - mx * mx
        vy = _box_sum(y * y, window) / n - my * my
        cov = _box_sum(x * y, window) / n - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def depth_rmse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    if not np.any(mask):
        return float("nan")
    d = np.asarray(pred)[mask] - np.asarray(target)[mask]
    return float(np.sqrt(np.mean(d * d)))


# ---------------------------------------------------------------------------
# assembled pipeline


@dataclass
class Pipeline:
    mode: str
    config: TrainConfig
    contraction: ContractionParams
    renderer: Renderer
    encoder: ImageToTriplaneEncoder | None = None
    triplane: Triplane | None = None
    step: int = 0

    def named_parameters(self):
        out = []
        if self.mode == "per-scene":
            for name, plane in zip(("hw", "hz", "wz"), self.triplane.planes):
                out.append((f"triplane.{name}", plane))
        else:
            out += [(f"encoder.{n}", t) for n, t in self.encoder.named_parameters()]
        out += [(f"renderer.{n}", t) for n, t in self.renderer.named_parameters()]
        return out

    def named_states(self):
        out = [(f"renderer.{n}", s) for n, s in self.renderer.named_states()]
        if self.encoder is not None:
            out += [(f"encoder.{n}", s) for n, s in self.encoder.named_states()]
        return out

    def scene_triplane(self, record: SceneRecord, training: bool):
        """(triplane, pyramid) for a scene, per mode."""
        if self.mode == "per-scene":
            return self.triplane, None
        images = np.transpose(record.load_ego_images(), (0, 3, 1, 2)).astype(
            self.config.np_dtype())
        pyramid = self.encoder.extract_features(images)
        tri = self.encoder.encode(images, record.ego_cameras, training=training,
                                  pyramid=pyramid)
        return tri, pyramid

    def render_options(self, stratified: bool | None = None, seed: int = 0,
                       workers: int = 1, use_pif: bool | None = None) -> RenderOptions:
        cfg = self.config
        pif = cfg.use_pif if use_pif is None else use_pif
        return RenderOptions(
            num_coarse=cfg.num_coarse,
            num_fine=cfg.num_fine,
            near=cfg.near,
            far=cfg.far,
            stratified=cfg.stratified if stratified is None else stratified,
            seed=seed,
            use_pif=pif and self.mode != "per-scene",
            workers=workers,
        )


def _resize_axis(data: np.ndarray, axis: int, size: int) -> np.ndarray:
    old = data.shape[axis]
    if old == size:
        return data
    pos = np.linspace(0.0, old - 1.0, size)
    lo = np.clip(np.floor(pos).astype(int), 0, old - 2) if old > 1 else np.zeros(size, int)
    frac = (pos - lo) if old > 1 else np.zeros(size)
    a = np.take(data, lo, axis=axis)
    b = np.take(data, np.minimum(lo + 1, old - 1), axis=axis)
    shape = [1] * data.ndim
    shape[axis] = size
    f = frac.reshape(shape)
    return (a * (1 - f) + b * f).astype(data.dtype)


def resize_triplane(tri: Triplane, n_h: int, n_w: int, n_z: int) -> None:
    """In-place bilinear resize of all three planes (border centers preserved)."""
    tri.hw.data = _resize_axis(_resize_axis(tri.hw.data, 1, n_h), 2, n_w)
    tri.hz.data = _resize_axis(_resize_axis(tri.hz.data, 1, n_h), 2, n_z)
    tri.wz.data = _resize_axis(_resize_axis(tri.wz.data, 1, n_w), 2, n_z)


def _coarse_to_fine_plan(config: TrainConfig, total: int):
    """(initial resolutions, {step: resolutions}) for per-scene refinement."""
    levels = config.coarse_to_fine
    if config.mode != "per-scene" or levels <= 0:
        return (config.n_h, config.n_w, config.n_z), {}
    def shrink(n, k):
        return max(2, int(round(n / 2 ** k)))
    start = (shrink(config.n_h, levels), shrink(config.n_w, levels), shrink(config.n_z, levels))
    schedule = {}
    for i in range(1, levels + 1):
        step = int(total * 0.6 * i / levels)
        k = levels - i
        schedule[step] = (shrink(config.n_h, k), shrink(config.n_w, k), shrink(config.n_z, k))
    return start, schedule


def build_pipeline(config: TrainConfig, dataset: SceneDataset | None) -> Pipeline:
    config.validate()
    dtype = config.np_dtype()
    contraction = resolve_contraction(config, dataset)
    renderer = Renderer.create(
        config.plane_channels, config.feat_channels, contraction,
        hidden=config.renderer_hidden, layers=config.renderer_layers,
        seed=config.seed, dtype=dtype,
    )
    if config.mode == "per-scene":
        tri = Triplane.create(
            config.plane_channels, config.n_h, config.n_w, config.n_z,
            rng=generator("triplane-init", config.seed),
            init_range=config.plane_init_range, dtype=dtype,
        )
        return Pipeline("per-scene", config, contraction, renderer, triplane=tri)
    if dataset is None:
        raise ValueError("cross-scene training requires a dataset")
    sample = dataset.scenes[0].ego_cameras[0]
    enc_cfg = EncoderConfig(
        image_height=sample.height,
        image_width=sample.width,
        feat_channels=config.feat_channels,
        extractor_hidden=config.extractor_hidden,
        strides=tuple(config.strides),
        plane_channels=config.plane_channels,
        n_h=config.n_h,
        n_w=config.n_w,
        n_z=config.n_z,
        heads=config.heads,
        self_seed=config.seed,
    )
    encoder = ImageToTriplaneEncoder(enc_cfg, contraction, seed=config.seed, dtype=dtype)
    return Pipeline("cross-scene", config, contraction, renderer, encoder=encoder)


# ---------------------------------------------------------------------------
# training loops


def train_view_split(record: SceneRecord, holdout: int):
    n = len(record.sup_cameras)
    holdout = min(holdout, n - 1)
    return list(range(n - holdout)), list(range(n - holdout, n))


def scene_split(dataset: SceneDataset, holdout_scenes: int):
    n = len(dataset.scenes)
    holdout = min(holdout_scenes, n - 1)
    return list(range(n - holdout)), list(range(n - holdout, n))


class _ViewCache:
    """Backprojected ray directions and flattened ground truth per view."""

    def __init__(self):
        self._dirs: dict[tuple, np.ndarray] = {}
        self._gt: dict[tuple, np.ndarray] = {}

    def dirs(self, cam: Camera, key: tuple) -> np.ndarray:
        if key not in self._dirs:
            pix = np.stack(np.meshgrid(np.arange(cam.width), np.arange(cam.height)),
                           axis=-1).reshape(-1, 2)
            self._dirs[key] = ray_directions(cam, pix.astype(np.float64))
        return self._dirs[key]

    def gt(self, record: SceneRecord, view: int) -> np.ndarray:
        key = (record.path, view)
        if key not in self._gt:
            self._gt[key] = record.load_sup_image(view).reshape(-1, 3)
        return self._gt[key]


def _gather_ray_batch(record: SceneRecord, views: list[int], cache: _ViewCache,
                      rays_per_view: int, rng: np.random.Generator):
    origins, dirs, gt = [], [], []
    for v in views:
        cam = record.sup_cameras[v]
        all_dirs = cache.dirs(cam, (record.path, v))
        all_gt = cache.gt(record, v)
        n = all_dirs.shape[0]
        if rays_per_view and rays_per_view < n:
            idx = rng.choice(n, size=rays_per_view, replace=False)
        else:
            idx = np.arange(n)
        origins.append(np.broadcast_to(cam.position, (idx.size, 3)))
        dirs.append(all_dirs[idx])
        gt.append(all_gt[idx])
    return np.concatenate(origins), np.concatenate(dirs), np.concatenate(gt)


def evaluate_view(pipeline: Pipeline, record: SceneRecord, view: int,
                  workers: int = 1) -> dict:
    """PSNR/SSIM (and depth RMSE) of one supervision view, rendered detached."""
    tri, pyramid = pipeline.scene_triplane(record, training=False)
    cam = record.sup_cameras[view]
    opts = pipeline.render_options(stratified=False, workers=workers)
    rgb, depth, background = pipeline.renderer.render_image(
        tri, cam, opts, pyramid=pyramid, cameras=record.ego_cameras)
    gt = record.load_sup_image(view)
    gt_depth = record.load_sup_depth(view)
    mask = np.isfinite(gt_depth)
    return {
        "psnr": psnr(rgb, gt),
        "ssim": ssim(rgb, gt),
        "mse": float(np.mean((rgb - gt) ** 2)),
        "depth_rmse": depth_rmse(depth, gt_depth, mask),
        "background_fraction": float(background.mean()),
    }


def train(config: TrainConfig, dataset: SceneDataset, checkpoint_path: str | Path | None = None,
          log_path: str | Path | None = None, resume: "Pipeline | None" = None,
          on_step=None):
    """Run the configured loop; returns (pipeline, history).

    history holds one record per step: step, lr, loss breakdown, wall_ms, plus
    psnr/ssim of a held-out view at evaluation points. When ``checkpoint_path``
    is set the final state is saved there; ``log_path`` receives the history
    as line-delimited JSON.
    """
    from . import checkpoint as ckpt_mod

    config.validate()
    pipeline = resume if resume is not None else build_pipeline(config, dataset)
    config = pipeline.config if resume is not None else config

    train_scenes, holdout_scenes = scene_split(dataset, config.holdout_scenes)
    if config.mode == "per-scene":
        scenes = [config.scene_index]
        total = config.steps or config.epochs
    else:
        per_epoch = config.scenes_per_epoch or len(train_scenes)
        total = config.epochs * per_epoch
    if config.total_steps == 0:
        config.total_steps = total
    if config.warmup_steps >= config.total_steps:
        raise ValueError(
            f"warmup_steps {config.warmup_steps} must be below total steps {config.total_steps}")

    start_res, upsample_at = _coarse_to_fine_plan(config, config.total_steps)
    if resume is None and config.mode == "per-scene" and upsample_at and pipeline.step == 0:
        resize_triplane(pipeline.triplane, *start_res)

    optimizer = Adam(pipeline.named_parameters(), beta1=config.adam_beta1,
                     beta2=config.adam_beta2, eps=config.adam_eps)
    cache = _ViewCache()
    history: list[dict] = []
    log_file = open(log_path, "a") if log_path else None
    nan_streak = 0

    try:
        start = pipeline.step
        for step in range(start, config.total_steps):
            t0 = time.perf_counter()
            if step in upsample_at:
                resize_triplane(pipeline.triplane, *upsample_at[step])
                for name, t_ in optimizer.params:  # plane shapes changed
                    if name.startswith("triplane."):
                        optimizer.m[name] = np.zeros_like(t_.data)
                        optimizer.v[name] = np.zeros_like(t_.data)
            rng = generator("train-step", config.seed, step)
            if config.mode == "per-scene":
                record = dataset.scenes[config.scene_index]
            else:
                per_epoch = config.scenes_per_epoch or len(train_scenes)
                epoch, pos = divmod(step, per_epoch)
                order = generator("epoch-order", config.seed, epoch).permutation(
                    len(train_scenes))
                record = dataset.scenes[train_scenes[order[pos % len(train_scenes)]]]

            view_pool, _ = train_view_split(record, config.holdout_views)
            views = rng.choice(len(view_pool), size=min(config.views_per_scene, len(view_pool)),
                               replace=False)
            views = [view_pool[v] for v in views]
            origins, dirs, gt = _gather_ray_batch(record, views, cache,
                                                  config.rays_per_view, rng)
            n_rays = origins.shape[0]
            jitter = rng.random((n_rays, config.num_coarse)) if config.stratified else None
            fine_u = rng.random((n_rays, config.num_fine)) if config.num_fine else None

            lr = lr_at(step, config)
            with Tape() as tape:
                tri, pyramid = pipeline.scene_triplane(record, training=True)
                opts = pipeline.render_options(seed=step)
                batch = pipeline.renderer.render_ray_batch(
                    tri, origins, dirs, opts,
                    pyramid=pyramid, cameras=record.ego_cameras,
                    bn_training=True, jitter=jitter, fine_u=fine_u)
                edges = np.concatenate([batch.t, np.full((n_rays, 1), config.far)], axis=1)
                s_edges = (edges - config.near) / (config.far - config.near)
                loss, parts = total_loss(batch.rgb, gt, tri, batch, s_edges,
                                         config.lambda_tv, config.lambda_dist)
            finite = np.isfinite(parts["total"])
            encoder_grad_norm = None
            if finite:
                tape.backward(loss)
                if config.mode == "cross-scene":
                    sq = [float(np.sum(t.grad * t.grad)) for n, t in optimizer.params
                          if n.startswith("encoder.") and t.grad is not None]
                    encoder_grad_norm = float(np.sqrt(sum(sq)))
                stepped = optim_step(optimizer, lr)
                nan_streak = 0 if stepped else nan_streak + 1
            else:
                optimizer.skipped += 1
                optimizer.zero_grad()
                nan_streak += 1
            tape.clear()

            entry = {
                "step": step,
                "lr": lr,
                "L_color": parts["L_color"],
                "L_TV": parts["L_TV"],
                "L_dist": parts["L_dist"],
                "psnr": None,
                "ssim": None,
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
            if encoder_grad_norm is not None:
                entry["encoder_grad_norm"] = encoder_grad_norm
            if config.eval_every and (step + 1) % config.eval_every == 0:
                eval_record = dataset.scenes[holdout_scenes[0]] if (
                    config.mode == "cross-scene" and holdout_scenes) else record
                _, holdout = train_view_split(eval_record, config.holdout_views)
                metrics = evaluate_view(pipeline, eval_record, holdout[0])
                entry["psnr"] = metrics["psnr"]
                entry["ssim"] = metrics["ssim"]
            history.append(entry)
            if log_file and step % config.log_every == 0:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            pipeline.step = step + 1
            if on_step is not None:
                on_step(entry, nan_streak)
    finally:
        if log_file:
            log_file.close()

    if checkpoint_path is not None:
        ckpt_mod.save_checkpoint(pipeline, checkpoint_path)
    return pipeline, history
