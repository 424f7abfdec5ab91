"""Procedural Lambertian toy scenes with an analytic ray-trace oracle.

Scenes are a checkered ground disk plus a handful of spheres and axis-aligned
boxes under a fixed directional light, so ground-truth RGB and depth for any
camera come from exact intersection tests. World frame: z up, ground at z=0.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, intrinsics_from_fov, look_at_pose, project_to_camera, ray_directions, yaw_pose
from .rng import generator, subseed

DEPTH_SENTINEL = np.inf  # returned for rays that escape to the sky
_DEPTH_PNG_SCALE = 1000.0  # millimeters in the 16-bit depth channel

EGO_COUNT = 6
EGO_FOV_DEG = 70.0
EGO_YAW_SPACING_DEG = 60.0


@dataclass
class Primitive:
    kind: str  # "sphere" | "box"
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # sphere: (radius, radius, radius); box: edge lengths
    albedo: tuple[float, float, float]


@dataclass
class SceneSpec:
    seed: int
    ground_height: float
    ground_extent: float  # radius of the ground disk; the scene's nominal radius
    ground_cell: float
    ground_colors: tuple[tuple[float, float, float], tuple[float, float, float]]
    sky_color: tuple[float, float, float]
    light_dir: tuple[float, float, float]  # unit vector pointing toward the light
    light_floor: float  # ambient floor inside the cosine shading term
    primitives: list[Primitive] = field(default_factory=list)

    @property
    def radius(self) -> float:
        return self.ground_extent

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        prims = [Primitive(**p) for p in d["primitives"]]
        rest = {k: v for k, v in d.items() if k != "primitives"}
        rest["ground_colors"] = tuple(tuple(c) for c in rest["ground_colors"])
        for key in ("sky_color", "light_dir"):
            rest[key] = tuple(rest[key])
        return cls(primitives=prims, **rest)


@dataclass
class CameraRig:
    kind: str  # "ego-6" | "sphere-N" | "probe"
    cameras: list[Camera]


# ---------------------------------------------------------------------------
# scene generation


def _sample_scene(seed: int, radius: float) -> SceneSpec:
    rng = generator("scene", seed)
    g_dark = 0.18 + 0.08 * rng.random(3)
    g_light = 0.45 + 0.15 * rng.random(3)
    g_dark[1] += 0.10  # keep the ground greenish
    g_light[1] += 0.12
    sky = np.array([0.55, 0.70, 0.92]) + rng.uniform(-0.05, 0.05, 3)
    light = np.array([0.35, 0.22, 0.91]) + rng.uniform(-0.08, 0.08, 3)
    light /= np.linalg.norm(light)

    count = int(rng.integers(3, 11))
    prims: list[Primitive] = []
    for _ in range(count):
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.12, 0.55) * radius
        cx, cy = dist * np.cos(ang), dist * np.sin(ang)
        albedo = rng.uniform(0.15, 0.95, 3)
        if rng.random() < 0.5:
            r = rng.uniform(0.06, 0.16) * radius
            prims.append(Primitive("sphere", (cx, cy, r), (r, r, r), tuple(albedo)))
        else:
            sx, sy = rng.uniform(0.08, 0.22, 2) * radius
            sz = rng.uniform(0.08, 0.26) * radius
            prims.append(Primitive("box", (cx, cy, sz / 2.0), (sx, sy, sz), tuple(albedo)))
    return SceneSpec(
        seed=seed,
        ground_height=0.0,
        ground_extent=radius,
        ground_cell=radius / 8.0,
        ground_colors=(tuple(np.clip(g_dark, 0, 1)), tuple(np.clip(g_light, 0, 1))),
        sky_color=tuple(np.clip(sky, 0, 1)),
        light_dir=tuple(light),
        light_floor=0.3,
        primitives=prims,
    )


def generate_scene(seed: int, radius: float = 20.0) -> SceneSpec:
    """Deterministic toy scene; rejection-sampled until at least one primitive
    is genuinely blocked from view in at least one ego camera."""
    rig = make_rig("ego-6", {"width": 48, "height": 48})
    for attempt in range(64):
        spec = _sample_scene(subseed(seed, attempt), radius)
        if occluded_primitives(spec, rig):
            spec.seed = seed
            return spec
    raise RuntimeError(f"no occluded configuration found for seed {seed}")


def occluded_primitives(spec: SceneSpec, rig: CameraRig) -> list[tuple[int, int]]:
    """(primitive index, camera index) pairs where the primitive's center
    projects into the camera yet the primitive appears in no pixel."""
    out = []
    for ci, cam in enumerate(rig.cameras):
        ids = oracle_ids(spec, cam)
        present = set(np.unique(ids))
        for pi, prim in enumerate(spec.primitives):
            pid = pi + 1  # 0 is the ground
            if pid in present:
                continue
            _, valid = project_to_camera(np.asarray(prim.center), cam)
            if valid:
                out.append((pi, ci))
    return out


# ---------------------------------------------------------------------------
# analytic ray tracing


def _pixel_grid(width: int, height: int) -> np.ndarray:
    u, v = np.meshgrid(np.arange(width), np.arange(height))
    return np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)


def trace_rays(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Nearest-hit query for a bundle of rays sharing one origin.

    Returns (t, ids, normals, albedo): t is the Euclidean hit distance
    (inf for misses), ids is -1 sky / 0 ground / 1.. primitives.
    """
    n = dirs.shape[0]
    eps = 1e-6
    best_t = np.full(n, np.inf)
    ids = np.full(n, -1, dtype=np.int32)
    normals = np.zeros((n, 3))
    albedo = np.tile(np.asarray(spec.sky_color), (n, 1))

    def consider(t, mask, pid, normal, color):
        better = mask & (t < best_t)
        if not np.any(better):
            return
        best_t[better] = t[better]
        ids[better] = pid
        normals[better] = normal[better] if normal.ndim == 2 else normal
        albedo[better] = color[better] if color.ndim == 2 else color

    # ground disk
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_g = (spec.ground_height - origin[2]) / dz
        t_g = np.where((np.abs(dz) > 1e-12) & (t_g > eps), t_g, np.inf)
        p = origin[None, :] + np.where(np.isfinite(t_g), t_g, 0.0)[:, None] * dirs
    rad = np.hypot(p[:, 0], p[:, 1])
    mask_g = np.isfinite(t_g) & (rad <= spec.ground_extent)
    cell = spec.ground_cell
    parity = (np.floor(p[:, 0] / cell) + np.floor(p[:, 1] / cell)).astype(np.int64) % 2
    colors = np.where(parity[:, None] == 0,
                      np.asarray(spec.ground_colors[0]),
                      np.asarray(spec.ground_colors[1]))
    consider(np.where(mask_g, t_g, np.inf), mask_g, 0, np.array([0.0, 0.0, 1.0]), colors)

    for pi, prim in enumerate(spec.primitives):
        center = np.asarray(prim.center)
        color = np.asarray(prim.albedo)
        if prim.kind == "sphere":
            r = prim.size[0]
            oc = origin - center
            b = dirs @ oc
            c = oc @ oc - r * r
            disc = b * b - c
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = -b - sq
            t1 = -b + sq
            t = np.where(t0 > eps, t0, np.where(t1 > eps, t1, np.inf))
            hit = ok & np.isfinite(t)
            pt = origin[None, :] + t[:, None] * dirs
            nrm = np.zeros_like(pt)
            nrm[hit] = (pt[hit] - center) / r
            consider(np.where(hit, t, np.inf), hit, pi + 1, nrm, color)
        elif prim.kind == "box":
            half = np.asarray(prim.size) / 2.0
            lo, hi = center - half, center + half
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
            t_lo = (lo[None, :] - origin[None, :]) * inv
            t_hi = (hi[None, :] - origin[None, :]) * inv
            t_near = np.minimum(t_lo, t_hi)
            t_far = np.maximum(t_lo, t_hi)
            # parallel rays outside the slab never hit
            parallel = np.abs(dirs) < 1e-12
            outside = (origin[None, :] < lo[None, :]) | (origin[None, :] > hi[None, :])
            t_near = np.where(parallel, np.where(outside, np.inf, -np.inf), t_near)
            t_far = np.where(parallel, np.where(outside, -np.inf, np.inf), t_far)
            tmin = t_near.max(axis=1)
            tmax = t_far.min(axis=1)
            axis = t_near.argmax(axis=1)
            hit = (tmin <= tmax) & (tmin > eps)
            t = np.where(hit, tmin, np.inf)
            nrm = np.zeros((n, 3))
            rowk = np.arange(n)
            signs = -np.sign(dirs[rowk, axis])
            nrm[rowk, axis] = signs
            consider(t, hit, pi + 1, nrm, color)
        else:
            raise ValueError(f"unknown primitive kind {prim.kind!r}")

    return best_t, ids, normals, albedo


def shade(spec: SceneSpec, ids: np.ndarray, normals: np.ndarray, albedo: np.ndarray) -> np.ndarray:
    light = np.asarray(spec.light_dir)
    cos = np.maximum(normals @ light, 0.0)
    term = spec.light_floor + (1.0 - spec.light_floor) * cos
    rgb = albedo * term[:, None]
    rgb[ids < 0] = np.asarray(spec.sky_color)
    return np.clip(rgb, 0.0, 1.0)


def oracle_render(spec: SceneSpec, camera: Camera):
    """Exact RGB and depth for one camera: (rgb [H,W,3] in [0,1], depth [H,W])."""
    pix = _pixel_grid(camera.width, camera.height)
    dirs = ray_directions(camera, pix)
    t, ids, normals, albedo = trace_rays(spec, camera.position, dirs)
    rgb = shade(spec, ids, normals, albedo)
    h, w = camera.height, camera.width
    return rgb.reshape(h, w, 3), t.reshape(h, w)


def oracle_ids(spec: SceneSpec, camera: Camera) -> np.ndarray:
    pix = _pixel_grid(camera.width, camera.height)
    dirs = ray_directions(camera, pix)
    _, ids, _, _ = trace_rays(spec, camera.position, dirs)
    return ids.reshape(camera.height, camera.width)


# ---------------------------------------------------------------------------
# rigs


def make_rig(kind: str, params: dict | None = None) -> CameraRig:
    params = dict(params or {})
    if kind == "ego-6":
        width = int(params.get("width", 64))
        height = int(params.get("height", 64))
        fov = float(params.get("fov_deg", EGO_FOV_DEG))
        ring = float(params.get("ring_radius", 0.6))
        h = float(params.get("height_m", 1.6))
        k = intrinsics_from_fov(width, height, fov)
        cams = []
        for i in range(EGO_COUNT):
            yaw = np.deg2rad(EGO_YAW_SPACING_DEG * i)
            pos = (ring * np.cos(yaw), ring * np.sin(yaw), h)
            cams.append(Camera(k, yaw_pose(yaw, pos), width, height))
        return CameraRig("ego-6", cams)
    if kind.startswith("sphere"):
        n = int(params.get("count", 12))
        radius = float(params.get("radius", 16.0))
        width = int(params.get("width", 64))
        height = int(params.get("height", 48))
        fov = float(params.get("fov_deg", 62.0))
        min_elev = float(params.get("min_elev_deg", 22.0))
        max_elev = float(params.get("max_elev_deg", 58.0))
        k = intrinsics_from_fov(width, height, fov)
        cams = []
        golden = np.pi * (3.0 - np.sqrt(5.0))
        # elevations are spread uniformly but stored in a shuffled order, so a
        # train/holdout suffix split interpolates rather than extrapolates
        elevs = min_elev + (max_elev - min_elev) * (np.arange(n) + 0.5) / n
        elevs = elevs[generator("sphere-rig-order", n).permutation(n)]
        for i in range(n):
            elev = np.deg2rad(elevs[i])
            azim = golden * i
            pos = (
                radius * np.cos(elev) * np.cos(azim),
                radius * np.cos(elev) * np.sin(azim),
                radius * np.sin(elev),
            )
            cams.append(Camera(k, look_at_pose(pos, (0.0, 0.0, 0.0)), width, height))
        return CameraRig(f"sphere-{n}", cams)
    if kind == "probe":
        cam = Camera(
            np.asarray(params["intrinsics"]),
            np.asarray(params["pose"]),
            int(params["width"]),
            int(params["height"]),
        )
        return CameraRig("probe", [cam])
    raise ValueError(f"unknown rig kind {kind!r}")


# ---------------------------------------------------------------------------
# dataset serialization


class DatasetError(ValueError):
    pass


def _camera_to_json(cam: Camera) -> dict:
    k = cam.intrinsics
    return {
        "fx": k[0, 0],
        "fy": k[1, 1],
        "cx": k[0, 2],
        "cy": k[1, 2],
        "pose": [float(x) for x in cam.cam_to_world.reshape(-1)],
        "width": cam.width,
        "height": cam.height,
    }


def _camera_from_json(d: dict, where: str) -> Camera:
    for key in ("fx", "fy", "cx", "cy", "pose", "width", "height"):
        if key not in d:
            raise DatasetError(f"{where}: missing camera field {key!r}")
    k = np.array([[d["fx"], 0.0, d["cx"]], [0.0, d["fy"], d["cy"]], [0.0, 0.0, 1.0]])
    pose = np.asarray(d["pose"], dtype=np.float64).reshape(4, 4)
    return Camera(k, pose, int(d["width"]), int(d["height"]))


def _write_rgb(path: Path, rgb: np.ndarray) -> None:
    arr = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _read_rgb(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def _write_depth(path: Path, depth: np.ndarray) -> None:
    mm = np.where(np.isfinite(depth), depth * _DEPTH_PNG_SCALE, 0.0)
    mm = np.clip(np.round(mm), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def _read_depth(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    out = arr / _DEPTH_PNG_SCALE
    out[arr == 0] = DEPTH_SENTINEL
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def export_dataset(
    scenes: list[SceneSpec],
    rigs: tuple[CameraRig, CameraRig],
    out_dir: str | Path,
    white_background: bool = False,
) -> list[Path]:
    """Write ego/supervision renders plus manifests; returns scene directories."""
    ego_rig, sup_rig = rigs
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for idx, spec in enumerate(scenes):
        scene_dir = root / f"scene_{idx:04d}"
        scene_dir.mkdir(parents=True, exist_ok=True)
        files = {}
        for ci, cam in enumerate(ego_rig.cameras):
            rgb, _ = oracle_render(spec, cam)
            name = f"ego_{ci}.png"
            _write_rgb(scene_dir / name, rgb)
            files[name] = _sha256(scene_dir / name)
        for si, cam in enumerate(sup_rig.cameras):
            rgb, depth = oracle_render(spec, cam)
            if white_background:
                rgb = rgb.copy()
                rgb[~np.isfinite(depth)] = 1.0
            name = f"sup_{si:02d}.png"
            _write_rgb(scene_dir / name, rgb)
            files[name] = _sha256(scene_dir / name)
            dname = f"sup_{si:02d}_depth.png"
            _write_depth(scene_dir / dname, depth)
            files[dname] = _sha256(scene_dir / dname)
        manifest = {
            "version": 1,
            "scene_id": scene_dir.name,
            "radius": spec.radius,
            "white_background": white_background,
            "spec": spec.to_json(),
            "cameras": {
                "ego": [_camera_to_json(c) for c in ego_rig.cameras],
                "sup": [_camera_to_json(c) for c in sup_rig.cameras],
            },
            "checksums": files,
        }
        (scene_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        written.append(scene_dir)
    return written


@dataclass
class SceneRecord:
    path: Path
    spec: SceneSpec
    radius: float
    ego_cameras: list[Camera]
    sup_cameras: list[Camera]
    white_background: bool

    def load_ego_images(self) -> np.ndarray:
        return np.stack([_read_rgb(self.path / f"ego_{i}.png") for i in range(len(self.ego_cameras))])

    def load_sup_image(self, i: int) -> np.ndarray:
        return _read_rgb(self.path / f"sup_{i:02d}.png")

    def load_sup_depth(self, i: int) -> np.ndarray:
        return _read_depth(self.path / f"sup_{i:02d}_depth.png")


@dataclass
class SceneDataset:
    root: Path
    scenes: list[SceneRecord]

    def __len__(self) -> int:
        return len(self.scenes)


def import_dataset(path: str | Path, verify_checksums: bool = True) -> SceneDataset:
    root = Path(path)
    scene_dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name.startswith("scene_"))
    if not scene_dirs:
        raise DatasetError(f"{root}: no scene_* directories found")
    records = []
    for scene_dir in scene_dirs:
        mpath = scene_dir / "manifest.json"
        if not mpath.exists():
            raise DatasetError(f"{scene_dir}: missing manifest.json")
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as e:
            raise DatasetError(f"{mpath}: manifest is not valid JSON ({e})") from e
        for key in ("version", "spec", "cameras", "checksums", "radius"):
            if key not in manifest:
                raise DatasetError(f"{mpath}: missing field {key!r}")
        cams = manifest["cameras"]
        ego = [
            _camera_from_json(c, f"{mpath}: cameras.ego[{i}]")
            for i, c in enumerate(cams.get("ego", []))
        ]
        sup = [
            _camera_from_json(c, f"{mpath}: cameras.sup[{i}]")
            for i, c in enumerate(cams.get("sup", []))
        ]
        if len(ego) != EGO_COUNT:
            raise DatasetError(f"{mpath}: expected {EGO_COUNT} ego cameras, found {len(ego)}")
        if verify_checksums:
            for name, digest in manifest["checksums"].items():
                fpath = scene_dir / name
                if not fpath.exists():
                    raise DatasetError(f"{scene_dir}: listed file {name} is missing")
                if _sha256(fpath) != digest:
                    raise DatasetError(f"{fpath}: checksum mismatch")
        records.append(
            SceneRecord(
                path=scene_dir,
                spec=SceneSpec.from_json(manifest["spec"]),
                radius=float(manifest["radius"]),
                ego_cameras=ego,
                sup_cameras=sup,
                white_background=bool(manifest.get("white_background", False)),
            )
        )
    return SceneDataset(root=root, scenes=records)
