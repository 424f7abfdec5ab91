"""Binary checkpoint format.

Layout: magic ``6I3D`` | uint32 version | uint64 header length | header JSON |
concatenated little-endian float32 blobs. The header echoes the training
config (with the resolved contraction scale), the pipeline mode/step, plane
shapes, and a blob directory with per-blob CRC32 checksums.
"""
from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, ImageToTriplaneEncoder
from .geometry import ContractionParams
from .renderer import Renderer
from .triplane import Triplane

MAGIC = b"6I3D"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _blob_items(pipeline) -> list[tuple[str, np.ndarray]]:
    items = [(name, t.data) for name, t in pipeline.named_parameters()]
    for name, state in pipeline.named_states():
        items.append((f"{name}.running_mean", state.running_mean))
        items.append((f"{name}.running_var", state.running_var))
    return items


def save_checkpoint(pipeline, path: str | Path) -> None:
    config = pipeline.config
    config.contraction_scale = tuple(float(s) for s in pipeline.contraction.scale)
    header: dict = {
        "mode": pipeline.mode,
        "step": pipeline.step,
        "config": config.to_dict(),
        "plane_shapes": {
            "n_h": config.n_h, "n_w": config.n_w, "n_z": config.n_z,
            "channels": config.plane_channels,
        },
        "blobs": [],
    }
    if pipeline.encoder is not None:
        enc = dataclasses.asdict(pipeline.encoder.config)
        enc["strides"] = list(pipeline.encoder.config.strides)
        header["encoder_config"] = enc

    payload = bytearray()
    for name, arr in _blob_items(pipeline):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        header["blobs"].append({
            "name": name,
            "shape": list(arr.shape),
            "offset": len(payload),
            "size": len(raw),
            "crc32": zlib.crc32(raw),
        })
        payload.extend(raw)

    head = json.dumps(header, sort_keys=True).encode("utf-8")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(bytes(payload))


def load_checkpoint(path: str | Path):
    """Rebuild a :class:`triplift.training.Pipeline` from a checkpoint file."""
    from .training import Pipeline, TrainConfig

    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<I", data[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    head_len = struct.unpack("<Q", data[8:16])[0]
    try:
        header = json.loads(data[16:16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    payload = data[16 + head_len:]

    config = TrainConfig.from_dict(header["config"])
    if config.contraction_scale is None:
        raise CheckpointError(f"{path}: header missing resolved contraction scale")
    config.strides = tuple(config.strides)
    contraction = ContractionParams(np.asarray(config.contraction_scale))
    dtype = config.np_dtype()
    renderer = Renderer.create(
        config.plane_channels, config.feat_channels, contraction,
        hidden=config.renderer_hidden, layers=config.renderer_layers,
        seed=config.seed, dtype=dtype,
    )
    mode = header["mode"]
    if mode == "per-scene":
        tri = Triplane.create(config.plane_channels, config.n_h, config.n_w, config.n_z,
                              dtype=dtype)
        pipeline = Pipeline(mode, config, contraction, renderer, triplane=tri)
    else:
        enc_dict = dict(header["encoder_config"])
        enc_dict["strides"] = tuple(enc_dict["strides"])
        enc_dict["cross_slices"] = (tuple(enc_dict["cross_slices"])
                                    if enc_dict.get("cross_slices") else None)
        enc_cfg = EncoderConfig(**enc_dict)
        encoder = ImageToTriplaneEncoder(enc_cfg, contraction, seed=config.seed, dtype=dtype)
        pipeline = Pipeline(mode, config, contraction, renderer, encoder=encoder)
    pipeline.step = int(header["step"])

    tensors = dict(pipeline.named_parameters())
    states = dict(pipeline.named_states())
    targets: dict[str, np.ndarray] = {n: t.data for n, t in tensors.items()}
    for name, st in states.items():
        targets[f"{name}.running_mean"] = st.running_mean
        targets[f"{name}.running_var"] = st.running_var

    seen = set()
    for blob in header["blobs"]:
        name = blob["name"]
        if name not in targets:
            raise CheckpointError(f"{path}: unknown blob {name!r}")
        raw = payload[blob["offset"]:blob["offset"] + blob["size"]]
        if len(raw) != blob["size"]:
            raise CheckpointError(f"{path}: truncated blob {name!r}")
        if zlib.crc32(raw) != blob["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch for blob {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(blob["shape"])
        target = targets[name]
        if list(target.shape) != list(blob["shape"]):
            raise CheckpointError(
                f"{path}: blob {name!r} shape {blob['shape']} does not match {target.shape}")
        target[...] = arr.astype(target.dtype)
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise CheckpointError(f"{path}: missing blobs {sorted(missing)[:4]}")
    return pipeline
