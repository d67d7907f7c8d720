"""Bit-exact checkpoint format.

Layout: magic bytes "STAG", format version u32 little-endian, tensor count
u32, then per tensor: name length u16, UTF-8 name, rank u8, dims as u32s,
raw float32 little-endian values in row-major order.  Model configuration
scalars and normalization statistics ride along as named tensors.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointFormatError
from .model import ABLATIONS, ForecastModel, ModelConfig

MAGIC = b"STAG"
VERSION = 1

_CONFIG_FIELDS = [
    ("n_nodes", int), ("t_in", int), ("horizon", int), ("emb_dim", int),
    ("k1", int), ("k2", int), ("d1", int), ("d2", int), ("h_dim", int),
    ("d_k", int), ("ts", int), ("beta", float), ("u_th", float),
    ("u_reset", float), ("alpha", float), ("lam", float), ("lr", float),
    ("epochs", int), ("seed", int), ("batch_size", int), ("stride", int),
    ("max_batches", int),
]


def write_tensors(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(data.tobytes(order="C"))


def read_tensors(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    off = 4
    try:
        version, count = struct.unpack_from("<II", blob, off)
        off += 8
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported format version {version}")
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            tensors[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointFormatError(f"truncated or corrupt checkpoint: {exc}")
    return tensors


def save_model(path, model: ForecastModel) -> None:
    tensors = {name: p.data for name, p in model.parameters().items()}
    cfg = model.config
    for fname, _ in _CONFIG_FIELDS:
        tensors[f"config/{fname}"] = np.asarray([float(getattr(cfg, fname))], dtype=np.float32)
    tensors["config/ablation"] = np.asarray(
        [float(ABLATIONS.index(cfg.ablation) + 1)], dtype=np.float32)
    tensors["config/minute_covariate"] = np.asarray(
        [1.0 if cfg.minute_covariate else 0.0], dtype=np.float32)
    if model.ssa_scale is not None:
        tensors["calib/ssa_scale"] = np.asarray([model.ssa_scale], dtype=np.float32)
    if model.norm_mean is not None:
        tensors["norm/mean"] = model.norm_mean
        tensors["norm/std"] = model.norm_std
    write_tensors(path, tensors)


def load_model(path) -> ForecastModel:
    tensors = read_tensors(path)
    kwargs = {}
    for fname, cast in _CONFIG_FIELDS:
        key = f"config/{fname}"
        if key not in tensors:
            raise CheckpointFormatError(f"missing config tensor '{key}'")
        kwargs[fname] = cast(tensors[key][0])
    kwargs["ablation"] = ABLATIONS[int(tensors["config/ablation"][0]) - 1]
    kwargs["minute_covariate"] = bool(tensors["config/minute_covariate"][0] > 0.5)
    model = ForecastModel(ModelConfig(**kwargs))
    params = model.parameters()
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointFormatError(f"missing parameter tensor '{name}'")
        if tuple(tensors[name].shape) != tuple(p.data.shape):
            raise CheckpointFormatError(
                f"parameter '{name}' has shape {tensors[name].shape}, expected {p.data.shape}")
        p.data = tensors[name].astype(np.float32)
    if "calib/ssa_scale" in tensors:
        model.ssa_scale = float(tensors["calib/ssa_scale"][0])
    if "norm/mean" in tensors:
        model.set_norm_stats(tensors["norm/mean"], tensors["norm/std"])
    return model
