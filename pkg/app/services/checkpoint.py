import json
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Tuple

import numpy as np

from app.models.training import AdamState, Checkpoint, CheckpointMeta
from app.utils.errors import DataError

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"SSPC"
CACHE_HEADER = struct.Struct("<4sQI")
CHECKPOINT_MAGIC = b"SSCK"
CHECKPOINT_VERSION = 1
_TABLES = ("params", "buffers", "adam_m", "adam_v")


def save_cache(path, data: np.ndarray, fs: int) -> None:
    """Preprocessed recording as header (magic, N, fs) plus row-major little-endian float32"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_channels, n_samples = data.shape
    if n_channels != 4:
        raise DataError(f"cache holds 4 x N matrices, got {data.shape}")
    with open(path, "wb") as f:
        f.write(CACHE_HEADER.pack(CACHE_MAGIC, n_samples, int(fs)))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_cache(path) -> Tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < CACHE_HEADER.size:
        raise DataError(f"cache file {path} is truncated")
    magic, n_samples, fs = CACHE_HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise DataError(f"{path} is not a preprocessed cache file")
    expected = CACHE_HEADER.size + 4 * n_samples * 4
    if len(raw) != expected:
        raise DataError(f"cache file {path} has {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=CACHE_HEADER.size).reshape(4, n_samples)
    return data.astype(np.float32), fs


def _write_table(f: BinaryIO, arrays: Dict[str, np.ndarray]):
    f.write(struct.pack("<I", len(arrays)))
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        f.write(struct.pack("<H", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<B", array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_table(raw: bytes, offset: int) -> Tuple[Dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * size
    return arrays, offset


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """
    Binary tables (params, buffers, Adam m, Adam v) behind magic and version,
    the Adam step count and hyperparameters, plus a JSON sidecar with the metadata.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    adam = checkpoint.optimizer
    try:
        with open(path, "wb") as f:
            f.write(struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
            f.write(struct.pack("<Q5d", adam.t, adam.lr, adam.beta1, adam.beta2, adam.eps, adam.weight_decay))
            for table in (checkpoint.params, checkpoint.buffers, adam.m, adam.v):
                _write_table(f, table)
        sidecar_path(path).write_text(checkpoint.meta.model_dump_json(indent=2), encoding="utf-8")
    except OSError as e:
        logger.error(f"Error writing checkpoint {path}: {str(e)}")
        raise DataError(f"cannot write checkpoint {path}: {e}")
    logger.info(f"Saved checkpoint {path} (pass {checkpoint.meta.selected_pass})")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
        meta = CheckpointMeta.model_validate(json.loads(sidecar_path(path).read_text(encoding="utf-8")))
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}")
    magic, version = struct.unpack_from("<4sI", raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    offset = 8
    t, lr, beta1, beta2, eps, weight_decay = struct.unpack_from("<Q5d", raw, offset)
    offset += struct.calcsize("<Q5d")
    tables = {}
    try:
        for name in _TABLES:
            tables[name], offset = _read_table(raw, offset)
    except (struct.error, ValueError) as e:
        raise DataError(f"checkpoint {path} is truncated or corrupt: {e}")
    optimizer = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay, t=t,
                          m=tables["adam_m"], v=tables["adam_v"])
    return Checkpoint(meta=meta, params=tables["params"], buffers=tables["buffers"], optimizer=optimizer)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
