"""
Binary tensor files and ParamSet checkpoints.

Tensor file layout (little-endian): b"FLT1", u32 rank, rank x u32 dims,
then the float64 payload in row-major order. A checkpoint is a directory of
tensor files plus manifest.json mapping parameter names to file names.
"""

import json
import logging
import math
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from errors import FormatError
from tensor_core import ParamSet, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"FLT1"
MANIFEST_NAME = "manifest.json"


def encode_tensor(value: Union[Tensor, np.ndarray]) -> bytes:
    array = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    header = MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f8").tobytes()


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError(f"{source}: missing FLT1 magic")
    (rank,) = struct.unpack_from("<I", blob, 4)
    header_size = 8 + 4 * rank
    if len(blob) < header_size:
        raise FormatError(f"{source}: truncated shape header (rank {rank})")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = math.prod(int(d) for d in shape)
    payload = blob[header_size:]
    if len(payload) != 8 * count:
        raise FormatError(f"{source}: payload holds {len(payload)} bytes, shape {tuple(shape)} needs {8 * count}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def write_tensor(path: Union[str, Path], value: Union[Tensor, np.ndarray]) -> Path:
    path = Path(path)
    path.write_bytes(encode_tensor(value))
    return path


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: tensor file not found") from None
    return decode_tensor(blob, str(path))


def save_checkpoint(params: ParamSet, directory: Union[str, Path]) -> Path:
    """Write every parameter as its own tensor file plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files: Dict[str, str] = {}
    for i, name in enumerate(params):
        file_name = f"param_{i:03d}.flt"
        write_tensor(directory / file_name, params[name])
        files[name] = file_name
    manifest = {"format": MAGIC.decode(), "tensors": files}
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info(f"Saved checkpoint with {len(files)} tensors to {directory}")
    return directory


def load_checkpoint(directory: Union[str, Path]) -> ParamSet:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise FormatError(f"{manifest_path}: checkpoint manifest not found") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: invalid JSON ({e})") from e
    if manifest.get("format") != MAGIC.decode() or not isinstance(manifest.get("tensors"), dict):
        raise FormatError(f"{manifest_path}: not an FLT1 checkpoint manifest")
    return ParamSet({name: read_tensor(directory / file_name) for name, file_name in manifest["tensors"].items()})
