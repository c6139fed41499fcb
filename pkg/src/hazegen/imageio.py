"""Image containers and on-disk formats.

Images are plain numpy arrays: ``(H, W, 3)`` for colour, ``(H, W)`` for scalar
maps, values in ``[0, 1]``. Two file formats are supported:

* 8-bit PNG, quantised as ``floor(v * 255 + 0.5)``.
* raw float grids (``.f32``): an 8-byte header of two little-endian ``u32``
  (height, width) followed by little-endian float32 payload. The channel
  count is inferred from the payload length.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from hazegen.errors import DataError

RAW_SUFFIX = ".f32"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", RAW_SUFFIX)

_HEADER = struct.Struct("<II")


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise DataError(f"{name}: expected (H, W) or (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name}: non-finite values")
    return arr


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    check_image(img)
    PILImage.fromarray(to_uint8(img)).save(Path(path), format="PNG")


def read_png(path) -> np.ndarray:
    with PILImage.open(Path(path)) as im:
        mode = "L" if im.mode in ("L", "I", "I;16", "1") else "RGB"
        arr = np.asarray(im.convert(mode), dtype=np.float32)
    return arr / np.float32(255.0)


def encode_raw(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim not in (2, 3):
        raise DataError(f"raw grids must be 2-D or 3-D, got shape {arr.shape}")
    h, w = arr.shape[:2]
    return _HEADER.pack(h, w) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_raw(buf: bytes, source: str = "<buffer>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise DataError(f"{source}: truncated raw header")
    h, w = _HEADER.unpack_from(buf)
    payload = len(buf) - _HEADER.size
    if h == 0 or w == 0 or payload % (4 * h * w):
        raise DataError(f"{source}: payload of {payload} bytes does not fit {h}x{w}")
    channels = payload // (4 * h * w)
    arr = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    return arr.reshape((h, w) if channels == 1 else (h, w, channels))


def write_raw(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_raw(arr))


def read_raw(path) -> np.ndarray:
    path = Path(path)
    return decode_raw(path.read_bytes(), str(path))


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    if path.suffix.lower() == RAW_SUFFIX:
        return read_raw(path)
    try:
        return read_png(path)
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def write_image(path, arr: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == RAW_SUFFIX:
        write_raw(path, arr)
    else:
        write_png(path, arr)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (no corner alignment)."""
    arr = np.asarray(arr)
    if arr.shape[:2] == (height, width):
        return arr.copy()
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))
    t = t[None, None] if arr.ndim == 2 else t.permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)[0]
    out = out[0] if arr.ndim == 2 else out.permute(1, 2, 0)
    return out.numpy().astype(arr.dtype, copy=False)
