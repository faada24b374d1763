"""Image files: 8-bit PNG (via Pillow) and the lossless ``rgbf32`` format.

``rgbf32`` layout: the 8-byte magic ``b"RGBF32\\0\\0"``, width and height as
little-endian uint32, then three float32 planes (R, G, B), each H x W in
row-major order, little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

RGBF32_MAGIC = b"RGBF32\x00\x00"


class ImageFormatError(ValueError):
    pass


def write_rgbf32(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected an (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    planes = np.ascontiguousarray(np.transpose(img, (2, 0, 1)), dtype="<f4")
    Path(path).write_bytes(RGBF32_MAGIC + struct.pack("<II", w, h) + planes.tobytes())


def read_rgbf32(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(RGBF32_MAGIC) or len(blob) < 16:
        raise ImageFormatError(f"{path}: not an rgbf32 file")
    w, h = struct.unpack_from("<II", blob, 8)
    if len(blob) != 16 + 12 * w * h:
        raise ImageFormatError(f"{path}: size does not match {w}x{h}")
    planes = np.frombuffer(blob, dtype="<f4", offset=16).reshape(3, h, w)
    return np.transpose(planes, (1, 2, 0)).astype(np.float32)


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".png":
        return read_png(path)
    return read_rgbf32(path)
