"""Reading and writing rasters, masks and PMAP probability maps.

PMAP layout: 16-byte header -- magic ``b"PMAP"``, then little-endian u32
width, u32 height, u32 reserved (0) -- followed by ``width * height``
little-endian float32 values in row-major order.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .raster import RasterError, as_labels, as_probmap, as_raster

PMAP_MAGIC = b"PMAP"
PMAP_HEADER = struct.Struct("<4sIII")

# Gigapixel levels are legitimate input here.
Image.MAX_IMAGE_PIXELS = None


class PmapFormatError(RasterError):
    """Malformed PMAP payload."""


def read_image(path) -> np.ndarray:
    """Decode a PNG/TIFF into a uint8 array (RGB or single channel)."""
    with Image.open(path) as im:
        if im.mode in ("RGBA", "P", "CMYK", "YCbCr", "LA"):
            im = im.convert("RGB")
        elif im.mode == "1":
            im = im.convert("L")
        elif im.mode not in ("RGB", "L"):
            raise RasterError(f"unsupported image mode {im.mode} in {path}")
        return as_raster(np.asarray(im))


def write_image(path, r: np.ndarray) -> None:
    r = as_raster(r)
    if r.ndim == 3 and r.shape[2] == 1:
        r = r[..., 0]
    Image.fromarray(r).save(path)


def write_mask(path, m: np.ndarray) -> None:
    """Write a boolean mask as a 1-bit PNG."""
    m = np.asarray(m, dtype=bool)
    if m.ndim != 2:
        raise RasterError("mask must be 2-D")
    Image.fromarray(m).convert("1").save(path)


def read_mask(path) -> np.ndarray:
    """Read a binary mask. Label images are reduced to their TUMOR indicator."""
    with Image.open(path) as im:
        mode = im.mode
        a = np.asarray(im.convert("L") if mode not in ("1", "L") else im)
    if mode == "1":
        return a.astype(bool)
    if a.ndim == 3:
        a = a[..., 0]
    if a.max(initial=0) <= 2:
        return as_labels(a) == 2
    return a > 127


def read_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im)
    if a.ndim == 3:
        a = a[..., 0]
    return as_labels(a)


def write_labels(path, labels: np.ndarray) -> None:
    Image.fromarray(as_labels(labels)).save(path)


def pmap_header(width: int, height: int) -> bytes:
    return PMAP_HEADER.pack(PMAP_MAGIC, width, height, 0)


def write_pmap(path, m: np.ndarray) -> None:
    m = as_probmap(m)
    with open(path, "wb") as f:
        f.write(pmap_header(m.shape[1], m.shape[0]))
        f.write(m.astype("<f4", copy=False).tobytes())


def decode_pmap(buf: bytes) -> np.ndarray:
    if len(buf) < PMAP_HEADER.size:
        raise PmapFormatError("PMAP payload shorter than its header")
    magic, w, h, _ = PMAP_HEADER.unpack_from(buf)
    if magic != PMAP_MAGIC:
        raise PmapFormatError(f"bad PMAP magic {magic!r}")
    if len(buf) != PMAP_HEADER.size + 4 * w * h:
        raise PmapFormatError(f"PMAP body size mismatch for {w}x{h}")
    data = np.frombuffer(buf, dtype="<f4", offset=PMAP_HEADER.size).reshape(h, w)
    return data.astype(np.float32)


def read_pmap(path, mmap=False) -> np.ndarray:
    """Load a PMAP. ``mmap=True`` maps the body read-only without copying or validation."""
    if not mmap:
        return decode_pmap(Path(path).read_bytes())
    with open(path, "rb") as f:
        head = f.read(PMAP_HEADER.size)
    if len(head) < PMAP_HEADER.size:
        raise PmapFormatError("PMAP payload shorter than its header")
    magic, w, h, _ = PMAP_HEADER.unpack(head)
    if magic != PMAP_MAGIC:
        raise PmapFormatError(f"bad PMAP magic {magic!r}")
    return np.memmap(path, dtype="<f4", mode="r", offset=PMAP_HEADER.size, shape=(h, w))


class PmapWriter:
    """Streams a PMAP to disk stripe by stripe, hashing as it goes."""

    def __init__(self, path, width: int, height: int):
        self.path = Path(path)
        self.width, self.height = width, height
        self.rows = 0
        self._sha = hashlib.sha256()
        self._f = open(self.path, "wb")
        self._put(pmap_header(width, height))

    def _put(self, b: bytes):
        self._f.write(b)
        self._sha.update(b)

    def write(self, stripe: np.ndarray) -> None:
        stripe = as_probmap(stripe)
        if stripe.shape[1] != self.width or self.rows + stripe.shape[0] > self.height:
            raise RasterError("stripe does not fit the declared PMAP geometry")
        self._put(np.ascontiguousarray(stripe, dtype="<f4").data)
        self.rows += stripe.shape[0]

    def close(self) -> str:
        """Finish the file and return its sha256 hex digest."""
        self._f.close()
        if self.rows != self.height:
            raise RasterError(f"PMAP incomplete: {self.rows}/{self.height} rows written")
        return self._sha.hexdigest()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *_):
        if exc_type is None:
            self.close()
        else:
            self._f.close()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
