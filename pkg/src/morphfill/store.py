"""Binary tensor container and PNG image I/O.

Container layout (all integers little-endian):

    magic "AF3D" | version u32 | entry_count u32
    per entry:
        name_len u32 | name utf-8 | dtype u8 | ndim u32 | shape u64*ndim |
        data_len u64 | crc32 u32 | raw bytes

Round trips are bit-exact, including entry order. The per-entry CRC32 turns
silent corruption into a hard read error.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "ContainerError", "TensorContainer", "write_container", "read_container",
    "ImageError", "load_image", "save_image",
]

MAGIC = b"AF3D"
VERSION = 1

_DTYPE_CODES = {"f32": 0, "f64": 1, "u8": 2, "i64": 3}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_NUMPY_CODES = {
    np.dtype("float32"): 0,
    np.dtype("float64"): 1,
    np.dtype("uint8"): 2,
    np.dtype("int64"): 3,
}


class ContainerError(Exception):
    """Malformed, truncated, or corrupted container file."""


@dataclass
class TensorContainer:
    version: int
    entries: list[tuple[str, np.ndarray]]

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.entries)

    def __getitem__(self, name: str) -> np.ndarray:
        for n, arr in self.entries:
            if n == name:
                return arr
        raise KeyError(name)


def write_container(path, entries) -> None:
    """Write named arrays to ``path``; ``entries`` is an ordered name->array mapping
    or a sequence of (name, array) pairs."""
    if hasattr(entries, "items"):
        entries = list(entries.items())
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise ContainerError("duplicate entry name")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr)
        if arr.dtype not in _NUMPY_CODES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for entry '{name}'")
        code = _NUMPY_CODES[arr.dtype]
        raw = np.ascontiguousarray(arr).astype(_CODE_DTYPES[code], copy=False).tobytes()
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BI", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<QI", len(raw), zlib.crc32(raw) & 0xFFFFFFFF))
        chunks.append(raw)
    Path(path).write_bytes(b"".join(chunks))


def read_container(path) -> TensorContainer:
    buf = Path(path).read_bytes()
    view = memoryview(buf)
    pos = 0

    def pull(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(buf):
            raise ContainerError(f"truncated container: need {n} bytes at offset {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(pull(4)) != MAGIC:
        raise ContainerError("bad magic: not a tensor container")
    version, count = struct.unpack("<II", pull(8))
    if version != VERSION:
        raise ContainerError(f"version mismatch: file={version}, supported={VERSION}")
    entries: list[tuple[str, np.ndarray]] = []
    seen: set[str] = set()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", pull(4))
        name = bytes(pull(name_len)).decode("utf-8")
        if name in seen:
            raise ContainerError(f"duplicate entry name '{name}'")
        seen.add(name)
        code, ndim = struct.unpack("<BI", pull(5))
        if code not in _CODE_DTYPES:
            raise ContainerError(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", pull(8 * ndim))
        data_len, crc = struct.unpack("<QI", pull(12))
        dtype = _CODE_DTYPES[code]
        expect = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if ndim == 0:
            expect = dtype.itemsize
        if data_len != expect:
            raise ContainerError(f"entry '{name}': byte length {data_len} != shape requires {expect}")
        raw = bytes(pull(data_len))
        if (zlib.crc32(raw) & 0xFFFFFFFF) != crc:
            raise ContainerError(f"entry '{name}': checksum mismatch")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        entries.append((name, arr))
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes after last entry")
    return TensorContainer(version=version, entries=entries)


# -- PNG image I/O -------------------------------------------------------------


class ImageError(Exception):
    """Unsupported or undecodable image file."""


def _png_header_info(path) -> tuple[int, int]:
    """(bit_depth, color_type) from the PNG IHDR, before any decoding."""
    with open(path, "rb") as fh:
        head = fh.read(26)
    if len(head) < 26 or head[:8] != b"\x89PNG\r\n\x1a\n":
        raise ImageError(f"{path}: not a PNG file")
    if head[12:16] != b"IHDR":
        raise ImageError(f"{path}: missing IHDR chunk")
    return head[24], head[25]


def load_image(path) -> np.ndarray:
    """Load an 8-bit RGB/RGBA PNG as float32 in [0, 1], shape (H, W, C)."""
    depth, color_type = _png_header_info(path)
    if depth != 8:
        raise ImageError(f"{path}: unsupported bit depth {depth} (only 8-bit)")
    if color_type not in (2, 6):
        raise ImageError(f"{path}: unsupported color type {color_type} (RGB/RGBA only)")
    try:
        with Image.open(path) as img:
            arr = np.asarray(img, dtype=np.uint8)
    except Exception as exc:  # noqa: BLE001 - decode failures become ImageError
        raise ImageError(f"{path}: decode failure: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def save_image(path, buf: np.ndarray) -> None:
    """Save a float array in [0, 1] (H, W, 3|4) or (H, W) as an 8-bit PNG."""
    arr = np.asarray(buf)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ImageError(f"save_image expects (H, W, 3|4) floats, got {arr.shape}")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    mode = "RGB" if data.shape[2] == 3 else "RGBA"
    Image.fromarray(data, mode=mode).save(path, format="PNG")
