"""PNG (8-bit, viewing) and PFM (32-bit float, little-endian) image I/O."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .geometry import ImageGrid


def write_png(path, grid: ImageGrid | np.ndarray) -> None:
    """Write a [0, 1] image (H, W, C) with C in {1, 3} as 8-bit PNG."""
    arr = grid.array if isinstance(grid, ImageGrid) else np.asarray(arr_or(grid))
    arr = np.clip(arr, 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if u8.shape[2] == 1:
        Image.fromarray(u8[:, :, 0], mode="L").save(path)
    elif u8.shape[2] == 3:
        Image.fromarray(u8, mode="RGB").save(path)
    else:
        raise ValueError(f"png: unsupported channel count {u8.shape[2]}")


def arr_or(a):
    a = np.asarray(a, dtype=np.float32)
    if a.ndim == 2:
        a = a[:, :, None]
    return a


def read_png(path) -> ImageGrid:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return ImageGrid(arr)


def write_pfm(path, grid: ImageGrid | np.ndarray) -> None:
    """Write float32 data as PFM (little-endian, bottom-up row order)."""
    arr = grid.array if isinstance(grid, ImageGrid) else arr_or(grid)
    c = arr.shape[2]
    if c == 1:
        header, data = b"Pf", arr[:, :, 0]
    elif c == 3:
        header, data = b"PF", arr
    else:
        raise ValueError(f"pfm: unsupported channel count {c}")
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode())
        f.write(b"-1.0\n")  # negative scale: little-endian
        f.write(np.ascontiguousarray(data[::-1].astype("<f4")).tobytes())


def read_pfm(path) -> ImageGrid:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"pfm: bad magic {header!r}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * (3 if header == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype=dtype, count=count)
    shape = (h, w, 3) if header == b"PF" else (h, w, 1)
    return ImageGrid(data.reshape(shape)[::-1].astype(np.float32))
