"""Dense rasters and pixel-pair adjacency.

Rasters are plain float64 numpy arrays shaped ``(H, W)`` for single-channel
maps or ``(H, W, C)`` for multi-channel ones. Pixel indices are row-major,
``index = y * W + x``.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

DBR_MAGIC = b"DBR1"

# Half of the 8-neighbourhood; the other half is covered by symmetry.
_HALF_OFFSETS = ((0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class EdgeGraph:
    """Undirected 8-connected pixel pairs at a fixed dilation.

    ``a`` and ``b`` are int64 arrays of flat pixel indices with ``a < b``,
    sorted lexicographically by ``(a, b)``.
    """

    height: int
    width: int
    dilation: int
    a: np.ndarray
    b: np.ndarray

    def __len__(self):
        return len(self.a)

    @property
    def n_pixels(self):
        return self.height * self.width

    def pairs(self):
        return list(zip(self.a.tolist(), self.b.tolist()))


def neighbor_edges(height, width, dilation=2):
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    height, width = int(height), int(width)
    if height <= 0 or width <= 0:
        empty = np.zeros(0, dtype=np.int64)
        return EdgeGraph(max(height, 0), max(width, 0), dilation, empty, empty)

    ys, xs = np.mgrid[0:height, 0:width]
    ys = ys.ravel()
    xs = xs.ravel()
    src, dst = [], []
    for dy, dx in _HALF_OFFSETS:
        ny = ys + dy * dilation
        nx = xs + dx * dilation
        ok = (ny >= 0) & (ny < height) & (nx >= 0) & (nx < width)
        src.append(ys[ok] * width + xs[ok])
        dst.append(ny[ok] * width + nx[ok])
    a = np.concatenate(src).astype(np.int64)
    b = np.concatenate(dst).astype(np.int64)
    # every half-offset points forward in row-major order, so a < b already
    order = np.lexsort((b, a))
    return EdgeGraph(height, width, dilation, a[order], b[order])


def resize_bilinear(raster, new_height, new_width):
    """Bilinear resize with aligned corners.

    Corner pixels map onto corner pixels, so a 2x1 ``[0, 1]`` column
    becomes ``[0, 0.5, 1]`` at 3x1. Output stays inside the input's range.
    """
    raster = np.asarray(raster, dtype=np.float64)
    h, w = raster.shape[:2]
    if min(h, w, new_height, new_width) < 1:
        raise ValueError("resize_bilinear needs dimensions >= 1")
    if (h, w) == (new_height, new_width):
        return raster.copy()

    def axis_weights(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        return lo, hi, frac

    y0, y1, fy = axis_weights(h, new_height)
    x0, x1, fx = axis_weights(w, new_width)
    extra = (1,) * (raster.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = raster[y0][:, x0] * (1 - fx) + raster[y0][:, x1] * fx
    bottom = raster[y1][:, x0] * (1 - fx) + raster[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    lo, hi = raster.min(), raster.max()
    return np.clip(out, lo, hi)


def resize_nearest(raster, new_height, new_width):
    raster = np.asarray(raster)
    h, w = raster.shape[:2]
    ys = np.minimum((np.arange(new_height) + 0.5) * h / new_height, h - 1).astype(np.int64)
    xs = np.minimum((np.arange(new_width) + 0.5) * w / new_width, w - 1).astype(np.int64)
    return raster[ys][:, xs].copy()


def write_dbr(path, raster):
    """Write a raster in the little-endian DBR1 format.

    Layout: ``b"DBR1"``, then height, width, channels as int32, then
    ``height * width * channels`` float64 values in row-major order.
    """
    raster = np.asarray(raster, dtype="<f8")
    channels = 1 if raster.ndim == 2 else raster.shape[2]
    header = DBR_MAGIC + struct.pack("<iii", raster.shape[0], raster.shape[1], channels)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(raster).tobytes())


def read_dbr(path):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != DBR_MAGIC:
        raise ValueError(f"{path}: not a DBR1 raster")
    h, w, c = struct.unpack("<iii", data[4:16])
    expected = 16 + h * w * c * 8
    if h < 0 or w < 0 or c < 1 or len(data) != expected:
        raise ValueError(f"{path}: truncated or inconsistent DBR1 payload")
    arr = np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64)
    return arr.reshape((h, w)) if c == 1 else arr.reshape((h, w, c))


def to_uint8(raster):
    return np.round(np.clip(np.asarray(raster, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, raster):
    Image.fromarray(to_uint8(raster)).save(path, format="PNG")


def read_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    return arr.astype(np.float64) / 255.0
