"""Per-instance input features for the mask head."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

LUMA = (0.299, 0.587, 0.114)
N_BASE = 8
N_INPUT = N_BASE + 2


@dataclass(frozen=True)
class FeatureStack:
    base: np.ndarray  # (H, W, 8)
    rel_coords: np.ndarray  # (H, W, 2), (dx, dy)
    anchor: tuple  # (x, y)

    def channels_first(self):
        """The ten input channels flattened to ``(10, H*W)``."""
        h, w = self.base.shape[:2]
        stacked = np.concatenate([self.base, self.rel_coords], axis=2)
        return np.ascontiguousarray(stacked.reshape(h * w, N_INPUT).T)


def build_base_features(image):
    """Fixed 8-channel basis: RGB, luminance, |d/dx|, |d/dy|, 3x3 blur, local contrast."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    lum = image @ np.array(LUMA)
    padded = np.pad(lum, 1, mode="edge")
    gx = np.abs(padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = np.abs(padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    blur = ndimage.uniform_filter(lum, size=3, mode="nearest")
    contrast = lum - blur
    return np.stack([image[..., 0], image[..., 1], image[..., 2], lum, gx, gy, blur, contrast], axis=2)


def rel_coords(height, width, anchor):
    ax, ay = anchor
    if not (0 <= ax < width and 0 <= ay < height):
        raise ValueError(f"anchor {anchor} outside {width}x{height} raster")
    half_diag = np.hypot(height, width) / 2.0
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    dx = np.clip((xs - ax) / half_diag, -1.0, 1.0)
    dy = np.clip((ys - ay) / half_diag, -1.0, 1.0)
    return np.stack([dx, dy], axis=2)


def attach_rel_coords(base, anchor):
    h, w = base.shape[:2]
    anchor = (int(anchor[0]), int(anchor[1]))
    return FeatureStack(base=base, rel_coords=rel_coords(h, w, anchor), anchor=anchor)


def box_anchor(box):
    """Integer centre pixel of a half-open box."""
    x0, y0, x1, y1 = (int(v) for v in box)
    return ((x0 + x1 - 1) // 2, (y0 + y1 - 1) // 2)
