"""Vehicle-centric sampling: crop expansion around a detection, bilinear
resampling to the fixed network patch, and conversion of patch-space flow
back to original-image pixels.

Crop rectangles use continuous pixel-edge coordinates (pixel ``k`` spans
``[k, k+1)``).  Patch pixel ``(i, j)`` samples source index
``(crop.t + (i + 0.5) * scale_y - 0.5, crop.l + (j + 0.5) * scale_x - 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BoundingBox

DEFAULT_DELTA = 8.0
PATCH_W = 448
PATCH_H = 384


@dataclass(frozen=True)
class CropSpec:
    crop: BoundingBox
    target_w: int = PATCH_W
    target_h: int = PATCH_H

    @property
    def scale_x(self) -> float:
        return (self.crop.r - self.crop.l) / self.target_w

    @property
    def scale_y(self) -> float:
        return (self.crop.b - self.crop.t) / self.target_h

    def to_patch(self, box: BoundingBox) -> BoundingBox:
        """Map an original-image rectangle into continuous patch coordinates."""
        c = self.crop
        return BoundingBox((box.l - c.l) / self.scale_x, (box.t - c.t) / self.scale_y,
                           (box.r - c.l) / self.scale_x, (box.b - c.t) / self.scale_y)

    def patch_to_image(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous patch coordinates to continuous image coordinates."""
        return self.crop.l + x * self.scale_x, self.crop.t + y * self.scale_y

    def image_to_patch(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (x - self.crop.l) / self.scale_x, (y - self.crop.t) / self.scale_y


def expand_crop(box: BoundingBox, delta: float, image_w: int, image_h: int,
                target_w: int = PATCH_W, target_h: int = PATCH_H) -> CropSpec:
    """Double the box about its centre, pad by ``delta`` per side, clamp to the image."""
    dw = 0.5 * (box.r - box.l) + delta
    dh = 0.5 * (box.b - box.t) + delta
    crop = BoundingBox(max(box.l - dw, 0.0), max(box.t - dh, 0.0),
                       min(box.r + dw, float(image_w)), min(box.b + dh, float(image_h)))
    return CropSpec(crop, target_w, target_h)


def _axis_weights(start: float, scale: float, n_out: int, n_in: int):
    src = start + (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resample_patch(image: np.ndarray, spec: CropSpec) -> np.ndarray:
    """Bilinear, edge-clamped resampling of ``spec.crop`` to target size (float64).

    Works for HxW images and HxWxC fields alike.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    y0, y1, wy = _axis_weights(spec.crop.t, spec.scale_y, spec.target_h, h)
    x0, x1, wx = _axis_weights(spec.crop.l, spec.scale_x, spec.target_w, w)
    extra = (None,) * (img.ndim - 2)
    wy = wy[(slice(None), None) + extra]
    wx = wx[(None, slice(None)) + extra]
    top = img[y0][:, x0] * (1.0 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1.0 - wx) + img[y1][:, x1] * wx
    return top * (1.0 - wy) + bot * wy


def rescale_flow(flow_patch: np.ndarray, spec: CropSpec) -> np.ndarray:
    """Patch-pixel flow values to original-image pixels; the grid is left in patch space."""
    fl = np.asarray(flow_patch, dtype=np.float64)
    if fl.shape[:2] != (spec.target_h, spec.target_w) or fl.shape[-1] != 2:
        raise ValueError(f"flow patch shape {fl.shape} does not match "
                         f"({spec.target_h}, {spec.target_w}, 2)")
    out = fl.copy()
    out[..., 0] *= spec.scale_x
    out[..., 1] *= spec.scale_y
    return out


def make_patch_pair(frame_prev: np.ndarray, frame_curr: np.ndarray, box: BoundingBox,
                    delta: float = DEFAULT_DELTA, target_w: int = PATCH_W,
                    target_h: int = PATCH_H):
    """Template (previous frame) and current patches cut with the same current-box crop."""
    if frame_prev.shape != frame_curr.shape:
        raise ValueError(f"frame shapes differ: {frame_prev.shape} vs {frame_curr.shape}")
    h, w = frame_curr.shape[:2]
    spec = expand_crop(box, delta, w, h, target_w, target_h)
    return resample_patch(frame_prev, spec), resample_patch(frame_curr, spec), spec
