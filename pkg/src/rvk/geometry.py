"""Pinhole camera geometry: projection, the box-size/distance relation,
closed-form velocity from two closest-point observations, and the
six-component geometric clue.

Camera frame: z along the optical axis, x to the right, y down.  Pixel
coordinates are continuous; pixel ``(i, j)`` of an image covers
``[j, j+1) x [i, i+1)`` so its centre sits at ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @classmethod
    def default(cls) -> "CameraIntrinsics":
        return cls(1000.0, 1000.0, 640.0, 360.0, 1280, 720)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class BoundingBox:
    l: float
    t: float
    r: float
    b: float

    def __post_init__(self):
        if not (self.l < self.r and self.t < self.b):
            raise ValueError(f"degenerate box (l={self.l}, t={self.t}, r={self.r}, b={self.b})")

    @property
    def width(self) -> float:
        return self.r - self.l

    @property
    def height(self) -> float:
        return self.b - self.t

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.l + self.r), 0.5 * (self.t + self.b))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.l, self.t, self.r, self.b)

    def scaled(self, k: float) -> "BoundingBox":
        return BoundingBox(self.l * k, self.t * k, self.r * k, self.b * k)

    def area(self) -> float:
        return self.width * self.height

    def intersection(self, other: "BoundingBox") -> float:
        w = min(self.r, other.r) - max(self.l, other.l)
        h = min(self.b, other.b) - max(self.t, other.t)
        return max(w, 0.0) * max(h, 0.0)

    def iou(self, other: "BoundingBox") -> float:
        inter = self.intersection(other)
        return inter / (self.area() + other.area() - inter)


@dataclass(frozen=True)
class VehicleTruth:
    """Oracle state of one vehicle at one instant.

    ``closest_point`` is the point of the vehicle's fronto-parallel tangent
    plane whose motion defines the relative velocity; ``extent_w`` and
    ``extent_h`` are the physical extents of that plane in metres.
    """

    distance: float
    velocity: tuple[float, float, float]
    closest_point: tuple[float, float, float]
    closest_pixel: tuple[float, float]
    extent_w: float
    extent_h: float


def project(cam: CameraIntrinsics, p) -> np.ndarray:
    x, y, z = (float(c) for c in p)
    if z <= 0:
        raise ValueError(f"point {tuple(p)} is behind the camera (z={z})")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def backproject(cam: CameraIntrinsics, pixel, depth: float) -> np.ndarray:
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = (float(c) for c in pixel)
    return np.array([depth * (u - cam.cx) / cam.fx, depth * (v - cam.cy) / cam.fy, float(depth)])


def distance_from_extent(f: float, physical_extent: float, pixel_extent: float) -> float:
    """Distance of a fronto-parallel extent from its focal length and pixel size."""
    if pixel_extent <= 0:
        raise ValueError(f"pixel extent must be positive, got {pixel_extent}")
    if f <= 0 or physical_extent <= 0:
        raise ValueError(f"focal length and physical extent must be positive, got {f}, {physical_extent}")
    return f * physical_extent / pixel_extent


def geometric_clue(cam: CameraIntrinsics, box: BoundingBox) -> np.ndarray:
    """[fx/w, fy/h, (l-cx)/fx, (t-cy)/fy, (r-cx)/fx, (b-cy)/fy] for the given box."""
    w, h = box.r - box.l, box.b - box.t
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate box {box}")
    return np.array([
        cam.fx / w,
        cam.fy / h,
        (box.l - cam.cx) / cam.fx,
        (box.t - cam.cy) / cam.fy,
        (box.r - cam.cx) / cam.fx,
        (box.b - cam.cy) / cam.fy,
    ])


def velocity_closed_form(cam: CameraIntrinsics, d: float, d_prev: float, pix, pix_prev,
                         dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return (backproject(cam, pix, d) - backproject(cam, pix_prev, d_prev)) / dt
