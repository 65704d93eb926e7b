"""Flow clue sources: simulator ground truth brought into patch space, and a
classical coarse-to-fine block matcher.  Both produce a :class:`FlowPyramid`
whose level ``k`` is 2**k times coarser than the patch, with values in that
level's own pixel units.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .formats import write_flo
from .sampling import CropSpec, resample_patch

DEFAULT_LEVELS = 4
WINDOW = 9
RADIUS = 4


@dataclass
class FlowPyramid:
    levels: list[np.ndarray]   # level k: ceil(H/2^k) x ceil(W/2^k) x 2
    confident: bool = True

    def __len__(self) -> int:
        return len(self.levels)

    def dump(self, directory, stem: str = "flow") -> list[Path]:
        """Write each level as ``<stem>_l<k>.flo`` (debugging aid)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for k, lv in enumerate(self.levels):
            p = d / f"{stem}_l{k}.flo"
            write_flo(p, lv)
            paths.append(p)
        return paths


def downsample2(a: np.ndarray) -> np.ndarray:
    """2x2 average pooling; odd sizes are edge-padded so the result is ceil(n/2)."""
    h, w = a.shape[:2]
    pad = [(0, h % 2), (0, w % 2)] + [(0, 0)] * (a.ndim - 2)
    if h % 2 or w % 2:
        a = np.pad(a, pad, mode="edge")
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def build_pyramid(field: np.ndarray, levels: int = DEFAULT_LEVELS,
                  is_flow: bool = True) -> list[np.ndarray]:
    """Average-pool pyramid; flow values are halved per level to stay level-local."""
    if levels < 1:
        raise ValueError(f"pyramid needs at least one level, got {levels}")
    a = np.asarray(field, dtype=np.float64)
    if 2 ** (levels - 1) > min(a.shape[:2]):
        raise ValueError(f"{levels} levels too many for spatial size {a.shape[:2]}")
    out = [a]
    for _ in range(levels - 1):
        a = downsample2(a)
        if is_flow:
            a = 0.5 * a
        out.append(a)
    return out


def oracle_flow_pyramid(gt_flow: np.ndarray, spec: CropSpec,
                        levels: int = DEFAULT_LEVELS) -> FlowPyramid:
    """Ground-truth flow resampled into the patch and expressed in patch pixels."""
    fl = resample_patch(gt_flow, spec)
    fl[..., 0] /= spec.scale_x
    fl[..., 1] /= spec.scale_y
    return FlowPyramid(build_pyramid(fl, levels, is_flow=True))


def _offsets(radius: int) -> list[tuple[int, int]]:
    # (0, 0) first so that ties in flat regions resolve to no motion
    offs = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return sorted(offs, key=lambda o: (abs(o[0]) + abs(o[1]), o))


def _parabola(cm: np.ndarray, c0: np.ndarray, cp: np.ndarray) -> np.ndarray:
    denom = cm - 2.0 * c0 + cp
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(denom > 1e-12, 0.5 * (cm - cp) / denom, 0.0)
    off = np.where(c0 <= 1e-12, 0.0, off)
    return np.clip(off, -0.5, 0.5)


def match_level(template: np.ndarray, current: np.ndarray, init: np.ndarray,
                window: int = WINDOW, radius: int = RADIUS) -> np.ndarray:
    """Refine ``init`` (HxWx2) by SAD block matching plus per-axis parabolic fit.

    Flow is defined at current-frame pixels: ``current(x) ~ template(x - flow(x))``.
    """
    h, w = current.shape
    base = np.rint(init).astype(np.intp)
    offs = _offsets(radius)
    table = np.empty((2 * radius + 1, 2 * radius + 1), dtype=np.intp)
    for k, (dy, dx) in enumerate(offs):
        table[dy + radius, dx + radius] = k
    cost = np.empty((len(offs), h, w))
    # Every window is matched under one rigid displacement, so pixels are
    # grouped by their integer base.  The largest group fills whole cost
    # maps; the others recompute inside their bounding box (plus half a
    # window) and overwrite only their own pixels.
    lo_x, lo_y = int(base[..., 0].min()), int(base[..., 1].min())
    span_x = int(base[..., 0].max()) - lo_x + 1
    code = (base[..., 1] - lo_y) * span_x + (base[..., 0] - lo_x)
    counts = np.bincount(code.ravel())
    half = window // 2
    margin = int(np.abs(base).max()) + radius
    tpad = np.pad(template, margin, mode="edge")   # edge padding == clamped indexing
    groups = np.nonzero(counts)[0]
    for rank, g in enumerate(groups[np.argsort(-counts[groups], kind="stable")]):
        by, bx = divmod(int(g), span_x)
        by, bx = by + lo_y, bx + lo_x
        if rank == 0:
            r0, r1, c0, c1, mask = 0, h, 0, w, None
        else:
            ys, xs = np.nonzero(code == g)
            r0, r1 = max(ys.min() - half, 0), min(ys.max() + half + 1, h)
            c0, c1 = max(xs.min() - half, 0), min(xs.max() + half + 1, w)
            mask = code[r0:r1, c0:c1] == g
        cur = current[r0:r1, c0:c1]
        for k, (dy, dx) in enumerate(offs):
            oy, ox = margin - by - dy, margin - bx - dx
            shifted = tpad[r0 + oy:r1 + oy, c0 + ox:c1 + ox]
            c = uniform_filter(np.abs(cur - shifted), size=window, mode="nearest")
            if mask is None:
                cost[k] = c
            else:
                cost[k, r0:r1, c0:c1][mask] = c[mask]
    best = np.argmin(cost, axis=0)
    by = np.array([o[0] for o in offs])[best]
    bx = np.array([o[1] for o in offs])[best]
    c0 = np.take_along_axis(cost, best[None], 0)[0]

    def neighbour(ddy, ddx):
        ny, nx = by + ddy, bx + ddx
        ok = (np.abs(ny) <= radius) & (np.abs(nx) <= radius)
        k = table[np.clip(ny, -radius, radius) + radius, np.clip(nx, -radius, radius) + radius]
        return np.where(ok, np.take_along_axis(cost, k[None], 0)[0], np.nan)

    sub_x = _parabola(neighbour(0, -1), c0, neighbour(0, 1))
    sub_y = _parabola(neighbour(-1, 0), c0, neighbour(1, 0))
    sub_x = np.nan_to_num(sub_x)
    sub_y = np.nan_to_num(sub_y)
    return np.stack([base[..., 0] + bx + sub_x, base[..., 1] + by + sub_y], axis=-1)


def _upsample2(flow: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    up = np.repeat(np.repeat(flow, 2, axis=0), 2, axis=1)[:shape[0], :shape[1]]
    return 2.0 * up


def estimate_flow(template: np.ndarray, current: np.ndarray, levels: int = DEFAULT_LEVELS,
                  window: int = WINDOW, radius: int = RADIUS) -> FlowPyramid:
    """Coarse-to-fine block matching between two equally sized images."""
    template = np.asarray(template, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    if template.shape != current.shape:
        raise ValueError(f"patch shapes differ: {template.shape} vs {current.shape}")
    tp = build_pyramid(template, levels, is_flow=False)
    cp = build_pyramid(current, levels, is_flow=False)
    if template.std() < 1e-9 or current.std() < 1e-9:
        return FlowPyramid([np.zeros(lv.shape + (2,)) for lv in cp], confident=False)
    flows: list[np.ndarray] = [None] * levels
    init = np.zeros(cp[-1].shape + (2,))
    for k in range(levels - 1, -1, -1):
        if k < levels - 1:
            init = _upsample2(flows[k + 1], cp[k].shape)
        flows[k] = match_level(tp[k], cp[k], init, window, radius)
    return FlowPyramid(flows)


def endpoint_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((np.asarray(a) - np.asarray(b)) ** 2).sum(axis=-1))
