"""Evaluation protocol: range-grouped velocity MSE, position error, the
standard monocular depth metrics, and the original-vs-vehicle-centric flow
ablation.

Range groups: near d < 20 m, medium 20 <= d < 45 m, far d >= 45 m.  The
boundary distances attach to the upper group.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flow import endpoint_error, estimate_flow
from .geometry import BoundingBox, CameraIntrinsics
from .sampling import DEFAULT_DELTA, make_patch_pair, rescale_flow

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
GROUPS = ("near", "medium", "far")
GROUP_CONVENTION = "near: d<20; medium: 20<=d<45; far: d>=45 (boundaries join the upper group)"
POSITION_CONVENTION = "mean over vehicles of the mean squared (z, x) position error, m^2"
DEPTH_KEYS = ("abs_rel", "sq_rel", "rms", "rms_log", "delta1", "delta2", "delta3")


def range_group(d: float) -> str:
    if not d > 0:
        raise ValueError(f"distance must be positive, got {d}")
    if d < 20.0:
        return "near"
    if d < 45.0:
        return "medium"
    return "far"


def _per_vehicle_sq(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return ((pred - gt) ** 2).mean(axis=1)


def velocity_mse_report(pred_v, gt_v, gt_d, components=(2, 0)) -> dict:
    """Per-group and averaged velocity MSE.

    ``pred_v``/``gt_v`` are N x 3 (x, y, z) velocities.  Each vehicle's error
    is the mean squared error over ``components`` (default z and x, the
    two-component road-plane report); groups are averaged without weighting
    and empty groups are left out of the average.
    """
    pred_v = np.asarray(pred_v, dtype=np.float64).reshape(-1, 3)
    gt_v = np.asarray(gt_v, dtype=np.float64).reshape(-1, 3)
    gt_d = np.asarray(gt_d, dtype=np.float64).reshape(-1)
    if not (len(pred_v) == len(gt_v) == len(gt_d)):
        raise ValueError(f"length mismatch: {len(pred_v)} predictions, {len(gt_v)} truths, "
                         f"{len(gt_d)} distances")
    cols = list(components)
    err = _per_vehicle_sq(pred_v[:, cols], gt_v[:, cols]) if len(gt_d) else np.zeros(0)
    groups = np.array([range_group(d) for d in gt_d])
    out: dict = {"counts": {}, "warnings": []}
    vals = []
    for g in GROUPS:
        sel = groups == g
        out["counts"][g] = int(sel.sum())
        if sel.any():
            out[g] = float(err[sel].mean())
            vals.append(out[g])
        else:
            out[g] = None
            out["warnings"].append(f"range group '{g}' is empty; excluded from the average")
    out["average"] = float(np.mean(vals)) if vals else None
    for w in out["warnings"]:
        log.warning(w)
    return out


def position_report(d, boxes, cam: CameraIntrinsics, gt_pos=None) -> dict:
    """(z, x) positions from distances and box-centre columns, with optional MSE.

    ``gt_pos`` is N x 2 ground-truth (z, x).
    """
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    uc = np.array([0.5 * (b.l + b.r) if isinstance(b, BoundingBox) else 0.5 * (b[0] + b[2])
                   for b in boxes], dtype=np.float64).reshape(-1)
    pos = np.stack([d, d * (uc - cam.cx) / cam.fx], axis=1) if len(d) else np.zeros((0, 2))
    out = {"positions": pos}
    if gt_pos is not None:
        gt = np.asarray(gt_pos, dtype=np.float64).reshape(-1, 2)
        if len(gt) != len(pos):
            raise ValueError(f"length mismatch: {len(pos)} positions vs {len(gt)} truths")
        out["mse"] = float(_per_vehicle_sq(pos, gt).mean()) if len(gt) else None
    return out


def depth_metrics(pred, gt) -> dict:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    if len(p) != len(g):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(g)} truths")
    if len(p) == 0:
        raise ValueError("depth_metrics needs at least one pair")
    if (p <= 0).any() or (g <= 0).any():
        raise ValueError("depth metrics need strictly positive depths")
    ratio = np.maximum(p / g, g / p)
    return {
        "abs_rel": float(np.mean(np.abs(p - g) / g)),
        "sq_rel": float(np.mean((p - g) ** 2 / g)),
        "rms": float(np.sqrt(np.mean((p - g) ** 2))),
        "rms_log": float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        "delta1": float(np.mean(ratio < 1.25)),
        "delta2": float(np.mean(ratio < 1.25 ** 2)),
        "delta3": float(np.mean(ratio < 1.25 ** 3)),
    }


@dataclass
class MetricReport:
    velocity: dict
    velocity_3d: dict
    position_mse: float | None
    depth: dict
    n: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "group_convention": GROUP_CONVENTION,
            "position_convention": POSITION_CONVENTION,
            "n": self.n,
            "velocity_mse_zx": self.velocity,
            "velocity_mse_3d": self.velocity_3d,
            "position_mse": self.position_mse,
            "depth": self.depth,
            **self.extra,
        }

    def rows(self) -> list[tuple[str, str, object]]:
        rows = []
        for key, rep in (("velocity_mse_zx", self.velocity), ("velocity_mse_3d", self.velocity_3d)):
            for g in GROUPS + ("average",):
                rows.append((key, g, rep.get(g)))
            for g in GROUPS:
                rows.append((key, f"count_{g}", rep["counts"][g]))
        rows.append(("position_mse", "all", self.position_mse))
        for k in DEPTH_KEYS:
            rows.append(("depth", k, self.depth.get(k)))
        return rows


def build_report(pred_d, pred_v, gt_d, gt_v, boxes, cam: CameraIntrinsics,
                 gt_pos=None, extra: dict | None = None) -> MetricReport:
    vel = velocity_mse_report(pred_v, gt_v, gt_d)
    vel3 = velocity_mse_report(pred_v, gt_v, gt_d, components=(0, 1, 2))
    pos = position_report(np.maximum(np.asarray(pred_d, float), 1e-6), boxes, cam, gt_pos)
    dep = depth_metrics(np.maximum(np.asarray(pred_d, float), 1e-6), gt_d)
    return MetricReport(vel, vel3, pos.get("mse"), dep, len(np.atleast_1d(gt_d)), extra or {})


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def write_delimited(path, header: list[str], rows: list) -> None:
    """Aligned-column CSV: comma-separated, values padded per column."""
    table = [list(header)] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    with open(path, "w", newline="") as fh:
        for r in table:
            fh.write(", ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n")


def read_delimited(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh, skipinitialspace=True)
        rows = [[c.strip() for c in r] for r in reader]
    header, body = rows[0], rows[1:]
    return [dict(zip(header, r)) for r in body]


def write_report(report: MetricReport, stem, meta: dict | None = None) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    doc.update(meta or {})
    jpath = stem.with_suffix(".json")
    jpath.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    cpath = stem.with_suffix(".csv")
    write_delimited(cpath, ["section", "key", "value"], report.rows())
    return jpath, cpath


# ---------------------------------------------------------------------------
# vehicle-centric sampling ablation


def _box_pixels(box: BoundingBox, h: int, w: int):
    i0, i1 = max(int(np.ceil(box.t - 0.5)), 0), min(int(np.ceil(box.b - 0.5)), h)
    j0, j1 = max(int(np.ceil(box.l - 0.5)), 0), min(int(np.ceil(box.r - 0.5)), w)
    return i0, i1, j0, j1


def _sample_bilinear(field: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    h, w = field.shape[:2]
    y = np.clip(y, 0, h - 1.0)
    x = np.clip(x, 0, w - 1.0)
    y0 = np.floor(y).astype(np.intp)
    x0 = np.floor(x).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (y - y0)[..., None]
    wx = (x - x0)[..., None]
    top = field[y0, x0] * (1 - wx) + field[y0, x1] * wx
    bot = field[y1, x0] * (1 - wx) + field[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def centric_flow_in_box(frame_prev, frame_curr, box: BoundingBox, delta: float = DEFAULT_DELTA,
                        levels: int = 4, estimator=estimate_flow):
    """Vehicle-centric flow estimate, rescaled to original pixels, at the box's pixels."""
    h, w = frame_curr.shape
    template, current, spec = make_patch_pair(frame_prev, frame_curr, box, delta)
    pyr = estimator(template, current, levels)
    fl = rescale_flow(pyr.levels[0], spec)
    i0, i1, j0, j1 = _box_pixels(box, h, w)
    yy, xx = np.mgrid[i0:i1, j0:j1] + 0.5
    px, py = spec.image_to_patch(xx, yy)
    return _sample_bilinear(fl, py - 0.5, px - 0.5), spec


TIE_EPS = 1e-3


def ablation_report(pairs, delta: float = DEFAULT_DELTA, levels: int = 4,
                    estimator=estimate_flow) -> dict:
    """Endpoint error of full-frame versus vehicle-centric flow inside each box."""
    rows = []
    for si, pair in enumerate(pairs):
        if not pair.vehicles:
            continue
        h, w = pair.frame_curr.shape
        full = estimator(pair.frame_prev.astype(float), pair.frame_curr.astype(float),
                         levels).levels[0]
        for vi, v in enumerate(pair.vehicles):
            i0, i1, j0, j1 = _box_pixels(v.box, h, w)
            gt = pair.flow[i0:i1, j0:j1].astype(np.float64)
            epe_full = float(endpoint_error(full[i0:i1, j0:j1], gt).mean())
            cen, spec = centric_flow_in_box(pair.frame_prev, pair.frame_curr, v.box, delta,
                                            levels, estimator)
            epe_cen = float(endpoint_error(cen, gt).mean())
            if abs(epe_full - epe_cen) <= TIE_EPS:
                winner = "tie"
            else:
                winner = "centric" if epe_cen < epe_full else "full"
            rows.append({
                "scene": si, "vehicle": vi, "distance": v.truth.distance,
                "true_motion_px": float(np.sqrt((gt ** 2).sum(-1)).mean()),
                "scale_x": spec.scale_x, "scale_y": spec.scale_y,
                "magnification": 1.0 / max(spec.scale_x, spec.scale_y),
                "epe_full": epe_full, "epe_centric": epe_cen, "winner": winner,
            })
    decided = [r for r in rows if r["winner"] != "tie"]
    summary = {
        "vehicles": len(rows),
        "mean_epe_full": float(np.mean([r["epe_full"] for r in rows])) if rows else None,
        "mean_epe_centric": float(np.mean([r["epe_centric"] for r in rows])) if rows else None,
        "ties": len(rows) - len(decided),
        "win_rate_centric": (float(np.mean([r["winner"] == "centric" for r in decided]))
                             if decided else "tie"),
    }
    if rows and summary["mean_epe_full"] > 0:
        summary["epe_reduction"] = 1.0 - summary["mean_epe_centric"] / summary["mean_epe_full"]
    else:
        summary["epe_reduction"] = None
    return {"schema_version": REPORT_SCHEMA_VERSION, "rows": rows, "summary": summary}


ABLATION_COLUMNS = ["scene", "vehicle", "distance", "true_motion_px", "scale_x", "scale_y",
                    "magnification", "epe_full", "epe_centric", "winner"]


def write_ablation(result: dict, stem, meta: dict | None = None) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    doc = dict(result)
    doc.update(meta or {})
    jpath = stem.with_suffix(".json")
    jpath.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    cpath = stem.with_suffix(".csv")
    write_delimited(cpath, ABLATION_COLUMNS,
                    [[r[c] for c in ABLATION_COLUMNS] for r in result["rows"]])
    return jpath, cpath


def isfinite_report(report: MetricReport) -> bool:
    vals = [v for _, _, v in report.rows() if isinstance(v, float)]
    return all(math.isfinite(v) for v in vals)
