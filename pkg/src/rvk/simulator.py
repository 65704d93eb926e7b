"""Synthetic two-frame scenes with exact ground truth.

Each vehicle is a textured fronto-parallel rectangle (its tangent plane)
translating rigidly in front of a static camera.  Because every visible
surface is planar and parallel to the image plane, boxes, distances,
velocities and the dense flow field all follow in closed form from the
pinhole model, which makes the generator an oracle for the rest of the
package.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .formats import FormatError, read_flo, read_pgm, write_flo, write_pgm
from .geometry import BoundingBox, CameraIntrinsics, VehicleTruth, project

log = logging.getLogger(__name__)

DATASET_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class VehicleClass:
    name: str
    extent_w: float
    extent_h: float
    brightness: float


DEFAULT_CLASSES = (
    VehicleClass("car", 1.80, 1.45, 0.32),
    VehicleClass("suv", 1.90, 1.85, 0.50),
    VehicleClass("truck", 2.50, 3.00, 0.68),
)


@dataclass
class SceneConfig:
    vehicle_count: tuple[int, int] = (1, 3)
    distance_range: tuple[float, float] = (5.0, 90.0)
    velocity_range: tuple[tuple[float, float], ...] = ((-1.0, 1.0), (-0.1, 0.1), (-3.0, 3.0))
    dt: float = 0.05
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics.default)
    texture_seed: int = 0
    classes: tuple[VehicleClass, ...] = DEFAULT_CLASSES
    extent_jitter: float = 0.02
    camera_height: float = 1.5
    max_overlap: float = 0.3
    max_retries: int = 200
    texture_contrast: float = 0.12
    background_contrast: float = 0.10

    def __post_init__(self):
        lo, hi = self.distance_range
        if not (0 < lo <= hi):
            raise ValueError(f"distance range must lie in (0, inf), got {self.distance_range}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if len(self.velocity_range) != 3:
            raise ValueError("velocity_range needs one (lo, hi) pair per axis x, y, z")
        if not (0 <= self.vehicle_count[0] <= self.vehicle_count[1]):
            raise ValueError(f"bad vehicle_count {self.vehicle_count}")
        if not self.classes:
            raise ValueError("at least one vehicle class is required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intrinsics"] = self.intrinsics.to_dict()
        d["classes"] = [asdict(c) for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        kw = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(kw) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        if "intrinsics" in kw:
            kw["intrinsics"] = CameraIntrinsics.from_dict(kw["intrinsics"])
        if "classes" in kw:
            kw["classes"] = tuple(VehicleClass(**c) for c in kw["classes"])
        for key in ("vehicle_count", "distance_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "velocity_range" in kw:
            kw["velocity_range"] = tuple(tuple(p) for p in kw["velocity_range"])
        return cls(**kw)


@dataclass
class VehicleState:
    """Layout of one vehicle: plane centre at the current instant plus its motion."""

    cls: VehicleClass
    extent_w: float
    extent_h: float
    center: np.ndarray        # (X, Y, Z) at the current frame, metres
    velocity: np.ndarray      # m/s, camera frame
    texture_seed: int

    def center_at(self, which: str, dt: float) -> np.ndarray:
        return self.center if which == "curr" else self.center - self.velocity * dt

    def box_at(self, cam: CameraIntrinsics, which: str, dt: float) -> BoundingBox:
        x, y, z = self.center_at(which, dt)
        hw, hh = 0.5 * self.extent_w, 0.5 * self.extent_h
        return BoundingBox(cam.fx * (x - hw) / z + cam.cx, cam.fy * (y - hh) / z + cam.cy,
                           cam.fx * (x + hw) / z + cam.cx, cam.fy * (y + hh) / z + cam.cy)

    def truth_at(self, cam: CameraIntrinsics, which: str, dt: float) -> VehicleTruth:
        p = self.center_at(which, dt)
        pix = project(cam, p)
        return VehicleTruth(float(p[2]), tuple(float(v) for v in self.velocity),
                            tuple(float(c) for c in p), (float(pix[0]), float(pix[1])),
                            self.extent_w, self.extent_h)


@dataclass
class Scene:
    intrinsics: CameraIntrinsics
    dt: float
    background_seed: int
    vehicles: list[VehicleState]
    texture_contrast: float = 0.12
    background_contrast: float = 0.10


@dataclass
class VehicleRecord:
    box: BoundingBox
    box_prev: BoundingBox
    truth: VehicleTruth
    truth_prev: VehicleTruth
    class_name: str = ""


@dataclass
class ScenePair:
    frame_prev: np.ndarray    # HxW uint8
    frame_curr: np.ndarray    # HxW uint8
    flow: np.ndarray          # HxWx2 float32, prev->curr displacement at curr pixels
    vehicles: list[VehicleRecord]
    intrinsics: CameraIntrinsics
    dt: float
    seed: int = 0
    log: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# procedural texture


def _smooth(t):
    return t * t * (3.0 - 2.0 * t)


def _interp_matrix(coords: np.ndarray, n: int) -> np.ndarray:
    """Dense (len(coords), n) smoothstep interpolation weights onto lattice nodes."""
    f = np.clip(coords, 0.0, n - 1.000001)
    k0 = np.floor(f).astype(np.intp)
    t = _smooth(f - k0)
    m = np.zeros((coords.size, n))
    rows = np.arange(coords.size)
    m[rows, k0] = 1.0 - t
    m[rows, k0 + 1] = t
    return m


class ValueNoise:
    """Multi-octave value noise over a rectangular domain, zero mean, unit-ish std.

    Interpolation is separable, so sampling on a rectilinear grid is two small
    matrix products per octave.
    """

    def __init__(self, seed: int, width: float, height: float, cells: tuple[float, ...],
                 amplitudes: tuple[float, ...] | None = None):
        rng = np.random.default_rng(seed)
        amplitudes = amplitudes or tuple(0.5 ** k for k in range(len(cells)))
        norm = np.sqrt(sum(a * a for a in amplitudes))
        self.octaves = []
        for cell, amp in zip(cells, amplitudes):
            gw = int(np.ceil(width / cell)) + 2
            gh = int(np.ceil(height / cell)) + 2
            lat = rng.standard_normal((gh, gw))
            lat = (lat - lat.mean()) / (lat.std() + 1e-12)
            self.octaves.append((cell, amp / norm, lat))

    def grid(self, ys: np.ndarray, xs: np.ndarray, span_y: float = 0.0, span_x: float = 0.0,
             samples: int = 1) -> np.ndarray:
        """Texture over the rectilinear grid (ys[i], xs[j]); returns len(ys) x len(xs).

        With ``samples > 1`` each value is the mean over a ``span_y`` x ``span_x``
        footprint centred on the grid point (``samples`` points per axis), which
        models a pixel integrating over its area.
        """
        ys, xs = np.asarray(ys, float), np.asarray(xs, float)
        offsets = (np.arange(samples) + 0.5) / samples - 0.5
        out = np.zeros((ys.size, xs.size))
        for cell, amp, lat in self.octaves:
            ry = sum(_interp_matrix((ys + o * span_y) / cell, lat.shape[0]) for o in offsets)
            rx = sum(_interp_matrix((xs + o * span_x) / cell, lat.shape[1]) for o in offsets)
            out += (amp / samples ** 2) * (ry @ lat @ rx.T)
        return out


VEHICLE_CELLS = (0.6, 0.3, 0.15)
PIXEL_SAMPLES = 4   # per axis; box-filters texture detail finer than a pixel
BACKGROUND_CELLS = (48.0, 24.0, 12.0, 6.0)


def vehicle_texture(v: VehicleState) -> ValueNoise:
    return ValueNoise(v.texture_seed, v.extent_w, v.extent_h, VEHICLE_CELLS)


def background_image(scene: Scene) -> np.ndarray:
    cam = scene.intrinsics
    noise = ValueNoise(scene.background_seed, cam.width, cam.height, BACKGROUND_CELLS)
    return 0.5 + scene.background_contrast * noise.grid(np.arange(cam.height) + 0.5,
                                                        np.arange(cam.width) + 0.5)


# ---------------------------------------------------------------------------
# rendering


def _pixel_span(lo: float, hi: float, n: int) -> tuple[int, int]:
    """Indices whose pixel centres (k + 0.5) fall in [lo, hi)."""
    a = max(int(np.ceil(lo - 0.5)), 0)
    b = min(int(np.ceil(hi - 0.5)), n)
    return a, b


def _far_to_near(scene: Scene, which: str) -> list[VehicleState]:
    return sorted(scene.vehicles, key=lambda v: -v.center_at(which, scene.dt)[2])


def render_frame(scene: Scene, which: str, background: np.ndarray | None = None) -> np.ndarray:
    """Composite vehicle planes far-to-near over the static background; returns uint8."""
    if which not in ("prev", "curr"):
        raise ValueError(f"time index must be 'prev' or 'curr', got {which!r}")
    cam = scene.intrinsics
    img = background_image(scene) if background is None else background.copy()
    for v in _far_to_near(scene, which):
        box = v.box_at(cam, which, scene.dt)
        i0, i1 = _pixel_span(box.t, box.b, cam.height)
        j0, j1 = _pixel_span(box.l, box.r, cam.width)
        if i0 >= i1 or j0 >= j1:
            continue
        x, y, z = v.center_at(which, scene.dt)
        ys = (np.arange(i0, i1) + 0.5 - cam.cy) * z / cam.fy - (y - 0.5 * v.extent_h)
        xs = (np.arange(j0, j1) + 0.5 - cam.cx) * z / cam.fx - (x - 0.5 * v.extent_w)
        # one pixel spans z/f metres on the plane
        tex = vehicle_texture(v).grid(ys, xs, z / cam.fy, z / cam.fx, PIXEL_SAMPLES)
        img[i0:i1, j0:j1] = v.cls.brightness + scene.texture_contrast * tex
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def ground_truth_flow(scene: Scene) -> np.ndarray:
    """Float64 HxWx2 displacement prev->curr of the surface visible at each curr pixel."""
    cam = scene.intrinsics
    flow = np.zeros((cam.height, cam.width, 2))
    for v in _far_to_near(scene, "curr"):
        box = v.box_at(cam, "curr", scene.dt)
        i0, i1 = _pixel_span(box.t, box.b, cam.height)
        j0, j1 = _pixel_span(box.l, box.r, cam.width)
        if i0 >= i1 or j0 >= j1:
            continue
        z = v.center[2]
        dx, dy, dz = v.velocity * scene.dt
        zp = z - dz
        uc = np.arange(j0, j1) + 0.5
        vc = np.arange(i0, i1) + 0.5
        # point on the plane now, moved back to where it was one interval ago
        up = cam.fx * ((uc - cam.cx) * z / cam.fx - dx) / zp + cam.cx
        vp = cam.fy * ((vc - cam.cy) * z / cam.fy - dy) / zp + cam.cy
        flow[i0:i1, j0:j1, 0] = (uc - up)[None, :]
        flow[i0:i1, j0:j1, 1] = (vc - vp)[:, None]
    return flow


def render_pair(scene: Scene, seed: int = 0, log_lines: list[str] | None = None) -> ScenePair:
    cam = scene.intrinsics
    bg = background_image(scene)
    records = [
        VehicleRecord(v.box_at(cam, "curr", scene.dt), v.box_at(cam, "prev", scene.dt),
                      v.truth_at(cam, "curr", scene.dt), v.truth_at(cam, "prev", scene.dt),
                      v.cls.name)
        for v in scene.vehicles
    ]
    return ScenePair(render_frame(scene, "prev", bg), render_frame(scene, "curr", bg),
                     ground_truth_flow(scene).astype(np.float32), records, cam, scene.dt,
                     seed, list(log_lines or []))


# ---------------------------------------------------------------------------
# scene generation


def _inside(box: BoundingBox, cam: CameraIntrinsics, margin: float = 1.0) -> bool:
    return (box.l >= margin and box.t >= margin
            and box.r <= cam.width - margin and box.b <= cam.height - margin)


def _place_vehicle(rng: np.random.Generator, config: SceneConfig,
                   placed: list[VehicleState]) -> VehicleState | None:
    cam = config.intrinsics
    for _ in range(config.max_retries):
        cls = config.classes[int(rng.integers(len(config.classes)))]
        jit = config.extent_jitter
        ew = cls.extent_w * (1.0 + rng.uniform(-jit, jit))
        eh = cls.extent_h * (1.0 + rng.uniform(-jit, jit))
        z = rng.uniform(*config.distance_range)
        vel = np.array([rng.uniform(*r) for r in config.velocity_range])
        w_px = cam.fx * ew / z
        lo, hi = 0.5 * w_px + 2.0, cam.width - 0.5 * w_px - 2.0
        if lo >= hi:
            continue
        u = rng.uniform(lo, hi)
        x = (u - cam.cx) * z / cam.fx
        y = config.camera_height - 0.5 * eh + rng.uniform(-0.05, 0.05)
        tex_seed = int(rng.integers(2**31 - 1))
        cand = VehicleState(cls, ew, eh, np.array([x, y, z]), vel, tex_seed)
        if z - vel[2] * config.dt <= 0:
            continue
        b_now = cand.box_at(cam, "curr", config.dt)
        b_prev = cand.box_at(cam, "prev", config.dt)
        if not (_inside(b_now, cam) and _inside(b_prev, cam)):
            continue
        clash = any(
            b_now.iou(o.box_at(cam, "curr", config.dt)) > config.max_overlap
            or b_prev.iou(o.box_at(cam, "prev", config.dt)) > config.max_overlap
            for o in placed)
        if clash:
            continue
        return cand
    return None


def build_scene(config: SceneConfig, seed: int) -> tuple[Scene, list[str]]:
    """Lay out a scene deterministically; infeasible placements retry with a fresh sub-seed."""
    messages: list[str] = []
    attempt = 0
    while True:
        rng = np.random.default_rng(np.random.SeedSequence([config.texture_seed, seed, attempt]))
        lo, hi = config.vehicle_count
        n = int(rng.integers(lo, hi + 1))
        placed: list[VehicleState] = []
        for _ in range(n):
            v = _place_vehicle(rng, config, placed)
            if v is None:
                break
            placed.append(v)
        if len(placed) == n:
            scene = Scene(config.intrinsics, config.dt, int(rng.integers(2**31 - 1)), placed,
                          config.texture_contrast, config.background_contrast)
            return scene, messages
        msg = f"seed {seed}: placement infeasible on attempt {attempt}, regenerating"
        log.info(msg)
        messages.append(msg)
        attempt += 1
        if attempt > 50:
            raise RuntimeError(f"seed {seed}: could not place {n} vehicles; config too tight")


def generate_scene(config: SceneConfig, seed: int) -> ScenePair:
    scene, messages = build_scene(config, seed)
    return render_pair(scene, seed, messages)


def scene_from_states(config: SceneConfig, states: list[VehicleState],
                      background_seed: int = 0) -> Scene:
    """Hand-built scene, for controlled fixtures."""
    return Scene(config.intrinsics, config.dt, background_seed, list(states),
                 config.texture_contrast, config.background_contrast)


def subpixel_suite(count: int, seed: int, config: SceneConfig | None = None,
                   motion_px: tuple[float, float] = (0.2, 1.0),
                   min_magnification: float = 4.0, delta: float = 8.0,
                   target_w: int = 448, target_h: int = 384) -> list[ScenePair]:
    """Single-vehicle scenes with small image motion and strong crop magnification.

    Each vehicle is placed far enough that its vehicle-centric crop is at
    least ``min_magnification`` times smaller than the patch, and given a
    lateral/vertical velocity whose image displacement magnitude lies in
    ``motion_px``.
    """
    config = config or SceneConfig()
    cam = config.intrinsics
    pairs = []
    for k in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([config.texture_seed, seed, k, 99]))
        cls = config.classes[int(rng.integers(len(config.classes)))]
        # crop side = 2 * extent + 2 * delta must stay below target / magnification
        max_w = 0.5 * (target_w / min_magnification - 2.0 * delta)
        max_h = 0.5 * (target_h / min_magnification - 2.0 * delta)
        z_min = max(cam.fx * cls.extent_w / max_w, cam.fy * cls.extent_h / max_h,
                    config.distance_range[0])
        z = rng.uniform(z_min, max(z_min, config.distance_range[1]))
        mag = rng.uniform(*motion_px)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        du, dv = mag * np.cos(ang), mag * np.sin(ang)
        vel = np.array([du * z / cam.fx, dv * z / cam.fy, 0.0]) / config.dt
        u = rng.uniform(0.3, 0.7) * cam.width
        x = (u - cam.cx) * z / cam.fx
        y = config.camera_height - 0.5 * cls.extent_h
        state = VehicleState(cls, cls.extent_w, cls.extent_h, np.array([x, y, z]), vel,
                             int(rng.integers(2**31 - 1)))
        scene = scene_from_states(config, [state], int(rng.integers(2**31 - 1)))
        pairs.append(render_pair(scene, k))
    return pairs


# ---------------------------------------------------------------------------
# dataset directory


def _box_list(b: BoundingBox) -> list[float]:
    return [b.l, b.t, b.r, b.b]


def _vehicle_to_json(v: VehicleRecord) -> dict:
    return {
        "class": v.class_name,
        "box": _box_list(v.box),
        "box_prev": _box_list(v.box_prev),
        "distance": v.truth.distance,
        "distance_prev": v.truth_prev.distance,
        "velocity": list(v.truth.velocity),
        "closest_point": list(v.truth.closest_point),
        "closest_point_prev": list(v.truth_prev.closest_point),
        "closest_pixel": list(v.truth.closest_pixel),
        "closest_pixel_prev": list(v.truth_prev.closest_pixel),
        "extent_w": v.truth.extent_w,
        "extent_h": v.truth.extent_h,
    }


def _vehicle_from_json(d: dict) -> VehicleRecord:
    vel = tuple(d["velocity"])
    now = VehicleTruth(d["distance"], vel, tuple(d["closest_point"]), tuple(d["closest_pixel"]),
                       d["extent_w"], d["extent_h"])
    prev = VehicleTruth(d["distance_prev"], vel, tuple(d["closest_point_prev"]),
                        tuple(d["closest_pixel_prev"]), d["extent_w"], d["extent_h"])
    return VehicleRecord(BoundingBox(*d["box"]), BoundingBox(*d["box_prev"]), now, prev,
                         d.get("class", ""))


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_scene(pair: ScenePair, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / "prev.pgm", pair.frame_prev)
    write_pgm(d / "curr.pgm", pair.frame_curr)
    write_flo(d / "flow.flo", pair.flow)
    ann = {"seed": pair.seed, "log": pair.log,
           "vehicles": [_vehicle_to_json(v) for v in pair.vehicles]}
    (d / "ann.json").write_text(_dump(ann))


def write_manifest(pairs_meta: list[dict], directory, intrinsics: CameraIntrinsics, dt: float,
                   extra: dict | None = None) -> None:
    manifest = {"schema_version": DATASET_SCHEMA_VERSION, "intrinsics": intrinsics.to_dict(),
                "dt": dt, "scenes": pairs_meta}
    if extra:
        manifest.update(extra)
    (Path(directory) / "manifest.json").write_text(_dump(manifest))


def scene_dirname(k: int) -> str:
    return f"scene_{k:05d}"


def write_dataset(pairs: list[ScenePair], directory, extra: dict | None = None) -> None:
    """Write scenes then the manifest (the manifest's presence marks completion)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = []
    for k, p in enumerate(pairs):
        write_scene(p, directory / scene_dirname(k))
        meta.append({"name": scene_dirname(k), "seed": p.seed, "vehicle_count": len(p.vehicles)})
    cam = pairs[0].intrinsics if pairs else CameraIntrinsics.default()
    dt = pairs[0].dt if pairs else SceneConfig().dt
    write_manifest(meta, directory, cam, dt, extra)


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FormatError(f"{path}: missing manifest (incomplete or not a dataset directory)")
    manifest = json.loads(path.read_text())
    version = manifest.get("schema_version")
    if version != DATASET_SCHEMA_VERSION:
        raise FormatError(f"{path}: dataset schema_version {version}, "
                          f"this build reads {DATASET_SCHEMA_VERSION}")
    return manifest


def read_scene(directory, intrinsics: CameraIntrinsics, dt: float,
               expected_vehicles: int | None = None) -> ScenePair:
    d = Path(directory)
    prev = read_pgm(d / "prev.pgm")
    curr = read_pgm(d / "curr.pgm")
    if prev.shape != curr.shape or prev.shape != (intrinsics.height, intrinsics.width):
        raise FormatError(f"{d}: frame shapes {prev.shape}/{curr.shape} do not match "
                          f"intrinsics {intrinsics.height}x{intrinsics.width}")
    flow = read_flo(d / "flow.flo", expect_shape=prev.shape)
    ann = json.loads((d / "ann.json").read_text())
    vehicles = [_vehicle_from_json(v) for v in ann["vehicles"]]
    if expected_vehicles is not None and expected_vehicles != len(vehicles):
        raise FormatError(f"{d / 'ann.json'}: {len(vehicles)} vehicle records, "
                          f"manifest says {expected_vehicles}")
    return ScenePair(prev, curr, flow, vehicles, intrinsics, dt, ann.get("seed", 0),
                     ann.get("log", []))


def iter_dataset(directory):
    manifest = read_manifest(directory)
    cam = CameraIntrinsics.from_dict(manifest["intrinsics"])
    dt = float(manifest["dt"])
    for entry in manifest["scenes"]:
        yield read_scene(Path(directory) / entry["name"], cam, dt, entry["vehicle_count"])


def read_dataset(directory) -> list[ScenePair]:
    return list(iter_dataset(directory))
