"""The learnable distance/velocity pipeline.

Per vehicle: the current patch goes through a small strided conv encoder,
the vehicle region of the feature map is pooled to 7x7 (ROIAlign) and
aggregated by a 3x3 and a 7x7 convolution into the feature clue ``f``.  The
flow pyramid is pooled the same way per level into the flow clue ``m``.
``concat(g, f, m)`` feeds four fully connected layers whose output is
``[d, dt*vx, dt*vy, dt*vz]``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .checkpoint import load_checkpoint, save_checkpoint
from .flow import FlowPyramid, estimate_flow, oracle_flow_pyramid
from .geometry import BoundingBox, CameraIntrinsics, backproject, geometric_clue
from .sampling import DEFAULT_DELTA, CropSpec, make_patch_pair
from .tensorcore import Tensor

log = logging.getLogger(__name__)

MODEL_SCHEMA = "rvk-fusion-1"


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelDims:
    patch_h: int = 384
    patch_w: int = 448
    encoder_channels: tuple[int, ...] = (16, 32, 64, 64)
    feature_dim: int = 128
    roi: int = 7
    levels: int = 4
    fc_widths: tuple[int, ...] = (256, 128, 64)
    geo_dim: int = 6
    out_dim: int = 4

    @property
    def stride(self) -> int:
        return 2 ** len(self.encoder_channels)

    @property
    def flow_dim(self) -> int:
        return self.levels * 2 * self.roi * self.roi

    @property
    def clue_dim(self) -> int:
        return self.geo_dim + self.feature_dim + self.flow_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDims":
        kw = dict(d)
        for k in ("encoder_channels", "fc_widths"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


@dataclass
class ClueBundle:
    g: np.ndarray
    f: np.ndarray
    m: np.ndarray


# ---------------------------------------------------------------------------
# ROIAlign


def _roi_axis_matrix(lo: float, hi: float, out: int, n: int) -> np.ndarray:
    """(out, n) bilinear weights sampling cell centres of [lo, hi) on an n-pixel axis."""
    src = lo + (np.arange(out) + 0.5) * (hi - lo) / out - 0.5
    src = np.clip(src, 0.0, n - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = src - i0
    mat = np.zeros((out, n))
    rows = np.arange(out)
    np.add.at(mat, (rows, i0), 1.0 - w1)
    np.add.at(mat, (rows, i1), w1)
    return mat


def _roi_matrices(box: BoundingBox, h: int, w: int, out: int):
    if not (box.r > box.l and box.b > box.t):
        raise ValueError(f"degenerate ROI {box}")
    return _roi_axis_matrix(box.t, box.b, out, h), _roi_axis_matrix(box.l, box.r, out, w)


def roi_align_array(fmap: np.ndarray, box: BoundingBox, out: int = 7) -> np.ndarray:
    """ROIAlign on a CxHxW array, one bilinear sample per output cell centre."""
    c, h, w = fmap.shape
    ry, rx = _roi_matrices(box, h, w, out)
    return np.einsum("ih,chw,jw->cij", ry, fmap, rx, optimize=True)


def roi_align(fmap: Tensor, box: BoundingBox, out: int = 7) -> Tensor:
    """Differentiable ROIAlign of a CxHxW tensor in map coordinates."""
    c, h, w = fmap.shape
    ry, rx = _roi_matrices(box, h, w, out)
    val = np.einsum("ih,chw,jw->cij", ry, fmap.data, rx, optimize=True)

    def bw(g):
        return (np.einsum("ih,cij,jw->chw", ry, g, rx, optimize=True),)

    return Tensor.from_op(val, (fmap,), bw)


# ---------------------------------------------------------------------------
# flow clue


def aggregate_flow_clue(pyr: FlowPyramid, box_patch: BoundingBox, spec: CropSpec,
                        roi: int = 7) -> np.ndarray:
    """Pool each pyramid level over the vehicle box, convert to original pixels, flatten.

    Layout: level-major, then channel (u block, v block), then 7x7 row-major.
    """
    parts = []
    for k, lv in enumerate(pyr.levels):
        h, w = lv.shape[:2]
        b = box_patch.scaled(0.5 ** k)
        if b.l >= w or b.t >= h or b.r <= 0 or b.b <= 0:
            raise ValueError(f"box {box_patch} falls outside pyramid level {k} ({h}x{w})")
        pooled = roi_align_array(np.moveaxis(lv, -1, 0), b, roi) * (2.0 ** k)
        pooled[0] *= spec.scale_x
        pooled[1] *= spec.scale_y
        parts.append(pooled.reshape(-1))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# network


def compute_loss(pred_d: Tensor, pred_dv: Tensor, gt_d, gt_dv, alpha: float = 0.1,
                 beta: float = 1.0) -> Tensor:
    """alpha * MSE(distance) + beta * MSE(relative motion)."""
    return tc.add(tc.scale(tc.mse_loss(pred_d, gt_d), alpha),
                  tc.scale(tc.mse_loss(pred_dv, gt_dv), beta))


class FusionModel:
    """Encoder, feature aggregator and fusion head, plus the input/target
    standardisation statistics they were trained with."""

    def __init__(self, dims: ModelDims = ModelDims(), seed: int = 0):
        self.dims = dims
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        cin = 1
        for i, cout in enumerate(dims.encoder_channels):
            self._conv(rng, f"enc{i}", cout, cin, 3)
            cin = cout
        self._conv(rng, "agg0", dims.feature_dim, cin, 3)
        self._conv(rng, "agg1", dims.feature_dim, dims.feature_dim, dims.roi)
        n_in = dims.clue_dim
        for i, n_out in enumerate(tuple(dims.fc_widths) + (dims.out_dim,)):
            self.params[f"fc{i}.w"] = tc.glorot_uniform(rng, (n_out, n_in), n_in, n_out, f"fc{i}.w")
            self.params[f"fc{i}.b"] = tc.zeros_param((n_out,), f"fc{i}.b")
            n_in = n_out
        self.stats = {
            "g_mean": np.zeros(dims.geo_dim), "g_std": np.ones(dims.geo_dim),
            "m_mean": np.zeros(dims.flow_dim), "m_std": np.ones(dims.flow_dim),
            "y_mean": np.zeros(dims.out_dim), "y_std": np.ones(dims.out_dim),
            "roi_mean": np.zeros(cin), "roi_std": np.ones(cin),
        }
        self.use_flow = True
        self.meta: dict = {}

    def _conv(self, rng, name, cout, cin, k):
        fan_in, fan_out = cin * k * k, cout * k * k
        self.params[f"{name}.w"] = tc.glorot_uniform(rng, (cout, cin, k, k), fan_in, fan_out,
                                                     f"{name}.w")
        self.params[f"{name}.b"] = tc.zeros_param((cout,), f"{name}.b")

    # parameter groups ----------------------------------------------------

    def group(self, prefix: str) -> list[Tensor]:
        return [t for k, t in self.params.items() if k.startswith(prefix)]

    @property
    def encoder_params(self) -> list[Tensor]:
        return self.group("enc")

    @property
    def trainable_head(self) -> list[Tensor]:
        return self.group("agg") + self.group("fc")

    # forward pieces --------------------------------------------------------

    def encode(self, patch: Tensor) -> Tensor:
        """[H, W] (or [1, H, W]) patch in [0, 1]-ish units to the encoder feature map."""
        x = patch if patch.data.ndim == 3 else patch.reshape(1, *patch.shape)
        if x.shape[-2:] != (self.dims.patch_h, self.dims.patch_w):
            raise ValueError(f"patch size {x.shape[-2:]} != "
                             f"({self.dims.patch_h}, {self.dims.patch_w})")
        for i in range(len(self.dims.encoder_channels)):
            x = tc.relu(tc.conv2d(x, self.params[f"enc{i}.w"], self.params[f"enc{i}.b"],
                                  stride=2, padding=1))
        return x

    def aggregate(self, roi: Tensor) -> Tensor:
        """C x 7 x 7 (or B x C x 7 x 7) pooled features to the feature clue."""
        sd = self.stats["roi_std"][:, None, None]
        roi = tc.affine(roi, 1.0 / sd, -self.stats["roi_mean"][:, None, None] / sd)
        x = tc.relu(tc.conv2d(roi, self.params["agg0.w"], self.params["agg0.b"], 1, 1))
        x = tc.relu(tc.conv2d(x, self.params["agg1.w"], self.params["agg1.b"], 1, 0))
        if x.data.ndim == 4:
            return x.reshape(x.shape[0], self.dims.feature_dim)
        return x.reshape(self.dims.feature_dim)

    def head(self, clue: Tensor) -> Tensor:
        n = len(self.dims.fc_widths)
        x = clue
        for i in range(n + 1):
            x = tc.fully_connected(x, self.params[f"fc{i}.w"], self.params[f"fc{i}.b"])
            if i < n:
                x = tc.relu(x)
        return x

    def normalise_g(self, g: np.ndarray) -> np.ndarray:
        return (g - self.stats["g_mean"]) / self.stats["g_std"]

    def normalise_m(self, m: np.ndarray) -> np.ndarray:
        if not self.use_flow:
            return np.zeros_like(m)
        return (m - self.stats["m_mean"]) / self.stats["m_std"]

    def fusion_forward(self, bundle: ClueBundle) -> tuple[float, np.ndarray]:
        """Unnormalised (distance, dt*velocity) from a clue bundle."""
        d = self.dims
        if (bundle.g.size, bundle.f.size, bundle.m.size) != (d.geo_dim, d.feature_dim, d.flow_dim):
            raise ValueError(f"clue dims {(bundle.g.size, bundle.f.size, bundle.m.size)} "
                             f"do not match model {(d.geo_dim, d.feature_dim, d.flow_dim)}")
        with tc.no_grad():
            clue = tc.concat([Tensor(self.normalise_g(bundle.g)), Tensor(bundle.f),
                              Tensor(self.normalise_m(bundle.m))])
            y = self.head(clue).data
        y = y * self.stats["y_std"] + self.stats["y_mean"]
        return float(y[0]), y[1:].copy()

    def feature_roi(self, patch: np.ndarray, box_patch: BoundingBox) -> np.ndarray:
        """Encoder ROI features for a vehicle (no graph)."""
        with tc.no_grad():
            fmap = self.encode(Tensor(patch_input(patch)))
        return roi_align_array(fmap.data, box_patch.scaled(1.0 / self.dims.stride), self.dims.roi)

    def feature_clue(self, roi: np.ndarray) -> np.ndarray:
        with tc.no_grad():
            return self.aggregate(Tensor(roi)).data.copy()

    # persistence -----------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.params.items()}
        out.update({f"stats.{k}": v for k, v in self.stats.items()})
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.state().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, path, meta: dict | None = None) -> None:
        m = {"model_schema": MODEL_SCHEMA, "dims": self.dims.to_dict(), "use_flow": self.use_flow}
        m.update(self.meta)
        m.update(meta or {})
        save_checkpoint(path, self.state(), m)

    @classmethod
    def load(cls, path) -> "FusionModel":
        tensors, meta = load_checkpoint(path)
        if meta.get("model_schema") != MODEL_SCHEMA:
            raise ValueError(f"{path}: model schema {meta.get('model_schema')!r}, "
                             f"expected {MODEL_SCHEMA!r}")
        model = cls(ModelDims.from_dict(meta["dims"]))
        for k, v in tensors.items():
            if k.startswith("stats."):
                model.stats[k[6:]] = v.copy()
            elif k in model.params:
                if model.params[k].shape != v.shape:
                    raise ValueError(f"{path}: tensor {k} has shape {v.shape}, "
                                     f"model expects {model.params[k].shape}")
                model.params[k].data = v.copy()
            else:
                raise ValueError(f"{path}: unexpected tensor {k!r}")
        model.use_flow = bool(meta.get("use_flow", True))
        model.meta = {k: v for k, v in meta.items() if k not in ("dims", "model_schema", "use_flow")}
        return model


def patch_input(patch: np.ndarray) -> np.ndarray:
    """8-bit intensity patch to the encoder's centred input range."""
    return np.asarray(patch, dtype=np.float64) / 255.0 - 0.5


# ---------------------------------------------------------------------------
# clue extraction


@dataclass
class VehicleSample:
    """Everything training needs for one vehicle, with the encoder already applied."""

    g: np.ndarray
    roi: np.ndarray            # encoder ROI features, C x 7 x 7
    m: np.ndarray
    target: np.ndarray         # [d, dt*vx, dt*vy, dt*vz]
    patch: np.ndarray | None = None
    box_patch: BoundingBox | None = None
    scene: int = -1
    index: int = -1


def flow_pyramid_for(frame_prev, frame_curr, spec: CropSpec, template, current, source: str,
                     gt_flow=None, levels: int = 4) -> FlowPyramid:
    if source == "oracle":
        if gt_flow is None:
            raise ValueError("oracle flow source needs a ground-truth flow field")
        return oracle_flow_pyramid(gt_flow, spec, levels)
    if source == "estimated":
        return estimate_flow(template, current, levels)
    raise ValueError(f"unknown flow source {source!r}")


def extract_vehicle(model: FusionModel, frame_prev, frame_curr, box: BoundingBox,
                    cam: CameraIntrinsics, flow_source: str = "oracle", gt_flow=None,
                    delta: float = DEFAULT_DELTA, keep_patch: bool = False):
    """Crop, pool and return (g, roi features, m, spec, box in patch coords, patch)."""
    dims = model.dims
    template, current, spec = make_patch_pair(frame_prev, frame_curr, box, delta,
                                              dims.patch_w, dims.patch_h)
    box_patch = spec.to_patch(box)
    pyr = flow_pyramid_for(frame_prev, frame_curr, spec, template, current, flow_source,
                           gt_flow, dims.levels)
    m = aggregate_flow_clue(pyr, box_patch, spec, dims.roi)
    g = geometric_clue(cam, box)  # always from the original box
    roi = model.feature_roi(current, box_patch)
    return g, roi, m, spec, box_patch, (current if keep_patch else None)


def samples_from_scene(model: FusionModel, pair, flow_source: str = "oracle",
                       delta: float = DEFAULT_DELTA, scene_index: int = -1,
                       keep_patch: bool = False) -> list[VehicleSample]:
    out = []
    for i, v in enumerate(pair.vehicles):
        g, roi, m, spec, box_patch, patch = extract_vehicle(
            model, pair.frame_prev, pair.frame_curr, v.box, pair.intrinsics, flow_source,
            pair.flow, delta, keep_patch)
        target = np.concatenate([[v.truth.distance], np.asarray(v.truth.velocity) * pair.dt])
        out.append(VehicleSample(g, roi, m, target, patch, box_patch, scene_index, i))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class Schedule:
    epochs: int = 120
    lr: float = 1e-4
    decay: float = 0.2
    decay_every: int = 30
    batch_size: int = 16
    seed: int = 0
    alpha: float = 0.1
    beta: float = 1.0
    train_encoder: bool = False
    loss_units: str = "standardised"   # or "raw": metres and metres of relative motion
    weight_decay: float = 0.0
    clue_noise: float = 0.0   # training-time Gaussian noise on standardised ROI features and m


@dataclass
class TrainResult:
    model: FusionModel
    epoch_loss: list[float] = field(default_factory=list)
    epoch_lr: list[float] = field(default_factory=list)
    seconds: float = 0.0


def fit_statistics(model: FusionModel, samples: list[VehicleSample]) -> None:
    g = np.stack([s.g for s in samples])
    m = np.stack([s.m for s in samples])
    y = np.stack([s.target for s in samples])

    def safe_std(a):
        sd = a.std(axis=0)
        return np.where(sd > 1e-12, sd, 1.0)

    r = np.stack([s.roi for s in samples])
    model.stats.update(g_mean=g.mean(0), g_std=safe_std(g), m_mean=m.mean(0), m_std=safe_std(m),
                       y_mean=y.mean(0), y_std=safe_std(y), roi_mean=r.mean(axis=(0, 2, 3)),
                       roi_std=safe_std(r.transpose(0, 2, 3, 1).reshape(-1, r.shape[1])))


def _batch_loss(model: FusionModel, samples: list[VehicleSample], idx: np.ndarray,
                sched: Schedule, rng: np.random.Generator | None = None) -> Tensor:
    batch = [samples[i] for i in idx]
    g = Tensor(np.stack([model.normalise_g(s.g) for s in batch]))
    m = np.stack([model.normalise_m(s.m) for s in batch])
    noisy = sched.clue_noise > 0 and rng is not None
    if noisy and model.use_flow:
        m = m + rng.normal(0.0, sched.clue_noise, m.shape)
    m = Tensor(m)
    if sched.train_encoder:
        rois = []
        for s in batch:
            fmap = model.encode(Tensor(patch_input(s.patch)))
            rois.append(roi_align(fmap, s.box_patch.scaled(1.0 / model.dims.stride),
                                  model.dims.roi))
        roi = tc.stack(rois)
    else:
        roi = np.stack([s.roi for s in batch])
        if noisy:
            sd = model.stats["roi_std"][:, None, None]
            roi = roi + rng.normal(0.0, sched.clue_noise, roi.shape) * sd
        roi = Tensor(roi)
    f = model.aggregate(roi)
    out = model.head(tc.concat([g, f, m]))
    y = np.stack([s.target for s in batch])
    if sched.loss_units == "raw":
        out = tc.affine(out, model.stats["y_std"], model.stats["y_mean"])
    else:
        y = (y - model.stats["y_mean"]) / model.stats["y_std"]
    return compute_loss(out[:, 0:1], out[:, 1:], y[:, 0:1], y[:, 1:], sched.alpha, sched.beta)


def train(model: FusionModel, samples: list[VehicleSample], sched: Schedule,
          progress=None) -> TrainResult:
    """Shuffled mini-batch Adam with a step-decayed learning rate.

    Statistics for standardising g, m and the targets are fitted on
    ``samples`` first and stored in the model.
    """
    if not samples:
        raise ValueError("training set is empty")
    if sched.train_encoder and any(s.patch is None for s in samples):
        raise ValueError("train_encoder needs samples extracted with keep_patch=True")
    fit_statistics(model, samples)
    params = model.trainable_head + (model.encoder_params if sched.train_encoder else [])
    opt = tc.Adam(params, lr=sched.lr, weight_decay=sched.weight_decay)
    rng = np.random.default_rng(sched.seed)
    res = TrainResult(model)
    t0 = time.perf_counter()
    n = len(samples)
    for epoch in range(sched.epochs):
        lr = tc.step_decay_lr(epoch, sched.lr, sched.decay, sched.decay_every)
        opt.set_lr(lr)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, sched.batch_size):
            idx = order[start:start + sched.batch_size]
            loss = _batch_loss(model, samples, idx, sched, rng)
            val = loss.item()
            if not math.isfinite(val):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, "
                                     f"samples {[int(i) for i in idx]}")
            tc.backward(loss)
            opt.step()
            total += val * len(idx)
        res.epoch_loss.append(total / n)
        res.epoch_lr.append(lr)
        if progress:
            progress(epoch, total / n, lr)
    res.seconds = time.perf_counter() - t0
    return res


def predict_samples(model: FusionModel, samples: list[VehicleSample]) -> np.ndarray:
    """Unnormalised predictions [d, dt*v] for pre-extracted samples, N x 4."""
    if not samples:
        return np.zeros((0, model.dims.out_dim))
    out = []
    with tc.no_grad():
        for start in range(0, len(samples), 64):
            batch = samples[start:start + 64]
            g = Tensor(np.stack([model.normalise_g(s.g) for s in batch]))
            m = Tensor(np.stack([model.normalise_m(s.m) for s in batch]))
            f = model.aggregate(Tensor(np.stack([s.roi for s in batch])))
            out.append(model.head(tc.concat([g, f, m])).data)
    y = np.concatenate(out)
    return y * model.stats["y_std"] + model.stats["y_mean"]


# ---------------------------------------------------------------------------
# inference


def infer(model: FusionModel, frame_prev, frame_curr, boxes, cam: CameraIntrinsics, dt: float,
          flow_source: str = "estimated", gt_flow=None, delta: float = DEFAULT_DELTA) -> list[dict]:
    """One record per input box, in order; invalid boxes yield an ``error`` record."""
    records = []
    for raw in boxes:
        t0 = time.perf_counter()
        try:
            box = raw if isinstance(raw, BoundingBox) else BoundingBox(*map(float, raw))
            g, roi, m, spec, box_patch, _ = extract_vehicle(
                model, frame_prev, frame_curr, box, cam, flow_source, gt_flow, delta)
            d, dv = model.fusion_forward(ClueBundle(g, model.feature_clue(roi), m))
            vel = dv / dt
            u_c, v_c = box.center
            pos = backproject(cam, (u_c, v_c), d) if d > 0 else np.array([np.nan, np.nan, d])
            records.append({
                "box": list(box.as_tuple()),
                "distance_m": d,
                "velocity_mps": [float(x) for x in vel],
                "position": [float(pos[2]), float(pos[0])],
                "patch_ms": 1e3 * (time.perf_counter() - t0),
            })
        except (ValueError, TypeError) as exc:
            records.append({"box": list(raw) if not isinstance(raw, BoundingBox)
                            else list(raw.as_tuple()), "error": str(exc)})
    return records
