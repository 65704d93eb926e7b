"""Orchestration shared by the command line and the acceptance tests: scene
seeding, the optional process pool, dataset-wide clue extraction and
evaluation of a trained model."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .evalharness import MetricReport, build_report
from .geometry import CameraIntrinsics
from .model import FusionModel, ModelDims, VehicleSample, predict_samples, samples_from_scene
from .sampling import DEFAULT_DELTA
from .simulator import SceneConfig, ScenePair, generate_scene


def worker_count() -> int:
    """Worker processes to use: ``RVK_THREADS`` if set, else 1, never above the CPU count."""
    raw = os.environ.get("RVK_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"RVK_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(n, os.cpu_count() or 1))


def scene_seed(base: int, k: int) -> int:
    """Seed of scene ``k`` in a dataset generated with ``base``; collision-free in practice."""
    return int(np.random.SeedSequence([base, k]).generate_state(1)[0])


def pmap(fn, items, workers: int | None = None, initializer=None, initargs=()):
    """Order-preserving map, in-process when a single worker is requested."""
    workers = worker_count() if workers is None else workers
    items = list(items)
    if workers <= 1 or len(items) < 2:
        if initializer:
            initializer(*initargs)
        return [fn(x) for x in items]
    with ProcessPoolExecutor(workers, initializer=initializer, initargs=initargs) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _gen_one(args) -> ScenePair:
    config, seed = args
    return generate_scene(config, seed)


def generate_pairs(config: SceneConfig, count: int, base_seed: int,
                   workers: int | None = None) -> list[ScenePair]:
    return pmap(_gen_one, [(config, scene_seed(base_seed, k)) for k in range(count)], workers)


# per-process extraction state
_WORKER: dict = {}


def _init_extractor(dims_dict, model_seed, checkpoint, flow_source, delta):
    model = (FusionModel.load(checkpoint) if checkpoint
             else FusionModel(ModelDims.from_dict(dims_dict), model_seed))
    _WORKER.update(model=model, flow_source=flow_source, delta=delta)


def _extract_one(args) -> list[VehicleSample]:
    k, pair = args
    return samples_from_scene(_WORKER["model"], pair, _WORKER["flow_source"], _WORKER["delta"],
                              scene_index=k)


def extract_samples(pairs, dims: ModelDims = ModelDims(), model_seed: int = 0,
                    flow_source: str = "oracle", delta: float = DEFAULT_DELTA,
                    checkpoint=None, workers: int | None = None) -> list[VehicleSample]:
    """Clue vectors for every vehicle of every pair, scene by scene.

    With ``checkpoint`` the encoder comes from that file, otherwise from a
    freshly seeded model (the encoder is frozen during training by default,
    so both agree for models trained that way).
    """
    per_scene = pmap(_extract_one, list(enumerate(pairs)), workers, _init_extractor,
                     (dims.to_dict(), model_seed, checkpoint and str(checkpoint), flow_source,
                      delta))
    return [s for batch in per_scene for s in batch]


def _gen_extract_one(args) -> tuple[list[VehicleSample], list]:
    k, config, seed = args
    pair = generate_scene(config, seed)
    return _extract_one((k, pair)), pair.vehicles


def stream_samples(config: SceneConfig, count: int, base_seed: int,
                   dims: ModelDims = ModelDims(), model_seed: int = 0,
                   flow_source: str = "oracle", delta: float = DEFAULT_DELTA,
                   workers: int | None = None) -> tuple[list[VehicleSample], list[list]]:
    """Generate scenes and extract their clues one at a time, keeping no frames.

    Returns the samples and, per scene, its vehicle records, which is all
    :func:`evaluate` needs.  Produces the same samples as generating the
    dataset first and calling :func:`extract_samples` on it.
    """
    jobs = [(k, config, scene_seed(base_seed, k)) for k in range(count)]
    per_scene = pmap(_gen_extract_one, jobs, workers, _init_extractor,
                     (dims.to_dict(), model_seed, None, flow_source, delta))
    return [s for batch, _ in per_scene for s in batch], [v for _, v in per_scene]


@dataclass
class Evaluation:
    report: MetricReport
    pred: np.ndarray       # N x 4, [d, vx, vy, vz]
    truth: np.ndarray      # N x 4


def evaluate(model: FusionModel, samples: list[VehicleSample], vehicles: list[list],
             dt: float, cam: CameraIntrinsics, extra: dict | None = None) -> Evaluation:
    """Metric report for pre-extracted samples.

    ``vehicles[scene][index]`` is the vehicle record a sample came from; it
    supplies the box and the true position.
    """
    y = predict_samples(model, samples)
    pred = np.concatenate([y[:, :1], y[:, 1:] / dt], axis=1)
    truth = np.stack([np.concatenate([[s.target[0]], s.target[1:] / dt]) for s in samples])
    records = [vehicles[s.scene][s.index] for s in samples]
    boxes = [v.box for v in records]
    gt_pos = np.array([[v.truth.distance, v.truth.closest_point[0]] for v in records])
    rep = build_report(pred[:, 0], pred[:, 1:], truth[:, 0], truth[:, 1:], boxes, cam, gt_pos,
                       extra)
    return Evaluation(rep, pred, truth)
