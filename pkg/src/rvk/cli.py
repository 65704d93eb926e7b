"""Command line: ``rvk gen | train | eval | infer | ablate``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  ``RVK_THREADS`` caps the number of worker processes used by
``gen``, ``eval`` and ``ablate``; training always runs in one process.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, read_header
from .config import ConfigError, RunConfig, load_config
from .evalharness import (REPORT_SCHEMA_VERSION, ablation_report, write_ablation,
                          write_delimited, write_report)
from .formats import FormatError, read_pgm
from .geometry import CameraIntrinsics
from .model import MODEL_SCHEMA, FusionModel, NumericalError, infer, train
from .pipeline import evaluate, extract_samples, generate_pairs, worker_count
from .simulator import (DATASET_SCHEMA_VERSION, ScenePair, read_dataset, read_manifest,
                        subpixel_suite, write_dataset)

log = logging.getLogger("rvk")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config plumbing


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(doc: dict, pairs: list[str]) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as JSON when possible)."""
    for item in pairs:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        section, field = key.split(".", 1)
        doc.setdefault(section, {})
        if not isinstance(doc[section], dict):
            raise ConfigError(f"override {item!r}: section {section!r} is not an object")
        doc[section][field] = _parse_value(raw)
    return doc


def resolve_config(args) -> RunConfig:
    """Config file, then dedicated flags, then generic ``--set`` overrides."""
    doc = load_config(getattr(args, "config", None)).to_dict()
    flag_map = {
        "seed": ("seeds", "gen" if args.command == "gen" else "train"),
        "epochs": ("schedule", "epochs"),
        "lr": ("schedule", "lr"),
        "batch_size": ("schedule", "batch_size"),
        "flow_source": ("flow", "source"),
    }
    for attr, (section, field) in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            doc[section][field] = val
    if getattr(args, "no_flow_clue", False):
        doc["flow"]["use_clue"] = False
    apply_overrides(doc, getattr(args, "set", None) or [])
    return RunConfig.from_dict(doc)


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and not path.is_dir():
        raise ConfigError(f"{path}: exists and is not a directory")
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{path}: directory is not empty (use --force to replace it)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _load_dataset(path) -> tuple[list[ScenePair], dict]:
    if not path:
        raise ConfigError("no dataset given (--data or paths.data)")
    try:
        manifest = read_manifest(path)
        return read_dataset(path), manifest
    except (FormatError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"dataset {path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out or cfg.paths.data or "")
    if not str(out) or str(out) == ".":
        raise ConfigError("no output directory given (--out or paths.data)")
    if args.count < 0:
        raise ConfigError(f"--count must be >= 0, got {args.count}")
    _prepare_out_dir(out, args.force)
    if args.suite == "subpixel":
        pairs = subpixel_suite(args.count, cfg.seeds.gen, cfg.scene, delta=cfg.sampling.delta,
                               target_w=cfg.sampling.target_w, target_h=cfg.sampling.target_h)
    else:
        pairs = generate_pairs(cfg.scene, args.count, cfg.seeds.gen)
    write_dataset(pairs, out, extra={"config_hash": cfg.hash(), "scene_config": cfg.scene.to_dict(),
                                     "base_seed": cfg.seeds.gen, "suite": args.suite,
                                     "generator": f"rvk {__version__}"})
    n_veh = sum(len(p.vehicles) for p in pairs)
    log.info("wrote %d scenes (%d vehicles) to %s", len(pairs), n_veh, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = args.data or cfg.paths.data
    out_model = Path(args.out_model or cfg.paths.model or "")
    if not str(out_model) or str(out_model) == ".":
        raise ConfigError("no checkpoint path given (--out-model or paths.model)")
    if out_model.exists() and not args.force:
        raise ConfigError(f"{out_model}: exists (use --force to overwrite; "
                          f"resuming a run is not supported)")
    pairs, manifest = _load_dataset(data)
    samples = extract_samples(pairs, cfg.model, cfg.seeds.model, cfg.flow.source,
                              cfg.sampling.delta)
    if not samples:
        raise DataError(f"dataset {data}: no vehicles to train on")
    log.info("training on %d vehicles from %d scenes", len(samples), len(pairs))
    model = FusionModel(cfg.model, cfg.seeds.model)
    model.use_flow = cfg.flow.use_clue
    sched = cfg.schedule
    sched.seed = cfg.seeds.train

    def progress(epoch, loss, lr):
        log.info("epoch %d/%d loss %.6g lr %.3g", epoch + 1, sched.epochs, loss, lr)

    out_model.parent.mkdir(parents=True, exist_ok=True)
    partial = out_model.with_name(out_model.name + ".partial")
    try:
        res = train(model, samples, sched, progress)
        model.save(partial, {
            "config_hash": cfg.hash(), "config": cfg.to_dict(),
            "dataset_schema": DATASET_SCHEMA_VERSION,
            "intrinsics": manifest["intrinsics"], "dt": manifest["dt"],
            "train_vehicles": len(samples),
        })
        partial.replace(out_model)
    except NumericalError:
        partial.unlink(missing_ok=True)
        out_model.unlink(missing_ok=True)
        raise
    curve = out_model.with_suffix(".loss.csv")
    write_delimited(curve, ["epoch", "mean_loss", "lr"],
                    [(e + 1, loss, lr) for e, (loss, lr) in
                     enumerate(zip(res.epoch_loss, res.epoch_lr))])
    if not args.no_figures:
        from . import plotting
        plotting.loss_curve(res.epoch_loss, res.epoch_lr, out_model.with_suffix(".loss.png"))
    log.info("saved %s (%.1f s of training)", out_model, res.seconds)
    return EXIT_OK


def _check_compatible(model: FusionModel, manifest: dict, model_path) -> None:
    ds = manifest.get("schema_version")
    ck = model.meta.get("dataset_schema")
    if ck is not None and ck != ds:
        raise DataError(f"checkpoint {model_path} was trained on dataset schema {ck}, "
                        f"dataset has schema {ds}")
    mi, di = model.meta.get("intrinsics"), manifest.get("intrinsics")
    if mi is not None and mi != di:
        raise DataError(f"checkpoint {model_path} intrinsics {mi} differ from dataset "
                        f"intrinsics {di}")


def _load_model(path) -> FusionModel:
    if not path:
        raise ConfigError("no checkpoint given (--model or paths.model)")
    try:
        header = read_header(path)
        if header.get("meta", {}).get("model_schema", MODEL_SCHEMA) != MODEL_SCHEMA:
            raise DataError(f"checkpoint {path}: model schema "
                            f"{header['meta'].get('model_schema')!r}, this build reads "
                            f"{MODEL_SCHEMA!r}")
        return FusionModel.load(path)
    except (CheckpointError, FileNotFoundError, ValueError) as exc:
        raise DataError(f"checkpoint {path}: {exc}") from None


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model_path = args.model or cfg.paths.model
    report = Path(args.report or cfg.paths.report or "")
    if not str(report) or str(report) == ".":
        raise ConfigError("no report stem given (--report or paths.report)")
    model = _load_model(model_path)
    pairs, manifest = _load_dataset(args.data or cfg.paths.data)
    _check_compatible(model, manifest, model_path)
    source = args.flow_source or model.meta.get("config", {}).get("flow", {}).get("source",
                                                                                  "oracle")
    delta = model.meta.get("config", {}).get("sampling", {}).get("delta", cfg.sampling.delta)
    # drop vehicles whose clues cannot be formed, and report them
    failures = []
    good_pairs = []
    for k, p in enumerate(pairs):
        keep = []
        for i, v in enumerate(p.vehicles):
            if v.box.width <= 0 or v.box.height <= 0:
                failures.append({"scene": k, "vehicle": i, "error": "degenerate box"})
            else:
                keep.append(v)
        good_pairs.append(ScenePair(p.frame_prev, p.frame_curr, p.flow, keep, p.intrinsics,
                                    p.dt, p.seed, p.log))
    samples = extract_samples(good_pairs, model.dims, flow_source=source, delta=delta,
                              checkpoint=model_path)
    if not samples:
        raise DataError("dataset has no vehicles to evaluate")
    cam = CameraIntrinsics.from_dict(manifest["intrinsics"])
    ev = evaluate(model, samples, [p.vehicles for p in good_pairs], float(manifest["dt"]),
                  cam)
    meta = {"config_hash": model.meta.get("config_hash"), "model_digest": model.digest(),
            "flow_source": source, "use_flow_clue": model.use_flow, "failures": failures}
    jpath, cpath = write_report(ev.report, report, meta)
    if not args.no_figures:
        from . import plotting
        doc = json.loads(jpath.read_text())
        plotting.velocity_by_group(doc, report.with_name(report.name + "_velocity.png"))
        plotting.distance_scatter(ev.truth[:, 0], ev.pred[:, 0],
                                  report.with_name(report.name + "_distance.png"))
    log.info("report: %s, %s", jpath, cpath)
    print(json.dumps({"velocity_mse_zx": ev.report.velocity["average"],
                      "velocity_mse_3d": ev.report.velocity_3d["average"],
                      "abs_rel": ev.report.depth["abs_rel"]}))
    return EXIT_DATA if failures else EXIT_OK


def cmd_infer(args) -> int:
    problems = []
    frames = {}
    for name in ("prev", "curr"):
        try:
            frames[name] = read_pgm(getattr(args, name))
        except (FormatError, OSError) as exc:
            problems.append(f"{getattr(args, name)}: {exc}")
    boxes = []
    try:
        boxes = json.loads(Path(args.boxes).read_text())
        if not isinstance(boxes, list) or any(not isinstance(b, list) or len(b) != 4
                                              for b in boxes):
            problems.append(f"{args.boxes}: expected a JSON list of [l, t, r, b] boxes")
    except (OSError, json.JSONDecodeError) as exc:
        problems.append(f"{args.boxes}: {exc}")
    cam = None
    if args.intrinsics:
        try:
            cam = CameraIntrinsics.from_dict(json.loads(Path(args.intrinsics).read_text()))
        except (OSError, json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
            problems.append(f"{args.intrinsics}: {exc}")
    try:
        model = _load_model(args.model)
    except DataError as exc:
        problems.append(str(exc))
    if problems:
        for p in problems:
            print(f"error: {p}", file=sys.stderr)
        return EXIT_DATA
    if args.dt <= 0:
        raise ConfigError(f"--dt must be positive, got {args.dt}")
    if frames["prev"].shape != frames["curr"].shape:
        raise DataError(f"frame shapes differ: {frames['prev'].shape} vs {frames['curr'].shape}")
    if cam is None:
        cam = CameraIntrinsics.from_dict(model.meta["intrinsics"]) if "intrinsics" in model.meta \
            else CameraIntrinsics.default()
    records = infer(model, frames["prev"], frames["curr"], boxes, cam, args.dt,
                    flow_source="estimated")
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "config_hash": model.meta.get("config_hash"),
           "vehicles": records}
    text = json.dumps(doc, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    report = Path(args.report or cfg.paths.report or "")
    if not str(report) or str(report) == ".":
        raise ConfigError("no report stem given (--report or paths.report)")
    pairs, manifest = _load_dataset(args.data or cfg.paths.data)
    result = ablation_report(pairs, cfg.sampling.delta, cfg.flow.levels)
    meta = {"config_hash": cfg.hash(), "dataset": str(args.data or cfg.paths.data)}
    jpath, cpath = write_ablation(result, report, meta)
    if not args.no_figures and result["rows"]:
        from . import plotting
        plotting.ablation_scatter(result["rows"], report.with_name(report.name + "_gain.png"))
    print(json.dumps(result["summary"]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rvk", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"rvk {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config field (repeatable)")
        if seed:
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--out")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--suite", choices=("random", "subpixel"), default="random",
                   help="random traffic scenes or the controlled sub-pixel-motion suite")
    g.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    t = sub.add_parser("train", help="train a model on a dataset")
    common(t)
    t.add_argument("--data")
    t.add_argument("--out-model")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--flow-source", choices=("oracle", "estimated"))
    t.add_argument("--no-flow-clue", action="store_true", help="zero the flow clue")
    t.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    t.add_argument("--no-figures", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(e, seed=False)
    e.add_argument("--data")
    e.add_argument("--model")
    e.add_argument("--report", help="output stem; .json and .csv are appended")
    e.add_argument("--flow-source", choices=("oracle", "estimated"))
    e.add_argument("--no-figures", action="store_true")

    i = sub.add_parser("infer", help="distance and velocity for boxes in a frame pair")
    i.add_argument("--model", required=True)
    i.add_argument("--prev", required=True, help="previous frame (PGM)")
    i.add_argument("--curr", required=True, help="current frame (PGM)")
    i.add_argument("--boxes", required=True, help="JSON list of [l, t, r, b]")
    i.add_argument("--intrinsics", help="JSON with fx, fy, cx, cy, width, height")
    i.add_argument("--dt", type=float, required=True, help="frame interval in seconds")
    i.add_argument("--out", help="write JSON here instead of stdout")

    a = sub.add_parser("ablate", help="full-frame versus vehicle-centric flow accuracy")
    common(a, seed=False)
    a.add_argument("--data")
    a.add_argument("--report")
    a.add_argument("--no-figures", action="store_true")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        worker_count()
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        if "RVK_THREADS" in str(exc):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
