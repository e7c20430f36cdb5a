"""``crowdlab`` command line.

Training commands write a fresh run directory::

    <out>/<timestamp>-<hash8>/config.json
                             logs/*.csv
                             checkpoints/*.csa
                             reports/*

``prepare`` and ``extract-frames`` write content-addressed files under the
cache root (``$CROWDLAB_CACHE`` or ``<out>/cache``) instead.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentSpec, augment_clip
from .checkpoint import CheckpointArchive, read_checkpoint, write_checkpoint
from .config import anomaly_spec, canonical_json, config_hash, fen_config, load_config
from .density import density_to_png, generate_density_map
from .errors import CrowdLabError, InvalidConfig, MissingFile
from .manifest import load_image, load_manifest
from .metrics import CountPair, mae, mse

log = logging.getLogger("crowdlab")

# config sections that define model shapes; stored in checkpoint metadata
_MODEL_KEYS = {
    "rotation": ("fen", "rot_head"),
    "density": ("fen", "density_head"),
    "anomaly": ("anomaly",),
}


class RunDir:
    def __init__(self, root: Path):
        self.root = root
        for sub in ("logs", "checkpoints", "reports"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []

    @classmethod
    def create(cls, cfg: dict) -> "RunDir":
        base = Path(cfg["paths"]["output"])
        stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        name = f"{stamp}-{config_hash(cfg)[:8]}"
        root, n = base / name, 1
        while root.exists():
            n += 1
            root = base / f"{name}-{n}"
        run = cls(root)
        (root / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return run

    def path(self, sub: str, name: str) -> Path:
        p = self.root / sub / name
        self.artifacts.append(str(p.relative_to(self.root)))
        return p

    def write_report(self, cfg: dict, logs: dict, metrics: dict) -> Path:
        report = {
            "config_hash": config_hash(cfg),
            "version": __version__,
            "logs": logs,
            "metrics": metrics,
            "artifacts": sorted(self.artifacts),
        }
        out = self.root / "reports" / "run.json"
        out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return out


def cache_root(cfg: dict) -> Path:
    env = os.environ.get("CROWDLAB_CACHE")
    return Path(env) if env else Path(cfg["paths"]["output"]) / "cache"


def model_metadata(cfg: dict, stage: str, **extra) -> dict:
    model_cfg = {k: cfg[k] for k in _MODEL_KEYS[stage]}
    meta = {"stage": stage, "seed": cfg["seed"], "config": canonical_json(model_cfg), "version": __version__}
    meta.update({k: str(v) for k, v in extra.items()})
    return meta


def stored_config(archive: CheckpointArchive, stage: str) -> dict:
    if archive.metadata.get("stage") != stage or "config" not in archive.metadata:
        raise InvalidConfig(f"checkpoint is not a {stage} checkpoint")
    return json.loads(archive.metadata["config"])


def _require(value, what: str):
    if value is None:
        raise InvalidConfig(f"{what} is required (flag or config)")
    return value


def _save(run: RunDir, name: str, archive: CheckpointArchive) -> Path:
    path = run.path("checkpoints", name)
    write_checkpoint(archive, path)
    return path


def _save_log(run: RunDir, name: str, trace) -> Path:
    path = run.path("logs", name)
    trace.write_csv(path)
    return path


def _last_row(trace) -> dict:
    return dict(zip(trace.columns, trace.rows[-1])) if trace.rows else {}


def _hash_tree(paths) -> str:
    h = hashlib.sha256()
    for root in paths:
        root = Path(root)
        files = [root] if root.is_file() else sorted(p for p in root.rglob("*") if p.is_file())
        for f in files:
            h.update(str(f.relative_to(root.parent)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- data prep

def prepare_density(cfg: dict, manifest_path) -> tuple[Path, bool]:
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path, check_images=True)
    sigma = float(cfg["density"]["sigma"])
    key = hashlib.sha256(manifest_path.read_bytes() + repr(sigma).encode()).hexdigest()[:16]
    out = cache_root(cfg) / f"density-{key}.csa"
    if out.is_file():
        return out, True
    archive = CheckpointArchive(metadata={"sigma": repr(sigma), "manifest": manifest.name})
    for i, rec in enumerate(manifest.records):
        dmap = generate_density_map(rec.points, rec.height, rec.width, sigma)
        archive.add(f"density/{i:05d}", dmap.values)
    archive.metadata["images"] = json.dumps([r.image_path for r in manifest.records])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(archive, out)
    return out, False


def prepare_clips(cfg: dict, violent, nonviolent) -> tuple[Path, Path, bool, list]:
    from .video import assemble_and_shuffle, list_clips, process_videos, save_clip_cache

    frames = cfg["frames"]
    for d in (violent, nonviolent):
        list_clips(d)  # MissingDirectory before hashing
    key = hashlib.sha256(
        (_hash_tree([violent, nonviolent]) + canonical_json(frames) + str(cfg["seed"])).encode()
    ).hexdigest()[:16]
    out = cache_root(cfg) / f"clips-{key}.csa"
    labels = out.with_suffix(".csv")
    if out.is_file() and labels.is_file():
        return out, labels, True, []
    failures: list = []
    v, _ = process_videos(violent, 1, frames["max_frames"], failures, frames["size"])
    nv, _ = process_videos(nonviolent, 0, frames["max_frames"], failures, frames["size"])
    dataset = assemble_and_shuffle(v, nv, cfg["seed"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_clip_cache(dataset, out, labels)
    return out, labels, False, failures


def cmd_prepare(cfg: dict, args) -> int:
    manifest = args.manifest or cfg["paths"]["manifest"]
    violent = args.violent or cfg["paths"]["violent"]
    nonviolent = args.nonviolent or cfg["paths"]["nonviolent"]
    if manifest is None and (violent is None or nonviolent is None):
        raise InvalidConfig("prepare needs a manifest or both clip directories")
    if manifest is not None:
        path, hit = prepare_density(cfg, manifest)
        print(f"{'cache hit' if hit else 'cached'}: {path}")
    if violent is not None and nonviolent is not None:
        path, _, hit, failures = prepare_clips(cfg, violent, nonviolent)
        for src, why in failures:
            print(f"skipped: {src}: {why}", file=sys.stderr)
        print(f"{'cache hit' if hit else 'cached'}: {path}")
    return 0


def cmd_extract_frames(cfg: dict, args) -> int:
    violent = _require(args.violent or cfg["paths"]["violent"], "--violent")
    nonviolent = _require(args.nonviolent or cfg["paths"]["nonviolent"], "--nonviolent")
    path, labels, hit, failures = prepare_clips(cfg, violent, nonviolent)
    for src, why in failures:
        print(f"skipped: {src}: {why}", file=sys.stderr)
    print(f"{'cache hit' if hit else 'cached'}: {path}")
    print(f"labels: {labels}")
    return 0


# ----------------------------------------------------------------- counting

def cmd_pretrain_rotation(cfg: dict, args) -> int:
    from .nn_utils import OptimizerConfig
    from .stage1 import RotationHeadConfig, train_stage1

    manifest = load_manifest(_require(args.manifest or cfg["paths"]["manifest"], "--manifest"))
    s1 = cfg["stage1"]
    run = RunDir.create(cfg)
    archive, trace, _ = train_stage1(
        manifest,
        fen_config(cfg),
        RotationHeadConfig(**cfg["rot_head"]),
        OptimizerConfig.from_dict(s1["optimizer"]),
        cfg["seed"],
        s1["steps"],
        s1["crop_size"],
    )
    archive.metadata = model_metadata(cfg, "rotation", steps=s1["steps"])
    ckpt = _save(run, "stage1.csa", archive)
    _save_log(run, "stage1.csv", trace)
    run.write_report(cfg, {"stage1": len(trace.rows)}, _last_row(trace))
    print(ckpt)
    return 0


def cmd_train_density(cfg: dict, args) -> int:
    from .nn_utils import OptimizerConfig
    from .ot import PriorSpec, SinkhornConfig
    from .stage1 import _as_images
    from .stage2 import DensityHeadConfig, calibrate_scale, train_stage2, train_supervised

    stage1 = read_checkpoint(_require(args.stage1, "--stage1"))
    manifest = load_manifest(_require(args.manifest or cfg["paths"]["manifest"], "--manifest"))
    s2 = cfg["stage2"]
    fcfg = fen_config(cfg)
    head_cfg = DensityHeadConfig(**cfg["density_head"])
    prior = PriorSpec.from_dict(cfg["prior"])
    optim = OptimizerConfig.from_dict(s2["optimizer"])
    images = _as_images(manifest, fcfg.input_channels)
    run = RunDir.create(cfg)
    archive, trace, model = train_stage2(
        stage1, images, fcfg, head_cfg, prior, SinkhornConfig.from_dict(cfg["sinkhorn"]),
        optim, cfg["seed"], s2["steps"], s2["crop_size"],
    )
    logs = {"stage2": len(trace.rows)}
    _save_log(run, "stage2.csv", trace)
    if s2["supervised"]:
        maps = [
            generate_density_map(r.points, r.height, r.width, cfg["density"]["sigma"]).values
            for r in manifest.records
        ]
        sup = train_supervised(model, images, maps, optim, s2["steps"], cfg["seed"] + 1, s2["crop_size"])
        _save_log(run, "supervised.csv", sup)
        logs["supervised"] = len(sup.rows)
        scale = 1.0
    else:
        scale = calibrate_scale(model, prior=prior, images=images, n_crops=s2["calibration_crops"],
                                seed=cfg["seed"], crop_size=s2["crop_size"])
    from .stage2 import stage2_archive

    archive = stage2_archive(model, model_metadata(cfg, "density", steps=s2["steps"], scale=repr(scale)))
    ckpt = _save(run, "stage2.csa", archive)
    run.write_report(cfg, logs, {**_last_row(trace), "scale": scale})
    print(ckpt)
    return 0


def _load_density_checkpoint(path):
    from .fen import FenConfig
    from .stage2 import DensityHeadConfig, load_density_net

    archive = read_checkpoint(path)
    stored = stored_config(archive, "density")
    model = load_density_net(archive, FenConfig.from_dict(stored["fen"]), DensityHeadConfig(**stored["density_head"]))
    return model, archive


def _trim(image: np.ndarray, stride: int) -> np.ndarray:
    # bottom/right rows that do not fill a whole output cell are dropped
    h, w = image.shape[0] // stride * stride, image.shape[1] // stride * stride
    return image[:h, :w]


def cmd_predict_count(cfg: dict, args) -> int:
    from .ot import PriorSpec
    from .stage2 import calibrate_scale, predict_count, raw_density, scale_from_reference

    model, archive = _load_density_checkpoint(_require(args.checkpoint, "--checkpoint"))
    stride = model.fen.stride
    channels = model.fen.config.input_channels
    if args.manifest:
        manifest = load_manifest(args.manifest)
        entries = [(str(manifest.resolve(r)), r.image_path, r.count) for r in manifest.records]
    else:
        entries = [(p, p, None) for p in args.images or []]
    for full, _, _ in entries:
        if not Path(full).is_file():
            raise MissingFile(f"image not found: {full}")
    images = [_trim(load_image(full, channels), stride) for full, _, _ in entries]

    if args.scale is not None:
        scale = float(args.scale)
    elif args.scale_source == "stored":
        scale = float(archive.metadata.get("scale", "1.0"))
    elif args.scale_source == "prior":
        s2 = cfg["stage2"]
        scale = calibrate_scale(model, prior=PriorSpec.from_dict(cfg["prior"]), images=images,
                                n_crops=s2["calibration_crops"], seed=cfg["seed"], crop_size=s2["crop_size"])
    elif args.scale_source == "reference":
        labeled = [(im, gt) for im, (_, _, gt) in zip(images, entries) if gt is not None]
        if not labeled:
            raise InvalidConfig("reference scaling needs a labeled manifest")
        scale = scale_from_reference(labeled[0][1], float(raw_density(model, labeled[0][0]).sum()))
    else:
        scale = 1.0

    run = RunDir.create(cfg)
    maps_dir = run.root / "reports" / "maps"
    maps_dir.mkdir(exist_ok=True)
    labeled = bool(entries) and all(gt is not None for _, _, gt in entries)
    pairs = []
    csv_path = run.path("reports", "counts.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("image", "count", "gt") if labeled else ("image", "count"))
        for i, ((_, name, gt), image) in enumerate(zip(entries, images)):
            dmap, count = predict_count(model, image, scale)
            png = maps_dir / f"{i:05d}_{Path(name).stem}.png"
            density_to_png(dmap, png)
            run.artifacts.append(str(png.relative_to(run.root)))
            if labeled:
                w.writerow((name, repr(count), gt))
                pairs.append(CountPair(count, gt))
            else:
                w.writerow((name, repr(count)))
        metrics = {"scale": scale}
        if pairs:
            metrics.update(mae=mae(pairs), mse=mse(pairs))
            w.writerow(("MAE", repr(metrics["mae"]), ""))
            w.writerow(("MSE", repr(metrics["mse"]), ""))
    run.write_report(cfg, {}, metrics)
    print(csv_path)
    return 0


# ------------------------------------------------------------------ anomaly

def _clip_dataset(cfg: dict, clips):
    from .video import load_clip_cache

    if clips is None:
        violent, nonviolent = cfg["paths"]["violent"], cfg["paths"]["nonviolent"]
        if violent is None or nonviolent is None:
            raise InvalidConfig("--clips or both clip directories are required")
        clips, labels, _, _ = prepare_clips(cfg, violent, nonviolent)
    else:
        clips = Path(clips)
        labels = clips.with_suffix(".csv")
    for p in (clips, labels):
        if not Path(p).is_file():
            raise MissingFile(f"clip cache file not found: {p}")
    return load_clip_cache(clips, labels)


def _with_augmented_copies(dataset, copies: int, spec: AugmentSpec, seed: int):
    from .video import ClipDatasetArrays

    if copies <= 0:
        return dataset
    rng = np.random.default_rng(seed)
    X, Y, M = [dataset.X], [dataset.Y], [dataset.mask]
    for _ in range(copies):
        X.append(np.stack([augment_clip(x, m, spec, rng) for x, m in zip(dataset.X, dataset.mask)]))
        Y.append(dataset.Y)
        M.append(dataset.mask)
    return ClipDatasetArrays(np.concatenate(X), np.concatenate(Y), np.concatenate(M),
                             list(dataset.sources) * (copies + 1))


def cmd_train_anomaly(cfg: dict, args) -> int:
    from .anomaly import AnomalyTrainConfig, train_anomaly

    a = cfg["anomaly"]
    dataset = _clip_dataset(cfg, args.clips)
    aug_seed = int(np.random.SeedSequence(cfg["seed"]).generate_state(4)[3])
    dataset = _with_augmented_copies(dataset, a["augment_copies"], AugmentSpec.from_dict(cfg["augment"]), aug_seed)
    pretrained_path = args.pretrained or a["pretrained"]
    pretrained = read_checkpoint(pretrained_path) if pretrained_path else None
    run = RunDir.create(cfg)
    archive, trace, _ = train_anomaly(
        dataset, AnomalyTrainConfig.from_dict(a["train"]), anomaly_spec(cfg), cfg["seed"], pretrained
    )
    archive.metadata = model_metadata(cfg, "anomaly", epochs=a["train"]["epochs"])
    ckpt = _save(run, "anomaly.csa", archive)
    _save_log(run, "anomaly.csv", trace)
    run.write_report(cfg, {"anomaly": len(trace.rows)}, _last_row(trace))
    print(ckpt)
    return 0


def cmd_eval_anomaly(cfg: dict, args) -> int:
    from .anomaly import evaluate_anomaly, load_anomaly_model
    from .config import DEFAULTS, _merge

    archive = read_checkpoint(_require(args.checkpoint, "--checkpoint"))
    stored = _merge(DEFAULTS, stored_config(archive, "anomaly"))
    model = load_anomaly_model(archive, anomaly_spec(stored))
    dataset = _clip_dataset(cfg, args.clips)
    result = evaluate_anomaly(model, dataset, args.threshold)
    run = RunDir.create(cfg)
    out = run.path("reports", "eval.json")
    payload = result.to_dict()
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    run.write_report(cfg, {}, payload)
    print(out)
    return 0


def cmd_report(cfg: dict, args) -> int:
    from .report import build_report

    summary = build_report(args.run, plots=not args.no_plots)
    print(json.dumps(summary["logs"], sort_keys=True))
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand from resetting a global flag given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="JSON config merged over defaults")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, help="output root for runs and the default cache")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="crowdlab", parents=[common])
    p.add_argument("--version", action="version", version=f"crowdlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="cache density maps and clip tensors")
    s.add_argument("--manifest")
    s.add_argument("--violent")
    s.add_argument("--nonviolent")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("pretrain-rotation", parents=[common], help="stage 1: rotation pretext training")
    s.add_argument("--manifest")
    s.add_argument("--steps", type=int, dest="stage1.steps")
    s.add_argument("--batch-size", type=int, dest="stage1.optimizer.batch_size")
    s.add_argument("--lr", type=float, dest="stage1.optimizer.lr")
    s.set_defaults(func=cmd_pretrain_rotation)

    s = sub.add_parser("train-density", parents=[common], help="stage 2: density head on a frozen FEN")
    s.add_argument("--stage1", required=True, help="stage 1 checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--steps", type=int, dest="stage2.steps")
    s.add_argument("--batch-size", type=int, dest="stage2.optimizer.batch_size")
    s.add_argument("--lr", type=float, dest="stage2.optimizer.lr")
    s.add_argument("--supervised", action="store_const", const=True, dest="stage2.supervised",
                   help="fit annotated density maps instead of calibrating on the prior")
    s.set_defaults(func=cmd_train_density)

    s = sub.add_parser("predict-count", parents=[common], help="counts and density maps for images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", help="labeled manifest; adds a gt column and MAE/MSE footer")
    s.add_argument("--images", nargs="*")
    s.add_argument("--scale", type=float, help="explicit count scale")
    s.add_argument("--scale-source", choices=("stored", "prior", "reference", "none"), default="stored")
    s.set_defaults(func=cmd_predict_count)

    s = sub.add_parser("extract-frames", parents=[common], help="decode clip folders to a tensor cache")
    s.add_argument("--violent")
    s.add_argument("--nonviolent")
    s.add_argument("--max-frames", type=int, dest="frames.max_frames")
    s.set_defaults(func=cmd_extract_frames)

    s = sub.add_parser("train-anomaly", parents=[common], help="train the violence classifier")
    s.add_argument("--clips", help="clip cache (.csa with a sibling .csv)")
    s.add_argument("--pretrained", help="backbone weights with vgg/... entries")
    s.add_argument("--epochs", type=int, dest="anomaly.train.epochs")
    s.add_argument("--batch-size", type=int, dest="anomaly.train.batch_size")
    s.add_argument("--lr", type=float, dest="anomaly.train.lr")
    s.set_defaults(func=cmd_train_anomaly)

    s = sub.add_parser("eval-anomaly", parents=[common], help="confusion matrix and P/R/F1")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--clips")
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_eval_anomaly)

    s = sub.add_parser("report", parents=[common], help="curves and summary for a run directory")
    s.add_argument("run", type=Path)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if "." in k}
    overrides["seed"] = getattr(args, "seed", None)
    if getattr(args, "out", None) is not None:
        overrides["paths.output"] = str(args.out)
    try:
        cfg = load_config(getattr(args, "config", None), overrides)
        return args.func(cfg, args)
    except CrowdLabError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {exc.code}: {msg}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: IO_ERROR: {exc}".replace("\n", " "), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
