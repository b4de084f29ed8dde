"""Command-line front end: data generation, flow estimation, train/eval/predict.

All machine-readable output goes to stdout as JSON; human-oriented logs go
to stderr. Exit codes: 0 success, 2 usage/config/IO error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image

from . import flow as FL
from . import training as TR
from . import video as V
from .fusion import ModelConfig, TwoStreamModel
from .tensor import ParameterError, ShapeMismatchError
from .video import ConfigError

_BACKBONE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "frames": {"type": "integer"}, "height": {"type": "integer"},
        "width": {"type": "integer"}, "channels": {"type": "integer"},
        "patch": {"type": "array", "items": {"type": "integer"}},
        "embed_dim": {"type": "integer"}, "heads": {"type": "integer"},
        "pool_strides": {"type": "array", "items": {"type": "integer"}},
        "ffn_dim": {"type": "integer"}, "dropout": {"type": "number"},
        "out_dim": {"type": "integer"},
    },
}

_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "backbone": _BACKBONE_SCHEMA,
                "num_classes": {"type": "integer"},
                "fusion_heads": {"type": "integer"},
                "fusion_ffn_dim": {"type": "integer"},
                "encoder_depth": {"type": "integer"},
                "encoder_dropout": {"type": "number"},
                "head_dropout": {"type": "number"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number"},
                "batch_size": {"type": "integer"},
                "max_epochs": {"type": "integer"},
                "patience": {"type": "integer"},
                "dropout": {"type": "number"},
                "seed": {"type": "integer"},
                "stream_mode": {"enum": ["both", "rgb_only", "flow_only"]},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "root": {"type": "string"},
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "classes": {
                            "type": "array",
                            "items": {"type": "array", "items": {"type": "string"}},
                        },
                        "clips_per_class": {"type": "integer"},
                        "frames": {"type": "integer"},
                        "height": {"type": "integer"},
                        "width": {"type": "integer"},
                        "seed": {"type": "integer"},
                        "noise_amp": {"type": "number"},
                        "shape_size": {"type": "integer"},
                        "speed": {"type": "number"},
                    },
                },
            },
        },
        "flow": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": {"type": "number"}, "iterations": {"type": "integer"},
                "levels": {"type": "integer"}, "tol": {"type": "number"},
            },
        },
    },
}


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def load_run_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}")
    try:
        jsonschema.validate(raw, _SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError(f"{path}: invalid config at {loc}: {exc.message}")
    return raw


def _model_config(raw: dict) -> ModelConfig:
    return ModelConfig.from_dict(raw.get("model", {}))


def _train_config(raw: dict, overrides: dict) -> TR.TrainConfig:
    d = dict(raw.get("train", {}))
    d.update({k: v for k, v in overrides.items() if v is not None})
    if "max_epochs" in d and "patience" in d:
        d["patience"] = min(d["patience"], d["max_epochs"])
    return TR.TrainConfig(**d)


def _flow_config(raw: dict) -> FL.FlowSolverConfig:
    return FL.FlowSolverConfig(**raw.get("flow", {}))


def _synth_config(raw: dict) -> V.SynthDatasetConfig:
    data = raw.get("data", {})
    if "synthetic" not in data:
        raise CliError("config has no data.synthetic section")
    d = dict(data["synthetic"])
    if "classes" in d:
        d["classes"] = [tuple(c) for c in d["classes"]]
    return V.SynthDatasetConfig(**d)


def _log(msg: str, verbose: bool = True):
    if verbose:
        print(msg, file=sys.stderr)


def _load_dataset(raw: dict, model_cfg: ModelConfig, verbose: bool) -> dict:
    """Dataset splits as lists of VideoClips, from disk or synthesized."""
    data = raw.get("data", {})
    bb = model_cfg.backbone
    if "root" in data:
        root = Path(data["root"])
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise CliError(f"no manifest.json under {root}")
        manifest = json.loads(manifest_path.read_text())
        splits = {}
        for split, entries in manifest["splits"].items():
            clips = []
            for e in entries:
                clip = V.load_clip_dir(
                    root / split / e["class"] / e["id"],
                    size=(bb.height, bb.width), target_frames=bb.frames,
                )
                clip.label = e["label"]
                clips.append(clip)
            splits[split] = clips
        _log(f"loaded dataset from {root}", verbose)
        return {"splits": splits, "class_names": manifest["class_names"]}
    ds = V.generate_synthetic_dataset(_synth_config(raw))
    _log("generated synthetic dataset in memory", verbose)
    return ds


def cmd_gen_data(args) -> int:
    raw = load_run_config(args.config)
    cfg = _synth_config(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    ds = V.generate_synthetic_dataset(cfg)
    manifest = V.write_dataset(args.out, ds)
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    _log(f"wrote dataset to {args.out}: {counts}", True)
    print(json.dumps({"out": str(args.out), "splits": counts}))
    return 0


def cmd_flow(args) -> int:
    imgs = []
    for p in (args.image1, args.image2):
        try:
            imgs.append(np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0)
        except FileNotFoundError:
            raise CliError(f"cannot read image: {p}")
        except Exception as exc:
            raise CliError(f"{p}: {exc}")
    raw = load_run_config(args.config) if args.config else {}
    flow = FL.estimate_flow(imgs[0], imgs[1], _flow_config(raw))
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    FL.write_flo2(prefix.with_suffix(".flo2"), flow)
    rgb = FL.quantize_rgb(FL.flow_to_rgb(flow))
    Image.fromarray(rgb).save(prefix.with_suffix(".png"))
    print(json.dumps({
        "flo2": str(prefix.with_suffix(".flo2")),
        "png": str(prefix.with_suffix(".png")),
        "mean_magnitude": float(np.sqrt((flow ** 2).sum(-1)).mean()),
    }))
    return 0


def _prepare_splits(ds: dict, raw: dict, verbose: bool) -> dict:
    root = raw.get("data", {}).get("root")
    cache_dir = Path(root) / ".flow_cache" if root else None
    cache = TR.FlowCache(_flow_config(raw), cache_dir=cache_dir)
    out = {}
    for split, clips in ds["splits"].items():
        if clips:
            out[split] = TR.prepare_split(clips, cache)
            _log(f"prepared {split}: {len(clips)} clips", verbose)
    return out


def cmd_train(args) -> int:
    raw = load_run_config(args.config)
    model_cfg = _model_config(raw)
    train_cfg = _train_config(
        raw, {"seed": args.seed, "max_epochs": args.max_epochs}
    )
    ds = _load_dataset(raw, model_cfg, args.verbose)
    splits = _prepare_splits(ds, raw, args.verbose)
    if "train" not in splits or "val" not in splits:
        raise CliError("dataset must provide train and val splits")
    model = TwoStreamModel(model_cfg, np.random.default_rng(train_cfg.seed))

    log_path = Path(args.out).with_suffix(".metrics.jsonl")
    log_fh = open(log_path, "w")

    def log_fn(entry):
        log_fh.write(json.dumps(entry) + "\n")
        log_fh.flush()
        _log(
            f"epoch {entry['epoch']}: train {entry['train_loss']:.4f} "
            f"val {entry['val_loss']:.4f} top1 {entry['val_top1']:.3f}",
            args.verbose,
        )

    try:
        ckpt, log = TR.train(model, splits["train"], splits["val"], train_cfg, log_fn)
    finally:
        log_fh.close()
    ckpt.extra["class_names"] = ds["class_names"]
    TR.save_checkpoint(args.out, ckpt)
    result = {
        "checkpoint": str(args.out),
        "metrics_log": str(log_path),
        "best_epoch": ckpt.epoch,
        "best_val_loss": ckpt.best_val_loss,
        "epochs_run": log[-1]["epoch"],
    }
    if "test" in splits:
        m = TR.evaluate_arrays(model, splits["test"], train_cfg.batch_size,
                               stream_mode=train_cfg.stream_mode)
        result["test_top1"] = m.top1
        result["test_loss"] = m.mean_loss
    print(json.dumps(result))
    return 0


def cmd_eval(args) -> int:
    ckpt = TR.load_checkpoint(args.checkpoint)
    raw = load_run_config(args.config)
    model_cfg = ModelConfig.from_dict(ckpt.model_config)
    ds = _load_dataset(raw, model_cfg, args.verbose)
    splits = _prepare_splits(ds, raw, args.verbose)
    if args.split not in splits:
        raise CliError(f"dataset has no {args.split!r} split")
    m = TR.evaluate(ckpt, splits[args.split])
    print(json.dumps({
        "split": args.split,
        "top1": m.top1,
        "mean_loss": m.mean_loss,
        "per_class": m.per_class,
    }))
    return 0


def cmd_predict(args) -> int:
    ckpt = TR.load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    bb = model.cfg.backbone
    clip = V.load_clip_dir(args.clip_dir, size=(bb.height, bb.width),
                           target_frames=bb.frames)
    raw = load_run_config(args.config) if args.config else {}
    cache = TR.FlowCache(_flow_config(raw))
    norm = V.NormalizationSpec()
    rgb = V.normalize(clip.frames, norm)[None]
    flow = V.normalize(cache.flow_rgb(clip), norm)[None]
    logits = model.forward(rgb, flow).data[0]
    e = np.exp(logits - logits.max())
    probs = e / e.sum()
    best = int(np.argmax(probs))
    class_names = ckpt.extra.get("class_names")
    print(json.dumps({
        "class": class_names[best] if class_names else best,
        "class_index": best,
        "probability": float(probs[best]),
        "probabilities": [float(p) for p in probs],
    }))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsvt", description="Two-stream video transformer pipeline"
    )
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("flow", help="estimate flow between two images")
    p.add_argument("image1")
    p.add_argument("image2")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--config")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("train", help="train the two-stream model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one clip directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("clip_dir")
    p.add_argument("--config")
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ParameterError, ShapeMismatchError, IOError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TR.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
