"""Command line entry point: ``sganet {synth,import,prepare,train,eval,predict}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from .annotations import (
    ImageRecord,
    PointAnnotationSet,
    SynthConfig,
    load_annotations,
    read_image,
    resize_capped,
    save_annotations,
    synth_generate,
)
from .evaluator import evaluate, predict_count, render_overlays
from .losses import LossConfig
from .maps import KernelSpec, density_map, read_dmap, segmentation_map, write_dmap
from .network import NetworkSpec, load_checkpoint
from .trainer import PreparedImage, TrainConfig, train


def load_config(path):
    """Read a YAML (or JSON) config file into a dict."""
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return data


def configs_from_dict(data):
    """Split a training config into ``(NetworkSpec, TrainConfig)``.

    Sections: ``network``, ``train``, ``loss``, ``kernel``. ``lambda`` is
    accepted as an alias of ``lambda_`` in the loss section.
    """
    loss = dict(data.get("loss") or {})
    if "lambda" in loss:
        loss["lambda_"] = loss.pop("lambda")
    train_kwargs = dict(data.get("train") or {})
    try:
        train_kwargs["loss"] = LossConfig(**loss)
        train_kwargs["kernel"] = KernelSpec(**(data.get("kernel") or {}))
        return NetworkSpec(**(data.get("network") or {})), TrainConfig(**train_kwargs)
    except TypeError as exc:
        # unknown keys surface as TypeError from the dataclass constructors
        raise ValueError(f"invalid config: {exc}") from None


def _stem(image_id):
    return Path(image_id).with_suffix("").as_posix().replace("/", "__")


def cmd_synth(args):
    cfg = SynthConfig(**load_config(args.config))
    manifest = save_annotations(synth_generate(cfg), args.out)
    print(f"wrote {cfg.num_images} images and {manifest}")


def cmd_import(args):
    records = load_annotations(args.manifest)
    total = sum(r.count for r in records)
    print(f"{len(records)} images, {total} annotated points")
    for r in records:
        h, w = r.shape
        print(f"  {r.image_id}: {w}x{h}, {r.count} points")


def cmd_prepare(args):
    kernel = KernelSpec(args.sigma, args.ksize, args.boxn)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for rec in load_annotations(args.manifest):
        stem = _stem(rec.image_id)
        write_dmap(out / f"{stem}.density.dmap", density_map(rec.annotations, kernel))
        write_dmap(out / f"{stem}.seg.dmap", segmentation_map(rec.annotations, kernel))
        index.append(
            {"image": rec.image_id, "density": f"{stem}.density.dmap", "segmentation": f"{stem}.seg.dmap"}
        )
    (out / "index.json").write_text(
        json.dumps({"kernel": dataclasses.asdict(kernel), "entries": index}, indent=1)
    )
    print(f"wrote ground truth for {len(index)} images to {out}")


def _load_prepared(records, gt_dir):
    gt_dir = Path(gt_dir)
    entries = {e["image"]: e for e in json.loads((gt_dir / "index.json").read_text())["entries"]}
    prepared = []
    for rec in records:
        e = entries[rec.image_id]
        den = read_dmap(gt_dir / e["density"]).values.astype("float64")
        seg = read_dmap(gt_dir / e["segmentation"], kind="segmentation").values
        if den.shape != rec.shape:
            raise ValueError(f"{rec.image_id}: cached ground truth does not match image size")
        prepared.append(PreparedImage(rec, den, seg))
    return prepared


def cmd_train(args):
    spec, config = configs_from_dict(load_config(args.config))
    data = Path(args.data)
    records = load_annotations(data / "manifest.json" if data.is_dir() else data)
    dataset = _load_prepared(records, args.gt) if args.gt else records
    model, history = train(dataset, spec, config, out_dir=args.out)
    last = history[-1] if history else {}
    print(f"trained {model.epoch} epochs; final log: {json.dumps(last)}")


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    report = evaluate(model, load_annotations(args.manifest), max_side=args.max_side, out=args.out)
    print(f"MAE {report.mae:.4f}  RMSE {report.rmse:.4f}  ({len(report.per_image)} images)")


def cmd_predict(args):
    model = load_checkpoint(args.checkpoint)
    pixels = read_image(args.image)
    h, w = pixels.shape[:2]
    rec = ImageRecord(Path(args.image).name, pixels, PointAnnotationSet(Path(args.image).name, w, h))
    if args.max_side:
        rec = resize_capped(rec, args.max_side)
    density, attention, count = predict_count(model, rec)
    print(f"{args.image}: predicted count {count:.2f}")
    if args.render:
        print(f"rendered {render_overlays(rec, density, attention, args.render)}")


def build_parser():
    parser = argparse.ArgumentParser(prog="sganet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic point-annotated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import", help="validate a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("prepare", help="rasterize ground-truth maps as DMAP files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--ksize", type=int, default=15)
    p.add_argument("--boxn", type=int, default=25)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset directory (with manifest.json) or manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--gt", help="directory written by `sganet prepare` to reuse cached maps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="report.json")
    p.add_argument("--max-side", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="count one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--render", help="directory for the overlay PNG")
    p.add_argument("--max-side", type=int, default=None)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"sganet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
