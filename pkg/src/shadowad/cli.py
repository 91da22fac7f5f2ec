"""``shadowad`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch

from shadowad.adversarial import TrainConfig, attenuate_linear, train_loop
from shadowad.errors import DataError, ShadowADError, ValidationError
from shadowad.evaluation import (
    EvalProtocol,
    binarize,
    dataset_boundary_error_cdf,
    detector_predictor,
    report_from_predictions,
)
from shadowad.imaging import Image, load_image, load_mask, save_gray, save_image, save_mask
from shadowad.nets import configure_threads, detector_config, init_params, load_checkpoint
from shadowad.synthdata import TEXTURES, DatasetSpec, generate_dataset, load_directory_dataset, write_dataset

log = logging.getLogger("shadowad")

SCHEMA_VERSION = 1
RUN_SECTIONS = ("schema_version", "train", "attenuator", "detector", "data")
REQUIRED = ("schema_version", "train.iterations", "train.batch_size", "train.seed")


# ------------------------------------------------------------------ run config


def _lookup(doc, dotted):
    node = doc
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return False
        node = node[part]
    return True


def parse_run_config(doc: dict) -> tuple[TrainConfig, dict]:
    """Validate a run configuration document.

    Returns the training configuration and the fully resolved document, with
    every default filled in, as echoed into the run directory.
    """
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object")
    unknown = sorted(set(doc) - set(RUN_SECTIONS))
    if unknown:
        raise ValidationError(f"unknown config keys: {unknown}")
    for key in REQUIRED:
        if not _lookup(doc, key):
            raise ValidationError(f"missing required config field: {key}")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {doc['schema_version']!r}")
    train = dict(doc["train"])
    for net in ("attenuator", "detector"):
        if net in train:
            raise ValidationError(f"train.{net}: network settings belong in the top-level '{net}' section")
        if net in doc:
            defaults = getattr(TrainConfig, "__dataclass_fields__")[net].default.to_dict()
            extra = sorted(set(doc[net]) - set(defaults))
            if extra:
                raise ValidationError(f"unknown {net} keys: {extra}")
            train[net] = {**defaults, **doc[net]}
    config = TrainConfig.from_dict(train)
    data = doc.get("data", {})
    extra = sorted(set(data) - {"train"})
    if extra:
        raise ValidationError(f"unknown data keys: {extra}")
    resolved = config.to_dict()
    return config, {
        "schema_version": SCHEMA_VERSION,
        "train": {k: v for k, v in resolved.items() if k not in ("attenuator", "detector")},
        "attenuator": resolved["attenuator"],
        "detector": resolved["detector"],
        "data": {"train": data.get("train")},
    }


def load_run_config(path) -> tuple[TrainConfig, dict]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_run_config(doc)


# -------------------------------------------------------------------- commands


def cmd_synth(args):
    spec = DatasetSpec(count=args.count, size=args.size, k_range=(args.k_lo, args.k_hi),
                       penumbra_sigma=args.penumbra, texture=args.texture, seed=args.seed)
    samples, manifest = generate_dataset(spec)
    write_dataset(samples, manifest, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def _dataset_root(args, resolved):
    root = args.data or resolved["data"]["train"]
    if root is None:
        raise ValidationError("no training data: pass --data or set data.train in the config")
    return Path(root)


def _snapshot_dir(path: Path) -> Path:
    return path if path.is_dir() else path.parent


def cmd_train(args):
    config, resolved = load_run_config(args.config)
    root = _dataset_root(args, resolved)
    resolved["data"]["train"] = str(root)
    samples = load_directory_dataset(root / "images", root / "masks")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.json", "w") as fh:
            json.dump(resolved, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if (root / "manifest.json").exists():
            shutil.copyfile(root / "manifest.json", out / "dataset_manifest.json")
    except OSError as exc:
        raise DataError(f"cannot write run directory {out}: {exc}") from exc
    resume = _snapshot_dir(Path(args.resume)) if args.resume else None

    def progress(rec):
        if rec.iteration % max(1, config.iterations // 20) == 0:
            log.info("iter %d loss_A %.4f loss_D %.4f gated %.2f", rec.iteration, rec.loss_A, rec.loss_D,
                     rec.gated_fraction)

    train_loop(samples, config, out_dir=out, resume_from=resume, progress=progress)
    print(f"training finished: {out}")


def cmd_detect(args):
    net, _ = load_checkpoint(args.model, kind="detector")
    img = load_image(args.image)
    prob = detector_predictor(net, EvalProtocol(size=args.size, threshold=args.threshold))(img.data)
    save_mask(binarize(prob, args.threshold), args.out)
    if args.prob:
        save_gray(prob, args.prob)


def cmd_attenuate(args):
    net, _ = load_checkpoint(args.model, kind="attenuator")
    img = load_image(args.image)
    mask = load_mask(args.mask)
    if mask.shape != img.shape[:2]:
        raise DataError(f"dimension mismatch: image {img.shape[:2]} vs mask {mask.shape}")
    out = attenuate_linear(net, img.data[None], mask[None], args.size)[0]
    save_image(Image(out), args.out)


def cmd_eval(args):
    protocol = EvalProtocol(size=args.size, threshold=args.threshold)
    root = Path(args.data)
    if args.model:
        net, _ = load_checkpoint(args.model, kind="detector")
        samples = load_directory_dataset(root / "images", root / "masks")
        predict = detector_predictor(net, protocol)
        names = [s.name for s in samples]
        preds = [binarize(predict(s.image.data), protocol.threshold) for s in samples]
        gts = [s.mask for s in samples]
    else:
        names, preds, gts = _mask_pairs(args.pred_dir, root / "masks")
    report = report_from_predictions(names, preds, gts, protocol)
    report.write(args.report)
    print(f"BER {report.ber:.4f}")


def _mask_pairs(pred_dir, gt_dir):
    def stems(d):
        if not Path(d).is_dir():
            raise DataError(f"not a directory: {d}")
        return {p.stem: p for p in Path(d).iterdir() if p.suffix.lower() == ".png"}

    preds, gts = stems(pred_dir), stems(gt_dir)
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        raise DataError("unmatched stems: " + ", ".join(unmatched))
    names = sorted(preds)
    pred_masks, gt_masks = [], []
    for stem in names:
        p, g = load_mask(preds[stem]), load_mask(gts[stem])
        if p.shape != g.shape:
            raise DataError(f"dimension mismatch: {stem}")
        pred_masks.append(p)
        gt_masks.append(g)
    return names, pred_masks, gt_masks


def cmd_analyze(args):
    _, preds, gts = _mask_pairs(args.pred_dir, args.gt_dir)
    cdf = dataset_boundary_error_cdf(preds, gts, args.max_distance)
    cdf.write_csv(args.cdf)
    print(f"{cdf.n_fn} false negatives, {cdf.n_fp} false positives")


def cmd_bench(args):
    config = detector_config(depth=args.depth, base_channels=args.base, max_channels=512)
    net = init_params(config, seed=0).eval()
    x = torch.zeros(1, 3, args.size, args.size)
    times = []
    with torch.no_grad():
        net(x)
        for _ in range(args.repeats):
            start = time.perf_counter()
            net(x)
            times.append(time.perf_counter() - start)
    median = float(np.median(times))
    print(json.dumps({"size": args.size, "depth": args.depth, "threads": torch.get_num_threads(),
                      "median_latency_s": median, "fps": 1.0 / median}))


# ---------------------------------------------------------------------- parser


def _positive(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _unit(text):
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadowad", description="Adversarial shadow attenuation and detection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=_positive, required=True)
    p.add_argument("--size", type=_positive, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-lo", type=float, default=0.0)
    p.add_argument("--k-hi", type=float, default=0.6)
    p.add_argument("--penumbra", type=float, default=1.0)
    p.add_argument("--texture", choices=TEXTURES, default="smooth-noise")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the attenuator and detector")
    p.add_argument("--data", help="dataset directory with images/ and masks/")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="snapshot directory (or a checkpoint inside it)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="predict a shadow mask")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=_unit, default=0.5)
    p.add_argument("--prob", help="also write the probability map as 8-bit grayscale")
    p.add_argument("--size", type=_positive, default=64, help="network input size")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("attenuate", help="weaken the shadow of an image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=_positive, default=64, help="network input size")
    p.set_defaults(func=cmd_attenuate)

    p = sub.add_parser("eval", help="balanced error rate over a dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--pred-dir", help="precomputed prediction masks named like the dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--threshold", type=_unit, default=0.5)
    p.add_argument("--size", type=_positive, default=64, help="network input size")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="error distances to the shadow boundary")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--cdf", required=True)
    p.add_argument("--max-distance", type=int, default=50)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="detector forward latency")
    p.add_argument("--size", type=_positive, default=256)
    p.add_argument("--depth", type=_positive, default=7)
    p.add_argument("--base", type=_positive, default=64)
    p.add_argument("--repeats", type=_positive, default=5)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        configure_threads()
        args.func(args)
    except ShadowADError as exc:
        print(f"shadowad {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"shadowad {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
