"""Command-line entry point: preprocess, synth, train, eval, predict, heatmap.

All outputs land under --out. Every command takes --seed and --config; the
config file holds flat `key = value` pairs and explicit flags override it.
Exit codes: 0 success, 2 disk-not-found rejection, 3 corrupt checkpoint,
4 unreadable image, 64 usage error, 1 anything else.
"""

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import LESION_CHANNELS
from .data import (
    ImageReadError,
    ManifestError,
    load_example,
    load_manifest,
    read_image,
    synth_write,
    write_image,
)
from .heatmaps import stitch_all
from .metrics import evaluate
from .model import (
    CheckpointError,
    MilNet,
    MilNetConfig,
    forward_bag_batched,
    load_checkpoint,
    save_checkpoint,
)
from .patches import EmptyBag, PatchSpec, extract_grid
from .preproc import DiskNotFound, RawFundusImage, preprocess_image, warp_mask_to_frame
from .training import AugmentRanges, TrainConfig, train

EXIT_OK = 0
EXIT_REJECTED = 2
EXIT_BAD_CHECKPOINT = 3
EXIT_BAD_IMAGE = 4
EXIT_USAGE = 64
EXIT_FAILURE = 1


class CliError(Exception):
    """Operational failure with a chosen exit code."""

    def __init__(self, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; the contract here is 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_config_file(path) -> dict:
    """Flat `key = value` lines; '#' starts a comment; blanks ignored."""
    values = {}
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, value = text.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _parse_widths(text: str):
    try:
        widths = tuple(int(part) for part in str(text).split(","))
    except ValueError:
        raise CliError(f"bad widths {text!r}: expected comma-separated integers")
    return widths


_COERCE = {int: int, float: float, str: str}


def _effective(args, defaults: dict) -> dict:
    """Layer values: defaults, then config file, then explicit flags."""
    merged = dict(defaults)
    file_values = _read_config_file(args.config) if args.config else {}
    for key, value in file_values.items():
        if key not in defaults:
            raise CliError(f"unknown config key {key!r}")
        kind = type(defaults[key])
        try:
            merged[key] = _COERCE.get(kind, str)(value)
        except ValueError:
            raise CliError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}")
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _json_dumps(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _load_examples(manifest, mask_root=None):
    records = load_manifest(manifest)
    examples = []
    rejected = []
    for record in records:
        try:
            examples.append(load_example(record, mask_root=mask_root))
        except DiskNotFound as exc:
            rejected.append({"source_id": record.source_id, "reason": str(exc)})
    return examples, rejected


# --- commands ---


def cmd_preprocess(args) -> int:
    out = _out_dir(args)
    records = load_manifest(args.manifest, keep_ungradable=True)
    mask_root = Path(args.masks) if args.masks else None
    geometry = {}
    rejected = []
    for record in records:
        raw = RawFundusImage(read_image(record.image_path), record.source_id)
        try:
            pre = preprocess_image(raw)
        except DiskNotFound as exc:
            rejected.append({"source_id": record.source_id, "reason": str(exc)})
            continue
        write_image(out / "images" / f"{record.source_id}.png", pre.image)
        write_image(out / "retina" / f"{record.source_id}.png",
                    pre.retina_mask.astype(np.uint8) * 255)
        if mask_root is not None:
            from .data import load_lesion_masks

            raw_masks = load_lesion_masks(mask_root, record.source_id,
                                          frame=raw.pixels.shape[0])
            for c, name in enumerate(LESION_CHANNELS):
                warped = warp_mask_to_frame(raw_masks[:, :, c], pre.disk)
                warped &= pre.retina_mask
                write_image(out / "masks" / name / f"{record.source_id}.png",
                            warped.astype(np.uint8) * 255)
        geometry[record.source_id] = {
            "center_row": pre.disk.center_row,
            "center_col": pre.disk.center_col,
            "radius": pre.disk.radius,
        }
    (out / "geometry.json").write_text(
        _json_dumps({"disks": geometry, "rejected": rejected}), encoding="utf-8"
    )
    print(f"preprocess: {len(geometry)} images written to {out}, "
          f"{len(rejected)} rejected")
    return EXIT_OK


SYNTH_DEFAULTS = {"n": 16, "frame": 512}


def cmd_synth(args) -> int:
    cfg = _effective(args, SYNTH_DEFAULTS)
    out = _out_dir(args)
    manifest = synth_write(out, cfg["n"], seed=args.seed, frame=cfg["frame"])
    print(f"synth: {cfg['n']} images at frame {cfg['frame']} -> {manifest}")
    return EXIT_OK


TRAIN_DEFAULTS = {
    "mode": "multi_task",
    "epochs": -1,  # -1: derive from max_steps, else the library default
    "max_steps": -1,  # -1: no cap
    "lr": 3e-4,
    "k_train": 50,
    "clf_batch": 8,
    "seg_batch": 4,
    "d": 64,
    "embed_m": 128,
    "attn_l": 32,
    "widths": "64,128,256,512",
    "augment": "on",
}


def cmd_train(args) -> int:
    cfg = _effective(args, TRAIN_DEFAULTS)
    if cfg["augment"] not in ("on", "off"):
        raise CliError(f"augment must be 'on' or 'off', got {cfg['augment']!r}")
    out = _out_dir(args)
    mask_root = Path(args.masks) if args.masks else None
    examples, rejected = _load_examples(args.manifest, mask_root)
    if not examples:
        raise CliError("no usable training images in the manifest")
    clf_train = examples
    seg_train = [ex for ex in examples if ex.has_masks]
    if args.val_manifest:
        validation, _ = _load_examples(args.val_manifest, mask_root)
    else:
        validation = examples  # best-epoch selection on the training set

    max_steps = None if cfg["max_steps"] < 0 else cfg["max_steps"]
    epochs = cfg["epochs"]
    if epochs < 0:
        if max_steps is not None:
            primary = clf_train if cfg["mode"] != "seg_only" else seg_train
            batch = cfg["clf_batch"] if cfg["mode"] != "seg_only" else cfg["seg_batch"]
            per_epoch = max(1, math.ceil(len(primary) / batch))
            epochs = math.ceil(max_steps / per_epoch)
        else:
            epochs = TrainConfig().epochs
    ranges = AugmentRanges() if cfg["augment"] == "on" else AugmentRanges.identity()
    train_config = TrainConfig(
        learning_rate=cfg["lr"],
        epochs=epochs,
        clf_batch=cfg["clf_batch"],
        seg_batch=cfg["seg_batch"],
        k_train=cfg["k_train"],
        seed=args.seed,
        mode=cfg["mode"],
        ranges=ranges,
        max_steps=max_steps,
    )
    torch.manual_seed(args.seed)
    net = MilNet(MilNetConfig(d=cfg["d"], M=cfg["embed_m"], L=cfg["attn_l"],
                              encoder_widths=_parse_widths(cfg["widths"])))
    result = train(net, train_config, clf_train, seg_train, validation,
                   log_path=out / "history.jsonl")
    checkpoint = out / "checkpoint.pt"
    save_checkpoint(net, checkpoint, epoch=result.best_epoch,
                    val_auc=result.best_val_auc,
                    metadata={"mode": cfg["mode"], "seed": args.seed,
                              "steps": result.steps_run})
    (out / "train_summary.json").write_text(
        _json_dumps({
            "best_epoch": result.best_epoch,
            "best_val_auc": result.best_val_auc,
            "epochs_run": result.epochs_run,
            "steps_run": result.steps_run,
            "n_clf": len(clf_train),
            "n_seg": len(seg_train),
            "n_rejected": len(rejected),
        }),
        encoding="utf-8",
    )
    print(f"train: {result.steps_run} steps, best val AUC "
          f"{result.best_val_auc:.4f} at epoch {result.best_epoch} -> {checkpoint}")
    return EXIT_OK


EVAL_DEFAULTS = {"overlap": 0.75, "threshold_source": "train"}


def cmd_eval(args) -> int:
    cfg = _effective(args, EVAL_DEFAULTS)
    out = _out_dir(args)
    net, _ = load_checkpoint(args.checkpoint)
    mask_root = Path(args.masks) if args.masks else None
    examples, rejected = _load_examples(args.manifest, mask_root)
    if not examples:
        raise CliError("no usable evaluation images in the manifest")
    spec = PatchSpec(d=net.config.d, overlap_t=cfg["overlap"])

    source = cfg["threshold_source"]
    threshold_examples = None
    fixed_thresholds = None
    if source == "train":
        train_manifest = args.train_manifest or args.manifest
        train_masks = Path(args.train_masks) if args.train_masks else mask_root
        threshold_examples, _ = _load_examples(train_manifest, train_masks)
        threshold_examples = [ex for ex in threshold_examples if ex.has_masks]
        if not threshold_examples:
            threshold_examples = None  # fall back to the 0.5 default inside
    elif source.startswith("fixed:"):
        try:
            value = float(source.split(":", 1)[1])
        except ValueError:
            raise CliError(f"bad threshold source {source!r}")
        fixed_thresholds = {name: value for name in LESION_CHANNELS}
    else:
        raise CliError(
            f"threshold_source must be 'train' or 'fixed:<x>', got {source!r}")

    report = evaluate(net, examples, spec,
                      threshold_examples=threshold_examples,
                      fixed_thresholds=fixed_thresholds)
    payload = dataclasses.asdict(report)
    payload["rejected"] = rejected
    (out / "report.json").write_text(_json_dumps(payload), encoding="utf-8")
    auc = report.roc.auc if report.roc else float("nan")
    print(f"eval: {report.n_images} images, AUC {auc:.4f} -> {out / 'report.json'}")
    return EXIT_OK


PREDICT_DEFAULTS = {"overlap": 0.75}


def _bag_forward_for_image(args, overlap):
    """Shared predict/heatmap path; raises CliError with the mandated codes."""
    try:
        net, _ = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_BAD_CHECKPOINT)
    image_path = Path(args.image)
    try:
        pixels = read_image(image_path)
        raw = RawFundusImage(pixels, image_path.stem)
    except (ImageReadError, ValueError) as exc:
        raise CliError(f"unreadable image {image_path}: {exc}", EXIT_BAD_IMAGE)
    pre = preprocess_image(raw)  # DiskNotFound handled per command
    spec = PatchSpec(d=net.config.d, overlap_t=overlap)
    bag = extract_grid(pre, spec)
    return net, pre, bag, forward_bag_batched(net, bag)


def cmd_predict(args) -> int:
    cfg = _effective(args, PREDICT_DEFAULTS)
    source_id = Path(args.image).stem
    try:
        _, _, bag, result = _bag_forward_for_image(args, cfg["overlap"])
    except (DiskNotFound, EmptyBag) as exc:
        record = {"source_id": source_id, "rejected": True, "reason": str(exc)}
        text = _json_dumps(record)
        sys.stdout.write(text)
        if args.out:
            (_out_dir(args) / f"{source_id}.json").write_text(text, encoding="utf-8")
        return EXIT_REJECTED
    record = {
        "source_id": source_id,
        "rdr_prob": result.rdr_prob,
        "k_patches": len(bag),
    }
    text = _json_dumps(record)
    sys.stdout.write(text)
    if args.out:
        (_out_dir(args) / f"{source_id}.json").write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    cfg = _effective(args, PREDICT_DEFAULTS)
    out = _out_dir(args)
    source_id = Path(args.image).stem
    try:
        _, pre, _, result = _bag_forward_for_image(args, cfg["overlap"])
    except DiskNotFound as exc:
        sys.stderr.write(f"heatmap: no eye disk in {args.image}: {exc}\n")
        return EXIT_REJECTED
    frame = pre.image.shape[0]
    maps = stitch_all(result, frame=frame)
    for c, name in enumerate(LESION_CHANNELS):
        write_image(out / f"{source_id}.lesion-{name.lower()}.png",
                    maps.lesion_map[:, :, c] * 255.0)
    write_image(out / f"{source_id}.attention.png", maps.attention_map * 255.0)
    overlay = pre.image * 0.6
    overlay[:, :, 0] += maps.attention_map * (255.0 * 0.4)
    write_image(out / f"{source_id}.overlay.png", overlay)
    print(f"heatmap: rdr_prob {result.rdr_prob:.4f}, 5 maps -> {out}")
    return EXIT_OK


# --- wiring ---


def build_parser() -> _Parser:
    parser = _Parser(prog="fundusmil",
                     description="Patch-bag rDR screening and lesion maps.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0, help="run seed")
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--out", required=out_required, default=None,
                       help="output directory")

    p = sub.add_parser("preprocess", help="normalize raw images to the 512 frame")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks", default=None, help="raw-frame lesion mask root")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="render a labeled synthetic dataset")
    common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--frame", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit the patch-bag network")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks", default=None)
    p.add_argument("--val-manifest", default=None)
    p.add_argument("--mode", choices=("multi_task", "clf_only", "seg_only"),
                   default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--k-train", dest="k_train", type=int, default=None)
    p.add_argument("--clf-batch", dest="clf_batch", type=int, default=None)
    p.add_argument("--seg-batch", dest="seg_batch", type=int, default=None)
    p.add_argument("--d", type=int, default=None, help="patch side")
    p.add_argument("--embed-m", dest="embed_m", type=int, default=None)
    p.add_argument("--attn-l", dest="attn_l", type=int, default=None)
    p.add_argument("--widths", default=None, help="four encoder widths, comma-separated")
    p.add_argument("--augment", choices=("on", "off"), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="image ROC + patch segmentation report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks", default=None)
    p.add_argument("--train-manifest", dest="train_manifest", default=None,
                   help="split used to pick binarization thresholds")
    p.add_argument("--train-masks", dest="train_masks", default=None)
    p.add_argument("--threshold-source", dest="threshold_source", default=None,
                   help="'train' or 'fixed:<x>'")
    p.add_argument("--overlap", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="rDR probability for one image")
    common(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--overlap", type=float, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("heatmap", help="stitched lesion + attention maps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--overlap", type=float, default=None)
    p.set_defaults(func=cmd_heatmap)

    return parser


def run(argv) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse help (0) or usage error (64)
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        sys.stderr.write(f"fundusmil {args.command}: {exc}\n")
        return exc.code
    except CheckpointError as exc:
        sys.stderr.write(f"fundusmil {args.command}: {exc}\n")
        return EXIT_BAD_CHECKPOINT
    except ImageReadError as exc:
        sys.stderr.write(f"fundusmil {args.command}: {exc}\n")
        return EXIT_BAD_IMAGE
    except (ManifestError, ValueError, OSError) as exc:
        sys.stderr.write(f"fundusmil {args.command}: {exc}\n")
        return EXIT_FAILURE


def main() -> int:
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
