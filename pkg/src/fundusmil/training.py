"""Joint training: losses, augmentation, dual-batch steps, model selection.

Each step draws two batches: one from the classification-only pool (loss
term 1) and one from the mask-bearing pool (classification term 2 plus the
pixel-wise term 3). All patches of a step share one encoder pass so batch
normalization statistics span the whole step. Ablation modes keep a single
term active. After every epoch the validation rDR AUC is computed and the
best-scoring parameters are restored at the end.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch

from .metrics import roc_auc
from .model import MilNet
from .patches import PatchSpec, crop_windows, extract_random
from .preproc import FRAME, PreprocessedImage

CLAMP = 1e-7
MODES = ("multi_task", "clf_only", "seg_only")


@dataclass(frozen=True)
class LabeledExample:
    image: PreprocessedImage
    y_rdr: int
    lesion_masks: np.ndarray | None = None  # (512, 512, 3) binary, MA/HE/EX
    has_masks: bool = False

    def __post_init__(self):
        if self.y_rdr not in (0, 1):
            raise ValueError("y_rdr must be 0 or 1")
        if self.has_masks != (self.lesion_masks is not None):
            raise ValueError("has_masks must mirror lesion_masks presence")
        if self.lesion_masks is not None:
            masks = np.asarray(self.lesion_masks).astype(bool)
            frame = self.image.image.shape[0]
            if masks.shape != (frame, frame, 3):
                raise ValueError(f"lesion_masks must be ({frame}, {frame}, 3)")
            if (masks & ~self.image.retina_mask[:, :, None]).any():
                raise ValueError("lesion pixels outside the retina mask")
            object.__setattr__(self, "lesion_masks", masks)


@dataclass(frozen=True)
class AugmentRanges:
    shift_frac: float = 0.10
    scale_min: float = 0.9
    scale_max: float = 1.1
    rotation_deg: float = 180.0
    hflip: bool = True
    vflip: bool = True
    jitter: float = 0.10

    @classmethod
    def identity(cls) -> "AugmentRanges":
        return cls(0.0, 1.0, 1.0, 0.0, False, False, 0.0)

    def is_identity(self) -> bool:
        return (
            self.shift_frac == 0.0
            and self.scale_min == 1.0
            and self.scale_max == 1.0
            and self.rotation_deg == 0.0
            and not self.hflip
            and not self.vflip
            and self.jitter == 0.0
        )


@dataclass(frozen=True)
class TransformParams:
    shift_rows: float = 0.0
    shift_cols: float = 0.0
    scale: float = 1.0
    angle_deg: float = 0.0
    hflip: bool = False
    vflip: bool = False
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = 0.0

    def is_identity(self) -> bool:
        return self == TransformParams()


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epochs: int = 60
    clf_batch: int = 8
    seg_batch: int = 4
    k_train: int = 50
    seed: int = 0
    mode: str = "multi_task"
    ranges: AugmentRanges = field(default_factory=AugmentRanges)
    validation_size: int = 3000
    max_steps: int | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.clf_batch < 1 or self.seg_batch < 1 or self.k_train < 1:
            raise ValueError("batch sizes and k_train must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.validation_size < 1:
            raise ValueError("validation_size must be positive")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    bce_clf: float
    bce_seg_set: float
    pixel_ce: float
    total: float


@dataclass
class TrainResult:
    best_epoch: int
    best_val_auc: float
    epochs_run: int
    steps_run: int
    history: list[dict] = field(default_factory=list)


# --- augmentation ---


def sample_transform(ranges: AugmentRanges, rng: np.random.Generator,
                     frame: int = FRAME) -> TransformParams:
    return TransformParams(
        shift_rows=float(rng.uniform(-ranges.shift_frac, ranges.shift_frac) * frame),
        shift_cols=float(rng.uniform(-ranges.shift_frac, ranges.shift_frac) * frame),
        scale=float(rng.uniform(ranges.scale_min, ranges.scale_max)),
        angle_deg=float(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)),
        hflip=bool(ranges.hflip and rng.integers(2)),
        vflip=bool(ranges.vflip and rng.integers(2)),
        brightness=float(rng.uniform(-ranges.jitter, ranges.jitter)),
        contrast=float(rng.uniform(-ranges.jitter, ranges.jitter)),
        saturation=float(rng.uniform(-ranges.jitter, ranges.jitter)),
        hue=float(rng.uniform(-ranges.jitter, ranges.jitter)),
    )


def _affine_matrix(params: TransformParams, frame: int) -> np.ndarray:
    theta = math.radians(params.angle_deg)
    sx = params.scale * (-1.0 if params.hflip else 1.0)
    sy = params.scale * (-1.0 if params.vflip else 1.0)
    rot = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    a = rot @ np.diag([sx, sy])
    center = np.array([(frame - 1) / 2.0, (frame - 1) / 2.0])
    shift = np.array([params.shift_cols, params.shift_rows])
    t = center + shift - a @ center
    return np.concatenate([a, t[:, None]], axis=1)


def _photometric(image: np.ndarray, mask: np.ndarray, params: TransformParams):
    work = image.astype(np.float32) * (1.0 + params.brightness)
    if mask.any():
        mean = float(work[mask].mean())
    else:
        mean = float(work.mean())
    work = (work - mean) * (1.0 + params.contrast) + mean
    if params.saturation != 0.0 or params.hue != 0.0:
        hsv = cv2.cvtColor(np.clip(work, 0, 255) / 255.0, cv2.COLOR_RGB2HSV)
        hsv[:, :, 0] = (hsv[:, :, 0] + params.hue * 360.0) % 360.0
        hsv[:, :, 1] = np.clip(hsv[:, :, 1] * (1.0 + params.saturation), 0.0, 1.0)
        work = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB) * 255.0
    work = np.clip(work, 0.0, 255.0)
    return np.where(mask[:, :, None], work, image).astype(np.float32)


def apply_transform(example: LabeledExample, params: TransformParams) -> LabeledExample:
    """Apply one sampled transform: geometry to image and all masks
    (bilinear vs nearest), photometric jitter to retina pixels only."""
    if params.is_identity():
        return example
    pre = example.image
    frame = pre.image.shape[0]
    m = _affine_matrix(params, frame)
    image = cv2.warpAffine(
        pre.image, m, (frame, frame), flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    )
    retina = cv2.warpAffine(
        pre.retina_mask.astype(np.uint8), m, (frame, frame),
        flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    ).astype(bool)
    image = _photometric(image, retina, params)
    lesions = None
    if example.lesion_masks is not None:
        lesions = cv2.warpAffine(
            example.lesion_masks.astype(np.uint8), m, (frame, frame),
            flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0,
        ).astype(bool)
        lesions &= retina[:, :, None]
    warped = PreprocessedImage(
        image=np.ascontiguousarray(image, dtype=np.float32),
        retina_mask=retina,
        source_id=pre.source_id,
        disk=pre.disk,
    )
    return LabeledExample(
        image=warped,
        y_rdr=example.y_rdr,
        lesion_masks=lesions,
        has_masks=example.has_masks,
    )


def augment(example: LabeledExample, ranges: AugmentRanges, seed) -> LabeledExample:
    """Sample one transform from the ranges and apply it; labels unchanged."""
    if ranges.is_identity():
        return example
    rng = np.random.default_rng(seed)
    frame = example.image.image.shape[0]
    return apply_transform(example, sample_transform(ranges, rng, frame=frame))


# --- losses ---


def classification_loss(probs, labels) -> float:
    """Mean binary cross entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape or probs.ndim != 1:
        raise ValueError("probs and labels must be equal-length vectors")
    p = np.clip(probs, CLAMP, 1.0 - CLAMP)
    return float(np.mean(-(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))))


def segmentation_loss(lesion_maps, target_crops) -> float:
    """Mean per-pixel binary cross entropy over patches x pixels x channels."""
    maps = np.asarray(lesion_maps, dtype=np.float64)
    targets = np.asarray(target_crops, dtype=np.float64)
    if maps.shape != targets.shape:
        raise ValueError("prediction and target stacks must share a shape")
    p = np.clip(maps, CLAMP, 1.0 - CLAMP)
    return float(np.mean(-(targets * np.log(p) + (1.0 - targets) * np.log(1.0 - p))))


def _bce_tensor(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    p = p.clamp(CLAMP, 1.0 - CLAMP)
    return (-(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))).mean()


def prepare_batch(examples, spec: PatchSpec, rng: np.random.Generator,
                  dtype: torch.dtype, with_masks: bool):
    """Random bags for each example, as (pixels (K,3,d,d), y, targets) items."""
    items = []
    for example in examples:
        bag = extract_random(example.image, spec, seed=int(rng.integers(2**31)))
        pixels = (
            torch.from_numpy(bag.pixels_array()).permute(0, 3, 1, 2).to(dtype)
        )
        targets = None
        if with_masks:
            crops = crop_windows(
                example.lesion_masks, bag.origins_array(), spec.d
            ).astype(np.float32)
            targets = torch.from_numpy(crops).permute(0, 3, 1, 2).to(dtype)
        items.append((pixels, float(example.y_rdr), targets))
    return items


def step_losses(net: MilNet, clf_items, seg_items, mode: str):
    """Total loss tensor plus its breakdown for one dual-batch step.

    One encoder pass covers every patch in the step; per-image attention and
    classification follow; the decoder runs on the mask-bearing batch only.
    """
    if mode == "clf_only":
        seg_items = []
    if mode == "seg_only":
        clf_items = []
    all_items = list(clf_items) + list(seg_items)
    if not all_items:
        raise ValueError("no active batch for this mode")
    counts = [item[0].shape[0] for item in all_items]
    h_all, skips_all = net.encode(torch.cat([item[0] for item in all_items]))

    probs = []
    offset = 0
    for k in counts:
        _, z = net.attend_tensors(h_all[offset : offset + k])
        probs.append(torch.sigmoid(net.classify_logit(z)))
        offset += k
    probs = torch.stack(probs)
    labels = torch.tensor([item[1] for item in all_items], dtype=probs.dtype)

    n_clf = len(clf_items)
    zero = torch.zeros((), dtype=probs.dtype)
    bce_clf = _bce_tensor(probs[:n_clf], labels[:n_clf]) if n_clf else zero
    bce_seg_set = (
        _bce_tensor(probs[n_clf:], labels[n_clf:])
        if len(seg_items) and mode == "multi_task"
        else zero
    )
    pixel_ce = zero
    if seg_items:
        seg_start = sum(counts[:n_clf])
        maps = net.decode(
            h_all[seg_start:], [s[seg_start:] for s in skips_all]
        )
        targets = torch.cat([item[2] for item in seg_items])
        pixel_ce = _bce_tensor(maps, targets)

    if mode == "multi_task":
        total_t = bce_clf + bce_seg_set + pixel_ce
    elif mode == "clf_only":
        total_t = bce_clf
    else:
        total_t = pixel_ce
    terms = (
        float(bce_clf.detach()) if mode != "seg_only" else 0.0,
        float(bce_seg_set.detach()) if mode == "multi_task" else 0.0,
        float(pixel_ce.detach()) if mode != "clf_only" else 0.0,
    )
    return total_t, LossBreakdown(*terms, total=sum(terms))


def train_step(net: MilNet, optimizer, clf_batch, seg_batch, config: TrainConfig,
               rng: np.random.Generator | None = None) -> LossBreakdown:
    """One dual-batch update: compute the joint loss, backpropagate once,
    apply one Adam step. Parameters and optimizer state mutate in place."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    spec = PatchSpec(d=net.config.d, k_train=config.k_train)
    dtype = next(net.parameters()).dtype
    net.train()
    clf_items = prepare_batch(clf_batch, spec, rng, dtype, with_masks=False)
    seg_items = prepare_batch(seg_batch, spec, rng, dtype, with_masks=True)
    total_t, breakdown = step_losses(net, clf_items, seg_items, config.mode)
    if not torch.isfinite(total_t):
        raise RuntimeError(
            f"non-finite training loss: {breakdown} "
            f"(clf={len(clf_batch)}, seg={len(seg_batch)}, mode={config.mode})"
        )
    optimizer.zero_grad()
    total_t.backward()
    optimizer.step()
    return breakdown


# --- training loop ---


def bag_probabilities(net: MilNet, examples, spec: PatchSpec, seed: int = 0):
    """Deterministic rDR probabilities via seeded random bags (batched)."""
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    probs = []
    try:
        with torch.no_grad():
            for idx, example in enumerate(examples):
                bag = extract_random(example.image, spec, seed=[seed, idx])
                pixels = (
                    torch.from_numpy(bag.pixels_array()).permute(0, 3, 1, 2).to(dtype)
                )
                h, _ = net.encode(pixels)
                _, z = net.attend_tensors(h)
                probs.append(float(torch.sigmoid(net.classify_logit(z))))
    finally:
        net.train(was_training)
    return np.array(probs)


def _validation_auc(net, validation, config, spec) -> float:
    if not validation:
        return float("nan")
    if len(validation) > config.validation_size:
        order = np.random.default_rng([config.seed, 11]).permutation(len(validation))
        validation = [validation[i] for i in order[: config.validation_size]]
    labels = np.array([ex.y_rdr for ex in validation])
    probs = bag_probabilities(net, validation, spec, seed=config.seed)
    if len(set(labels.tolist())) < 2:
        return 0.5
    return roc_auc(probs, labels)


def _cycle_batches(items, batch_size, rng):
    """Endless batches over a (small) pool, reshuffled on each pass."""
    order = []
    while True:
        if len(order) < batch_size:
            refill = list(rng.permutation(len(items)))
            order += refill
        take, order = order[:batch_size], order[batch_size:]
        yield [items[i] for i in take]


def train(net: MilNet, config: TrainConfig, clf_train, seg_train, validation,
          log_path=None) -> TrainResult:
    """Run the epoch loop and leave `net` holding the best-validation weights."""
    clf_train = list(clf_train)
    seg_train = list(seg_train)
    validation = list(validation)
    needs_clf = config.mode in ("multi_task", "clf_only")
    needs_seg = config.mode in ("multi_task", "seg_only")
    if needs_clf and not clf_train:
        raise ValueError("classification split is empty")
    if needs_seg and not seg_train:
        raise ValueError("segmentation split is empty")
    if needs_seg and not all(ex.has_masks for ex in seg_train):
        raise ValueError("segmentation split contains unmasked examples")
    if config.epochs > 0 and not validation:
        raise ValueError("validation split is empty")

    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(
        net.parameters(),
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
    )
    spec = PatchSpec(d=net.config.d, k_train=config.k_train)
    primary = clf_train if needs_clf else seg_train
    primary_batch = config.clf_batch if needs_clf else config.seg_batch
    steps_per_epoch = max(1, math.ceil(len(primary) / primary_batch))
    seg_cycle = _cycle_batches(seg_train, config.seg_batch, rng) if needs_seg else None

    best_state = copy.deepcopy(net.state_dict())
    best_auc = -math.inf
    best_epoch = 0
    history = []
    steps_run = 0
    out_of_steps = False
    epochs_run = 0
    for epoch in range(1, config.epochs + 1):
        if out_of_steps:
            break
        epochs_run = epoch
        clf_order = rng.permutation(len(clf_train)) if needs_clf else None
        sums = np.zeros(4)
        n_steps = 0
        for step in range(steps_per_epoch):
            if config.max_steps is not None and steps_run >= config.max_steps:
                out_of_steps = True
                break
            if needs_clf:
                lo = step * config.clf_batch
                idx = clf_order[lo : lo + config.clf_batch]
                if idx.size == 0:
                    idx = clf_order[: config.clf_batch]
                clf_batch = [clf_train[i] for i in idx]
            else:
                clf_batch = []
            seg_batch = next(seg_cycle) if needs_seg else []
            clf_batch = [
                augment(ex, config.ranges, seed=int(rng.integers(2**63)))
                for ex in clf_batch
            ]
            seg_batch = [
                augment(ex, config.ranges, seed=int(rng.integers(2**63)))
                for ex in seg_batch
            ]
            breakdown = train_step(net, optimizer, clf_batch, seg_batch, config, rng)
            sums += (
                breakdown.bce_clf,
                breakdown.bce_seg_set,
                breakdown.pixel_ce,
                breakdown.total,
            )
            n_steps += 1
            steps_run += 1
        val_auc = _validation_auc(net, validation, config, spec)
        record = {
            "epoch": epoch,
            "steps": n_steps,
            "bce_clf": sums[0] / max(n_steps, 1),
            "bce_seg_set": sums[1] / max(n_steps, 1),
            "pixel_ce": sums[2] / max(n_steps, 1),
            "total": sums[3] / max(n_steps, 1),
            "val_auc": val_auc,
        }
        history.append(record)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if not math.isnan(val_auc) and val_auc >= best_auc:
            best_auc = val_auc
            best_epoch = epoch
            best_state = copy.deepcopy(net.state_dict())

    net.load_state_dict(best_state)
    net.eval()
    return TrainResult(
        best_epoch=best_epoch,
        best_val_auc=best_auc if best_auc > -math.inf else float("nan"),
        epochs_run=epochs_run,
        steps_run=steps_run,
        history=history,
    )
