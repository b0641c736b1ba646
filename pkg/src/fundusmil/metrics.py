"""Evaluation protocols.

Image level: ROC AUC (unique-threshold sweep, trapezoidal area, which equals
pairwise concordance with ties counted one half) and the high-sensitivity /
high-specificity operating points. Patch level: IoU with the inverted-mask
rule for lesion-free ground truth, binarization threshold selection on a
fixed 0.05 grid, and mean average precision over an IoU-threshold sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import LESION_CHANNELS
from .model import MilNet, forward_bag_batched
from .patches import PatchSpec, crop_windows, extract_grid

# tau grid shared by threshold selection and patch-level mAP
THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))

# published full-scale reference scores, kept in the report schema for
# context; desk-scale runs are not expected to reproduce them
REFERENCE_MAP_SCORES = {"MA": 0.747, "HE": 0.722, "EX": 0.842}

HIGH = 0.9  # sensitivity/specificity floor for operating points


@dataclass(frozen=True)
class RocReport:
    auc: float
    sens_at_high_spec: float
    spec_at_high_sens: float
    sens_threshold: float
    spec_threshold: float
    sens_unattainable: bool
    spec_unattainable: bool


@dataclass(frozen=True)
class LesionSegReport:
    iou_positive_mean: float
    iou_negative_mean: float
    n_positive: int
    n_negative: int
    binarization_threshold: float
    map_score: float


@dataclass(frozen=True)
class EvalReport:
    n_images: int
    rdr_probs: tuple[float, ...]
    labels: tuple[int, ...]
    roc: RocReport | None
    lesions: dict[str, LesionSegReport] = field(default_factory=dict)
    reference_map_scores: dict[str, float] = field(
        default_factory=lambda: dict(REFERENCE_MAP_SCORES)
    )


def _check_two_classes(labels: np.ndarray):
    if not ((labels == 1).any() and (labels == 0).any()):
        raise ValueError("labels must contain both classes")


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve; ties contribute one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    if not np.isfinite(scores).all():
        raise ValueError("non-finite scores")
    _check_two_classes(labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    # cumulative counts at each distinct threshold (predict positive at >= tau)
    block_end = np.nonzero(np.diff(s))[0]
    block_end = np.append(block_end, s.size - 1)
    tp = np.cumsum(y)[block_end]
    fp = np.cumsum(1 - y)[block_end]
    p = tp[-1]
    n = fp[-1]
    tpr = np.concatenate([[0.0], tp / p])
    fpr = np.concatenate([[0.0], fp / n])
    return float(np.trapezoid(tpr, fpr))


def operating_points(scores, labels):
    """Best sensitivity subject to specificity > 0.9, and vice versa.

    Returns (sens_at_high_spec, spec_at_high_sens, details dict). A point is
    flagged unattainable when no threshold clears the floor with a nonzero
    value; the reported value is then 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    _check_two_classes(labels)
    p = int((labels == 1).sum())
    n = int((labels == 0).sum())
    # thresholds: every distinct score, plus one above the maximum
    taus = np.concatenate([np.unique(scores), [np.max(scores) + 1.0]])
    best_sens = (0.0, float(taus[-1]))
    best_spec = (0.0, float(taus[-1]))
    for tau in taus:
        pred = scores >= tau
        tp = int((pred & (labels == 1)).sum())
        tn = int((~pred & (labels == 0)).sum())
        sens = tp / p
        spec = tn / n
        if spec > HIGH and sens > best_sens[0]:
            best_sens = (sens, float(tau))
        if sens > HIGH and spec > best_spec[0]:
            best_spec = (spec, float(tau))
    return RocReport(
        auc=roc_auc(scores, labels),
        sens_at_high_spec=best_sens[0],
        spec_at_high_sens=best_spec[0],
        sens_threshold=best_sens[1],
        spec_threshold=best_spec[1],
        sens_unattainable=best_sens[0] == 0.0,
        spec_unattainable=best_spec[0] == 0.0,
    )


def patch_iou(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """IoU of binary masks; lesion-free ground truth inverts both masks."""
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise ValueError("mask shapes differ")
    pred = pred_mask != 0
    true = true_mask != 0
    if not true.any():
        pred = ~pred
        true = ~true
    union = int(np.logical_or(pred, true).sum())
    inter = int(np.logical_and(pred, true).sum())
    return inter / union


def select_threshold(pred_probs: np.ndarray, true_masks: np.ndarray) -> float:
    """Binarization threshold for one lesion channel.

    Sweeps the 0.05 grid and returns the threshold maximizing mean IoU over
    lesion-positive patches; ties break toward the lower threshold.
    """
    pred_probs = np.asarray(pred_probs, dtype=np.float64)
    true_masks = np.asarray(true_masks) != 0
    if pred_probs.shape != true_masks.shape or pred_probs.ndim != 3:
        raise ValueError("expected matching (N, d, d) stacks")
    positive = true_masks.reshape(true_masks.shape[0], -1).any(axis=1)
    if not positive.any():
        raise ValueError("no lesion-positive patches to tune on")
    best_tau, best_mean = None, -1.0
    for tau in THRESHOLD_GRID:
        ious = [
            patch_iou(pred_probs[i] >= tau, true_masks[i])
            for i in np.nonzero(positive)[0]
        ]
        mean = float(np.mean(ious))
        if mean > best_mean:
            best_tau, best_mean = tau, mean
    return best_tau


def patch_map(ious, is_positive) -> float:
    """Mean average precision over the IoU-threshold sweep.

    Sweeping tau from high to low traces recall from 0 upward; the curve is
    anchored at (recall 0, precision 1) and integrated by trapezoid.
    """
    ious = np.asarray(ious, dtype=np.float64)
    flags = np.asarray(is_positive).astype(bool)
    if ious.shape != flags.shape or ious.ndim != 1:
        raise ValueError("need one IoU and one flag per patch")
    n_pos = int(flags.sum())
    if n_pos == 0:
        raise ValueError("no positive patches")
    recalls = [0.0]
    precisions = [1.0]
    for tau in sorted(THRESHOLD_GRID, reverse=True):
        hit = ious >= tau
        tp = int((flags & hit).sum())
        fp = int((~flags & ~hit).sum())
        precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
        recalls.append(tp / n_pos)
        precisions.append(precision)
    return float(np.trapezoid(precisions, recalls))


def _grid_forward(net: MilNet, example, spec: PatchSpec, forward=forward_bag_batched):
    bag = extract_grid(example.image, spec)
    return bag, forward(net, bag)


def _seg_accumulate(net, examples, spec, taus=None, forward=forward_bag_batched):
    """Stream grid bags over mask-bearing examples.

    With taus=None, accumulates per-channel mean positive IoU for every grid
    threshold (for selection). With taus given, collects per-patch IoU +
    positivity pairs per channel (for reporting).
    """
    n_ch = len(LESION_CHANNELS)
    if taus is None:
        sums = np.zeros((n_ch, len(THRESHOLD_GRID)))
        counts = np.zeros(n_ch, dtype=np.int64)
    else:
        collected = [[] for _ in range(n_ch)]
    for example in examples:
        if not example.has_masks:
            continue
        bag, result = _grid_forward(net, example, spec, forward)
        origins = bag.origins_array()
        crops = crop_windows(example.lesion_masks, origins, spec.d) != 0
        for c in range(n_ch):
            probs = result.lesion_maps[:, :, :, c]
            true = crops[:, :, :, c]
            positive = true.reshape(true.shape[0], -1).any(axis=1)
            if taus is None:
                for k in np.nonzero(positive)[0]:
                    for j, tau in enumerate(THRESHOLD_GRID):
                        sums[c, j] += patch_iou(probs[k] >= tau, true[k])
                counts[c] += int(positive.sum())
            else:
                for k in range(true.shape[0]):
                    iou = patch_iou(probs[k] >= taus[c], true[k])
                    collected[c].append((iou, bool(positive[k])))
    if taus is None:
        return sums, counts
    return collected


def select_thresholds_streaming(net, examples, spec, forward=forward_bag_batched):
    """Per-channel select_threshold over grid bags of the given examples."""
    sums, counts = _seg_accumulate(net, examples, spec, taus=None, forward=forward)
    taus = {}
    for c, name in enumerate(LESION_CHANNELS):
        if counts[c] == 0:
            taus[name] = 0.5
            continue
        means = sums[c] / counts[c]
        # lowest threshold achieving the maximum mean
        best = int(np.nonzero(means == means.max())[0][0])
        taus[name] = THRESHOLD_GRID[best]
    return taus


def evaluate(
    net: MilNet,
    test_examples,
    spec: PatchSpec | None = None,
    threshold_examples=None,
    fixed_thresholds: dict | None = None,
    forward=forward_bag_batched,
) -> EvalReport:
    """Full protocol: grid bags, image-level ROC, patch-level segmentation.

    Binarization thresholds come from `fixed_thresholds` when given, else are
    selected on `threshold_examples` (normally the training split); else 0.5.
    """
    spec = spec or PatchSpec()
    test_examples = list(test_examples)
    if not test_examples:
        raise ValueError("empty evaluation dataset")

    probs, labels = [], []
    for example in test_examples:
        _, result = _grid_forward(net, example, spec, forward)
        probs.append(result.rdr_prob)
        labels.append(int(example.y_rdr))
    roc = None
    if len(set(labels)) == 2:
        roc = operating_points(np.array(probs), np.array(labels))

    lesions: dict[str, LesionSegReport] = {}
    if any(e.has_masks for e in test_examples):
        if fixed_thresholds is not None:
            taus = dict(fixed_thresholds)
        elif threshold_examples is not None:
            taus = select_thresholds_streaming(net, threshold_examples, spec, forward)
        else:
            taus = {name: 0.5 for name in LESION_CHANNELS}
        tau_vec = [taus[name] for name in LESION_CHANNELS]
        collected = _seg_accumulate(net, test_examples, spec, taus=tau_vec, forward=forward)
        for c, name in enumerate(LESION_CHANNELS):
            pairs = collected[c]
            if not pairs:
                continue
            ious = np.array([p[0] for p in pairs])
            flags = np.array([p[1] for p in pairs])
            pos = ious[flags]
            neg = ious[~flags]
            lesions[name] = LesionSegReport(
                iou_positive_mean=float(pos.mean()) if pos.size else float("nan"),
                iou_negative_mean=float(neg.mean()) if neg.size else float("nan"),
                n_positive=int(flags.sum()),
                n_negative=int((~flags).sum()),
                binarization_threshold=float(tau_vec[c]),
                map_score=patch_map(ious, flags) if flags.any() else float("nan"),
            )
    return EvalReport(
        n_images=len(test_examples),
        rdr_probs=tuple(float(p) for p in probs),
        labels=tuple(labels),
        roc=roc,
        lesions=lesions,
    )
