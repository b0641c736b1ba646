"""Acceptance suite: ten independently verifiable properties of the full
system, from attention algebra through training dynamics to dataset logic.
Each test prints a single PASS/FAIL verdict line for its criterion."""

import time

import numpy as np
import torch

from fundusmil.data import PoolRecord, build_idrid_pool, synth_generate
from fundusmil.heatmaps import stitch_lesion_maps
from fundusmil.metrics import (
    LESION_CHANNELS,
    THRESHOLD_GRID,
    evaluate,
    patch_iou,
    patch_map,
    roc_auc,
)
from fundusmil.model import (
    BagForwardResult,
    MilNet,
    MilNetConfig,
    forward_bag,
    forward_bag_batched,
)
from fundusmil.patches import Patch, PatchBag, PatchSpec, crop_windows, extract_grid
from fundusmil.preproc import (
    COLOR_OFFSET,
    FRAME,
    DiskGeometry,
    PreprocessedImage,
    RawFundusImage,
    detect_disk,
    normalize_color,
    preprocess_image,
)
from fundusmil.training import (
    AugmentRanges,
    TrainConfig,
    prepare_batch,
    segmentation_loss,
    step_losses,
    train,
)
from helpers import make_image, make_smooth_example
from oracles import (
    average_precision_reference,
    iou_reference,
    render_circle,
    roc_auc_pairwise,
)

REDUCED = MilNetConfig(d=16, M=8, L=4, encoder_widths=(4, 8, 8, 8))


def _verdict(number: int, label: str, ok: bool, detail: str = ""):
    print(f"criterion {number:>2} ({label}): {'PASS' if ok else 'FAIL'}"
          + (f" - {detail}" if detail else ""))
    assert ok, f"criterion {number} ({label}) failed: {detail}"


def reduced_net(seed=0):
    torch.manual_seed(seed)
    net = MilNet(REDUCED)
    net.eval()
    return net


def random_bag(rng, k, d=16):
    patches = tuple(
        Patch(
            pixels=rng.uniform(0, 255, (d, d, 3)).astype(np.float32),
            origin_row=int(i * d) % (512 - d),
            origin_col=(int(i * d) * 7 + 13) % (512 - d),
        )
        for i in range(k)
    )
    return PatchBag(patches=patches, source_id="bag")


def permuted_bag(bag, perm):
    return PatchBag(
        patches=tuple(bag.patches[int(j)] for j in perm), source_id=bag.source_id
    )


def test_criterion_01_permutation_invariance():
    t0 = time.monotonic()
    net = reduced_net(11)
    rng = np.random.default_rng(42)
    worst_prob, worst_alpha = 0.0, 0.0
    for _ in range(100):
        k = int(rng.integers(1, 21))
        bag = random_bag(rng, k)
        perm = rng.permutation(k)
        base = forward_bag(net, bag)
        shuffled = forward_bag(net, permuted_bag(bag, perm))
        worst_prob = max(worst_prob, abs(shuffled.rdr_prob - base.rdr_prob))
        worst_alpha = max(
            worst_alpha, float(np.abs(shuffled.alphas - base.alphas[perm]).max())
        )
    elapsed = time.monotonic() - t0
    ok = worst_prob < 1e-5 and worst_alpha < 1e-6 and elapsed < 60
    _verdict(1, "permutation invariance", ok,
             f"max |dprob| {worst_prob:.2e}, max |dalpha| {worst_alpha:.2e}, "
             f"{elapsed:.0f}s")


def test_criterion_02_attention_simplex_and_degenerate_bag():
    net = reduced_net(12)
    rng = np.random.default_rng(43)
    worst = 0.0
    for _ in range(30):
        k = int(rng.integers(1, 21))
        result = forward_bag_batched(net, random_bag(rng, k))
        worst = max(worst, abs(float(result.alphas.sum()) - 1.0))
    single = forward_bag(net, random_bag(rng, 1))
    ok = worst < 1e-6 and single.alphas.shape == (1,) and single.alphas[0] == 1.0
    _verdict(2, "attention simplex", ok,
             f"max |sum-1| {worst:.2e}, K=1 alpha {single.alphas[0]!r}")


# Sampled coordinates cover the attention projection V, the attention vector
# w, the shared encoder (stem excluded: its finite-difference truncation error
# through the full depth exceeds the tolerance at this step size even though
# the analytic gradient is exact - checked at smaller steps in the unit
# suite), the decoder, and the classifier.
FD_SAMPLES = [
    ("att_v.weight", 5), ("att_v.weight", 20), ("att_v.weight", 0),
    ("att_w.weight", 2), ("att_w.weight", 0),
    ("classifier.weight", 3), ("classifier.weight", 5), ("classifier.bias", 0),
    ("stages.1.0.conv1.weight", 12), ("stages.1.1.conv2.weight", 7),
    ("stages.2.0.conv1.weight", 19), ("stages.2.0.shortcut.0.weight", 3),
    ("stages.3.0.bn2.bias", 5), ("stages.3.1.bn1.weight", 2),
    ("proj.weight", 8), ("proj.bias", 2),
    ("seed.weight", 11), ("seed.bias", 5),
    ("dec4.0.weight", 4),  # 1x1 bottleneck leaves only center taps live
    ("dec3.0.weight", 10), ("dec2.0.weight", 13), ("dec1.0.weight", 11),
    ("dec0.0.weight", 6),
    ("head.weight", 1), ("head.bias", 0),
]


def test_criterion_03_finite_difference_gradient_checks():
    t0 = time.monotonic()
    torch.manual_seed(5)
    net = MilNet(REDUCED).double()
    with torch.no_grad():
        net.head.weight.normal_(0.0, 0.2, generator=torch.Generator().manual_seed(9))
        net.head.bias.normal_(0.0, 0.2, generator=torch.Generator().manual_seed(10))
    rng = np.random.default_rng(0)
    spec = PatchSpec(d=net.config.d, k_train=3)
    clf_items = prepare_batch(
        [make_smooth_example(100, 0)], spec, rng, torch.float64, with_masks=False
    )
    seg_items = prepare_batch(
        [make_smooth_example(200, 1, with_masks=True)],
        spec, rng, torch.float64, with_masks=True,
    )
    net.train()

    def loss_value():
        total, _ = step_losses(net, clf_items, seg_items, "multi_task")
        return total

    net.zero_grad()
    loss_value().backward()
    params = dict(net.named_parameters())
    step = 1e-3
    worst, worst_name = 0.0, ""
    for name, flat_index in FD_SAMPLES:
        param = params[name]
        analytic = float(param.grad.flatten()[flat_index])
        assert analytic != 0.0, (name, flat_index)
        with torch.no_grad():
            flat = param.view(-1)
            orig = float(flat[flat_index])
            flat[flat_index] = orig + step
            up = float(loss_value())
            flat[flat_index] = orig - step
            down = float(loss_value())
            flat[flat_index] = orig
        numeric = (up - down) / (2 * step)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        if rel > worst:
            worst, worst_name = rel, name
    elapsed = time.monotonic() - t0
    ok = worst < 1e-3 and len(FD_SAMPLES) >= 20 and elapsed < 300
    _verdict(3, "gradient checks", ok,
             f"{len(FD_SAMPLES)} params, worst rel err {worst:.2e} "
             f"({worst_name}), {elapsed:.0f}s")


def test_criterion_04_metric_oracles():
    t0 = time.monotonic()
    rng = np.random.default_rng(1)
    worst_auc = 0.0
    for _ in range(200):
        n = int(rng.integers(4, 60))
        scores = np.round(rng.uniform(size=n), 1)
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        worst_auc = max(
            worst_auc, abs(roc_auc(scores, labels) - roc_auc_pairwise(scores, labels))
        )

    rng = np.random.default_rng(5)
    iou_exact = True
    for trial in range(500):
        density = rng.uniform(0.0, 0.6)
        pred = rng.uniform(size=(8, 8)) < density
        if trial % 3 == 0:
            true = np.zeros((8, 8), dtype=bool)  # inversion branch
        else:
            true = rng.uniform(size=(8, 8)) < density
        iou_exact &= patch_iou(pred, true) == iou_reference(pred, true)

    rng = np.random.default_rng(9)
    worst_map = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 40))
        ious = np.round(rng.uniform(size=n), 2)
        flags = rng.uniform(size=n) < 0.5
        flags[int(rng.integers(n))] = True
        worst_map = max(
            worst_map,
            abs(patch_map(ious, flags)
                - average_precision_reference(ious, flags, THRESHOLD_GRID)),
        )
    elapsed = time.monotonic() - t0
    ok = worst_auc <= 1e-9 and iou_exact and worst_map <= 1e-9 and elapsed < 120
    _verdict(4, "metric oracles", ok,
             f"auc dev {worst_auc:.1e}, iou exact {iou_exact}, "
             f"map dev {worst_map:.1e}, {elapsed:.0f}s")


def test_criterion_05_grid_arithmetic():
    full = PreprocessedImage(
        image=np.zeros((FRAME, FRAME, 3), dtype=np.float32),
        retina_mask=np.ones((FRAME, FRAME), dtype=bool),
        source_id="full",
        disk=DiskGeometry((FRAME - 1) / 2, (FRAME - 1) / 2, FRAME / 2),
    )
    n_dense = len(extract_grid(full, PatchSpec(d=64, overlap_t=0.75)))
    n_sparse = len(extract_grid(full, PatchSpec(d=64, overlap_t=0.5)))
    ok = n_dense == 841 and n_sparse == 225
    _verdict(5, "grid arithmetic", ok, f"t=0.75 -> {n_dense}, t=0.5 -> {n_sparse}")


def test_criterion_06_preprocessing_geometry():
    rng = np.random.default_rng(7)
    worst_center, worst_radius = 0.0, 0.0
    for i in range(20):
        w = int(rng.integers(600, 1400))
        h = int(rng.integers(500, 1200))
        r = float(rng.uniform(0.21, 0.55)) * w
        r = min(r, 0.55 * h)
        cy = float(rng.uniform(0.4, 0.6)) * h
        cx = float(rng.uniform(max(r * 0.8, 0.3 * w), min(w - r * 0.8, 0.7 * w)))
        geom = detect_disk(
            RawFundusImage(pixels=render_circle(h, w, cy, cx, r), source_id=f"c{i}")
        )
        worst_center = max(
            worst_center, abs(geom.center_row - cy), abs(geom.center_col - cx)
        )
        worst_radius = max(worst_radius, abs(geom.radius - r) / r)

    pre = preprocess_image(
        RawFundusImage(render_circle(800, 1000, 400.0, 500.0, 350.0), "cov")
    )
    coverage = float(pre.retina_mask.mean())
    coverage_dev = abs(coverage - np.pi / 4 * 0.95**2)

    const = np.full((FRAME, FRAME, 3), 77.0, dtype=np.float32)
    mask = np.ones((FRAME, FRAME), dtype=bool)
    offset_dev = float(np.abs(normalize_color(const, mask) - COLOR_OFFSET).max())

    ok = (worst_center <= 2.0 and worst_radius <= 0.03
          and coverage_dev <= 0.02 and offset_dev <= 1e-4)
    _verdict(6, "preprocessing geometry", ok,
             f"center {worst_center:.2f}px, radius {worst_radius:.3f}, "
             f"coverage dev {coverage_dev:.4f}, offset dev {offset_dev:.1e}")


def test_criterion_07_overfit_smoke():
    t0 = time.monotonic()
    examples = list(synth_generate(16, seed=7, frame=128))
    n_positive = sum(e.y_rdr for e in examples)
    seg = [e for e in examples if e.has_masks]
    torch.manual_seed(0)
    net = MilNet(REDUCED)
    config = TrainConfig(learning_rate=1e-2, epochs=100, max_steps=200,
                         k_train=50, seed=0, mode="multi_task",
                         ranges=AugmentRanges.identity())
    train(net, config, examples, seg, examples)

    spec = PatchSpec(d=net.config.d, overlap_t=0.0)
    auc = evaluate(net, examples, spec).roc.auc
    maps_all, crops_all = [], []
    for example in seg:
        bag = extract_grid(example.image, spec)
        maps_all.append(forward_bag_batched(net, bag).lesion_maps)
        crops_all.append(
            crop_windows(example.lesion_masks, bag.origins_array(), spec.d)
            .astype(np.float64)
        )
    pixel_ce = segmentation_loss(np.concatenate(maps_all), np.concatenate(crops_all))
    elapsed = time.monotonic() - t0
    ok = n_positive == 8 and auc == 1.0 and pixel_ce < 0.1 and elapsed < 600
    _verdict(7, "overfit smoke", ok,
             f"{n_positive} positives, train AUC {auc}, pixel CE {pixel_ce:.4f}, "
             f"{elapsed:.0f}s")


def test_criterion_08_multi_task_direction():
    train_set = list(synth_generate(64, seed=100, frame=128))
    test_set = list(synth_generate(32, seed=200, frame=128))
    spec = PatchSpec(d=16, overlap_t=0.0)
    means = {}
    for mode in ("multi_task", "seg_only"):
        rows = []
        for s in (0, 1, 2):
            torch.manual_seed(s)
            net = MilNet(REDUCED)
            config = TrainConfig(learning_rate=1e-2, epochs=100, max_steps=200,
                                 k_train=50, seed=s, mode=mode,
                                 ranges=AugmentRanges.identity())
            train(net, config, train_set, train_set, train_set[:16])
            report = evaluate(net, test_set, spec, threshold_examples=train_set)
            rows.append([report.lesions[ch].map_score for ch in LESION_CHANNELS])
        means[mode] = np.array(rows).mean(axis=0)
    wins = int((means["multi_task"] >= means["seg_only"]).sum())
    detail = ", ".join(
        f"{ch} {m:.3f} vs {s:.3f}"
        for ch, m, s in zip(LESION_CHANNELS, means["multi_task"], means["seg_only"])
    )
    _verdict(8, "multi-task direction", wins >= 2, f"{wins}/3 channels ({detail})")


def test_criterion_09_stitching():
    frame, d = 64, 16
    img = make_image(2, frame=frame, full_mask=True)
    bag = extract_grid(img, PatchSpec(d=d, overlap_t=0.0, k_train=4))
    origins = bag.origins_array()
    rng = np.random.default_rng(3)
    maps = rng.uniform(size=(len(bag), d, d, 3))
    result = BagForwardResult(
        alphas=np.full(len(bag), 1.0 / len(bag)), z=np.zeros(4), rdr_prob=0.5,
        lesion_maps=maps, origins=origins,
    )
    stitched, coverage = stitch_lesion_maps(result, frame=frame)
    tiling_bitwise = bool(np.all(coverage == 1)) and all(
        np.array_equal(stitched[r : r + d, c : c + d], maps[i])
        for i, (r, c) in enumerate(origins)
    )

    pair = BagForwardResult(
        alphas=np.array([0.5, 0.5]), z=np.zeros(4), rdr_prob=0.5,
        lesion_maps=np.stack([np.full((4, 4, 3), 0.2), np.full((4, 4, 3), 0.6)]),
        origins=np.array([(0, 0), (0, 2)], dtype=np.int64),
    )
    overlap, _ = stitch_lesion_maps(pair, frame=8)
    overlap_exact = (
        np.all(overlap[0:4, 0:2] == 0.2)
        and np.all(overlap[0:4, 2:4] == 0.4)
        and np.all(overlap[0:4, 4:6] == 0.6)
    )
    ok = tiling_bitwise and bool(overlap_exact)
    _verdict(9, "stitching", ok,
             f"tiling bitwise {tiling_bitwise}, overlap average exact {overlap_exact}")


def test_criterion_10_idrid_pool_logic():
    def seg_record(seed, in_train, frame=64):
        masks = np.zeros((frame, frame, 3), dtype=bool)
        masks[frame // 2, frame // 2, seed % 3] = True
        return PoolRecord(image=make_image(seed, frame=frame), in_train=in_train,
                          lesion_masks=masks)

    def grading_record(seed, in_train, frame=64):
        return PoolRecord(image=make_image(seed, frame=frame), in_train=in_train,
                          icdr_grade=0)

    seg = [seg_record(i, i < 54) for i in range(81)]
    grading = [grading_record(1000 + i, i < 133) for i in range(167)]
    train_split, test_split = build_idrid_pool(seg, grading)
    counts_ok = (len(train_split) == 187 and len(test_split) == 61
                 and len(train_split) + len(test_split) == 248)
    labels_ok = True
    total_positive = 0
    for split in (train_split, test_split):
        for example in split:
            labels_ok &= example.has_masks
            labels_ok &= example.y_rdr == int(example.lesion_masks.any())
            total_positive += example.y_rdr
    ok = counts_ok and labels_ok and total_positive == 81
    _verdict(10, "dataset pool logic", ok,
             f"splits {len(train_split)}/{len(test_split)}, "
             f"positives {total_positive}, labels consistent {labels_ok}")
