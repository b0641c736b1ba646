"""Dataset ingestion and synthesis.

Grade manifests map to binary referable-DR labels; lesion masks live in
per-type subfolders (MA, HE, EX_HARD, EX_SOFT) with hard and soft exudates
merged by pixelwise union. The segmentation pool construction assigns
y_rdr = 1 to every mask-bearing record and adds grade-0 records with
all-black masks. A synthetic renderer provides deterministic desk-scale
stand-ins with exact lesion masks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image, UnidentifiedImageError

from . import LESION_CHANNELS
from .preproc import (
    FRAME,
    DiskGeometry,
    PreprocessedImage,
    RawFundusImage,
    preprocess_image,
    warp_mask_to_frame,
)
from .training import LabeledExample

SPLIT_ROLES = ("clf_train", "clf_val", "clf_test", "seg_train", "seg_test")
MASK_FOLDERS = ("MA", "HE", "EX_HARD", "EX_SOFT")

# documented full-scale population (not asserted at desk scale): the grading
# corpus keeps 28,098 gradable of 35,126 training images
GRADABLE_KAGGLE_TRAIN = 28098


class ManifestError(Exception):
    """Malformed manifest row; the message carries the 1-based line number."""


class ImageReadError(Exception):
    """File missing or not decodable as an image."""


@dataclass(frozen=True)
class GradeRecord:
    source_id: str
    image_path: Path
    icdr_grade: int
    gradable: bool

    def __post_init__(self):
        if self.icdr_grade not in (0, 1, 2, 3, 4):
            raise ValueError(f"icdr_grade {self.icdr_grade} outside 0..4")


@dataclass(frozen=True)
class PoolRecord:
    """One candidate for the segmentation pool.

    Mask-bearing records carry lesion_masks and no grade; grade-bearing
    records carry icdr_grade and no masks. `in_train` declares the official
    split membership.
    """

    image: PreprocessedImage
    in_train: bool
    lesion_masks: np.ndarray | None = None
    icdr_grade: int | None = None

    def __post_init__(self):
        if (self.lesion_masks is None) == (self.icdr_grade is None):
            raise ValueError("pool record needs exactly one of masks or grade")


@dataclass(frozen=True)
class DatasetSplit:
    role: str
    examples: tuple[LabeledExample, ...]

    def __post_init__(self):
        if self.role not in SPLIT_ROLES:
            raise ValueError(f"role must be one of {SPLIT_ROLES}")
        object.__setattr__(self, "examples", tuple(self.examples))
        if self.role.startswith("seg") and not all(
            ex.has_masks for ex in self.examples
        ):
            raise ValueError("segmentation splits require masks on every example")

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


def binarize_rdr(icdr_grade: int) -> int:
    """Referable DR: moderate or worse, i.e. grade 2 and above."""
    if icdr_grade not in (0, 1, 2, 3, 4):
        raise ValueError(f"icdr_grade {icdr_grade} outside 0..4")
    return int(icdr_grade >= 2)


_BOOL_TOKENS = {
    "1": True, "true": True, "yes": True,
    "0": False, "false": False, "no": False,
}

MANIFEST_HEADER = ["source_id", "image_path", "icdr_grade", "gradable"]


def load_manifest(csv_path, keep_ungradable: bool = False) -> list[GradeRecord]:
    """Parse a grade manifest; rows keep file order.

    Paths are resolved against the manifest's directory. Raises
    ManifestError with the offending line number on any malformed row.
    """
    csv_path = Path(csv_path)
    base = csv_path.parent
    records = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError("line 1: empty manifest") from None
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(
                f"line 1: header must be {','.join(MANIFEST_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise ManifestError(f"line {lineno}: expected 4 fields, got {len(row)}")
            source_id, rel_path, grade_text, gradable_text = (f.strip() for f in row)
            if not source_id:
                raise ManifestError(f"line {lineno}: empty source_id")
            try:
                grade = int(grade_text)
            except ValueError:
                raise ManifestError(
                    f"line {lineno}: icdr_grade {grade_text!r} is not an integer"
                ) from None
            if grade not in (0, 1, 2, 3, 4):
                raise ManifestError(f"line {lineno}: icdr_grade {grade} outside 0..4")
            gradable = _BOOL_TOKENS.get(gradable_text.lower())
            if gradable is None:
                raise ManifestError(
                    f"line {lineno}: gradable {gradable_text!r} is not a boolean"
                )
            path = Path(rel_path)
            if not path.is_absolute():
                path = base / path
            if not path.exists():
                raise ManifestError(f"line {lineno}: image {path} does not exist")
            if not gradable and not keep_ungradable:
                continue
            records.append(GradeRecord(source_id, path, grade, gradable))
    return records


def _read_mask_file(path: Path, shape) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    if arr.shape != shape:
        raise ValueError(f"mask {path} has shape {arr.shape}, expected {shape}")
    return arr != 0


def load_lesion_masks(mask_root, source_id: str, frame: int = FRAME) -> np.ndarray:
    """Stack the MA/HE/EX channels for one image; EX is hard OR soft.

    Missing files mean an empty channel; present files must match the frame.
    """
    mask_root = Path(mask_root)
    shape = (frame, frame)
    channels = {}
    for folder in MASK_FOLDERS:
        path = mask_root / folder / f"{source_id}.png"
        channels[folder] = (
            _read_mask_file(path, shape) if path.exists() else np.zeros(shape, bool)
        )
    return np.stack(
        [channels["MA"], channels["HE"], channels["EX_HARD"] | channels["EX_SOFT"]],
        axis=2,
    )


def build_idrid_pool(seg_records, grading_records):
    """Assemble the enhanced segmentation pool.

    Mask records become y_rdr = 1 examples; grade-0 records join with
    all-black masks and y_rdr = 0. Any graded record above 0 is rejected.
    Returns (seg_train, seg_test) splits by declared membership.
    """
    train, test = [], []
    for record in seg_records:
        if record.lesion_masks is None:
            raise ValueError("segmentation record without masks")
        example = LabeledExample(
            image=record.image,
            y_rdr=1,
            lesion_masks=record.lesion_masks,
            has_masks=True,
        )
        (train if record.in_train else test).append(example)
    for record in grading_records:
        if record.icdr_grade is None:
            raise ValueError("grading record without a grade")
        if record.icdr_grade != 0:
            raise ValueError(
                f"only grade-0 images may join the pool, got grade {record.icdr_grade}"
            )
        frame = record.image.image.shape[0]
        example = LabeledExample(
            image=record.image,
            y_rdr=0,
            lesion_masks=np.zeros((frame, frame, 3), dtype=bool),
            has_masks=True,
        )
        (train if record.in_train else test).append(example)
    return DatasetSplit("seg_train", train), DatasetSplit("seg_test", test)


# --- image IO ---


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc


def write_image(path, array: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def warp_masks_to_frame(raw_masks: np.ndarray, geom: DiskGeometry) -> np.ndarray:
    """Apply the image crop transform to each raw-frame mask channel."""
    return np.stack(
        [warp_mask_to_frame(raw_masks[:, :, c], geom) for c in range(3)], axis=2
    )


def load_example(record: GradeRecord, mask_root=None) -> LabeledExample:
    """Read, preprocess, and label one manifest record.

    With a mask_root the lesion channels are loaded in the raw frame, warped
    through the detected disk geometry, and clipped to the retina mask.
    """
    raw = RawFundusImage(
        pixels=read_image(record.image_path), source_id=record.source_id
    )
    pre = preprocess_image(raw)
    masks = None
    if mask_root is not None:
        raw_masks = load_lesion_masks(
            mask_root, record.source_id, frame=raw.pixels.shape[0]
        )
        masks = warp_masks_to_frame(raw_masks, pre.disk)
        masks &= pre.retina_mask[:, :, None]
    return LabeledExample(
        image=pre,
        y_rdr=binarize_rdr(record.icdr_grade),
        lesion_masks=masks,
        has_masks=masks is not None,
    )


# --- synthetic fundus renderer ---

_BASE_COLOR = np.array([186.0, 96.0, 48.0])  # fundus orange-red, RGB
_VESSEL_COLOR = (118, 40, 22)
_MA_COLOR = (92, 26, 16)
_HE_COLOR = (110, 30, 18)
_EX_COLOR = (246, 236, 180)


def _lesion_center(rng, cy, cx, disk_r, lesion_r):
    # stay lesion_r + 3 px inside the disk so rasterized pixels are contained
    reach = disk_r - lesion_r - 3.0
    angle = rng.uniform(0.0, 2.0 * np.pi)
    rad = np.sqrt(rng.uniform(0.0, 1.0)) * reach
    return int(round(cx + rad * np.cos(angle))), int(round(cy + rad * np.sin(angle)))


def _draw_blobs(rng, canvas, mask, cy, cx, disk_r, count, r_lo, r_hi, color):
    for _ in range(count):
        radius = int(rng.integers(r_lo, r_hi + 1))
        x, y = _lesion_center(rng, cy, cx, disk_r, radius)
        cv2.circle(canvas, (x, y), radius, color, -1)
        cv2.circle(mask, (x, y), radius, 1, -1)


def render_fundus(rng: np.random.Generator, frame: int = FRAME, grade_class: int = 2):
    """One synthetic fundus: shaded disk, vessel curves, exact lesion masks.

    grade_class 0 draws no lesions, 1 draws microaneurysms only, 2 adds
    haemorrhages and exudates. Returns (uint8 image, bool masks, icdr_grade,
    DiskGeometry).
    """
    cy = frame / 2.0 + rng.uniform(-0.02, 0.02) * frame
    cx = frame / 2.0 + rng.uniform(-0.02, 0.02) * frame
    disk_r = rng.uniform(0.40, 0.46) * frame

    yy, xx = np.mgrid[0:frame, 0:frame].astype(np.float64)
    dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
    inside = dist2 <= disk_r * disk_r
    shade = 1.0 - 0.45 * np.clip(dist2 / (disk_r * disk_r), 0.0, 1.0)
    img = _BASE_COLOR[None, None, :] * shade[:, :, None]
    img += rng.normal(0.0, 4.0, img.shape)
    img[~inside] = 0.0
    canvas = np.clip(np.round(img), 0, 255).astype(np.uint8)

    for _ in range(int(rng.integers(4, 8))):
        # vessel: jittered radial polyline from near the center to the rim
        angle = rng.uniform(0.0, 2.0 * np.pi)
        steps = 24
        ts = np.linspace(0.05, 0.9, steps)
        wiggle = rng.uniform(0.02, 0.06) * disk_r
        phase = rng.uniform(0.0, 2.0 * np.pi)
        pts = []
        for t in ts:
            px = cx + t * disk_r * np.cos(angle) - np.sin(angle) * wiggle * np.sin(
                6.0 * t + phase
            )
            py = cy + t * disk_r * np.sin(angle) + np.cos(angle) * wiggle * np.sin(
                6.0 * t + phase
            )
            pts.append((int(round(px)), int(round(py))))
        cv2.polylines(
            canvas, [np.array(pts, dtype=np.int32)], False, _VESSEL_COLOR,
            int(rng.integers(1, 3)),
        )

    # cv2 drawing needs contiguous buffers, so rasterize channels separately
    channels = [np.zeros((frame, frame), dtype=np.uint8) for _ in range(3)]
    scale = frame / float(FRAME)  # lesion sizes are specified for the 512 frame

    def px(v):
        return max(1, int(round(v * scale)))

    if grade_class >= 1:
        _draw_blobs(rng, canvas, channels[0], cy, cx, disk_r,
                    int(rng.integers(3, 11)), px(1), px(3), _MA_COLOR)
    if grade_class >= 2:
        _draw_blobs(rng, canvas, channels[1], cy, cx, disk_r,
                    int(rng.integers(1, 5)), px(4), px(12), _HE_COLOR)
        _draw_blobs(rng, canvas, channels[2], cy, cx, disk_r,
                    int(rng.integers(1, 5)), px(3), px(10), _EX_COLOR)
    canvas[~inside] = 0
    masks = np.stack(channels, axis=2)

    grade = (0, 1, 2)[grade_class]
    geom = DiskGeometry(center_row=cy, center_col=cx, radius=disk_r)
    return canvas, masks != 0, grade, geom


def _grade_class_cycle(index: int) -> int:
    # deterministic balance: per block of four, one healthy, one mild,
    # two referable, giving an even y_rdr split
    return (0, 1, 2, 2)[index % 4]


def synth_generate(n: int, seed: int, frame: int = FRAME,
                   role: str = "seg_train") -> DatasetSplit:
    """In-memory synthetic split with exact masks; deterministic per seed."""
    if n < 1:
        raise ValueError("n must be at least 1")
    examples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        canvas, masks, grade, geom = render_fundus(rng, frame, _grade_class_cycle(i))
        yy, xx = np.mgrid[0:frame, 0:frame].astype(np.float64)
        retina = (yy - geom.center_row) ** 2 + (xx - geom.center_col) ** 2 <= (
            geom.radius**2
        )
        pre = PreprocessedImage(
            image=canvas.astype(np.float32),
            retina_mask=retina,
            source_id=f"synth-{seed}-{i:04d}",
            disk=geom,
        )
        examples.append(
            LabeledExample(
                image=pre,
                y_rdr=binarize_rdr(grade),
                lesion_masks=masks,
                has_masks=True,
            )
        )
    return DatasetSplit(role, examples)


def synth_write(out_dir, n: int, seed: int, frame: int = FRAME) -> Path:
    """Render n synthetic images to disk: images/, masks/, manifest.csv.

    Exudate pixels are split between the hard and soft folders to exercise
    the merge on load. Returns the manifest path.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        canvas, masks, grade, _ = render_fundus(rng, frame, _grade_class_cycle(i))
        source_id = f"synth-{seed}-{i:04d}"
        write_image(out_dir / "images" / f"{source_id}.png", canvas)
        ex = masks[:, :, 2]
        split_row = frame // 2  # hard above, soft below
        hard = ex.copy()
        hard[split_row:] = False
        soft = ex & ~hard
        for folder, mask in (
            ("MA", masks[:, :, 0]), ("HE", masks[:, :, 1]),
            ("EX_HARD", hard), ("EX_SOFT", soft),
        ):
            if mask.any():
                write_image(
                    out_dir / "masks" / folder / f"{source_id}.png",
                    mask.astype(np.uint8) * 255,
                )
        rows.append((source_id, f"images/{source_id}.png", grade, 1))
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return manifest
