"""HOI samples, fixation records, heatmap rasterization and file formats.

Attention maps are plain 2-D ``numpy`` arrays (rows x cols, float64).
Boxes are ``(x1, y1, x2, y2)`` in absolute pixels.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ManifestError, SplitError, ValidationError

MANIFEST_KEYS = (
    "sample_id", "image_path", "width", "height",
    "human_box", "object_box", "object_label", "interaction_label", "fixations",
)
CATEGORY_KEYS = ("interaction_pair", "action_only")
HEATMAP_MAGIC = b"IGHM"

# Kernel width for click fixations on a 640 px wide image; scaled with width.
REFERENCE_SIGMA = 19.0
REFERENCE_WIDTH = 640


@dataclass(frozen=True)
class HOISample:
    sample_id: str
    image_path: str
    width: int
    height: int
    human_box: tuple[float, float, float, float]
    object_box: tuple[float, float, float, float]
    object_label: str
    interaction_label: str

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"{self.sample_id}: image size must be positive")
        for name in ("human_box", "object_box"):
            x1, y1, x2, y2 = getattr(self, name)
            if not (0 <= x1 < x2 <= self.width and 0 <= y1 < y2 <= self.height):
                raise ValidationError(
                    f"{self.sample_id}: {name} {getattr(self, name)} outside "
                    f"{self.width}x{self.height} image or degenerate"
                )
        if not self.object_label or not self.interaction_label:
            raise ValidationError(f"{self.sample_id}: empty label")

    def normalized_boxes(self) -> tuple[np.ndarray, np.ndarray]:
        scale = np.array([self.width, self.height, self.width, self.height], dtype=np.float64)
        return np.asarray(self.human_box) / scale, np.asarray(self.object_box) / scale

    def category(self, key: str = "interaction_pair"):
        if key == "interaction_pair":
            return (self.interaction_label, self.object_label)
        if key == "action_only":
            return self.interaction_label
        raise ValueError(f"unknown category key {key!r}")


@dataclass(frozen=True)
class Fixation:
    x: float
    y: float
    observer_id: str


@dataclass
class FixationSet:
    sample_id: str
    points: list[Fixation] = field(default_factory=list)

    def validate(self, width: int, height: int) -> None:
        for p in self.points:
            if not (0 <= p.x <= width and 0 <= p.y <= height):
                raise ValidationError(
                    f"{self.sample_id}: fixation ({p.x}, {p.y}) outside {width}x{height} image"
                )

    def observers(self) -> list[str]:
        return sorted({p.observer_id for p in self.points})

    def for_observer(self, observer_id: str) -> "FixationSet":
        return FixationSet(self.sample_id, [p for p in self.points if p.observer_id == observer_id])

    def __len__(self) -> int:
        return len(self.points)


Record = tuple[HOISample, FixationSet]


# --------------------------------------------------------------------------
# manifest I/O
# --------------------------------------------------------------------------

def _parse_record(obj, path, line_no) -> Record:
    if not isinstance(obj, dict):
        raise ManifestError(path, line_no, "expected a JSON object")
    missing = [k for k in MANIFEST_KEYS if k not in obj]
    if missing:
        raise ManifestError(path, line_no, f"missing keys {missing}")
    try:
        sample = HOISample(
            sample_id=str(obj["sample_id"]),
            image_path=str(obj["image_path"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
            human_box=tuple(float(v) for v in obj["human_box"]),
            object_box=tuple(float(v) for v in obj["object_box"]),
            object_label=str(obj["object_label"]),
            interaction_label=str(obj["interaction_label"]),
        )
        points = [Fixation(float(f["x"]), float(f["y"]), str(f["observer_id"])) for f in obj["fixations"]]
    except (TypeError, ValueError, KeyError) as e:
        raise ManifestError(path, line_no, f"bad field value: {e}") from e
    if len(sample.human_box) != 4 or len(sample.object_box) != 4:
        raise ManifestError(path, line_no, "boxes must have 4 coordinates")
    return sample, FixationSet(sample.sample_id, points)


def load_dataset(manifest_path, require_fixations: bool = False) -> list[Record]:
    """Read a JSON-lines manifest, validating every record.

    Blank lines are skipped. With ``require_fixations`` (training sets), a
    sample without fixations is rejected.
    """
    path = Path(manifest_path)
    records: list[Record] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(path, line_no, f"invalid JSON: {e.msg}") from e
            sample, fixations = _parse_record(obj, path, line_no)
            sample.validate()
            fixations.validate(sample.width, sample.height)
            if require_fixations and not fixations.points:
                raise ValidationError(f"{sample.sample_id}: training samples need fixations")
            records.append((sample, fixations))
    ids = [s.sample_id for s, _ in records]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate sample_id(s): {dup}")
    return records


def record_to_json(sample: HOISample, fixations: FixationSet) -> dict:
    return {
        "sample_id": sample.sample_id,
        "image_path": sample.image_path,
        "width": sample.width,
        "height": sample.height,
        "human_box": list(sample.human_box),
        "object_box": list(sample.object_box),
        "object_label": sample.object_label,
        "interaction_label": sample.interaction_label,
        "fixations": [{"x": p.x, "y": p.y, "observer_id": p.observer_id} for p in fixations.points],
    }


def save_dataset(records: Iterable[Record], manifest_path) -> None:
    with Path(manifest_path).open("w", encoding="utf-8") as fh:
        for sample, fixations in records:
            fh.write(json.dumps(record_to_json(sample, fixations)) + "\n")


def load_image(sample: HOISample, root=None) -> np.ndarray:
    """Load the sample's RGB image as float64 in [0, 1], shape (H, W, 3).

    Relative image paths resolve against ``root`` (the manifest directory).
    """
    path = Path(sample.image_path)
    if not path.is_absolute() and root is not None:
        path = Path(root) / path
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.shape[:2] != (sample.height, sample.width):
        raise ValidationError(
            f"{sample.sample_id}: image is {arr.shape[1]}x{arr.shape[0]}, "
            f"manifest says {sample.width}x{sample.height}"
        )
    return arr


# --------------------------------------------------------------------------
# heatmaps
# --------------------------------------------------------------------------

def default_sigma(width: int) -> float:
    return REFERENCE_SIGMA * width / REFERENCE_WIDTH


def fixations_to_heatmap(fixations: FixationSet, width: int, height: int, sigma: float | None = None) -> np.ndarray:
    """Sum an isotropic Gaussian per fixation and max-normalize to [0, 1].

    Pixel ``(row, col)`` sits at coordinate ``(y=row, x=col)``. All observers
    are pooled; use :meth:`FixationSet.for_observer` for per-observer maps.
    """
    if sigma is None:
        sigma = default_sigma(width)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not fixations.points:
        return np.zeros((height, width))
    fixations.validate(width, height)
    # canonical order makes the float sum independent of input order
    pts = np.array(sorted((p.x, p.y) for p in fixations.points))
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    gx = np.exp(-((xs[None, :] - pts[:, :1]) ** 2) / (2 * sigma**2))  # (n, W)
    gy = np.exp(-((ys[None, :] - pts[:, 1:]) ** 2) / (2 * sigma**2))  # (n, H)
    heat = gy.T @ gx
    peak = heat.max()
    if peak <= 0:
        # all kernels underflowed; cannot happen for in-bounds points
        return np.zeros((height, width))
    return heat / peak


def check_map(m, normalized: str | None = None) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValidationError(f"attention map must be a non-empty 2-D grid, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError("attention map has non-finite values")
    if normalized == "max" and (m.min() < 0 or not math.isclose(m.max(), 1.0, abs_tol=1e-9)):
        raise ValidationError("map is not max-normalized")
    if normalized == "sum" and (m.min() < 0 or abs(m.sum() - 1.0) > 1e-9):
        raise ValidationError("map is not sum-normalized")
    return m


def _bin_edges(src: int, dst: int) -> list[tuple[int, int]]:
    edges = []
    for i in range(dst):
        lo = (i * src) // dst
        hi = ((i + 1) * src) // dst
        edges.append((lo, max(hi, lo + 1)))  # upsampling would otherwise leave empty bins
    return edges


def _bilinear_coords(src: int, dst: int):
    scale = src / dst
    pos = (np.arange(dst) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0, None)
    lo = np.minimum(np.floor(pos).astype(int), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_map(m, rows: int, cols: int, mode: str = "bilinear") -> np.ndarray:
    """Resize a map with bilinear (align-corners false) or adaptive max pooling."""
    if rows <= 0 or cols <= 0:
        raise ValueError("target size must be positive")
    m = np.asarray(m, dtype=np.float64)
    R, C = m.shape
    if mode == "adaptive_max":
        out = np.empty((rows, cols))
        for i, (r0, r1) in enumerate(_bin_edges(R, rows)):
            for j, (c0, c1) in enumerate(_bin_edges(C, cols)):
                out[i, j] = m[r0:r1, c0:c1].max()
        return out
    if mode == "bilinear":
        if (rows, cols) == (R, C):
            return m.copy()
        r_lo, r_hi, r_f = _bilinear_coords(R, rows)
        c_lo, c_hi, c_f = _bilinear_coords(C, cols)
        top = m[r_lo][:, c_lo] * (1 - c_f) + m[r_lo][:, c_hi] * c_f
        bot = m[r_hi][:, c_lo] * (1 - c_f) + m[r_hi][:, c_hi] * c_f
        return top * (1 - r_f[:, None]) + bot * r_f[:, None]
    raise ValueError(f"unknown resize mode {mode!r}")


def write_heatmap(m, path) -> None:
    m = np.asarray(m)
    rows, cols = m.shape
    with Path(path).open("wb") as fh:
        fh.write(HEATMAP_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_heatmap(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != HEATMAP_MAGIC:
        raise ValidationError(f"{path}: not an IGHM heatmap")
    rows, cols = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != 4 * rows * cols:
        raise ValidationError(f"{path}: expected {rows}x{cols} floats, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)


def map_to_png(m, path) -> None:
    """8-bit grayscale export; values in [0, 1] scale to 0..255."""
    m = np.asarray(m, dtype=np.float64)
    img = np.clip(np.rint(m * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, format="PNG", optimize=False)


# --------------------------------------------------------------------------
# zero-shot splits
# --------------------------------------------------------------------------

@dataclass
class SplitManifest:
    train_ids: list[str]
    test_ids: list[str]
    category_key: str
    seed: int | None = None

    def to_json(self) -> dict:
        return {
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
            "category_key": self.category_key,
            "seed": self.seed,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        split = cls(list(obj["train_ids"]), list(obj["test_ids"]), obj["category_key"], obj.get("seed"))
        if split.category_key not in CATEGORY_KEYS:
            raise ValidationError(f"{path}: unknown category_key {split.category_key!r}")
        if set(split.train_ids) & set(split.test_ids):
            raise ValidationError(f"{path}: train and test ids overlap")
        return split

    def check_disjoint(self, samples: Sequence[HOISample]) -> None:
        by_id = {s.sample_id: s for s in samples}
        train = {by_id[i].category(self.category_key) for i in self.train_ids if i in by_id}
        test = {by_id[i].category(self.category_key) for i in self.test_ids if i in by_id}
        shared = train & test
        if shared:
            raise SplitError(f"categories on both sides: {sorted(map(str, shared))}")


def make_zeroshot_split(
    samples: Sequence[HOISample],
    category_key: str = "interaction_pair",
    seed: int = 0,
    test_fraction: float = 0.2,
) -> SplitManifest:
    """Assign whole categories to train or test so the test side is unseen.

    The test side receives ``ceil(test_fraction * n_categories)`` categories,
    clamped so both sides get at least one.
    """
    if category_key not in CATEGORY_KEYS:
        raise ValueError(f"unknown category key {category_key!r}")
    cats = sorted({s.category(category_key) for s in samples}, key=str)
    if len(cats) < 2:
        raise SplitError(f"need at least 2 categories under {category_key}, found {len(cats)}")
    n_test = min(max(math.ceil(test_fraction * len(cats)), 1), len(cats) - 1)
    order = np.random.default_rng(seed).permutation(len(cats))
    test_cats = {cats[i] for i in order[:n_test]}
    train_ids, test_ids = [], []
    for s in samples:
        (test_ids if s.category(category_key) in test_cats else train_ids).append(s.sample_id)
    return SplitManifest(train_ids, test_ids, category_key, seed)
