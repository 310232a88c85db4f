"""Synthetic HOI corpora with planted human/object boxes and click fixations.

Stands in for the IG data in tests and demos: images are small RGB arrays with
a "person" and an "object" rectangle, and observers click around the contact
region between them.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import Fixation, FixationSet, HOISample, save_dataset

CATEGORIES = [
    ("ride", "bicycle"), ("eat", "apple"), ("hold", "cup"), ("kick", "ball"),
    ("fly", "kite"), ("stand_on", "surfboard"), ("read", "book"), ("throw", "frisbee"),
    ("carry", "backpack"), ("cut", "pizza"), ("hit", "tennis_ball"), ("drink_with", "wine_glass"),
]


def _box(rng, width, height, min_frac=0.2, max_frac=0.45):
    bw = rng.uniform(min_frac, max_frac) * width
    bh = rng.uniform(min_frac, max_frac) * height
    x1 = rng.uniform(0, width - bw)
    y1 = rng.uniform(0, height - bh)
    return (round(x1, 2), round(y1, 2), round(x1 + bw, 2), round(y1 + bh, 2))


def render(width, height, human_box, object_box, rng) -> np.ndarray:
    img = rng.uniform(0.0, 0.25, size=(height, width, 3))
    for box, color in ((human_box, (0.9, 0.6, 0.4)), (object_box, (0.2, 0.5, 0.95))):
        x1, y1, x2, y2 = (int(round(v)) for v in box)
        img[y1:y2, x1:x2] = color
    return img


def make_record(sample_id, width, height, category, rng, n_observers=3, clicks=4, image_path=""):
    action, obj = category
    hb = _box(rng, width, height)
    ob = _box(rng, width, height, 0.15, 0.3)
    hc = np.array([(hb[0] + hb[2]) / 2, (hb[1] + hb[3]) / 2])
    oc = np.array([(ob[0] + ob[2]) / 2, (ob[1] + ob[3]) / 2])
    # attention concentrates on the object and the region where the two meet
    anchors = [oc, 0.5 * (hc + oc)]
    spread = 0.04 * width
    pts = []
    for o in range(n_observers):
        for c in range(clicks):
            a = anchors[c % len(anchors)]
            x, y = a + rng.normal(0, spread, size=2)
            pts.append(Fixation(round(float(np.clip(x, 0, width - 1)), 2),
                                round(float(np.clip(y, 0, height - 1)), 2), f"obs{o}"))
    sample = HOISample(sample_id, image_path, width, height, hb, ob, obj, action)
    return sample, FixationSet(sample_id, pts)


def make_corpus(n: int, seed: int = 0, width: int = 64, height: int = 48,
                categories=None, n_observers: int = 3):
    """Return ``(records, images)``; images are float arrays keyed by sample id."""
    rng = np.random.default_rng(seed)
    cats = list(categories or CATEGORIES)
    records, images = [], {}
    for i in range(n):
        sid = f"syn{seed}-{i:04d}"
        rec = make_record(sid, width, height, cats[i % len(cats)], rng, n_observers,
                          image_path=f"images/{sid}.png")
        records.append(rec)
        images[sid] = render(width, height, rec[0].human_box, rec[0].object_box, rng)
    return records, images


def write_corpus(out_dir, n: int, seed: int = 0, **kw) -> Path:
    """Write images and ``manifest.jsonl`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records, images = make_corpus(n, seed, **kw)
    for sid, img in images.items():
        Image.fromarray(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)).save(out / "images" / f"{sid}.png")
    manifest = out / "manifest.jsonl"
    save_dataset(records, manifest)
    return manifest
