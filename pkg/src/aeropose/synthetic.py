"""Synthetic person datasets with known poses, for tests and demos."""
from __future__ import annotations

import os
from typing import List, Optional, Sequence

import cv2
import numpy as np

from .dataset import AnnRecord, Dataset, ImageRecord, save_dataset
from .geometry import Box
from .keypoints import KeypointSet

# Upright person template in normalised box coordinates (x, y).
TEMPLATE = np.array(
    [
        [0.50, 0.10], [0.46, 0.08], [0.54, 0.08], [0.42, 0.10], [0.58, 0.10],
        [0.35, 0.25], [0.65, 0.25], [0.28, 0.40], [0.72, 0.40], [0.24, 0.55],
        [0.76, 0.55], [0.40, 0.55], [0.60, 0.55], [0.40, 0.72], [0.60, 0.72],
        [0.40, 0.88], [0.60, 0.88],
    ]
)


def random_person(rng: np.random.Generator, frame_w: int, frame_h: int, min_h=40, max_h=160):
    h = float(rng.uniform(min_h, max_h))
    w = h * float(rng.uniform(0.35, 0.6))
    x = float(rng.uniform(0, frame_w - w))
    y = float(rng.uniform(0, frame_h - h))
    rel = np.clip(TEMPLATE + rng.normal(0, 0.02, TEMPLATE.shape), 0.1, 0.9)
    xy = np.round(np.column_stack([x + rel[:, 0] * w, y + rel[:, 1] * h]), 2)
    v = rng.choice([1, 2], size=17, p=[0.2, 0.8])
    v[rng.random(17) < 0.05] = 0
    xy[v == 0] = 0.0
    if not (v > 0).any():
        v[5] = 2
        xy[5] = [x + rel[5, 0] * w, y + rel[5, 1] * h]
    return Box(round(x, 2), round(y, 2), round(w, 2), round(h, 2)), KeypointSet(xy, v)


def make_dataset(
    n_images: int,
    seed: int = 0,
    frame_size=(320, 240),
    max_persons: int = 3,
    source: str = "synthetic",
    prefix: str = "img",
    extra_classes: Sequence[str] = (),
    split: str = "val",
) -> Dataset:
    """Images with 0..max_persons persons each plus optional distractor
    classes. Person category is ``person`` (id 1); extras get ids 2, 3, ..."""
    rng = np.random.default_rng(seed)
    fw, fh = frame_size
    images, anns = [], []
    cats = [(1, "person")] + [(i + 2, name) for i, name in enumerate(extra_classes)]
    ann_id = 1
    for i in range(n_images):
        img_id = i + 1
        images.append(ImageRecord(img_id, f"{prefix}_{i:04d}.png", fw, fh, source))
        for _ in range(int(rng.integers(0, max_persons + 1))):
            box, kps = random_person(rng, fw, fh, max_h=min(160, fh - 1))
            anns.append(
                AnnRecord(ann_id, img_id, 1, box, round(box.area, 4), kps, kps.num_visible)
            )
            ann_id += 1
        for cid, _ in cats[1:]:
            if rng.random() < 0.5:
                w, h = rng.uniform(10, 40, size=2)
                box = Box(round(float(rng.uniform(0, fw - w)), 2), round(float(rng.uniform(0, fh - h)), 2),
                          round(float(w), 2), round(float(h), 2))
                anns.append(AnnRecord(ann_id, img_id, cid, box, round(box.area, 4)))
                ann_id += 1
    return Dataset(images, anns, cats, split)


def render_image(d: Dataset, image: ImageRecord, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed + image.id)
    img = np.full((image.height, image.width, 3), 40, np.uint8)
    img += rng.integers(0, 20, size=img.shape, dtype=np.uint8)
    for a in d.annotations:
        if a.image_id != image.id:
            continue
        b = a.bbox
        color = (90, 160, 220) if a.category_id == 1 else (200, 200, 200)
        cv2.rectangle(img, (int(b.x), int(b.y)), (int(b.x2), int(b.y2)), color, -1)
    return img


def write_dataset(d: Dataset, ann_path, image_dir, seed: int = 0) -> List[str]:
    os.makedirs(image_dir, exist_ok=True)
    save_dataset(d, ann_path)
    paths = []
    for im in d.images:
        p = os.path.join(image_dir, im.file_name)
        cv2.imwrite(p, render_image(d, im, seed))
        paths.append(p)
    return paths


def synthetic_frames(n: int, seed: int = 0, size=(640, 480)):
    from .pipeline import Frame

    rng = np.random.default_rng(seed)
    w, h = size
    return [Frame(i + 1, rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)) for i in range(n)]


def template_keypoints(box: Box) -> KeypointSet:
    xy = np.column_stack([box.x + TEMPLATE[:, 0] * box.w, box.y + TEMPLATE[:, 1] * box.h])
    return KeypointSet(xy, np.full(17, 2))


def centered_box(w: int, h: int, frac: float = 0.4, score: Optional[float] = 0.9) -> Box:
    bw, bh = w * frac * 0.5, h * frac
    return Box((w - bw) / 2, (h - bh) / 2, bw, bh, score)
