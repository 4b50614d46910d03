"""Loading, validating, filtering and merging COCO-style person datasets."""
from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .geometry import Box, ContractError
from .keypoints import KeypointSet

SPLITS = ("train", "val", "test")
PERSON = (1, "person")

# half-open histogram bins; the evaluator uses COCO's closed ranges instead
SMALL_MAX = 32**2
MEDIUM_MAX = 96**2


class DatasetParseError(ValueError):
    def __init__(self, path, msg, line=None, column=None, pos=None):
        where = f" at line {line} column {column} (byte {pos})" if line is not None else ""
        super().__init__(f"{path}: {msg}{where}")
        self.path, self.line, self.column, self.pos = path, line, column, pos


class DatasetValidationError(ValueError):
    def __init__(self, msg, ids=()):
        self.ids = sorted(set(ids))
        suffix = f": {', '.join(str(i) for i in self.ids)}" if self.ids else ""
        super().__init__(msg + suffix)


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int
    source_dataset: str = ""
    modality: Optional[str] = None


@dataclass(frozen=True)
class AnnRecord:
    id: int
    image_id: int
    category_id: int
    bbox: Box
    area: float
    keypoints: Optional[KeypointSet] = None
    num_keypoints: int = 0
    iscrowd: bool = False


@dataclass(frozen=True)
class Dataset:
    images: Tuple[ImageRecord, ...] = ()
    annotations: Tuple[AnnRecord, ...] = ()
    categories: Tuple[Tuple[int, str], ...] = ()
    split: str = "val"

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "categories", tuple((int(i), str(n)) for i, n in self.categories))

    @property
    def is_person_filtered(self) -> bool:
        return self.categories == (PERSON,)

    def image_index(self) -> Dict[int, ImageRecord]:
        return {im.id: im for im in self.images}

    def anns_by_image(self) -> Dict[int, List[AnnRecord]]:
        out: Dict[int, List[AnnRecord]] = {im.id: [] for im in self.images}
        for a in self.annotations:
            out.setdefault(a.image_id, []).append(a)
        return out


def validate(d: Dataset) -> Dataset:
    if d.split not in SPLITS:
        raise DatasetValidationError(f"unknown split {d.split!r}")
    dup = [k for k, n in Counter(im.id for im in d.images).items() if n > 1]
    if dup:
        raise DatasetValidationError("duplicate image ids", dup)
    bad_dims = [im.id for im in d.images if im.width <= 0 or im.height <= 0]
    if bad_dims:
        raise DatasetValidationError("images with non-positive dimensions", bad_dims)
    dup = [k for k, n in Counter(a.id for a in d.annotations).items() if n > 1]
    if dup:
        raise DatasetValidationError("duplicate annotation ids", dup)
    dup = [k for k, n in Counter(c for c, _ in d.categories).items() if n > 1]
    if dup:
        raise DatasetValidationError("duplicate category ids", dup)
    image_ids = {im.id for im in d.images}
    dangling = [a.image_id for a in d.annotations if a.image_id not in image_ids]
    if dangling:
        raise DatasetValidationError("annotations reference missing image ids", dangling)
    cat_ids = {c for c, _ in d.categories}
    dangling = [a.category_id for a in d.annotations if a.category_id not in cat_ids]
    if dangling:
        raise DatasetValidationError("annotations reference missing category ids", dangling)
    bad = [
        a.id
        for a in d.annotations
        if a.keypoints is not None and a.keypoints.num_visible != a.num_keypoints
    ]
    if bad:
        raise DatasetValidationError("num_keypoints disagrees with visibility flags", bad)
    bad = [a.id for a in d.annotations if a.bbox.area > 0 and not a.area > 0]
    if bad:
        raise DatasetValidationError("non-positive area on a box with extent", bad)
    return d


def _ann_from_dict(raw: dict) -> AnnRecord:
    bbox = Box.from_list(raw["bbox"])
    kps = None
    if raw.get("keypoints"):
        kps = KeypointSet.from_flat(raw["keypoints"])
    nk = raw.get("num_keypoints")
    if nk is None:
        nk = kps.num_visible if kps is not None else 0
    area = raw.get("area")
    if area is None:
        area = bbox.area
    return AnnRecord(
        id=int(raw["id"]),
        image_id=int(raw["image_id"]),
        category_id=int(raw["category_id"]),
        bbox=bbox,
        area=float(area),
        keypoints=kps,
        num_keypoints=int(nk),
        iscrowd=bool(raw.get("iscrowd", 0)),
    )


def from_coco_dict(doc: dict, split: str = "val", source: str = "") -> Dataset:
    """Build and validate a Dataset from an already-parsed COCO document."""
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise DatasetValidationError(f"top-level key {key!r} missing or not a list")
    try:
        images = [
            ImageRecord(
                id=int(im["id"]),
                file_name=str(im["file_name"]),
                width=int(im["width"]),
                height=int(im["height"]),
                source_dataset=str(im.get("source_dataset") or source),
                modality=im.get("modality"),
            )
            for im in doc["images"]
        ]
        anns = [_ann_from_dict(a) for a in doc["annotations"]]
        cats = [(int(c["id"]), str(c["name"])) for c in doc["categories"]]
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, DatasetValidationError):
            raise
        raise DatasetValidationError(f"malformed record: {e!r}") from e
    return validate(Dataset(images, anns, cats, split))


def load_dataset(path, split: str = "val") -> Dataset:
    path = os.fspath(path)
    with open(path, "rb") as f:
        raw = f.read()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise DatasetParseError(path, f"invalid UTF-8: {e.reason}", pos=e.start) from e
    except json.JSONDecodeError as e:
        raise DatasetParseError(path, e.msg, e.lineno, e.colno, e.pos) from e
    if not isinstance(doc, dict):
        raise DatasetParseError(path, "top-level value is not an object")
    source = os.path.splitext(os.path.basename(path))[0]
    return from_coco_dict(doc, split, source)


def ann_to_dict(a: AnnRecord) -> dict:
    out = {
        "id": a.id,
        "image_id": a.image_id,
        "category_id": a.category_id,
        "bbox": a.bbox.to_list(),
        "area": float(a.area),
        "iscrowd": int(a.iscrowd),
    }
    if a.keypoints is not None:
        out["keypoints"] = a.keypoints.to_flat()
        out["num_keypoints"] = a.num_keypoints
    return out


def to_coco_dict(d: Dataset) -> dict:
    images = []
    for im in d.images:
        rec = {
            "id": im.id,
            "file_name": im.file_name,
            "width": im.width,
            "height": im.height,
            "source_dataset": im.source_dataset,
        }
        if im.modality is not None:
            rec["modality"] = im.modality
        images.append(rec)
    return {
        "images": images,
        "annotations": [ann_to_dict(a) for a in d.annotations],
        "categories": [{"id": i, "name": n} for i, n in d.categories],
    }


def dumps_dataset(d: Dataset) -> str:
    return json.dumps(to_coco_dict(d), sort_keys=True, separators=(",", ":")) + "\n"


def save_dataset(d: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_dataset(d))


def normalized(d: Dataset) -> Dataset:
    """Same dataset with images and annotations sorted by id."""
    return replace(
        d,
        images=sorted(d.images, key=lambda im: im.id),
        annotations=sorted(d.annotations, key=lambda a: a.id),
        categories=sorted(d.categories),
    )


def filter_person_classes(d: Dataset, keep_names: Iterable[str]) -> Dataset:
    """Collapse the categories named in ``keep_names`` into person (id 1).

    Other annotations are dropped; images are kept even when left empty.
    An already-collapsed dataset is returned unchanged, which keeps the
    operation idempotent whatever the keep list.
    """
    keep = set(keep_names)
    if not keep:
        raise ContractError("keep_names must not be empty")
    if d.is_person_filtered:
        return d
    kept_ids = {cid for cid, name in d.categories if name in keep}
    anns = [replace(a, category_id=1) for a in d.annotations if a.category_id in kept_ids]
    return Dataset(d.images, anns, [PERSON], d.split)


@dataclass
class IdMap:
    images: List[dict] = field(default_factory=list)
    annotations: List[dict] = field(default_factory=list)

    def to_dict(self):
        return {"images": self.images, "annotations": self.annotations}


def merge_with_id_map(parts: Sequence[Dataset]) -> Tuple[Dataset, IdMap]:
    if not parts:
        raise ContractError("nothing to merge")
    splits = {p.split for p in parts}
    if len(splits) != 1:
        raise ContractError(f"cannot merge mixed splits {sorted(splits)}")
    unfiltered = [i for i, p in enumerate(parts) if not p.is_person_filtered]
    if unfiltered:
        raise ContractError(f"parts {unfiltered} are not person-filtered")
    images, anns, idmap = [], [], IdMap()
    next_img, next_ann = 1, 1
    for k, part in enumerate(parts):
        remap = {}
        for im in part.images:
            remap[im.id] = next_img
            idmap.images.append(
                {"part": k, "source": im.source_dataset, "old_id": im.id, "new_id": next_img}
            )
            images.append(replace(im, id=next_img))
            next_img += 1
        for a in part.annotations:
            idmap.annotations.append(
                {"part": k, "source": "", "old_id": a.id, "new_id": next_ann}
            )
            anns.append(replace(a, id=next_ann, image_id=remap[a.image_id]))
            next_ann += 1
    merged = Dataset(images, anns, [PERSON], splits.pop())
    src = {im.id: im.source_dataset for im in merged.images}
    for rec, a in zip(idmap.annotations, anns):
        rec["source"] = src[a.image_id]
    return validate(merged), idmap


def merge_datasets(parts: Sequence[Dataset]) -> Dataset:
    """Concatenate person-filtered parts with dense ids renumbered from 1."""
    return merge_with_id_map(parts)[0]


def area_bucket(area: float) -> str:
    if area < SMALL_MAX:
        return "small"
    if area < MEDIUM_MAX:
        return "medium"
    return "large"


def dataset_stats(d: Dataset) -> dict:
    sizes = {"small": 0, "medium": 0, "large": 0}
    vis = {0: 0, 1: 0, 2: 0}
    for a in d.annotations:
        sizes[area_bucket(a.area)] += 1
        if a.keypoints is not None:
            for flag in a.keypoints.v.tolist():
                vis[flag] += 1
    sources = sorted({im.source_dataset for im in d.images})
    return {
        "images": len(d.images),
        "annotations": len(d.annotations),
        "sources": sources,
        "area_histogram": sizes,
        "visibility_histogram": {str(k): n for k, n in vis.items()},
    }


def format_stats_table(rows: Sequence[Tuple[str, dict]]) -> str:
    head = f"{'dataset':<24}{'images':>8}{'anns':>8}{'small':>8}{'medium':>8}{'large':>8}{'v0':>7}{'v1':>7}{'v2':>7}"
    lines = [head, "-" * len(head)]
    for name, s in rows:
        ah, vh = s["area_histogram"], s["visibility_histogram"]
        lines.append(
            f"{name[:24]:<24}{s['images']:>8}{s['annotations']:>8}{ah['small']:>8}"
            f"{ah['medium']:>8}{ah['large']:>8}{vh['0']:>7}{vh['1']:>7}{vh['2']:>7}"
        )
    return "\n".join(lines)
