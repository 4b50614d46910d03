"""Top-down flow: frame -> detector -> per-person patch -> pose -> keypoints.

Backends are plain objects with a small duck-typed surface:

* detector: ``preprocess(frame) -> prepared`` and ``detect(prepared) -> [Box]``
* pose: ``estimate(patch, ctx) -> HeatmapStack`` (``estimate_batch`` optional)

``ctx`` is a :class:`PatchContext`; real models ignore it, the mocks used
for testing read ground truth through it.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence

import cv2
import numpy as np

from .dataset import Dataset
from .geometry import (
    Box,
    ContractError,
    PatchTransform,
    crop_patch,
    image_to_patch_array,
    iou,
    make_patch_transform,
)
from .heatmap import CodecConfig, HeatmapStack, decode, encode
from .keypoints import NUM_KEYPOINTS, SKELETON, KeypointSet

DEFAULT_DET_THRESHOLD = 0.4
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")

STAGES = ("preprocess", "detect", "crop_decode", "pose")


@dataclass(frozen=True, eq=False)
class Frame:
    id: int
    image: np.ndarray
    timestamp: float = 0.0
    name: str = ""

    def __post_init__(self):
        img = self.image
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise ContractError(f"frame {self.id}: expected HxWx3 uint8, got {img.shape} {img.dtype}")
        if img.shape[0] == 0 or img.shape[1] == 0:
            raise ContractError(f"frame {self.id}: empty image")

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True)
class PatchContext:
    frame_id: int
    box: Box
    transform: PatchTransform


@dataclass
class Person:
    box: Box
    keypoints: KeypointSet
    transform: PatchTransform


@dataclass
class PoseResult:
    frame_id: int
    persons: List[Person] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    error_stage: Optional[str] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error_stage is None

    def to_results(self) -> List[dict]:
        """COCO keypoint results entries (third value = confidence)."""
        out = []
        for p in self.persons:
            out.append(
                {
                    "image_id": self.frame_id,
                    "category_id": 1,
                    "bbox": p.box.to_list(),
                    "score": float(p.box.score),
                    "keypoints": p.keypoints.to_flat(third="conf"),
                }
            )
        return out


class BackendError(RuntimeError):
    pass


def _ms_since(t0: int) -> float:
    return (time.perf_counter_ns() - t0) / 1e6


def _pad_to(t0: int, target_ms: float) -> None:
    """Sleep until ``target_ms`` have passed since ``t0``."""
    left = target_ms - _ms_since(t0)
    if left > 0:
        time.sleep(left / 1000)


def _front(frame: Frame, det, det_conf_threshold: float):
    """Preprocess + detect; returns (kept boxes, timings) or raises with stage."""
    timings = {}
    t0 = time.perf_counter_ns()
    try:
        prepared = det.preprocess(frame)
    except Exception as e:
        raise _StageFailure("preprocess", e, timings) from e
    timings["preprocess"] = _ms_since(t0)
    t0 = time.perf_counter_ns()
    try:
        boxes = list(det.detect(prepared))
    except Exception as e:
        raise _StageFailure("detect", e, timings) from e
    timings["detect"] = _ms_since(t0)
    kept = [
        b for b in boxes if b.score is not None and b.score >= det_conf_threshold and b.w > 0 and b.h > 0
    ]
    order = sorted(range(len(kept)), key=lambda i: -kept[i].score)
    return [kept[i] for i in order], timings


class _StageFailure(Exception):
    def __init__(self, stage, cause, timings):
        super().__init__(f"{stage}: {cause!r}")
        self.stage, self.cause, self.timings = stage, cause, timings


def _back(frame: Frame, boxes: Sequence[Box], pose, cfg: CodecConfig, timings, batch_size, expansion):
    crop_ms = 0.0
    pose_ms = 0.0
    transforms, patches, ctxs = [], [], []
    t0 = time.perf_counter_ns()
    try:
        for b in boxes:
            t = make_patch_transform(b, frame.width, frame.height, expansion)
            transforms.append(t)
            patches.append(crop_patch(frame.image, t))
            ctxs.append(PatchContext(frame.id, b, t))
    except Exception as e:
        raise _StageFailure("crop_decode", e, timings) from e
    crop_ms += _ms_since(t0)

    stacks: List[HeatmapStack] = []
    try:
        if batch_size and batch_size > 1 and hasattr(pose, "estimate_batch"):
            for i in range(0, len(patches), batch_size):
                t0 = time.perf_counter_ns()
                stacks.extend(pose.estimate_batch(patches[i : i + batch_size], ctxs[i : i + batch_size]))
                pose_ms += _ms_since(t0)
        else:
            for p, c in zip(patches, ctxs):
                t0 = time.perf_counter_ns()
                stacks.append(pose.estimate(p, c))
                pose_ms += _ms_since(t0)
    except Exception as e:
        raise _StageFailure("pose", e, timings) from e

    t0 = time.perf_counter_ns()
    try:
        persons = [
            Person(b, decode(hm, t, cfg), t) for b, hm, t in zip(boxes, stacks, transforms)
        ]
    except Exception as e:
        raise _StageFailure("crop_decode", e, timings) from e
    crop_ms += _ms_since(t0)
    timings["crop_decode"] = crop_ms
    timings["pose"] = pose_ms
    return persons


def run_frame(
    f: Frame,
    det,
    pose,
    det_conf_threshold: float = DEFAULT_DET_THRESHOLD,
    cfg: CodecConfig = CodecConfig(),
    batch_size: Optional[int] = None,
    expansion: float = 1.0,
) -> PoseResult:
    """Run one frame; backend failures become an error result, not an exception."""
    try:
        boxes, timings = _front(f, det, det_conf_threshold)
        persons = _back(f, boxes, pose, cfg, timings, batch_size, expansion)
    except _StageFailure as e:
        return PoseResult(f.id, [], e.timings, e.stage, repr(e.cause))
    return PoseResult(f.id, persons, timings)


def run_sequence(
    frames: Iterable[Frame],
    det,
    pose,
    det_conf_threshold: float = DEFAULT_DET_THRESHOLD,
    cfg: CodecConfig = CodecConfig(),
    batch_size: Optional[int] = None,
    expansion: float = 1.0,
    pipelined: bool = False,
) -> Iterator[PoseResult]:
    """Yield one PoseResult per frame, in input order.

    With ``pipelined`` the detector works on frame k+1 in a helper thread
    while the pose backend handles frame k on the caller's thread; each
    backend still sees one call at a time.
    """
    if not pipelined:
        for f in frames:
            yield run_frame(f, det, pose, det_conf_threshold, cfg, batch_size, expansion)
        return

    def finish(f, fut):
        try:
            boxes, timings = fut.result()
            persons = _back(f, boxes, pose, cfg, timings, batch_size, expansion)
        except _StageFailure as e:
            return PoseResult(f.id, [], e.timings, e.stage, repr(e.cause))
        return PoseResult(f.id, persons, timings)

    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="detect") as ex:
        pending = None
        for f in frames:
            fut = ex.submit(_front, f, det, det_conf_threshold)
            if pending is not None:
                yield finish(*pending)
            pending = (f, fut)
        if pending is not None:
            yield finish(*pending)


def results_document(results: Iterable[PoseResult]) -> List[dict]:
    out = []
    for r in results:
        out.extend(r.to_results())
    return out


def dumps_results(results: Iterable[PoseResult]) -> str:
    return json.dumps(results_document(results), sort_keys=True, separators=(",", ":")) + "\n"


def timing_sidecar(results: Iterable[PoseResult]) -> List[dict]:
    return [
        {
            "frame_id": r.frame_id,
            "persons": len(r.persons),
            "timings_ms": r.timings,
            "error_stage": r.error_stage,
            "error": r.error,
        }
        for r in results
    ]


# --- frame sources -------------------------------------------------------


def list_frame_files(directory) -> List[str]:
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(IMAGE_EXTS))
    return [os.path.join(directory, n) for n in names]


def load_frames(directory, ids: Optional[Dict[str, int]] = None) -> Iterator[Frame]:
    """Frames from an image directory, sorted by file name.

    ``ids`` maps file names to image ids (e.g. from an annotation file);
    otherwise frames are numbered from 1.
    """
    for k, path in enumerate(list_frame_files(directory), start=1):
        name = os.path.basename(path)
        img = cv2.imread(path, cv2.IMREAD_COLOR)
        if img is None:
            raise OSError(f"cannot decode image {path}")
        fid = ids.get(name, k) if ids is not None else k
        yield Frame(fid, img, timestamp=0.0, name=name)


# --- letterboxing for detector inputs ------------------------------------


@dataclass(frozen=True)
class Letterbox:
    scale: float
    pad_x: float
    pad_y: float

    def to_frame(self, b: Box) -> Box:
        return Box(
            (b.x - self.pad_x) / self.scale,
            (b.y - self.pad_y) / self.scale,
            b.w / self.scale,
            b.h / self.scale,
            b.score,
        )


def letterbox(image: np.ndarray, long_side: int = 1280):
    """Resize so the long side equals ``long_side`` and pad to a square."""
    h, w = image.shape[:2]
    scale = long_side / max(h, w)
    nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
    resized = cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR)
    px, py = (long_side - nw) // 2, (long_side - nh) // 2
    canvas = np.zeros((long_side, long_side) + image.shape[2:], dtype=image.dtype)
    canvas[py : py + nh, px : px + nw] = resized
    return canvas, Letterbox(nw / w, px, py)


# --- mock backends -------------------------------------------------------


class MockDetector:
    """Pure detector returning ``boxes_for(frame_id)``.

    ``delay_ms`` and ``preprocess_ms`` are per-call latencies (the call
    sleeps until that much time has passed); ``fail_on`` lists frame ids
    that raise, for error-isolation tests.
    """

    input_long_side = 1280

    def __init__(
        self,
        boxes_for: Callable[[int], Sequence[Box]],
        delay_ms: float = 0.0,
        preprocess_ms: float = 0.0,
        fail_on: Iterable[int] = (),
    ):
        self.boxes_for = boxes_for
        self.delay_ms = delay_ms
        self.preprocess_ms = preprocess_ms
        self.fail_on = set(fail_on)

    def preprocess(self, frame: Frame):
        t0 = time.perf_counter_ns()
        _pad_to(t0, self.preprocess_ms)
        return frame

    def detect(self, frame: Frame) -> List[Box]:
        t0 = time.perf_counter_ns()
        if frame.id in self.fail_on:
            raise BackendError(f"mock detector failure on frame {frame.id}")
        boxes = list(self.boxes_for(frame.id))
        _pad_to(t0, self.delay_ms)
        return boxes


class MockPoseBackend:
    """Emits encoded Gaussian targets for keypoints supplied by ``keypoints_for``.

    ``keypoints_for(ctx)`` returns a KeypointSet in frame coordinates (or
    None for an all-zero stack). ``peak`` rescales every map, which lets
    tests produce low-confidence output. ``delay_ms`` is the per-call
    latency including the encoding work.
    """

    def __init__(
        self,
        keypoints_for: Callable[[PatchContext], Optional[KeypointSet]],
        cfg: CodecConfig = CodecConfig(),
        delay_ms: float = 0.0,
        peak: float = 1.0,
        fail_on: Iterable[int] = (),
    ):
        self.keypoints_for = keypoints_for
        self.cfg = cfg
        self.delay_ms = delay_ms
        self.peak = peak
        self.fail_on = set(fail_on)

    def estimate(self, patch: np.ndarray, ctx: PatchContext) -> HeatmapStack:
        t0 = time.perf_counter_ns()
        if ctx.frame_id in self.fail_on:
            raise BackendError(f"mock pose failure on frame {ctx.frame_id}")
        kps = self.keypoints_for(ctx)
        if kps is None:
            hm = HeatmapStack.zeros(self.cfg, ctx.transform.dst_size)
        else:
            patch_kps = KeypointSet(image_to_patch_array(ctx.transform, kps.xy), kps.v)
            hm = encode(patch_kps, self.cfg, ctx.transform.dst_size)
            if self.peak != 1.0:
                hm = HeatmapStack(hm.maps * np.float32(self.peak), hm.stride)
        _pad_to(t0, self.delay_ms)
        return hm

    def estimate_batch(self, patches, ctxs):
        return [self.estimate(p, c) for p, c in zip(patches, ctxs)]


def ground_truth_backends(d: Dataset, cfg: CodecConfig = CodecConfig(), score: float = 1.0, **kw):
    """Detector/pose mock pair replaying the annotations of ``d``.

    The detector emits each non-crowd box with ``score``; the pose mock
    encodes the keypoints of the annotation that best overlaps the crop's
    source box.
    """
    by_img = d.anns_by_image()

    def boxes_for(fid):
        return [a.bbox.with_score(score) for a in by_img.get(fid, []) if not a.iscrowd]

    def keypoints_for(ctx: PatchContext):
        cands = [a for a in by_img.get(ctx.frame_id, []) if a.keypoints is not None and not a.iscrowd]
        if not cands:
            return None
        best = max(cands, key=lambda a: iou(a.bbox, ctx.box))
        return best.keypoints

    return (
        MockDetector(boxes_for, kw.get("det_delay_ms", 0.0)),
        MockPoseBackend(keypoints_for, cfg, kw.get("pose_delay_ms", 0.0)),
    )


# --- rendering -----------------------------------------------------------

BOX_COLOR = (0, 0, 255)  # BGR red
LIMB_COLOR = (255, 200, 0)
VISIBLE_COLOR = (0, 255, 0)
INVISIBLE_COLOR = (200, 0, 255)


def draw_overlay(image: np.ndarray, r: PoseResult) -> np.ndarray:
    out = image.copy()
    for p in r.persons:
        b = p.box
        cv2.rectangle(
            out, (int(round(b.x)), int(round(b.y))), (int(round(b.x2)), int(round(b.y2))), BOX_COLOR, 1
        )
        pts = np.round(p.keypoints.xy).astype(int)
        vis = p.keypoints.v > 0
        for a, c in SKELETON:
            if vis[a] and vis[c]:
                cv2.line(out, tuple(pts[a]), tuple(pts[c]), LIMB_COLOR, 1, cv2.LINE_8)
        for i in range(NUM_KEYPOINTS):
            if vis[i]:
                cv2.circle(out, tuple(pts[i]), 2, VISIBLE_COLOR, -1, cv2.LINE_8)
            else:
                cv2.drawMarker(out, tuple(pts[i]), INVISIBLE_COLOR, cv2.MARKER_TILTED_CROSS, 5, 1, cv2.LINE_8)
    return out


def render_overlay(f: Frame, r: PoseResult, out) -> str:
    """Write the frame with boxes and skeletons drawn on it as a PNG."""
    if r.frame_id != f.id:
        raise ContractError(f"result for frame {r.frame_id} does not belong to frame {f.id}")
    out = os.fspath(out)
    if not out.lower().endswith(".png"):
        out += ".png"
    img = draw_overlay(f.image, r)
    if not cv2.imwrite(out, img):
        raise OSError(f"cannot write overlay to {out}")
    return out


def results_by_frame(doc: Sequence[dict], cfg: CodecConfig = CodecConfig()) -> Dict[int, PoseResult]:
    """Rebuild PoseResults from a results document for rendering."""
    out: Dict[int, PoseResult] = {}
    for e in doc:
        kps = KeypointSet.from_flat(e["keypoints"], third="conf")
        kps = KeypointSet(kps.xy, np.where(kps.conf < cfg.kp_conf_threshold, 0, 2), kps.conf)
        box = Box.from_list(e["bbox"], float(e["score"]))
        t = make_patch_transform(box, 1, 1) if box.w > 0 and box.h > 0 else None
        out.setdefault(int(e["image_id"]), PoseResult(int(e["image_id"]))).persons.append(Person(box, kps, t))
    return out
