"""COCO-protocol box and keypoint evaluation.

Matching, 101-point interpolated AP and AR@maxDets follow the usual COCO
semantics: crowd boxes and out-of-range ground truths are "ignored" (they
absorb matches without counting as hits or misses), unmatched detections
outside the current area range are dropped, and precision is made
monotonically non-increasing before sampling.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import AnnRecord, Dataset
from .geometry import Box, ContractError, NwdConfig, intersection, iou, nwd
from .keypoints import BODY, COCO_KP_K, FACIAL, NUM_KEYPOINTS, KeypointSet

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_AREA_RANGES = {
    "all": (0.0, 1e10),
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, 1e10),
}


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: Box
    keypoints: Optional[KeypointSet] = None
    category_id: int = 1

    def __post_init__(self):
        s = self.box.score
        if s is None or not 0.0 <= s <= 1.0:
            raise ContractError(f"detection score must be in [0, 1], got {s}")

    @property
    def score(self) -> float:
        return self.box.score


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    oks_thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    recall_points: int = 101
    max_dets: int = 100
    area_ranges: Dict[str, Tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_AREA_RANGES)
    )
    kp_k: Tuple[float, ...] = COCO_KP_K
    nwd_c: float = NwdConfig().c

    def __post_init__(self):
        NwdConfig(self.nwd_c)
        for name in ("iou_thresholds", "oks_thresholds"):
            th = tuple(float(t) for t in getattr(self, name))
            if not th or any(b <= a for a, b in zip(th, th[1:])):
                raise ContractError(f"{name} must be non-empty and strictly increasing")
            object.__setattr__(self, name, th)
        k = tuple(float(v) for v in self.kp_k)
        if len(k) != NUM_KEYPOINTS or min(k) <= 0:
            raise ContractError("kp_k needs 17 positive constants")
        object.__setattr__(self, "kp_k", k)
        if self.max_dets < 1 or self.recall_points < 2:
            raise ContractError("max_dets >= 1 and recall_points >= 2 required")
        if "all" not in self.area_ranges:
            raise ContractError("area_ranges must define 'all'")

    @property
    def recall_grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.recall_points)


@dataclass
class EvalReport:
    mode: str
    ap: Optional[float]
    ar_at_100: Optional[float]
    ap_by_threshold: Dict[str, Optional[float]]
    ap_by_area: Dict[str, Optional[float]]
    per_keypoint_oks_mean: Optional[List[Optional[float]]] = None
    per_group_oks: Optional[Dict[str, Optional[float]]] = None
    counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "ap": self.ap,
            "ar_at_100": self.ar_at_100,
            "ap_by_threshold": self.ap_by_threshold,
            "ap_by_area": self.ap_by_area,
            "per_keypoint_oks_mean": self.per_keypoint_oks_mean,
            "per_group_oks": self.per_group_oks,
            "counts": self.counts,
        }


def oks(gt: AnnRecord, pred: KeypointSet, cfg: EvalConfig = EvalConfig()) -> Optional[float]:
    """Object keypoint similarity; None when ``gt`` has no labelled points."""
    terms = _oks_terms(gt, pred, cfg)
    if terms is None:
        return None
    return float(terms[gt.keypoints.v > 0].mean())


def _oks_terms(gt: AnnRecord, pred: KeypointSet, cfg: EvalConfig) -> Optional[np.ndarray]:
    if gt.keypoints is None or gt.keypoints.num_visible == 0:
        return None
    if not gt.area > 0:
        raise ContractError(f"annotation {gt.id} has non-positive area")
    k = np.asarray(cfg.kp_k)
    d2 = ((pred.xy - gt.keypoints.xy) ** 2).sum(axis=1)
    return np.exp(-d2 / (2.0 * gt.area * k**2))


def _similarity(gts, dets, kind: str, cfg: EvalConfig) -> np.ndarray:
    sim = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            if kind == "iou":
                if g.iscrowd:
                    # crowd regions: fraction of the detection inside the region
                    inter = intersection(d.box, g.bbox)
                    sim[i, j] = inter / d.box.area if d.box.area > 0 else 0.0
                else:
                    sim[i, j] = iou(d.box, g.bbox)
            elif kind == "nwd":
                ok = min(d.box.w, d.box.h, g.bbox.w, g.bbox.h) > 0
                sim[i, j] = nwd(d.box, g.bbox, NwdConfig(cfg.nwd_c)) if ok else 0.0
            else:
                if d.keypoints is None:
                    raise ContractError(f"detection on image {d.image_id} carries no keypoints")
                v = oks(g, d.keypoints, cfg)
                sim[i, j] = 0.0 if v is None else v
    return sim


def _sort_dets(dets: Sequence[Detection]) -> List[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def _greedy(sim: np.ndarray, gt_order: Sequence[int], crowd, ignore, threshold: float):
    """Match rows of ``sim`` (already score-ordered) to columns.

    Returns the matched column per row, or -1. Non-ignored columns are
    preferred; among eligible ones the highest similarity wins and ties go
    to the earliest column in ``gt_order``.
    """
    taken = np.zeros(sim.shape[1], dtype=bool)
    out = []
    for i in range(sim.shape[0]):
        best, best_sim = -1, -1.0
        for j in gt_order:
            if taken[j] and not crowd[j]:
                continue
            if best >= 0 and not ignore[best] and ignore[j]:
                break
            s = sim[i, j]
            if s < threshold or s <= best_sim:
                continue
            best, best_sim = j, s
        if best >= 0:
            taken[best] = True
        out.append(best)
    return out


def match_and_score(
    gts: Sequence[AnnRecord],
    dets: Sequence[Detection],
    threshold: float,
    similarity: str = "iou",
    cfg: EvalConfig = EvalConfig(),
):
    """Greedy score-ordered matching for one image.

    Returns ``(detection, matched ground truth or None)`` pairs in
    descending score order. Crowd ground truths may absorb several
    detections.
    """
    if similarity not in ("iou", "oks", "nwd"):
        raise ContractError(f"unknown similarity {similarity!r}")
    order = _sort_dets(dets)
    sdets = [dets[i] for i in order]
    sim = _similarity(gts, sdets, similarity, cfg)
    crowd = [g.iscrowd for g in gts]
    ignore = list(crowd)
    gt_order = sorted(range(len(gts)), key=lambda j: ignore[j])
    m = _greedy(sim, gt_order, crowd, ignore, min(threshold, 1 - 1e-10))
    return [(d, gts[j] if j >= 0 else None) for d, j in zip(sdets, m)]


def average_precision(scores, labels, n_gt: int, recall_points=101) -> Optional[float]:
    """101-point interpolated AP from score-ranked TP/FP labels.

    ``labels`` are booleans (True = true positive). Ties in score keep the
    given order. Returns None when ``n_gt`` is zero.
    """
    if n_gt <= 0:
        return None
    grid = np.linspace(0.0, 1.0, recall_points) if np.isscalar(recall_points) else np.asarray(recall_points)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    return _ap_from_sorted(labels[order], n_gt, grid)[0]


def _ap_from_sorted(tp_sorted: np.ndarray, n_gt: int, grid: np.ndarray):
    tp = np.cumsum(tp_sorted, dtype=np.float64)
    fp = np.cumsum(~tp_sorted, dtype=np.float64)
    if tp.size == 0:
        return 0.0, 0.0
    rc = tp / n_gt
    pr = tp / np.maximum(tp + fp, np.spacing(1))
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    idx = np.searchsorted(rc, grid, side="left")
    q = np.zeros(grid.size)
    ok = idx < pr.size
    q[ok] = pr[idx[ok]]
    return float(q.mean()), float(rc[-1])


def _det_area(d: Detection) -> float:
    return d.box.area


def _gt_ignored(g: AnnRecord, rng, kind: str) -> bool:
    if g.iscrowd:
        return True
    if kind == "oks" and (g.keypoints is None or g.keypoints.num_visible == 0):
        return True
    return not (rng[0] <= g.area <= rng[1])


def _mean(vals) -> Optional[float]:
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def _evaluate(d: Dataset, dets: Sequence[Detection], cfg: EvalConfig, kind: str) -> EvalReport:
    thresholds = cfg.oks_thresholds if kind == "oks" else cfg.iou_thresholds
    images = d.image_index()
    missing = sorted({x.image_id for x in dets if x.image_id not in images})
    if missing:
        raise ContractError(f"detections reference unknown image ids {missing}")
    if kind == "oks":
        bad = [x.image_id for x in dets if x.keypoints is None]
        if bad:
            raise ContractError(f"keypoint evaluation needs keypoints on every detection (images {sorted(set(bad))})")
    gts_by_img = d.anns_by_image()
    dets_by_img: Dict[int, List[Detection]] = {im.id: [] for im in d.images}
    for x in dets:
        dets_by_img[x.image_id].append(x)

    grid = cfg.recall_grid
    # per (area, threshold): list over images of (scores, tp, ignored) plus gt count
    acc = {(a, t): ([], [], [], [0]) for a in cfg.area_ranges for t in range(len(thresholds))}
    kp_terms: List[np.ndarray] = []
    kp_masks: List[np.ndarray] = []

    for im in d.images:
        gts = [g for g in gts_by_img.get(im.id, []) if g.category_id == 1]
        idets = dets_by_img[im.id]
        order = _sort_dets(idets)[: cfg.max_dets]
        sdets = [idets[i] for i in order]
        sim = _similarity(gts, sdets, kind, cfg)
        crowd = [g.iscrowd for g in gts]
        scores = np.array([x.score for x in sdets])
        for aname, rng in cfg.area_ranges.items():
            ignore = [_gt_ignored(g, rng, kind) for g in gts]
            gt_order = sorted(range(len(gts)), key=lambda j: ignore[j])
            out_of_range = [not (rng[0] <= _det_area(x) <= rng[1]) for x in sdets]
            for ti, t in enumerate(thresholds):
                m = _greedy(sim, gt_order, crowd, ignore, min(t, 1 - 1e-10))
                tp = np.array([j >= 0 and not ignore[j] for j in m], dtype=bool)
                ign = np.array(
                    [(j >= 0 and ignore[j]) or (j < 0 and oor) for j, oor in zip(m, out_of_range)],
                    dtype=bool,
                )
                s, p, g_ign, n = acc[(aname, ti)]
                s.append(scores)
                p.append(tp)
                g_ign.append(ign)
                n[0] += sum(1 for x in ignore if not x)
                if kind == "oks" and aname == "all" and ti == 0:
                    for x, j in zip(sdets, m):
                        if j >= 0 and not ignore[j]:
                            kp_terms.append(_oks_terms(gts[j], x.keypoints, cfg))
                            kp_masks.append(gts[j].keypoints.v > 0)

    ap_table: Dict[Tuple[str, int], Optional[float]] = {}
    rc_table: Dict[Tuple[str, int], Optional[float]] = {}
    for key, (s, p, g_ign, n) in acc.items():
        n_gt = n[0]
        if n_gt == 0:
            ap_table[key] = rc_table[key] = None
            continue
        scores = np.concatenate(s) if s else np.zeros(0)
        tp = np.concatenate(p) if p else np.zeros(0, bool)
        ign = np.concatenate(g_ign) if g_ign else np.zeros(0, bool)
        order = np.argsort(-scores, kind="mergesort")
        keep = ~ign[order]
        ap_table[key], rc_table[key] = _ap_from_sorted(tp[order][keep], n_gt, grid)

    nt = len(thresholds)
    report = EvalReport(
        mode={"iou": "det", "nwd": "det-nwd", "oks": "kp"}[kind],
        ap=_mean(ap_table[("all", t)] for t in range(nt)),
        ar_at_100=_mean(rc_table[("all", t)] for t in range(nt)),
        ap_by_threshold={f"{th:.2f}": ap_table[("all", t)] for t, th in enumerate(thresholds)},
        ap_by_area={a: _mean(ap_table[(a, t)] for t in range(nt)) for a in cfg.area_ranges},
        counts={
            "images": len(d.images),
            "gts": sum(1 for g in d.annotations if not g.iscrowd),
            "dets": len(dets),
        },
    )
    if kind == "oks":
        report.per_keypoint_oks_mean, report.per_group_oks = _keypoint_breakdown(kp_terms, kp_masks)
    return report


def _keypoint_breakdown(terms, masks):
    if not terms:
        return [None] * NUM_KEYPOINTS, {"facial": None, "body": None}
    t = np.stack(terms)
    m = np.stack(masks)
    per_kp = [float(t[m[:, i], i].mean()) if m[:, i].any() else None for i in range(NUM_KEYPOINTS)]

    def group(idx):
        sel = m[:, list(idx)]
        return float(t[:, list(idx)][sel].mean()) if sel.any() else None

    return per_kp, {"facial": group(FACIAL), "body": group(BODY)}


def evaluate_detections(d: Dataset, dets: Sequence[Detection], cfg: EvalConfig = EvalConfig()) -> EvalReport:
    return _evaluate(d, dets, cfg, "iou")


def evaluate_detections_nwd(d: Dataset, dets: Sequence[Detection], cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Box evaluation with NWD in place of IoU as the matching similarity."""
    return _evaluate(d, dets, cfg, "nwd")


def evaluate_keypoints(d: Dataset, dets: Sequence[Detection], cfg: EvalConfig = EvalConfig()) -> EvalReport:
    return _evaluate(d, dets, cfg, "oks")


def _wavg(pairs) -> Optional[float]:
    pairs = [(v, n) for v, n in pairs if v is not None]
    if not pairs:
        return None
    return math.fsum(v * n for v, n in pairs) / math.fsum(n for _, n in pairs)


def weighted_average(reports: Sequence[Tuple[EvalReport, float]]) -> EvalReport:
    """Frame-count weighted mean of every scalar metric.

    Metrics missing (None) in a report are averaged over the remaining
    reports only.
    """
    if not reports:
        raise ContractError("weighted_average needs at least one report")
    if any(not n > 0 for _, n in reports):
        raise ContractError("frame counts must be positive")
    modes = {r.mode for r, _ in reports}
    first = reports[0][0]

    def keyed(getter, keys):
        return {k: _wavg((getter(r)[k], n) for r, n in reports) for k in keys}

    out = EvalReport(
        mode=first.mode if len(modes) == 1 else "mixed",
        ap=_wavg((r.ap, n) for r, n in reports),
        ar_at_100=_wavg((r.ar_at_100, n) for r, n in reports),
        ap_by_threshold=keyed(lambda r: r.ap_by_threshold, first.ap_by_threshold),
        ap_by_area=keyed(lambda r: r.ap_by_area, first.ap_by_area),
        counts={k: int(sum(r.counts.get(k, 0) for r, _ in reports)) for k in first.counts},
    )
    if all(r.per_keypoint_oks_mean is not None for r, _ in reports):
        out.per_keypoint_oks_mean = [
            _wavg((r.per_keypoint_oks_mean[i], n) for r, n in reports) for i in range(NUM_KEYPOINTS)
        ]
        out.per_group_oks = keyed(lambda r: r.per_group_oks, ("facial", "body"))
    return out


def detections_from_results(doc: Sequence[dict]) -> List[Detection]:
    """Parse a COCO results array (box or keypoint variant).

    For keypoint entries the third value of each triple is a confidence.
    Missing boxes are replaced by the keypoint extent.
    """
    if not isinstance(doc, list):
        raise ContractError("results document must be a JSON array")
    out = []
    for i, r in enumerate(doc):
        try:
            kps = KeypointSet.from_flat(r["keypoints"], third="conf") if r.get("keypoints") else None
            if r.get("bbox") is not None:
                box = Box.from_list(r["bbox"], float(r["score"]))
            elif kps is not None:
                lo, hi = kps.xy.min(axis=0), kps.xy.max(axis=0)
                box = Box(lo[0], lo[1], hi[0] - lo[0], hi[1] - lo[1], float(r["score"]))
            else:
                raise ContractError("entry has neither bbox nor keypoints")
            out.append(Detection(int(r["image_id"]), box, kps, int(r.get("category_id", 1))))
        except (KeyError, TypeError, ValueError) as e:
            raise ContractError(f"results entry {i}: {e}") from e
    return out


def load_results(path) -> List[Detection]:
    with open(path, encoding="utf-8") as f:
        return detections_from_results(json.load(f))


def _pct(v: Optional[float]) -> str:
    return "-" if v is None else f"{100.0 * v:.2f}"


def format_report_table(rows: Sequence[Tuple[str, EvalReport]], weighted: Optional[EvalReport] = None) -> str:
    """Fixed-width AP/AR table, values scaled to percent."""
    head = f"{'Dataset':<28}{'AP':>8}{'AR':>8}{'AP50':>8}{'AP75':>8}{'APs':>8}{'APm':>8}{'APl':>8}"
    lines = [head, "-" * len(head)]
    entries = list(rows)
    if weighted is not None:
        entries.append(("Weighted Average", weighted))
    for i, (name, r) in enumerate(entries):
        if weighted is not None and i == len(entries) - 1:
            lines.append("-" * len(head))
        a = r.ap_by_area
        lines.append(
            f"{name[:28]:<28}{_pct(r.ap):>8}{_pct(r.ar_at_100):>8}"
            f"{_pct(r.ap_by_threshold.get('0.50')):>8}{_pct(r.ap_by_threshold.get('0.75')):>8}"
            f"{_pct(a.get('small')):>8}{_pct(a.get('medium')):>8}{_pct(a.get('large')):>8}"
        )
    if rows and rows[0][1].per_group_oks is not None:
        lines.append("")
        lines.append(f"{'Dataset':<28}{'OKS face':>10}{'OKS body':>10}")
        for name, r in entries:
            g = r.per_group_oks or {}
            lines.append(f"{name[:28]:<28}{_pct(g.get('facial')):>10}{_pct(g.get('body')):>10}")
    return "\n".join(lines)
