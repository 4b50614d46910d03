"""Brute-force reference implementations used only by the tests.

They share no code with the package: boxes are plain (x, y, w, h) tuples,
similarities are computed with explicit loops, and AP is read off the
full precision/recall curve point by point.
"""
import math

import numpy as np

SIGMAS = [0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72, 0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89]
K = [2 * s / 10 for s in SIGMAS]
RANGES = {"all": (0, 1e10), "small": (0, 1024), "medium": (1024, 9216), "large": (9216, 1e10)}
THRESHOLDS = [0.5 + 0.05 * i for i in range(10)]


def box_iou(a, b, crowd=False):
    ax2, ay2, bx2, by2 = a[0] + a[2], a[1] + a[3], b[0] + b[2], b[1] + b[3]
    iw = max(0.0, min(ax2, bx2) - max(a[0], b[0]))
    ih = max(0.0, min(ay2, by2) - max(a[1], b[1]))
    inter = iw * ih
    if crowd:
        return inter / (a[2] * a[3]) if a[2] * a[3] > 0 else 0.0
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def kp_oks(gt_kps, pred_kps, area, k=K):
    num, den = 0.0, 0
    for i in range(17):
        gx, gy, gv = gt_kps[3 * i : 3 * i + 3]
        if gv <= 0:
            continue
        px, py = pred_kps[3 * i], pred_kps[3 * i + 1]
        d2 = (gx - px) ** 2 + (gy - py) ** 2
        num += math.exp(-d2 / (2 * area * k[i] ** 2))
        den += 1
    return num / den if den else None


def greedy_match(sims, gt_ignore, gt_crowd, threshold):
    """sims[d][g] for score-ordered dets. Returns matched gt index or -1."""
    used = set()
    out = []
    for row in sims:
        cands = [g for g in range(len(row)) if row[g] >= threshold and (g not in used or gt_crowd[g])]
        pool = [g for g in cands if not gt_ignore[g]] or [g for g in cands if gt_ignore[g]]
        if not pool:
            out.append(-1)
            continue
        best = pool[0]
        for g in pool[1:]:
            if row[g] > row[best]:
                best = g
        used.add(best)
        out.append(best)
    return out


def interp_ap(flags, n_pos, points=101):
    """AP from a ranked TP flag list via the raw PR curve."""
    if n_pos == 0:
        return None, None
    prec, rec = [], []
    tp = fp = 0
    for f in flags:
        tp += f
        fp += not f
        prec.append(tp / (tp + fp))
        rec.append(tp / n_pos)
    total = 0.0
    for r in np.linspace(0, 1, points):
        best = 0.0
        for p, rc in zip(prec, rec):
            if rc >= r and p > best:
                best = p
        total += best
    return total / points, (rec[-1] if rec else 0.0)


def evaluate(images, gts, dets, mode="det", max_dets=100):
    """images: list of ids; gts: dicts {image_id, bbox, area, iscrowd, keypoints?};
    dets: dicts {image_id, bbox, score, keypoints?}. Returns
    {(area, thr_index): (ap, recall)}."""
    results = {}
    for aname, (lo, hi) in RANGES.items():
        for ti, t in enumerate(THRESHOLDS):
            ranked = []  # (score, image position, rank, tp)
            n_pos = 0
            for pos, img in enumerate(images):
                ig = [g for g in gts if g["image_id"] == img]
                idets = sorted([d for d in dets if d["image_id"] == img], key=lambda d: -d["score"])[:max_dets]
                ignore = []
                for g in ig:
                    no_kp = mode == "kp" and sum(1 for v in g["keypoints"][2::3] if v > 0) == 0
                    ignore.append(bool(g["iscrowd"]) or no_kp or not (lo <= g["area"] <= hi))
                crowd = [bool(g["iscrowd"]) for g in ig]
                n_pos += sum(1 for x in ignore if not x)
                sims = []
                for d in idets:
                    row = []
                    for g in ig:
                        if mode == "det":
                            row.append(box_iou(d["bbox"], g["bbox"], g["iscrowd"]))
                        else:
                            o = kp_oks(g["keypoints"], d["keypoints"], g["area"])
                            row.append(0.0 if o is None else o)
                    sims.append(row)
                m = greedy_match(sims, ignore, crowd, min(t, 1 - 1e-10))
                for rank, (d, g) in enumerate(zip(idets, m)):
                    area = d["bbox"][2] * d["bbox"][3]
                    if g >= 0 and ignore[g]:
                        continue
                    if g < 0 and not (lo <= area <= hi):
                        continue
                    ranked.append((d["score"], pos, rank, g >= 0))
            ranked.sort(key=lambda x: (-x[0], x[1], x[2]))
            results[(aname, ti)] = interp_ap([x[3] for x in ranked], n_pos)
    return results


def summary(results):
    aps = [results[("all", t)][0] for t in range(10)]
    rcs = [results[("all", t)][1] for t in range(10)]
    aps = [a for a in aps if a is not None]
    rcs = [r for r in rcs if r is not None]
    return (sum(aps) / len(aps) if aps else None, sum(rcs) / len(rcs) if rcs else None)


def random_instance(rng, max_images=5, max_gts=4, max_dets=6):
    images = list(range(1, int(rng.integers(1, max_images + 1)) + 1))
    gts, dets = [], []
    for img in images:
        for _ in range(int(rng.integers(0, max_gts + 1))):
            w, h = rng.uniform(4, 150, 2)
            x, y = rng.uniform(0, 200, 2)
            kps = []
            for i in range(17):
                v = int(rng.choice([0, 1, 2], p=[0.15, 0.15, 0.7]))
                kps += [float(x + rng.uniform(0, w)), float(y + rng.uniform(0, h)), v]
            gts.append({"image_id": img, "bbox": [float(x), float(y), float(w), float(h)],
                        "area": float(w * h), "iscrowd": int(rng.random() < 0.1), "keypoints": kps})
        mine = [g for g in gts if g["image_id"] == img]
        for _ in range(int(rng.integers(0, max_dets + 1))):
            if mine and rng.random() < 0.7:
                g = mine[int(rng.integers(len(mine)))]
                jit = rng.normal(0, 0.08, 4) * [g["bbox"][2], g["bbox"][3], g["bbox"][2], g["bbox"][3]]
                b = [g["bbox"][0] + jit[0], g["bbox"][1] + jit[1],
                     max(g["bbox"][2] + jit[2], 1.0), max(g["bbox"][3] + jit[3], 1.0)]
                scale = math.sqrt(g["area"])
                kps = []
                for i in range(17):
                    kps += [g["keypoints"][3 * i] + float(rng.normal(0, 0.05 * scale)),
                            g["keypoints"][3 * i + 1] + float(rng.normal(0, 0.05 * scale)), 1.0]
            else:
                w, h = rng.uniform(4, 150, 2)
                x, y = rng.uniform(0, 200, 2)
                b = [x, y, w, h]
                kps = [float(v) for _ in range(17) for v in (x + rng.uniform(0, w), y + rng.uniform(0, h), 1.0)]
            score = float(np.round(rng.random(), 1))  # coarse scores force ties
            dets.append({"image_id": img, "bbox": [float(v) for v in b], "score": score, "keypoints": kps})
    return images, gts, dets


def to_package(images, gts, dets):
    """Convert oracle-format instances into package objects."""
    from aeropose.dataset import AnnRecord, Dataset, ImageRecord
    from aeropose.evaluator import Detection
    from aeropose.geometry import Box
    from aeropose.keypoints import KeypointSet

    imgs = [ImageRecord(i, f"{i}.png", 400, 400) for i in images]
    anns = []
    for k, g in enumerate(gts, start=1):
        kp = KeypointSet.from_flat(g["keypoints"])
        anns.append(AnnRecord(k, g["image_id"], 1, Box.from_list(g["bbox"]), g["area"], kp,
                              kp.num_visible, bool(g["iscrowd"])))
    ds = Dataset(imgs, anns, [(1, "person")])
    pdets = [Detection(d["image_id"], Box.from_list(d["bbox"], d["score"]),
                       KeypointSet.from_flat(d["keypoints"], third="conf")) for d in dets]
    return ds, pdets
