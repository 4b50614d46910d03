"""Merge two synthetic sources, run the mock pipeline and evaluate it.

Ground-truth replay backends should give keypoint mAP 1.0; ``--jitter``
perturbs the replayed keypoints (in pixels) to show the metric falling.

    python3 scripts/run_e2e_demo.py --work /tmp/aeropose-demo --jitter 3
"""
import argparse
import json
import os

import numpy as np

from aeropose.cli import main as cli
from aeropose.dataset import load_dataset
from aeropose.evaluator import detections_from_results, evaluate_keypoints, format_report_table
from aeropose.keypoints import KeypointSet
from aeropose.pipeline import ground_truth_backends, load_frames, results_document, run_sequence
from aeropose.synthetic import make_dataset, write_dataset


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--work", default="demo_out")
    ap.add_argument("--images", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jitter", type=float, default=0.0, help="keypoint noise std in frame pixels")
    args = ap.parse_args(argv)
    os.makedirs(args.work, exist_ok=True)
    frames = os.path.join(args.work, "frames")
    parts = []
    for k, name in enumerate(("alpha", "beta")):
        d = make_dataset(args.images, args.seed + k, (640, 480), source=name, prefix=name, extra_classes=("car",))
        path = os.path.join(args.work, f"{name}.json")
        write_dataset(d, path, frames, args.seed + k)
        parts.append(path)
    merged = os.path.join(args.work, "merged.json")
    assert cli(["merge", "-i", parts[0], "-i", parts[1], "-o", merged]) == 0

    gt = load_dataset(merged)
    det, pose = ground_truth_backends(gt)
    if args.jitter:
        rng = np.random.default_rng(args.seed)
        exact = pose.keypoints_for

        def noisy(ctx):
            k = exact(ctx)
            return None if k is None else KeypointSet(k.xy + rng.normal(0, args.jitter, k.xy.shape), k.v)

        pose.keypoints_for = noisy
    ids = {im.file_name: im.id for im in gt.images}
    results = list(run_sequence(load_frames(frames, ids), det, pose))
    doc = results_document(results)
    with open(os.path.join(args.work, "results.json"), "w") as f:
        json.dump(doc, f)
    report = evaluate_keypoints(gt, detections_from_results(doc))
    print(format_report_table([("merged", report)]))


if __name__ == "__main__":
    main()
