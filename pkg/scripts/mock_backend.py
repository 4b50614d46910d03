"""Stand-in model server speaking the aeropose backend protocol on stdio.

Detect requests return one box centred in the received image; pose
requests return heatmaps of the template pose filling the patch.

    python3 scripts/mock_backend.py [--fail-kind detect|pose] [--exit-after N]
"""
import argparse
import sys

import numpy as np

from aeropose.geometry import Box
from aeropose.heatmap import CodecConfig, encode
from aeropose.keypoints import KeypointSet
from aeropose.protocol import serve
from aeropose.synthetic import TEMPLATE


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--fail-kind", choices=["detect", "pose"])
    ap.add_argument("--exit-after", type=int, default=0, help="exit abruptly after N requests")
    ap.add_argument("--score", type=float, default=0.9)
    args = ap.parse_args(argv)
    counter = {"n": 0}

    def tick():
        counter["n"] += 1
        if args.exit_after and counter["n"] > args.exit_after:
            sys.exit(3)

    def detect(px):
        tick()
        if args.fail_kind == "detect":
            raise RuntimeError("detector unavailable")
        h, w = px.shape[:2]
        return [Box(w * 0.4, h * 0.3, w * 0.2, h * 0.4, args.score)]

    def estimate(px):
        tick()
        if args.fail_kind == "pose":
            raise RuntimeError("pose model unavailable")
        h, w = px.shape[:2]
        xy = TEMPLATE * np.array([w, h])
        return encode(KeypointSet(xy, np.full(17, 2)), CodecConfig(), (w, h))

    serve(sys.stdin.buffer, sys.stdout.buffer, detect, estimate)


if __name__ == "__main__":
    main()
