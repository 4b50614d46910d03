"""Per-stage latency of the pipeline with mock backends of known cost.

    python3 scripts/latency_demo.py --det-ms 13 --pose-ms 6.54 --persons 1
"""
import argparse

from aeropose.bench import bench_pipeline, format_latency_table
from aeropose.pipeline import MockDetector, MockPoseBackend
from aeropose.synthetic import centered_box, synthetic_frames, template_keypoints


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--det-ms", type=float, default=13.0)
    ap.add_argument("--pose-ms", type=float, default=6.54)
    ap.add_argument("--persons", type=int, default=1)
    ap.add_argument("--frames", type=int, default=20)
    ap.add_argument("--fps", type=float, default=25.0)
    ap.add_argument("--batch-size", type=int, default=None)
    args = ap.parse_args(argv)
    det = MockDetector(lambda fid: [centered_box(640, 480)] * args.persons, delay_ms=args.det_ms)
    pose = MockPoseBackend(lambda ctx: template_keypoints(ctx.box), delay_ms=args.pose_ms)
    report = bench_pipeline(synthetic_frames(args.frames), det, pose, fps_budget=args.fps,
                            batch_size=args.batch_size)
    print(format_latency_table(report))


if __name__ == "__main__":
    main()
