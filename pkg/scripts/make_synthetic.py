"""Write a synthetic person dataset (annotations + rendered frames).

    python3 scripts/make_synthetic.py out/ --images 20 --seed 0 --extra car
"""
import argparse
import os

from aeropose.synthetic import make_dataset, write_dataset


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir")
    ap.add_argument("--images", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--name", default="synthetic")
    ap.add_argument("--size", default="640x480", help="frame WxH")
    ap.add_argument("--max-persons", type=int, default=3)
    ap.add_argument("--extra", action="append", default=[], help="distractor class name (repeatable)")
    args = ap.parse_args(argv)
    w, h = (int(v) for v in args.size.lower().split("x"))
    d = make_dataset(args.images, args.seed, (w, h), args.max_persons, source=args.name,
                     prefix=args.name, extra_classes=args.extra)
    ann = os.path.join(args.out_dir, f"{args.name}.json")
    write_dataset(d, ann, os.path.join(args.out_dir, "frames"), args.seed)
    print(f"{ann}: {len(d.images)} images, {len(d.annotations)} annotations")


if __name__ == "__main__":
    main()
