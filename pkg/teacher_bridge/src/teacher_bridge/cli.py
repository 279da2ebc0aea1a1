"""CLI: teacher-bridge --scene DIR --teacher stub --labels a,b,c"""

import argparse
import json
import sys

from .encoders import EncoderUnavailable
from .extract import extract


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="teacher-bridge")
    ap.add_argument("--scene", required=True, help="dataset dir with scene.json")
    ap.add_argument("--teacher", default="stub", choices=("stub", "dino", "lseg"))
    ap.add_argument("--labels", default="", help="comma-separated label names")
    ap.add_argument("--dim", type=int)
    ap.add_argument("--flip-average", action="store_true")
    ap.add_argument("--stride", type=int, default=4)
    ap.add_argument("--reduced", action="store_true",
                    help="write encoder-native (reduced) resolution maps")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    labels = [l for l in args.labels.split(",") if l]
    try:
        info = extract(args.scene, args.teacher, labels=labels, dim=args.dim,
                       flip_average=args.flip_average, seed=args.seed,
                       stride=args.stride,
                       full_resolution=not args.reduced)
    except EncoderUnavailable as e:
        print("error: " + json.dumps({"message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps(info))
    return 0


if __name__ == "__main__":
    sys.exit(main())
