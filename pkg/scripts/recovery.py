#!/usr/bin/env python3
"""Recover hidden (stiffness scale, wind, area weight) of a rendered target by BO."""
import argparse
import json
import tempfile

from fabricphys.experiments import recovery


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--hidden", type=float, nargs=3, default=[2.0, 4.5, 0.20],
                    metavar=("SCALE", "WIND", "AREA_WEIGHT"))
    ap.add_argument("--material", default="gray_interlock")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--combos", type=int, default=16)
    ap.add_argument("--out", help="keep corpus, target and trace here (default: temp dir)")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        res = recovery(args.out or tmp, hidden=tuple(args.hidden), material=args.material,
                       seed=args.seed, n_combos=args.combos)
    keys = ("estimate", "truth", "rel_error", "iterations", "stop_reason")
    print(json.dumps({k: res[k] for k in keys} | {"runtime_s": round(res["runtime_s"], 1)}))


if __name__ == "__main__":
    main()
