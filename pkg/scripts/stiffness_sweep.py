#!/usr/bin/env python3
"""Tip deflection of the default sheet against stiffness scale and wind.

Shows how weakly the final drape depends on stiffness at the reference
bending values, which is why recovery pins wind and area weight but not
stiffness.
"""
import argparse

import numpy as np

from fabricphys.experiments import toy_scene
from fabricphys.materials import get_material
from fabricphys.scene import simulate_params


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--material", default="gray_interlock")
    ap.add_argument("--scales", type=float, nargs="+", default=[0.1, 1.0, 10.0])
    ap.add_argument("--winds", type=float, nargs="+", default=[1.0, 3.5, 6.0])
    ap.add_argument("--area-weight", type=float, default=0.2)
    args = ap.parse_args()
    scene, mat = toy_scene(), get_material(args.material)
    print("scale,wind,mean_z,mean_y")
    for s in args.scales:
        for w in args.winds:
            final = simulate_params(mat, s, w, args.area_weight, scene)[-1].positions
            print(f"{s:g},{w:g},{np.mean(final[:, 2]):.4f},{np.mean(final[:, 1]):.4f}")


if __name__ == "__main__":
    main()
