#!/usr/bin/env python3
"""Visualize the UV warp in isolation: transport one synthetic person's
texture onto another pose and tile source / target / warped / coverage.

    python scripts/warp_demo.py --out /tmp/warp_demo.png --size 128
"""

import argparse
from pathlib import Path

import numpy as np

from tryon import data, imagecore, uvwarp


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("warp_demo.png"))
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    model_img, model_iuv, _ = data.render_sample(
        seed=args.seed, identity=0, outfit=0, pose=0, size=args.size)
    person_img, person_iuv, _ = data.render_sample(
        seed=args.seed, identity=1, outfit=0, pose=1, size=args.size)

    index = uvwarp.build_uv_index(model_img, model_iuv)
    warped, covered = uvwarp.warp(index, person_iuv)
    print(f"covered {covered.values.mean():.1%} of pixels "
          f"({int(covered.values.sum())} of {covered.values.size})")

    coverage_rgb = np.repeat(covered.values[..., None] * 255.0, 3, axis=-1)
    gutter = np.full((args.size, 2, 3), 255.0, dtype=np.float32)
    panels = [model_img.pixels, person_img.pixels, warped.pixels, coverage_rgb]
    cells = []
    for i, panel in enumerate(panels):
        if i:
            cells.append(gutter)
        cells.append(panel)
    tile = imagecore.ImageTensor(np.concatenate(cells, axis=1))
    imagecore.save_image(tile, args.out)
    print(f"wrote {args.out} (model | target person | warped | coverage)")


if __name__ == "__main__":
    main()
