#!/usr/bin/env python3
"""End-to-end toy experiment: synthesize a dataset, train all four
stages, then measure RoI IoU, self-try-on error, and render a gallery.

Runs in a few minutes on a laptop CPU. Example:

    python scripts/train_toy.py --workdir /tmp/toy --identities 8 --gallery-rows 4
"""

import argparse
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from tryon import cli, data, imagecore, training
from tryon.networks import image_to_tensor, iuv_to_tensor, tensor_to_mask, union_roi


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", type=Path, default=Path("runs/toy-experiment"))
    ap.add_argument("--identities", type=int, default=8)
    ap.add_argument("--poses", type=int, default=2)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--epochs-pan", type=int, default=13)
    ap.add_argument("--epochs-trn", type=int, default=3)
    ap.add_argument("--epochs-ftn", type=int, default=4)
    ap.add_argument("--roi-iterations", type=int, default=50)
    ap.add_argument("--base-width", type=int, default=16)
    ap.add_argument("--gallery-rows", type=int, default=4)
    args = ap.parse_args()

    torch.set_num_threads(1)
    fixture = args.workdir / "fixture"
    run_dir = args.workdir / "run"

    print(f"[1/4] generating fixture: {args.identities} identities x {args.poses} poses "
          f"at {args.size}px -> {fixture}")
    data.synth_fixture(seed=42, n_identities=args.identities, n_poses=args.poses,
                       size=args.size, root=fixture)
    manifest = data.build_manifest(fixture)
    data.save_manifest(manifest, args.workdir / "manifest.tsv")

    cfg = training.TrainConfig(
        resolution=args.size,
        base_width=args.base_width,
        residual_blocks=6,
        disc_width=args.base_width,
        batch_size=2,
        seed=args.seed,
        epochs_per_stage={"pan": args.epochs_pan, "trn": args.epochs_trn,
                          "ftn": args.epochs_ftn},
        roi_iterations=args.roi_iterations,
    )
    roi_cfg = replace(cfg, base_width=2 * args.base_width, learning_rate=1e-3)

    print("[2/4] training stages")
    started = time.time()
    for stage, stage_cfg in (("pan", cfg), ("trn", cfg), ("roi", roi_cfg), ("ftn", cfg)):
        t0 = time.time()
        ckpt = training.train_stage(stage, stage_cfg, manifest, run_dir)
        print(f"  {stage}: {time.time() - t0:5.1f}s  checksum {ckpt.checksum[:12]}")
    print(f"  total {time.time() - started:.1f}s")

    print("[3/4] evaluating")
    cache = training.SampleCache(args.size)
    roi_net, _ = training._load_stage_net(run_dir, "roi")
    ious = []
    for rec in manifest.records:
        with torch.no_grad():
            out = roi_net(image_to_tensor(cache.image(rec))[None],
                          iuv_to_tensor(cache.iuv(rec))[None])
        pseudo = union_roi(cache.mask(rec), cache.iuv(rec), cfg.upper_parts)
        ious.append(training.mask_iou(tensor_to_mask(out[0]).binarize(), pseudo))
    print(f"  roi IoU vs pseudo ground truth: mean {np.mean(ious):.3f} min {min(ious):.3f}")

    pipeline = training.TryonPipeline.load(run_dir)
    l1s = []
    for rec in manifest.records:
        img = imagecore.load_image(rec.image_path)
        iuv = imagecore.load_iuv(rec.iuv_path)
        result = pipeline.infer(img, img, iuv, iuv,
                                parsing_mask=imagecore.load_mask(rec.parsing_mask_path))
        l1s.append(float(np.abs(result.tryon.pixels
                                - imagecore.to_signed(img).pixels).mean()))
    print(f"  self-try-on l1: mean {np.mean(l1s):.3f} max {max(l1s):.3f}")

    print("[4/4] rendering gallery")
    code = cli.main([
        "eval-gallery",
        "--manifest", str(args.workdir / "manifest.tsv"),
        "--run-name", run_dir.name,
        "--runs-dir", str(run_dir.parent),
        "--out-dir", str(args.workdir / "gallery"),
        "--rows", str(args.gallery_rows),
        "--seed", str(args.seed),
    ])
    print(f"  gallery exit code {code}; open {args.workdir / 'gallery' / 'index.html'}")


if __name__ == "__main__":
    main()
