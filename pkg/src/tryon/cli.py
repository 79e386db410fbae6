"""Command-line entry points for the garment-transfer pipeline.

Subcommands: make-manifest, warp, train, tryon, eval-gallery.

Exit codes: 0 on success, 2 for input errors (missing or malformed
files, empty manifests), 3 for domain errors (no dense-pose coverage,
corrupt dense-pose content), 4 for missing model state (checkpoints).
Malformed inputs never crash; they map to an error line and code.

The default run directory is ``./runs``, overridable with the
``TRYON_RUNS_DIR`` environment variable or ``--runs-dir``.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, imagecore, training, uvwarp
from .imagecore import InvalidIuvError
from .training import MissingCheckpointError, TrainConfig
from .uvwarp import NoPoseCoverageError

PANEL_ORDER = ("model", "person", "warped", "aligned", "merged", "refined", "tryon")


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list = field(default_factory=list)
    summary: str = ""


def _runs_dir(args) -> Path:
    if getattr(args, "runs_dir", None):
        return Path(args.runs_dir)
    return Path(os.environ.get("TRYON_RUNS_DIR", "runs"))


def _guarded(fn, *args, **kwargs) -> CommandResult:
    try:
        return fn(*args, **kwargs)
    except MissingCheckpointError as exc:
        return CommandResult(4, [], f"missing model state: {exc}")
    except (InvalidIuvError, NoPoseCoverageError) as exc:
        return CommandResult(3, [], f"domain error: {exc}")
    except FileNotFoundError as exc:
        return CommandResult(2, [], f"input error: {exc}")
    except (ValueError, training.TrainingDivergedError) as exc:
        return CommandResult(2, [], f"input error: {exc}")


# ---------------------------------------------------------------------------
# make-manifest


def cmd_make_manifest(args) -> CommandResult:
    def run():
        manifest = data.build_manifest(args.root, split=args.split)
        data.save_manifest(manifest, args.out)
        return CommandResult(
            0, [Path(args.out)],
            f"manifest written: {len(manifest.records)} records -> {args.out}",
        )

    return _guarded(run)


# ---------------------------------------------------------------------------
# warp


def cmd_warp(args) -> CommandResult:
    def run():
        model_img = imagecore.load_image(args.model_img)
        model_iuv = imagecore.load_iuv(args.model_iuv)
        person_iuv = imagecore.load_iuv(args.person_iuv)
        index = uvwarp.build_uv_index(model_img, model_iuv)
        warped, covered = uvwarp.warp(index, person_iuv)
        out = Path(args.out)
        covered_path = out.with_name(out.stem + "_covered.png")
        imagecore.save_image(warped, out)
        imagecore.save_mask(covered, covered_path)
        frac = float(covered.values.mean())
        return CommandResult(
            0, [out, covered_path],
            f"warped image -> {out} (covered {frac:.1%} of pixels)",
        )

    return _guarded(run)


# ---------------------------------------------------------------------------
# train


# every config-file key doubles as a CLI flag; the flag wins on conflict
_CONFIG_KEYS = (
    "learning_rate", "adam_beta1", "adam_beta2", "batch_size", "seed",
    "resolution", "base_width", "residual_blocks", "disc_width",
    "roi_iterations", "extractor_seed", "extractor_weights", "passthrough",
    "abort_threshold", "single_thread", "epochs_pan", "epochs_trn",
    "epochs_ftn", "w_gan", "w_l1", "w_l2", "w_perc", "w_style",
    "paired_steps", "unpaired_steps", "upper_parts",
)


def cmd_train(args) -> CommandResult:
    def run():
        cfg = (
            training.parse_config_file(args.config)
            if args.config
            else TrainConfig()
        )
        overrides = {
            key: getattr(args, key) for key in _CONFIG_KEYS
            if getattr(args, key, None) is not None
        }
        cfg = training.apply_config_overrides(cfg, overrides)
        manifest = data.load_manifest(args.manifest)
        run_dir = _runs_dir(args) / args.run_name
        ckpt = training.train_stage(args.stage, cfg, manifest, run_dir)
        path = training.find_stage_checkpoint(run_dir, args.stage)
        return CommandResult(
            0, [path, run_dir / "telemetry.tsv"],
            f"stage {args.stage} trained ({ckpt.epoch} "
            f"{'iterations' if args.stage == 'roi' else 'epochs'}), "
            f"checkpoint {path} checksum {ckpt.checksum[:12]}",
        )

    return _guarded(run)


# ---------------------------------------------------------------------------
# tryon


def cmd_tryon(args) -> CommandResult:
    def run():
        model_img = imagecore.load_image(args.model_img)
        person_img = imagecore.load_image(args.person_img)
        model_iuv = imagecore.load_iuv(args.model_iuv)
        person_iuv = imagecore.load_iuv(args.person_iuv)
        parsing = imagecore.load_mask(args.parsing)
        run_dir = _runs_dir(args) / args.run_name
        pipeline = training.TryonPipeline.load(run_dir)
        result = pipeline.infer(
            model_img, person_img, model_iuv, person_iuv, parsing_mask=parsing
        )
        out_dir = Path(args.out_dir) if args.out_dir else run_dir / "tryon"
        artifacts = [out_dir / "tryon.png"]
        imagecore.save_image(imagecore.to_byte(result.tryon), artifacts[0])
        if args.save_intermediates:
            for name, img in (
                ("warped", result.warped),
                ("aligned", imagecore.to_byte(result.aligned)),
                ("merged", imagecore.to_byte(result.merged)),
                ("refined", imagecore.to_byte(result.refined)),
            ):
                path = out_dir / f"{name}.png"
                imagecore.save_image(img, path)
                artifacts.append(path)
            roi_path = out_dir / "roi.png"
            imagecore.save_mask(result.roi, roi_path)
            artifacts.append(roi_path)
        return CommandResult(
            0, artifacts, f"try-on image -> {artifacts[0]}"
        )

    return _guarded(run)


# ---------------------------------------------------------------------------
# eval-gallery


def _to_byte_pixels(img: imagecore.ImageTensor) -> np.ndarray:
    if img.range_tag == imagecore.RANGE_UNIT_SIGNED:
        img = imagecore.to_byte(img)
    return img.pixels


def _tile_row(panels) -> imagecore.ImageTensor:
    gutter = np.full((panels[0].shape[0], 2, 3), 255.0, dtype=np.float32)
    cells = []
    for i, panel in enumerate(panels):
        if i:
            cells.append(gutter)
        cells.append(panel)
    return imagecore.ImageTensor(np.concatenate(cells, axis=1), imagecore.RANGE_BYTE)


def cmd_eval_gallery(args) -> CommandResult:
    def run():
        manifest = data.load_manifest(args.manifest)
        run_dir = _runs_dir(args) / args.run_name
        pipeline = training.TryonPipeline.load(run_dir)
        res = pipeline.cfg.resolution
        stream = data.sample_unpaired(manifest, args.seed)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cache = training.SampleCache(res)
        artifacts = []
        for row in range(args.rows):
            model_rec, person_rec = next(stream)
            model_img = cache.image(model_rec)
            person_img = cache.image(person_rec)
            result = pipeline.infer(
                model_img,
                person_img,
                cache.iuv(model_rec),
                cache.iuv(person_rec),
                parsing_mask=cache.mask(person_rec)
                if person_rec.parsing_mask_path
                else None,
            )
            panels = [
                _to_byte_pixels(model_img),
                _to_byte_pixels(person_img),
                _to_byte_pixels(result.warped),
                _to_byte_pixels(result.aligned),
                _to_byte_pixels(result.merged),
                _to_byte_pixels(result.refined),
                _to_byte_pixels(result.tryon),
            ]
            path = out_dir / f"row_{row:03d}.png"
            imagecore.save_image(_tile_row(panels), path)
            artifacts.append(path)
        index = out_dir / "index.html"
        lines = ["<html><body>", f"<p>panel order: {' | '.join(PANEL_ORDER)}</p>"]
        for path in artifacts:
            lines.append(f'<div><img src="{path.name}" alt="{path.name}"></div>')
        lines.append("</body></html>")
        index.write_text("\n".join(lines) + "\n")
        artifacts.append(index)
        return CommandResult(
            0, artifacts, f"gallery: {args.rows} rows -> {out_dir}"
        )

    return _guarded(run)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tryon",
        description="Garment transfer from a dressed model photo to a person photo.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-manifest", help="scan a dataset tree into a manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.set_defaults(fn=cmd_make_manifest)

    p = sub.add_parser("warp", help="warp a model image onto a target dense pose")
    p.add_argument("--model-img", required=True)
    p.add_argument("--model-iuv", required=True)
    p.add_argument("--person-iuv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_warp)

    p = sub.add_parser("train", help="train one pipeline stage")
    p.add_argument("--stage", required=True, choices=training.STAGES)
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-name", required=True)
    p.add_argument("--runs-dir", default=None)
    for key in _CONFIG_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("tryon", help="run the full try-on pipeline")
    p.add_argument("--model-img", required=True)
    p.add_argument("--person-img", required=True)
    p.add_argument("--model-iuv", required=True)
    p.add_argument("--person-iuv", required=True)
    p.add_argument("--parsing", required=True)
    p.add_argument("--run-name", required=True)
    p.add_argument("--runs-dir", default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--save-intermediates", action="store_true")
    p.set_defaults(fn=cmd_tryon)

    p = sub.add_parser("eval-gallery", help="render tiled pipeline galleries")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-name", required=True)
    p.add_argument("--runs-dir", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--rows", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval_gallery)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    result = args.fn(args)
    stream = sys.stdout if result.exit_code == 0 else sys.stderr
    print(result.summary, file=stream)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
