import numpy as np
import pytest
from PIL import Image

from tryon import cli, data, imagecore

TINY_TRAIN_FLAGS = [
    "--resolution", "64", "--base-width", "8", "--residual-blocks", "2",
    "--disc-width", "8", "--batch-size", "2", "--seed", "7",
    "--epochs-pan", "1", "--epochs-trn", "1", "--epochs-ftn", "1",
    "--roi-iterations", "8",
]


@pytest.fixture(scope="module")
def manifest_file(manifest, tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "manifest.tsv"
    data.save_manifest(manifest, path)
    return path


@pytest.fixture(scope="module")
def trained_run(manifest_file, tmp_path_factory):
    runs_dir = tmp_path_factory.mktemp("cliruns")
    for stage in ("pan", "trn", "roi", "ftn"):
        code = cli.main(
            ["train", "--stage", stage, "--manifest", str(manifest_file),
             "--run-name", "toy", "--runs-dir", str(runs_dir)]
            + TINY_TRAIN_FLAGS
        )
        assert code == 0
    return runs_dir


class TestMakeManifest:
    def test_fixture_root(self, fixture_root, tmp_path):
        out = tmp_path / "m.tsv"
        code = cli.main(["make-manifest", "--root", str(fixture_root), "--out", str(out)])
        assert code == 0
        assert len(data.load_manifest(out).records) == 8

    def test_empty_dir_exit_2(self, tmp_path, capsys):
        code = cli.main(["make-manifest", "--root", str(tmp_path), "--out",
                         str(tmp_path / "m.tsv")])
        assert code == 2
        assert "empty manifest" in capsys.readouterr().err

    def test_missing_root_exit_2(self, tmp_path):
        code = cli.main(["make-manifest", "--root", str(tmp_path / "nope"),
                         "--out", str(tmp_path / "m.tsv")])
        assert code == 2

    def test_unreadable_file_exit_2_names_path(self, tmp_path, capsys):
        root = data.synth_fixture(seed=9, n_identities=1, n_poses=1, size=32,
                                  root=tmp_path / "fx")
        corrupt = root / "id0" / "o0" / "p0.image.png"
        corrupt.write_bytes(b"not a png at all")
        code = cli.main(["make-manifest", "--root", str(root),
                         "--out", str(tmp_path / "m.tsv")])
        assert code == 2
        assert "p0.image.png" in capsys.readouterr().err


class TestWarp:
    def test_identity_warp_outputs(self, manifest, tmp_path):
        rec = manifest.records[0]
        out = tmp_path / "warped.png"
        code = cli.main([
            "warp",
            "--model-img", str(rec.image_path),
            "--model-iuv", str(rec.iuv_path),
            "--person-iuv", str(rec.iuv_path),
            "--out", str(out),
        ])
        assert code == 0
        covered = imagecore.load_mask(tmp_path / "warped_covered.png")
        warped = imagecore.load_image(out)
        original = imagecore.load_image(rec.image_path)
        fg = covered.values == 1
        assert np.abs(warped.pixels - original.pixels)[fg].max() <= 2.0

    def test_corrupt_iuv_exit_3(self, manifest, tmp_path):
        rec = manifest.records[0]
        bad = tmp_path / "bad.png"
        arr = np.zeros((64, 64, 3), dtype=np.uint8)
        arr[0, 0, 0] = 99  # part index out of range
        Image.fromarray(arr, mode="RGB").save(bad)
        code = cli.main([
            "warp", "--model-img", str(rec.image_path),
            "--model-iuv", str(bad), "--person-iuv", str(rec.iuv_path),
            "--out", str(tmp_path / "w.png"),
        ])
        assert code == 3

    def test_no_coverage_exit_3(self, manifest, tmp_path):
        rec = manifest.records[0]
        empty = tmp_path / "empty.png"
        Image.fromarray(np.zeros((64, 64, 3), dtype=np.uint8), mode="RGB").save(empty)
        code = cli.main([
            "warp", "--model-img", str(rec.image_path),
            "--model-iuv", str(empty), "--person-iuv", str(rec.iuv_path),
            "--out", str(tmp_path / "w.png"),
        ])
        assert code == 3

    def test_missing_input_exit_2(self, manifest, tmp_path):
        rec = manifest.records[0]
        code = cli.main([
            "warp", "--model-img", str(tmp_path / "none.png"),
            "--model-iuv", str(rec.iuv_path), "--person-iuv", str(rec.iuv_path),
            "--out", str(tmp_path / "w.png"),
        ])
        assert code == 2


class TestTrain:
    def test_roi_stage_writes_checkpoint(self, manifest_file, tmp_path):
        runs = tmp_path / "runs"
        code = cli.main(
            ["train", "--stage", "roi", "--manifest", str(manifest_file),
             "--run-name", "r1", "--runs-dir", str(runs)] + TINY_TRAIN_FLAGS
        )
        assert code == 0
        assert (runs / "r1" / "ckpt" / "roi_8.ckpt").exists()

    def test_ftn_without_upstream_exit_4(self, manifest_file, tmp_path):
        code = cli.main(
            ["train", "--stage", "ftn", "--manifest", str(manifest_file),
             "--run-name", "r2", "--runs-dir", str(tmp_path)] + TINY_TRAIN_FLAGS
        )
        assert code == 4

    def test_same_seed_reproduces_telemetry(self, manifest_file, tmp_path):
        tails = []
        for name in ("a", "b"):
            code = cli.main(
                ["train", "--stage", "roi", "--manifest", str(manifest_file),
                 "--run-name", name, "--runs-dir", str(tmp_path)] + TINY_TRAIN_FLAGS
            )
            assert code == 0
            lines = (tmp_path / name / "telemetry.tsv").read_text().splitlines()
            tails.append(lines[-1])
        assert tails[0] == tails[1]

    def test_bad_config_file_exit_2(self, manifest_file, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("warp_speed = 9\n")
        code = cli.main(
            ["train", "--stage", "roi", "--manifest", str(manifest_file),
             "--run-name", "r3", "--runs-dir", str(tmp_path), "--config", str(cfg)]
        )
        assert code == 2


class TestTryon:
    def test_flagged_run_writes_six_files(self, manifest, trained_run, tmp_path):
        model_rec, person_rec = manifest.records[0], manifest.records[5]
        out_dir = tmp_path / "out"
        code = cli.main([
            "tryon",
            "--model-img", str(model_rec.image_path),
            "--person-img", str(person_rec.image_path),
            "--model-iuv", str(model_rec.iuv_path),
            "--person-iuv", str(person_rec.iuv_path),
            "--parsing", str(person_rec.parsing_mask_path),
            "--run-name", "toy", "--runs-dir", str(trained_run),
            "--out-dir", str(out_dir), "--save-intermediates",
        ])
        assert code == 0
        produced = sorted(p.name for p in out_dir.glob("*.png"))
        assert produced == [
            "aligned.png", "merged.png", "refined.png",
            "roi.png", "tryon.png", "warped.png",
        ]

    def test_missing_parsing_exit_2(self, manifest, trained_run, tmp_path):
        rec = manifest.records[0]
        code = cli.main([
            "tryon",
            "--model-img", str(rec.image_path),
            "--person-img", str(rec.image_path),
            "--model-iuv", str(rec.iuv_path),
            "--person-iuv", str(rec.iuv_path),
            "--parsing", str(tmp_path / "missing.png"),
            "--run-name", "toy", "--runs-dir", str(trained_run),
        ])
        assert code == 2

    def test_missing_checkpoints_exit_4(self, manifest, tmp_path):
        rec = manifest.records[0]
        code = cli.main([
            "tryon",
            "--model-img", str(rec.image_path),
            "--person-img", str(rec.image_path),
            "--model-iuv", str(rec.iuv_path),
            "--person-iuv", str(rec.iuv_path),
            "--parsing", str(rec.parsing_mask_path),
            "--run-name", "ghost", "--runs-dir", str(tmp_path),
        ])
        assert code == 4


class TestEvalGallery:
    def test_rows_are_seven_panels_wide(self, manifest_file, trained_run, tmp_path):
        out_dir = tmp_path / "gallery"
        code = cli.main([
            "eval-gallery", "--manifest", str(manifest_file),
            "--run-name", "toy", "--runs-dir", str(trained_run),
            "--out-dir", str(out_dir), "--rows", "3", "--seed", "5",
        ])
        assert code == 0
        rows = sorted(out_dir.glob("row_*.png"))
        assert len(rows) == 3
        first = imagecore.load_image(rows[0])
        assert first.width == 7 * 64 + 6 * 2  # panels plus gutters
        assert first.height == 64
        assert (out_dir / "index.html").exists()

    def test_row_selection_deterministic(self, manifest_file, trained_run, tmp_path):
        digests = []
        for name in ("g1", "g2"):
            out_dir = tmp_path / name
            code = cli.main([
                "eval-gallery", "--manifest", str(manifest_file),
                "--run-name", "toy", "--runs-dir", str(trained_run),
                "--out-dir", str(out_dir), "--rows", "2", "--seed", "11",
            ])
            assert code == 0
            digests.append([p.read_bytes() for p in sorted(out_dir.glob("row_*.png"))])
        assert digests[0] == digests[1]

    def test_missing_manifest_exit_2(self, trained_run, tmp_path):
        code = cli.main([
            "eval-gallery", "--manifest", str(tmp_path / "none.tsv"),
            "--run-name", "toy", "--runs-dir", str(trained_run),
            "--out-dir", str(tmp_path / "g"), "--rows", "1",
        ])
        assert code == 2
