"""Exit codes, artifact plumbing, and reproducibility of the CLI entry point.

All tests drive main(argv) in process; one test spawns a real interpreter
to cover the `python -m` path. A tiny on-disk benchmark keeps every
subcommand's happy path under a few seconds.
"""

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from closeview.cli import main
from closeview.data import load_image, load_manifest
from closeview.field import VoxelRadianceField, load_field, save_field
from closeview.training import TrainReport

DS_ARGS = ["--train-views", "10", "--test-views", "5", "--indomain-views", "2",
           "--width", "48", "--height", "32"]


def tree_digest(root: Path) -> dict:
    """Relative path -> content hash for every file under root."""
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["make-synthetic", "--seed", "5", "--out", str(root), *DS_ARGS]) == 0
    return root


@pytest.fixture(scope="module")
def trained(ds, tmp_path_factory):
    run = tmp_path_factory.mktemp("cli_run")
    assert main(["train", "--dataset", str(ds), "--out", str(run),
                 "--iterations", "400", "--batch-size", "256", "--grid", "16",
                 "--samples", "24", "--seed", "1"]) == 0
    return run


def train_args(ds, out, **kw):
    argv = ["train", "--dataset", str(ds), "--out", str(out),
            "--iterations", "4", "--batch-size", "64", "--grid", "8", "--samples", "16"]
    for k, v in kw.items():
        argv += [f"--{k.replace('_', '-')}", str(v)]
    return argv


class TestExitCodes:
    def test_usage_errors_exit_1(self, ds, trained):
        ck = str(trained / "checkpoint.cvf")
        for argv in (
            [],
            ["frobnicate"],
            ["train", "--dataset", str(ds), "--out", "x", "--bogus", "1"],
            ["train", "--dataset", str(ds), "--out", "x", "--grid", "a,b"],
            ["train", "--dataset", str(ds), "--out", "x", "--iterations", "abc"],
            ["train", "--dataset", str(ds)],
            ["train", "--out", "x"],
            ["render", "--dataset", str(ds), "--checkpoint", ck, "--out", "x.png",
             "--frame", "1", "--poses", "p.json"],
            ["render", "--dataset", str(ds), "--checkpoint", ck, "--out", "x.png"],
            ["finetune", "--dataset", str(ds), "--checkpoint", ck, "--out", "x",
             "--mode", "wild"],
            ["eval", "--dataset", str(ds), "--checkpoint", ck, "--out", "e.json",
             "--split", "validation"],
        ):
            assert main(argv) == 1, argv

    def test_bad_inputs_exit_2(self, ds, trained, tmp_path):
        ck = str(trained / "checkpoint.cvf")
        bad_json = tmp_path / "bad.json"
        bad_json.write_text("{not json")
        unknown = tmp_path / "unknown.json"
        unknown.write_text(json.dumps({"iterationz": 5}))
        not_object = tmp_path / "list.json"
        not_object.write_text("[1, 2]")
        bad_poses = tmp_path / "poses.json"
        bad_poses.write_text(json.dumps([[1, 2], [3, 4]]))
        for argv in (
            ["train", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o")],
            ["eval", "--dataset", str(ds), "--checkpoint", str(tmp_path / "nope.cvf"),
             "--out", str(tmp_path / "e.json")],
            ["eval", "--dataset", str(ds), "--checkpoint", str(ds / "manifest.json"),
             "--out", str(tmp_path / "e.json")],
            ["eval", "--dataset", str(ds), "--checkpoint", ck,
             "--out", str(tmp_path / "e.json"), "--kind", "nonesuch"],
            ["render", "--dataset", str(ds), "--checkpoint", ck,
             "--out", str(tmp_path / "x.png"), "--frame", "99"],
            ["render", "--dataset", str(ds), "--checkpoint", ck,
             "--out", str(tmp_path / "r"), "--poses", str(bad_poses)],
            train_args(ds, tmp_path / "o", iterations=-5),
            ["train", "--config", str(bad_json), "--dataset", str(ds),
             "--out", str(tmp_path / "o")],
            ["train", "--config", str(unknown), "--dataset", str(ds),
             "--out", str(tmp_path / "o")],
            ["train", "--config", str(not_object), "--dataset", str(ds),
             "--out", str(tmp_path / "o")],
        ):
            assert main(argv) == 2, argv

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exits_3_after_writing_artifacts(self, ds, tmp_path):
        out = tmp_path / "diverge"
        rc = main(train_args(ds, out, iterations=20, learning_rate="1e308"))
        assert rc == 3
        report = TrainReport.load(out / "report.ndjson")
        assert report.aborted is not None and "non-finite" in report.aborted
        assert report.iterations_run < 20
        # the blown-up grid is unloadable, so no checkpoint may be left behind
        assert not (out / "checkpoint.cvf").exists()

    def test_empty_field_pseudo_dump_exits_3(self, ds, tmp_path):
        manifest = load_manifest(ds / "manifest.json")
        empty = VoxelRadianceField.zeros((8, 8, 8), manifest.bbox, density_init=-50.0)
        save_field(empty, tmp_path / "empty.cvf")
        rc = main(["pseudo-dump", "--dataset", str(ds),
                   "--checkpoint", str(tmp_path / "empty.cvf"),
                   "--out", str(tmp_path / "dump"), "--samples", "16"])
        assert rc == 3

    def test_help_exits_0(self, capsys):
        assert main(["--help"]) == 0
        assert "make-synthetic" in capsys.readouterr().out
        assert main(["train", "--help"]) == 0


class TestMakeSynthetic:
    def test_deterministic_directory_trees(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["make-synthetic", "--seed", "7", "--out", str(out), *DS_ARGS]) == 0
        da, db = tree_digest(a), tree_digest(b)
        assert da and da == db

    def test_different_seed_differs(self, ds, tmp_path):
        other = tmp_path / "other"
        assert main(["make-synthetic", "--seed", "6", "--out", str(other), *DS_ARGS]) == 0
        assert tree_digest(other) != tree_digest(ds)


class TestTrainEval:
    def test_train_then_eval_has_mean_psnr(self, ds, trained, tmp_path):
        out = tmp_path / "eval.json"
        assert main(["eval", "--dataset", str(ds),
                     "--checkpoint", str(trained / "checkpoint.cvf"),
                     "--out", str(out), "--split", "test", "--samples", "24"]) == 0
        doc = json.loads(out.read_text())
        assert doc["mean_psnr"] is not None
        assert doc["mean_ssim"] is not None
        assert len(doc["view_ids"]) == 7  # 2 indomain + 5 closeup

    def test_train_idempotent_bitwise(self, ds, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(train_args(ds, out, seed=3)) == 0
        assert (a / "checkpoint.cvf").read_bytes() == (b / "checkpoint.cvf").read_bytes()
        assert (a / "report.ndjson").read_bytes() == (b / "report.ndjson").read_bytes()

    def test_eval_idempotent(self, ds, trained, tmp_path):
        outs = []
        for name in ("e1.json", "e2.json"):
            out = tmp_path / name
            assert main(["eval", "--dataset", str(ds),
                         "--checkpoint", str(trained / "checkpoint.cvf"),
                         "--out", str(out), "--kind", "indomain", "--samples", "16"]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_config_file_with_flag_override(self, ds, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "dataset": str(ds), "out": str(tmp_path / "from_cfg"),
            "iterations": 4, "batch_size": 64, "grid": [8, 8, 8], "samples": 16,
        }))
        assert main(["train", "--config", str(cfg), "--seed", "9"]) == 0
        report = TrainReport.load(tmp_path / "from_cfg" / "report.ndjson")
        assert report.iterations_run == 4 and report.seed == 9

        assert main(["train", "--config", str(cfg), "--iterations", "2",
                     "--out", str(tmp_path / "flag_wins")]) == 0
        report = TrainReport.load(tmp_path / "flag_wins" / "report.ndjson")
        assert report.iterations_run == 2


class TestRender:
    def test_single_frame(self, ds, trained, tmp_path):
        out = tmp_path / "frame.png"
        assert main(["render", "--dataset", str(ds),
                     "--checkpoint", str(trained / "checkpoint.cvf"),
                     "--out", str(out), "--frame", "2", "--samples", "24"]) == 0
        img = load_image(out)
        assert img.shape == (32, 48, 3)

    def test_pose_file(self, ds, trained, tmp_path):
        manifest = load_manifest(ds / "manifest.json")
        poses = tmp_path / "poses.json"
        poses.write_text(json.dumps({"poses": [
            manifest.frames[i].pose.matrix3x4().tolist() for i in (0, 3)
        ]}))
        out = tmp_path / "renders"
        assert main(["render", "--dataset", str(ds),
                     "--checkpoint", str(trained / "checkpoint.cvf"),
                     "--out", str(out), "--poses", str(poses), "--samples", "24"]) == 0
        assert (out / "pose_000.png").exists() and (out / "pose_001.png").exists()
        # pose_000 is training frame 0: must match the direct frame render
        direct = tmp_path / "direct.png"
        assert main(["render", "--dataset", str(ds),
                     "--checkpoint", str(trained / "checkpoint.cvf"),
                     "--out", str(direct), "--frame", "0", "--samples", "24"]) == 0
        assert (out / "pose_000.png").read_bytes() == direct.read_bytes()


class TestPseudoDump:
    def test_artifacts_and_determinism(self, ds, trained, tmp_path):
        ck = str(trained / "checkpoint.cvf")
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["pseudo-dump", "--dataset", str(ds), "--checkpoint", ck,
                         "--out", str(out), "--seed", "4", "--samples", "24"]) == 0
        for name in ("label.png", "aggregate.png", "mask.png", "meta.json"):
            assert (a / name).exists()
            assert (a / name).read_bytes() == (b / name).read_bytes()
        meta = json.loads((a / "meta.json").read_text())
        assert set(meta) == {"pose", "magnification", "source_view", "anchor_pixel",
                             "valid_fraction", "seed"}
        assert np.asarray(meta["pose"]).shape == (3, 4)
        assert meta["seed"] == 4
        mask = load_image(a / "mask.png")
        values = np.unique(mask)
        assert set(values.tolist()) <= {0.0, 1.0}  # strictly binary image
        assert mask[..., 0].mean() == pytest.approx(meta["valid_fraction"], abs=1e-9)


class TestFinetuneCommands:
    def test_diverse_and_fullimage_modes(self, ds, trained, tmp_path):
        ck = str(trained / "checkpoint.cvf")
        for mode, want in (("diverse", "finetune_diverse"),
                           ("finetune_fullimage", "finetune_fullimage")):
            out = tmp_path / mode
            rc = main(["finetune", "--dataset", str(ds), "--checkpoint", ck,
                       "--out", str(out), "--mode", mode, "--iterations", "2",
                       "--batch-size", "64", "--samples", "16", "--seed", "2",
                       "--mask-threshold", "0.2"])
            assert rc == 0
            report = TrainReport.load(out / "report.ndjson")
            assert report.mode == want
            assert report.iterations_run == 2

    def test_testtime_with_pose_file(self, ds, trained, tmp_path):
        manifest = load_manifest(ds / "manifest.json")
        poses = tmp_path / "poses.json"
        poses.write_text(json.dumps([manifest.frames[0].pose.matrix3x4().tolist()]))
        out = tmp_path / "tt"
        rc = main(["finetune-testtime", "--dataset", str(ds),
                   "--checkpoint", str(trained / "checkpoint.cvf"),
                   "--out", str(out), "--poses", str(poses), "--iterations", "2",
                   "--batch-size", "64", "--samples", "16", "--seed", "3",
                   "--mask-threshold", "0.2", "--min-mask-fraction", "0.001"])
        assert rc == 0
        report = TrainReport.load(out / "report.ndjson")
        assert report.mode == "finetune_testtime"
        rows = report.notes["poses"]
        assert len(rows) == 1 and rows[0]["pose"] == 0
        if rows[0]["skipped"] is None:
            assert report.iterations_run == 2

    def test_testtime_default_poses_from_manifest(self, ds, trained, tmp_path):
        out = tmp_path / "tt_default"
        rc = main(["finetune-testtime", "--dataset", str(ds),
                   "--checkpoint", str(trained / "checkpoint.cvf"),
                   "--out", str(out), "--iterations", "1", "--batch-size", "64",
                   "--samples", "16", "--mask-threshold", "0.2",
                   "--min-mask-fraction", "0.001"])
        assert rc == 0
        report = TrainReport.load(out / "report.ndjson")
        assert len(report.notes["poses"]) == 5  # one row per closeup test view


def test_python_m_entry_point():
    proc = subprocess.run([sys.executable, "-m", "closeview", "--help"],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0
    assert "make-synthetic" in proc.stdout
