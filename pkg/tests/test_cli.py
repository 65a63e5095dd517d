"""End-to-end tests for the command-line surface and run configuration."""

import contextlib
import dataclasses
import io
from pathlib import Path

import numpy as np
import pytest

from featpipe.cli import main
from featpipe.config import (
    RunConfig,
    parse_config_file,
    resolve_config,
    serialize_config,
)
from featpipe.dataset import write_pgm
from featpipe.descriptor import read_descriptors
from featpipe.detector import read_keypoints, write_keypoints
from featpipe.grad import ShapeError, load_checkpoint
from featpipe.training import read_loss_csv


def run_cli(*argv: str):
    """Invoke the entry point in-process, capturing both output streams."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


TINY_TRAIN_FLAGS = [
    "--profile", "tiny",
    "--descriptor-steps", "3", "--descriptor-batch", "4",
    "--orientation-steps", "3", "--orientation-batch", "4",
    "--detector-pretrain-steps", "2", "--detector-steps", "2",
    "--detector-forward", "4", "--detector-backward", "2",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthesize a small dataset, train briefly, and extract features."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    code, _, err = run_cli(
        "synth", "--out", str(data), "--seed", "5", "--scenes", "2", "--views", "3"
    )
    assert code == 0, err

    run_dir = root / "run"
    code, _, err = run_cli(
        "train", "--data", str(data), "--out", str(run_dir), *TINY_TRAIN_FLAGS
    )
    assert code == 0, err
    ckpt = run_dir / "checkpoint.bin"

    feat = root / "feat"
    feat.mkdir()
    for vid in ("s000_v0", "s000_v1"):
        img = data / "images" / f"{vid}.pgm"
        code, _, err = run_cli(
            "detect", "--ckpt", str(ckpt), "--image", str(img),
            "--out", str(feat / f"{vid}.kps"), "--max-keypoints", "25",
        )
        assert code == 0, err
        code, _, err = run_cli(
            "describe", "--ckpt", str(ckpt), "--image", str(img),
            "--keypoints", str(feat / f"{vid}.kps"),
            "--out", str(feat / f"{vid}.desc"),
        )
        assert code == 0, err
    return {"root": root, "data": data, "run": run_dir, "ckpt": ckpt, "feat": feat}


@pytest.fixture(scope="module")
def stage_dirs(workspace, tmp_path_factory):
    """Train the three stages one at a time, chaining checkpoints."""
    root = tmp_path_factory.mktemp("stages")
    data = str(workspace["data"])
    flags = [
        "--profile", "tiny",
        "--descriptor-steps", "2", "--descriptor-batch", "4",
        "--orientation-steps", "2", "--orientation-batch", "4",
        "--detector-pretrain-steps", "1", "--detector-steps", "1",
        "--detector-forward", "2", "--detector-backward", "2",
    ]
    dirs = {name: root / name for name in ("desc", "orient", "det")}
    code, _, err = run_cli(
        "train", "--data", data, "--out", str(dirs["desc"]),
        "--stage", "descriptor", *flags,
    )
    assert code == 0, err
    code, _, err = run_cli(
        "train", "--data", data, "--out", str(dirs["orient"]),
        "--stage", "orientation", "--ckpt", str(dirs["desc"] / "checkpoint.bin"),
        *flags,
    )
    assert code == 0, err
    code, _, err = run_cli(
        "train", "--data", data, "--out", str(dirs["det"]),
        "--stage", "detector", "--ckpt", str(dirs["orient"] / "checkpoint.bin"),
        *flags,
    )
    assert code == 0, err
    return {**dirs, "flags": flags, "data": data}


class TestConfigResolution:
    def test_defaults_have_default_provenance(self):
        cfg, prov = resolve_config({}, {})
        assert cfg == RunConfig()
        assert set(prov.values()) == {"default"}

    def test_flag_beats_file_beats_default(self):
        cfg, prov = resolve_config({"seed": "7", "scenes": "3"}, {"seed": "9"})
        assert cfg.seed == 9
        assert cfg.scenes == 3
        assert prov["seed"] == "flag"
        assert prov["scenes"] == "file"
        assert prov["views"] == "default"

    def test_string_values_convert_per_field_type(self):
        cfg, _ = resolve_config({}, {"beta": "2.5", "descriptor_steps": "11"})
        assert cfg.beta == 2.5
        assert isinstance(cfg.descriptor_steps, int)

    def test_bad_numeric_value_rejected(self):
        with pytest.raises(ShapeError):
            resolve_config({}, {"seed": "abc"})

    def test_unknown_profile_rejected(self):
        with pytest.raises(ShapeError):
            RunConfig(profile="huge")

    def test_parse_skips_comments_and_blanks(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("# a comment\n\nseed = 4  # trailing\n\nviews = 2\n")
        assert parse_config_file(path) == {"seed": "4", "views": "2"}

    def test_parse_unknown_key_names_line(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("seed = 4\nbogus = 1\n")
        with pytest.raises(ShapeError, match="line 2"):
            parse_config_file(path)

    def test_parse_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("seed = 4\nseed = 5\n")
        with pytest.raises(ShapeError, match="duplicate"):
            parse_config_file(path)

    def test_parse_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("just some words\n")
        with pytest.raises(ShapeError, match="line 1"):
            parse_config_file(path)

    def test_serialize_floats_and_provenance(self):
        cfg, prov = resolve_config({}, {"beta": "12.0"})
        text = serialize_config(cfg, prov)
        assert "beta = 12  # flag" in text
        assert "scale_factor = 1.25992104989  # default" in text

    def test_serialized_config_parses_back(self, tmp_path):
        """The artifact is itself a valid config file; floats survive to
        the 12 significant digits the serializer keeps."""
        cfg, prov = resolve_config({"scenes": "3"}, {"beta": "2.5"})
        path = tmp_path / "run_config.txt"
        path.write_text(serialize_config(cfg, prov))
        cfg2, _ = resolve_config(parse_config_file(path), {})
        for f in dataclasses.fields(RunConfig):
            a, b = getattr(cfg, f.name), getattr(cfg2, f.name)
            if isinstance(a, float):
                np.testing.assert_allclose(b, a, rtol=1e-11)
            else:
                assert b == a, f.name


class TestExitCodes:
    def test_no_arguments_is_usage_error(self):
        code, out, _ = run_cli()
        assert code == 1
        assert "usage" in out.lower() or "subcommand" in out.lower()

    def test_unknown_subcommand_is_usage_error(self):
        code, _, _ = run_cli("frobnicate")
        assert code == 1

    def test_missing_required_flag_is_usage_error(self):
        code, _, _ = run_cli("synth")
        assert code == 1

    def test_missing_dataset_is_data_error(self, tmp_path):
        code, _, err = run_cli(
            "train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")
        )
        assert code == 2
        assert "error" in err

    def test_missing_checkpoint_is_data_error(self, tmp_path, workspace):
        img = workspace["data"] / "images" / "s000_v0.pgm"
        code, _, _ = run_cli(
            "detect", "--ckpt", str(tmp_path / "none.bin"),
            "--image", str(img), "--out", str(tmp_path / "k.kps"),
        )
        assert code == 2

    def test_bad_flag_value_is_data_error(self, tmp_path):
        code, _, err = run_cli("synth", "--out", str(tmp_path / "d"), "--seed", "abc")
        assert code == 2
        assert "seed" in err

    def test_bad_config_file_key_is_data_error(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("bogus = 3\n")
        code, _, err = run_cli("synth", "--out", str(tmp_path / "d"), "--config", str(cfg))
        assert code == 2
        assert "bogus" in err

    def test_output_path_through_file_is_data_error(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("x")
        code, _, _ = run_cli("synth", "--out", str(blocker), "--scenes", "1")
        assert code == 2

    def test_describe_without_orientation_weights_is_data_error(
        self, stage_dirs, workspace, tmp_path
    ):
        img = workspace["data"] / "images" / "s000_v0.pgm"
        kps = workspace["feat"] / "s000_v0.kps"
        code, _, err = run_cli(
            "describe", "--ckpt", str(stage_dirs["desc"] / "checkpoint.bin"),
            "--image", str(img), "--keypoints", str(kps),
            "--out", str(tmp_path / "d.desc"),
        )
        assert code == 2
        assert "orientation" in err


class TestSynth:
    def test_manifest_contents(self, workspace):
        data = workspace["data"]
        images = sorted((data / "images").glob("*.pgm"))
        assert len(images) == 6
        assert images[0].name == "s000_v0.pgm"
        records = (data / "records.txt").read_text().splitlines()
        assert len(records) == 6 * (6 + 2)
        pairs = (data / "pairs.txt").read_text().splitlines()
        assert len(pairs) == 2 * 3
        assert (data / "stats.txt").exists()

    def test_run_config_records_flag_provenance(self, workspace):
        text = (workspace["data"] / "run_config_synth.txt").read_text()
        assert "seed = 5  # flag" in text
        assert "scenes = 2  # flag" in text
        assert "views = 3  # flag" in text
        assert "image_size = 256  # default" in text

    def test_zero_scenes_writes_empty_valid_manifest(self, tmp_path):
        out = tmp_path / "empty"
        code, msg, _ = run_cli("synth", "--out", str(out), "--scenes", "0")
        assert code == 0
        assert "wrote 0 images" in msg
        assert list((out / "images").glob("*.pgm")) == []
        assert (out / "records.txt").read_text() == ""
        code, _, err = run_cli(
            "train", "--data", str(out), "--out", str(tmp_path / "run"),
            "--descriptor-steps", "0", "--orientation-steps", "0",
            "--detector-pretrain-steps", "0", "--detector-steps", "0",
            "--profile", "tiny",
        )
        assert code == 2  # no training points to compute stats from
        assert err

    def test_same_seed_reproduces_bytes(self, tmp_path):
        args = ["--scenes", "1", "--views", "2", "--seed", "12"]
        code, _, _ = run_cli("synth", "--out", str(tmp_path / "a"), *args)
        assert code == 0
        code, _, _ = run_cli("synth", "--out", str(tmp_path / "b"), *args)
        assert code == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


class TestTrainStages:
    def test_full_run_loss_csv_covers_all_stages(self, workspace):
        rows = read_loss_csv(workspace["run"] / "loss.csv")
        stages = [stage for _, stage, _, _ in rows]
        assert stages == (
            ["descriptor"] * 3 + ["orientation"] * 3
            + ["detector-pretrain"] * 2 + ["detector"] * 2
        )
        header = (workspace["run"] / "loss.csv").read_text().splitlines()[0]
        assert header == "step,stage,loss,mining_ratio"

    def test_full_checkpoint_has_all_namespaces(self, workspace):
        store = load_checkpoint(workspace["ckpt"])
        for ns in ("descriptor", "orientation", "detector", "stats"):
            assert any(n.startswith(ns + "/") for n in store.names())

    def test_stagewise_chain_accumulates_namespaces(self, stage_dirs):
        s1 = load_checkpoint(stage_dirs["desc"] / "checkpoint.bin")
        assert "descriptor/meta" in s1
        assert "orientation/meta" not in s1
        s2 = load_checkpoint(stage_dirs["orient"] / "checkpoint.bin")
        assert "descriptor/meta" in s2
        assert "orientation/meta" in s2
        assert "detector/meta" not in s2
        s3 = load_checkpoint(stage_dirs["det"] / "checkpoint.bin")
        for ns in ("descriptor", "orientation", "detector"):
            assert f"{ns}/meta" in s3

    def test_stagewise_loss_csv_labels(self, stage_dirs):
        rows = read_loss_csv(stage_dirs["orient"] / "loss.csv")
        assert [stage for _, stage, _, _ in rows] == ["orientation"] * 2
        rows = read_loss_csv(stage_dirs["det"] / "loss.csv")
        assert [stage for _, stage, _, _ in rows] == ["detector-pretrain", "detector"]

    def test_earlier_stage_untouched_by_later_stage(self, stage_dirs):
        s1 = load_checkpoint(stage_dirs["desc"] / "checkpoint.bin")
        s3 = load_checkpoint(stage_dirs["det"] / "checkpoint.bin")
        assert s1.namespace_bytes("descriptor") == s3.namespace_bytes("descriptor")

    def test_detector_stage_without_checkpoint_errors(self, stage_dirs, tmp_path):
        code, _, err = run_cli(
            "train", "--data", stage_dirs["data"], "--out", str(tmp_path / "o"),
            "--stage", "detector", *stage_dirs["flags"],
        )
        assert code == 2
        assert "orientation" in err

    def test_orientation_stage_without_checkpoint_errors(self, stage_dirs, tmp_path):
        code, _, err = run_cli(
            "train", "--data", stage_dirs["data"], "--out", str(tmp_path / "o"),
            "--stage", "orientation", *stage_dirs["flags"],
        )
        assert code == 2
        assert "descriptor" in err

    def test_detector_stage_on_descriptor_only_checkpoint_errors(
        self, stage_dirs, tmp_path
    ):
        code, _, err = run_cli(
            "train", "--data", stage_dirs["data"], "--out", str(tmp_path / "o"),
            "--stage", "detector",
            "--ckpt", str(stage_dirs["desc"] / "checkpoint.bin"),
            *stage_dirs["flags"],
        )
        assert code == 2
        assert "run --stage orientation first" in err


class TestDetectDescribe:
    def test_keypoint_file_header(self, workspace):
        first = (workspace["feat"] / "s000_v0.kps").read_text().splitlines()[0]
        assert first == "# x y sigma theta score"

    def test_detect_is_deterministic(self, workspace, tmp_path):
        img = workspace["data"] / "images" / "s000_v0.pgm"
        out = tmp_path / "again.kps"
        code, _, err = run_cli(
            "detect", "--ckpt", str(workspace["ckpt"]), "--image", str(img),
            "--out", str(out), "--max-keypoints", "25",
        )
        assert code == 0, err
        assert out.read_bytes() == (workspace["feat"] / "s000_v0.kps").read_bytes()

    def test_constant_image_yields_no_keypoints(self, workspace, tmp_path):
        flat = tmp_path / "flat.pgm"
        write_pgm(flat, np.full((64, 64), 0.5))
        out = tmp_path / "flat.kps"
        code, _, err = run_cli(
            "detect", "--ckpt", str(workspace["ckpt"]), "--image", str(flat),
            "--out", str(out),
        )
        assert code == 0, err
        assert read_keypoints(out) == []

    def test_descriptor_count_matches_keypoints(self, workspace):
        kps = read_keypoints(workspace["feat"] / "s000_v0.kps")
        descs = read_descriptors(workspace["feat"] / "s000_v0.desc")
        assert descs.shape == (len(kps), 32)
        assert np.all(descs >= 0.0) and np.all(descs <= 1.0)

    def test_describe_empty_keypoint_list(self, workspace, tmp_path):
        empty = tmp_path / "none.kps"
        write_keypoints(empty, [])
        out = tmp_path / "none.desc"
        img = workspace["data"] / "images" / "s000_v0.pgm"
        code, _, err = run_cli(
            "describe", "--ckpt", str(workspace["ckpt"]), "--image", str(img),
            "--keypoints", str(empty), "--out", str(out),
        )
        assert code == 0, err
        assert read_descriptors(out).shape == (0, 32)


class TestMatchEvaluate:
    def test_self_match_is_identity_with_zero_distance(self, workspace, tmp_path):
        desc = workspace["feat"] / "s000_v0.desc"
        out = tmp_path / "m.txt"
        code, _, err = run_cli(
            "match", "--desc-a", str(desc), "--desc-b", str(desc), "--out", str(out)
        )
        assert code == 0, err
        lines = out.read_text().splitlines()
        n = read_descriptors(desc).shape[0]
        assert len(lines) == n
        for i, line in enumerate(lines):
            assert line == f"{i} {i} 0"

    def test_viz_without_side_files_errors(self, workspace, tmp_path):
        desc = workspace["feat"] / "s000_v0.desc"
        code, _, err = run_cli(
            "match", "--desc-a", str(desc), "--desc-b", str(desc),
            "--out", str(tmp_path / "m.txt"), "--viz", str(tmp_path / "m.png"),
        )
        assert code == 2
        assert "--image-a" in err

    def test_viz_writes_png(self, workspace, tmp_path):
        feat, data = workspace["feat"], workspace["data"]
        png = tmp_path / "m.png"
        code, _, err = run_cli(
            "match",
            "--desc-a", str(feat / "s000_v0.desc"),
            "--desc-b", str(feat / "s000_v1.desc"),
            "--out", str(tmp_path / "m.txt"),
            "--viz", str(png),
            "--image-a", str(data / "images" / "s000_v0.pgm"),
            "--image-b", str(data / "images" / "s000_v1.pgm"),
            "--kps-a", str(feat / "s000_v0.kps"),
            "--kps-b", str(feat / "s000_v1.kps"),
        )
        assert code == 0, err
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_evaluate_writes_metrics_csv(self, workspace, tmp_path):
        data, feat = workspace["data"], workspace["feat"]
        pair_line = next(
            line
            for line in (data / "pairs.txt").read_text().splitlines()
            if line.startswith("s000_v0 s000_v1 ")
        )
        gt = tmp_path / "gt.txt"
        gt.write_text(pair_line + "\n")
        out = tmp_path / "metrics.csv"
        code, table, err = run_cli(
            "evaluate", "--gt", str(gt), "--feature-dir", str(feat),
            "--image-dir", str(data / "images"), "--out", str(out),
        )
        assert code == 0, err
        lines = out.read_text().splitlines()
        assert lines[0] == "pair_id,repeatability,nn_map,matching_score"
        assert lines[1].startswith("s000_v0:s000_v1,")
        assert "s000_v0:s000_v1" in table
        assert "mean" in table


class TestGradcheckCommand:
    def test_all_chains_pass(self):
        code, out, err = run_cli("gradcheck")
        assert code == 0, err
        lines = [line for line in out.splitlines() if line.strip()]
        assert len(lines) == 7
        for line in lines:
            assert line.rstrip().endswith("ok")


class TestConfigPrecedenceViaCli:
    def test_file_and_flag_provenance_in_artifact(self, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("seed = 9\nscenes = 1\nviews = 2\n")
        out = tmp_path / "d"
        code, _, err = run_cli(
            "synth", "--out", str(out), "--config", str(cfg), "--seed", "5"
        )
        assert code == 0, err
        text = (out / "run_config_synth.txt").read_text()
        assert "seed = 5  # flag" in text
        assert "scenes = 1  # file" in text
        assert "views = 2  # file" in text
        assert "features = 6  # default" in text
