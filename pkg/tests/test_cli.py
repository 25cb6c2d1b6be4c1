"""End-to-end command-line pipeline, run in process via main(argv)."""

import json

import pytest

from octscreen.cli import main
from octscreen.data_model import load_manifest

SYNTH_FLAGS = [
    "--n-patients", "8",
    "--visits-per-patient", "1,2",
    "--volumes-per-visit", "1,1",
    "--bscans-per-volume", "8",
    "--image-height", "32",
    "--image-width", "32",
    "--vf-missing-rate", "0.3",
    "--pixel-noise", "0.05",
    "--structure-function-noise", "0.03",
    "--seed", "17",
]

EMBED_FLAGS = [
    "--width", "8", "--n-stages", "2", "--feature-dim", "16",
    "--epochs", "2", "--batch-size", "64", "--seed", "17",
]

TRAIN_FLAGS = [
    "--mode", "semt", "--width", "8", "--n-stages", "2",
    "--epochs", "2", "--batch-size", "32", "--seed", "17",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> embed -> label -> train -> eval -> cam, asserting exit 0 each."""
    base = tmp_path_factory.mktemp("cli_pipeline")
    data = base / "data"
    work = base / "work"

    assert main(["synth", "--out", str(data), "--ratios", "0.5,0.25,0.25", *SYNTH_FLAGS]) == 0
    assert main([
        "embed",
        "--train-manifest", str(data / "manifest_train.csv"),
        "--val-manifest", str(data / "manifest_val.csv"),
        "--data-root", str(data),
        "--out", str(work / "embed"),
        *EMBED_FLAGS,
    ]) == 0
    assert main([
        "label",
        "--manifest", str(data / "manifest_train.csv"),
        "--features", str(work / "embed" / "features.bin"),
        "--out", str(work / "label"),
    ]) == 0
    assert main([
        "train",
        "--train-manifest", str(work / "label" / "manifest_labeled.csv"),
        "--val-manifest", str(data / "manifest_val.csv"),
        "--data-root", str(data),
        "--out", str(work / "train"),
        *TRAIN_FLAGS,
    ]) == 0
    assert main([
        "eval",
        "--manifest", str(data / "manifest_test.csv"),
        "--checkpoint", str(work / "train" / "mtl_best.pt"),
        "--out", str(work / "eval"),
    ]) == 0
    test_manifest = load_manifest(data / "manifest_test.csv", split_tag="test")
    volume_id = test_manifest.records[0].volume_id
    assert main([
        "cam",
        "--checkpoint", str(work / "train" / "mtl_best.pt"),
        "--manifest", str(data / "manifest_test.csv"),
        "--volume-id", volume_id,
        "--out", str(work / "cam"),
    ]) == 0
    return {"data": data, "work": work, "volume_id": volume_id}


class TestPipelineArtifacts:
    def test_synth_outputs(self, pipeline):
        data = pipeline["data"]
        for name in ("manifest.csv", "manifest_train.csv", "manifest_val.csv",
                     "manifest_test.csv", "geometry.json"):
            assert (data / name).is_file(), name
        manifest = load_manifest(data / "manifest.csv")
        bins = list((data / "volumes").glob("*.bin"))
        assert len(bins) == len(manifest)

    def test_split_manifests_partition_volumes(self, pipeline):
        data = pipeline["data"]
        full = {r.volume_id for r in load_manifest(data / "manifest.csv")}
        parts = [
            {r.volume_id for r in load_manifest(data / f"manifest_{n}.csv", split_tag=n)}
            for n in ("train", "val", "test")
        ]
        assert set.union(*parts) == full
        assert sum(len(p) for p in parts) == len(full)

    def test_stage_artifacts(self, pipeline):
        work = pipeline["work"]
        assert (work / "embed" / "backbone.pt").is_file()
        assert (work / "embed" / "backbone.pt.meta").is_file()
        assert (work / "embed" / "features.bin").is_file()
        assert (work / "label" / "assignments.csv").is_file()
        assert (work / "label" / "manifest_labeled.csv").is_file()
        assert (work / "train" / "mtl_best.pt").is_file()
        assert (work / "train" / "train_state.pt").is_file()
        assert (work / "train" / "train_log.jsonl").is_file()
        assert (work / "eval" / "report.json").is_file()
        cams = list((work / "cam").glob("cam_*.png"))
        overlays = list((work / "cam").glob("overlay_*.png"))
        assert len(cams) == 1 and len(overlays) == 1

    def test_labeled_manifest_has_no_absent_vf(self, pipeline):
        labeled = load_manifest(
            pipeline["work"] / "label" / "manifest_labeled.csv", split_tag="train"
        )
        assert all(r.vf_provenance in ("measured", "surrogate") for r in labeled)
        assert any(r.vf_provenance == "surrogate" for r in labeled)

    def test_one_run_record_per_stage(self, pipeline):
        dirs = [pipeline["data"]] + [
            pipeline["work"] / n for n in ("embed", "label", "train", "eval", "cam")
        ]
        for d in dirs:
            records = list(d.rglob("run_record.json"))
            assert len(records) == 1, d

    def test_run_record_contents(self, pipeline):
        record = json.loads((pipeline["work"] / "train" / "run_record.json").read_text())
        assert record["command"] == "train"
        assert record["seed"] == 17
        assert len(record["config_hash"]) == 64
        assert int(record["config_hash"], 16) >= 0
        for path, digest in record["input_hashes"].items():
            assert len(digest) == 64
            assert int(digest, 16) >= 0
        for out in record["output_paths"]:
            from pathlib import Path

            assert Path(out).exists(), out

    def test_report_is_valid_json(self, pipeline):
        report = json.loads((pipeline["work"] / "eval" / "report.json").read_text())
        assert set(report) == {"image_level", "case_level", "vf_mae", "counts"}


class TestIdempotence:
    def test_embed_rerun_is_noop_until_config_changes(self, pipeline, tmp_path, capsys):
        data = pipeline["data"]
        args = [
            "embed",
            "--train-manifest", str(data / "manifest_train.csv"),
            "--data-root", str(data),
            "--out", str(tmp_path),
            "--width", "4", "--n-stages", "2", "--feature-dim", "8",
            "--epochs", "1", "--seed", "17",
        ]
        assert main(args) == 0
        before = (tmp_path / "features.bin").read_bytes()
        capsys.readouterr()

        assert main(args) == 0
        out = capsys.readouterr().out
        assert "reusing checkpoint" in out
        assert "feature cache up to date" in out
        assert (tmp_path / "features.bin").read_bytes() == before

        assert main(args[:-1] + ["18"]) == 0
        out = capsys.readouterr().out
        assert "reusing checkpoint" not in out
        assert (tmp_path / "features.bin").read_bytes() != before

    def test_synth_same_seed_same_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        flags = ["--n-patients", "3", "--bscans-per-volume", "6",
                 "--image-height", "16", "--image-width", "16", "--seed", "5"]
        assert main(["synth", "--out", str(a), *flags]) == 0
        assert main(["synth", "--out", str(b), *flags]) == 0
        assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
        names = sorted(p.name for p in (a / "volumes").iterdir())
        assert names == sorted(p.name for p in (b / "volumes").iterdir())
        assert all(
            (a / "volumes" / n).read_bytes() == (b / "volumes" / n).read_bytes()
            for n in names
        )


class TestResume:
    def test_resume_appends_and_checks_config(self, pipeline, tmp_path, capsys):
        data, work = pipeline["data"], pipeline["work"]
        base = [
            "train",
            "--train-manifest", str(work / "label" / "manifest_labeled.csv"),
            "--val-manifest", str(data / "manifest_val.csv"),
            "--data-root", str(data),
            "--out", str(tmp_path),
            "--mode", "semt", "--width", "4", "--n-stages", "2",
            "--epochs", "1", "--batch-size", "32", "--seed", "17",
        ]
        assert main(base) == 0
        assert main(base + ["--resume"]) == 0
        log = (tmp_path / "train_log.jsonl").read_text().splitlines()
        assert [json.loads(ln)["epoch"] for ln in log] == [0, 1]

        capsys.readouterr()
        assert main(base[:-1] + ["23", "--resume"]) == 2
        assert "does not match" in capsys.readouterr().err

    def test_resume_without_state_fails(self, pipeline, tmp_path, capsys):
        data, work = pipeline["data"], pipeline["work"]
        code = main([
            "train", "--resume",
            "--train-manifest", str(work / "label" / "manifest_labeled.csv"),
            "--val-manifest", str(data / "manifest_val.csv"),
            "--data-root", str(data),
            "--out", str(tmp_path),
            "--mode", "semt", "--epochs", "1",
        ])
        assert code == 2
        assert "train state" in capsys.readouterr().err


class TestErrorPaths:
    def test_semt_without_labeling_fails(self, pipeline, tmp_path, capsys):
        data = pipeline["data"]
        code = main([
            "train",
            "--train-manifest", str(data / "manifest_train.csv"),
            "--val-manifest", str(data / "manifest_val.csv"),
            "--data-root", str(data),
            "--out", str(tmp_path),
            *TRAIN_FLAGS,
        ])
        assert code == 2
        assert "surrogate labelling" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path, capsys):
        code = main([
            "embed",
            "--train-manifest", str(tmp_path / "nope.csv"),
            "--out", str(tmp_path / "out"),
        ])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_checkpoint(self, pipeline, tmp_path):
        code = main([
            "eval",
            "--manifest", str(pipeline["data"] / "manifest_test.csv"),
            "--checkpoint", str(tmp_path / "nope.pt"),
            "--out", str(tmp_path),
        ])
        assert code == 2

    def test_malformed_manifest(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("volume_id,patient\nV1,P1\n")
        code = main([
            "embed", "--train-manifest", str(bad), "--out", str(tmp_path / "out"),
        ])
        assert code == 2

    def test_header_only_manifest_eval(self, pipeline, tmp_path, capsys):
        src = (pipeline["data"] / "manifest_test.csv").read_text().splitlines()[0]
        empty = tmp_path / "empty.csv"
        empty.write_text(src + "\n")
        code = main([
            "eval",
            "--manifest", str(empty),
            "--checkpoint", str(pipeline["work"] / "train" / "mtl_best.pt"),
            "--out", str(tmp_path / "out"),
        ])
        assert code == 2
        assert "empty" in capsys.readouterr().err

    def test_unknown_config_key_in_file(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("bogus_knob=3\n")
        code = main(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg)])
        assert code == 2
        assert "bogus_knob" in capsys.readouterr().err

    def test_cam_index_out_of_range(self, pipeline, tmp_path, capsys):
        code = main([
            "cam",
            "--checkpoint", str(pipeline["work"] / "train" / "mtl_best.pt"),
            "--manifest", str(pipeline["data"] / "manifest_test.csv"),
            "--volume-id", pipeline["volume_id"],
            "--triplet-index", "99",
            "--out", str(tmp_path),
        ])
        assert code == 2
        assert "out of range" in capsys.readouterr().err

    def test_cam_unknown_volume(self, pipeline, tmp_path):
        code = main([
            "cam",
            "--checkpoint", str(pipeline["work"] / "train" / "mtl_best.pt"),
            "--manifest", str(pipeline["data"] / "manifest_test.csv"),
            "--volume-id", "NOPE",
            "--out", str(tmp_path),
        ])
        assert code == 2

    def test_bad_ratios(self, tmp_path, capsys):
        code = main(["synth", "--out", str(tmp_path / "d"), "--ratios", "0.5,0.5"])
        assert code == 2
        assert "three" in capsys.readouterr().err


class TestConfigPrecedence:
    def test_flag_overrides_config_file(self, tmp_path):
        cfg = tmp_path / "spec.cfg"
        cfg.write_text(
            "n_patients=4\nbscans_per_volume=6\nimage_height=16\n"
            "image_width=16\nseed=9\n"
        )
        out = tmp_path / "d"
        assert main([
            "synth", "--out", str(out), "--config", str(cfg), "--n-patients", "6",
        ]) == 0
        manifest = load_manifest(out / "manifest.csv")
        assert len(manifest.patient_ids()) == 6

    def test_config_file_overrides_defaults(self, tmp_path):
        cfg = tmp_path / "spec.cfg"
        cfg.write_text(
            "n_patients=4\nbscans_per_volume=6\nimage_height=16\n"
            "image_width=16\nseed=9\n"
        )
        out = tmp_path / "d"
        assert main(["synth", "--out", str(out), "--config", str(cfg)]) == 0
        manifest = load_manifest(out / "manifest.csv")
        assert len(manifest.patient_ids()) == 4
        assert all(r.bscan_count == 6 for r in manifest)
