"""The ``polyfeat`` command line: config handling, exit codes and a tiny pipeline."""

import csv
import json

import pytest

from polyfeat.cli import main
from polyfeat.config import ConfigError, Workspace, load_config, parse_config
from polyfeat.stages import train_config

TINY = {
    "seed": 4,
    "dataset": {"synthetic": {"n_classes": 6, "clips_per_class": 5, "clip_seconds": 1.0}},
    "encoder": {"n_layers": 2, "head_hidden": 32, "conv_filters": 8, "conv_length": 20},
    "train": {"epochs": 2, "batch_size": 8},
    "fusion": {"epochs": 3, "hidden": 32},
}


def write_config(directory, body):
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "run.json"
    path.write_text(json.dumps(body))
    return path


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli_run")
    cfg = write_config(base / "a", TINY)
    assert main(["pipeline", "--config", str(cfg)]) == 0
    return base / "a"


class TestConfig:
    def test_defaults(self):
        cfg = parse_config({})
        assert cfg.train.epochs == 300 and cfg.train.lr_start == 2e-4 and cfg.train.lr_end == 1e-6
        assert cfg.train.batch_size == 32 and cfg.fusion.epochs == 100
        assert cfg.views == ["pitch", "timbre", "waveform", "neuralogram"]
        assert cfg.dataset.synthetic.n_classes == 8

    @pytest.mark.parametrize("body,pointer", [
        ({"train": {"epochs": -1}}, "/train/epochs"),
        ({"train": {"lr_start": "fast"}}, "/train/lr_start"),
        ({"fusion": {"views": ["pitch", "colour"]}}, "/fusion/views"),
        ({"bogus": 1}, "/bogus"),
        ({"dataset": {"synthetic": {"n_classes": 7}}}, "/dataset/synthetic/n_classes"),
        ({"dataset": {"synthetic": {"n_classes": 4}}}, "/dataset/synthetic/n_classes"),
        ({"view_train": {"colour": {}}}, "/view_train"),
    ])
    def test_pointer_errors(self, body, pointer):
        with pytest.raises(ConfigError) as err:
            parse_config(body)
        assert err.value.pointer == pointer

    def test_per_view_override(self):
        cfg = parse_config({"train": {"lr_start": 1e-3}, "view_train": {"waveform": {"epochs": 7}}})
        assert train_config(cfg, "waveform").epochs == 7
        assert train_config(cfg, "pitch").epochs == 300
        assert train_config(cfg, "pitch").lr_start == 1e-3
        assert train_config(cfg).seed == 0

    def test_relative_paths_and_env(self, tmp_path, monkeypatch):
        cfg, base = load_config(write_config(tmp_path, {"paths": {"cache_dir": "c"}}))
        assert Workspace(cfg, base).cache_dir == tmp_path / "c"
        monkeypatch.setenv("PF_CACHE_DIR", str(tmp_path / "elsewhere"))
        ws = Workspace(cfg, base)
        assert ws.cache_dir == tmp_path / "elsewhere"
        assert ws.features("pitch") == tmp_path / "elsewhere" / "features" / "pitch.pfv1"


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_unknown_view(self, tmp_path, capsys):
        assert main(["features", "--view", "colour", "--config", str(write_config(tmp_path, {}))]) == 1
        assert "unknown view" in capsys.readouterr().err

    def test_unknown_view_in_head_spec(self, tmp_path, capsys):
        assert main(["train-head", "--views", "pitch,unknown", "--config", str(write_config(tmp_path, {}))]) == 1
        assert "unknown view" in capsys.readouterr().err

    def test_bad_config_value(self, tmp_path, capsys):
        assert main(["synth-data", "--config", str(write_config(tmp_path, {"train": {"epochs": -1}}))]) == 1
        assert "/train/epochs" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["synth-data", "--config", str(tmp_path / "none.json")]) == 1

    def test_missing_prerequisite_names_command(self, tmp_path, capsys):
        cfg = write_config(tmp_path, TINY)
        assert main(["eval", "--views", "pitch", "--config", str(cfg)]) == 1
        err = capsys.readouterr().err
        assert "missing head checkpoint" in err and "polyfeat train-head --views pitch" in err

    def test_features_before_corpus(self, tmp_path, capsys):
        assert main(["features", "--view", "pitch", "--config", str(write_config(tmp_path, TINY))]) == 1
        assert "polyfeat synth-data" in capsys.readouterr().err

    def test_help(self, capsys):
        assert main(["--help"]) == 0


class TestPipeline:
    def test_reports(self, pipeline_run):
        reports = pipeline_run / "reports"
        for stem in ("pitch", "timbre", "waveform", "neuralogram", "pitch+timbre+waveform+neuralogram"):
            assert (reports / f"eval_{stem}_metrics.csv").exists()
            assert (reports / f"eval_{stem}_per_class_ap.csv").exists()
        rows = list(csv.reader((reports / "fusion_summary.csv").open()))
        assert rows[0] == ["views", "top1_clip", "top5_chunk", "top5_clip", "map_macro"]
        assert len(rows) == 6

    def test_config_echo(self, pipeline_run):
        echo = json.loads((pipeline_run / "reports" / "run_config.json").read_text())
        assert echo["command"].startswith("polyfeat pipeline")
        assert echo["config"]["train"]["epochs"] == 2
        assert echo["config"]["train"]["lr_end"] == 1e-6  # defaults are filled in
        assert echo["resolved_paths"]["cache_dir"] == str(pipeline_run / "cache")
        assert echo["version"]

    def test_rerun_is_identical(self, pipeline_run, tmp_path):
        cfg = write_config(tmp_path / "b", TINY)
        assert main(["pipeline", "--config", str(cfg)]) == 0
        for sub in ("checkpoints", "reports", "cache/embeddings"):
            names = sorted(p.name for p in (pipeline_run / sub).iterdir() if p.name != "run_config.json")
            for name in names:
                assert (pipeline_run / sub / name).read_bytes() == (tmp_path / "b" / sub / name).read_bytes(), name

    def test_stagewise_matches_and_parallel_jobs(self, pipeline_run, tmp_path):
        cfg = str(write_config(tmp_path / "c", TINY))
        assert main(["synth-data", "--config", cfg]) == 0
        assert main(["features", "--jobs", "2", "--config", cfg]) == 0
        assert main(["train-encoder", "--view", "pitch", "--config", cfg]) == 0
        assert main(["embed", "--view", "pitch", "--config", cfg]) == 0
        assert main(["train-head", "--views", "pitch", "--config", cfg]) == 0
        assert main(["eval", "--views", "pitch", "--config", cfg]) == 0
        for rel in ("cache/features/neuralogram.pfv1", "checkpoints/encoder_pitch.pfck",
                    "reports/eval_pitch_metrics.csv"):
            assert (tmp_path / "c" / rel).read_bytes() == (pipeline_run / rel).read_bytes(), rel

    def test_resume_flag(self, pipeline_run, tmp_path):
        cfg = str(write_config(tmp_path / "d", {**TINY, "paths": {
            "data_root": str(pipeline_run / "data"), "cache_dir": str(pipeline_run / "cache")}}))
        assert main(["train-encoder", "--view", "timbre", "--max-steps", "1", "--config", cfg]) == 0
        ckpt = tmp_path / "d" / "checkpoints" / "encoder_timbre.pfck"
        assert main(["train-encoder", "--view", "timbre", "--resume", str(ckpt), "--config", cfg]) == 0
        assert ckpt.read_bytes() == (pipeline_run / "checkpoints" / "encoder_timbre.pfck").read_bytes()

    def test_gradcheck_command(self, tmp_path):
        cfg = write_config(tmp_path, {"gradcheck": {"coords": 2, "primitive_seeds": 1}})
        # the full suite runs in the acceptance tests; here only the report plumbing
        import polyfeat.stages as stages

        orig = stages.run_suite
        stages.run_suite = lambda seed, coords, pseeds, log=None: orig(seed, coords, pseeds, views=(), log=log)
        try:
            assert main(["gradcheck", "--config", str(cfg)]) == 0
        finally:
            stages.run_suite = orig
        lines = (tmp_path / "reports" / "gradcheck.txt").read_text().splitlines()
        assert len(lines) == 21 and all("PASS" in line for line in lines)
        assert json.loads((tmp_path / "reports" / "gradcheck.json").read_text())[0]["passed"] is True
