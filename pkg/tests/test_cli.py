"""Command-line interface: argument handling and end-to-end composition."""

import time
from pathlib import Path

import pytest

from magi.cli import main
from magi.io import load_config
from magi.replicate import get_preset, preset_names

REPO_ROOT = Path(__file__).resolve().parents[1]
CONFIG_DIR = REPO_ROOT / "configs"


class TestArguments:
    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["frobnicate"])
        assert excinfo.value.code == 2

    def test_missing_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as excinfo:
            main([])
        assert excinfo.value.code == 2

    def test_unknown_preset_exits_2(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["simulate", "lorenz"])
        assert excinfo.value.code == 2

    def test_missing_config_file_returns_1(self, tmp_path, capsys):
        code = main(["fit", "--config", str(tmp_path / "nope.yaml")])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_config_must_name_data(self, tmp_path, capsys):
        config = tmp_path / "c.yaml"
        config.write_text("system: fn\n")
        code = main(["fit", "--config", str(config)])
        assert code == 1
        assert "data" in capsys.readouterr().err


class TestShippedConfigs:
    def test_one_config_per_preset(self):
        shipped = {p.stem for p in CONFIG_DIR.glob("*.yaml")}
        assert shipped == set(preset_names())

    def test_configs_parse_and_match_presets(self):
        for name in preset_names():
            preset = get_preset(name)
            config = load_config(CONFIG_DIR / f"{name}.yaml")
            assert config.system == preset.fit_system
            assert config.leapfrog_steps == preset.leapfrog_steps
            assert config.band_size == preset.band_size
            # data path matches the default simulate output location
            assert config.data == f"magi-output/{name}/observations.csv"


class TestComposition:
    def test_simulate_fit_evaluate(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("MAGI_OUTPUT_DIR", str(tmp_path / "out"))
        monkeypatch.chdir(tmp_path)

        assert main(["simulate", "fn", "--seed", "3"]) == 0
        data_dir = tmp_path / "out" / "fn"
        assert (data_dir / "observations.csv").exists()
        assert (data_dir / "truth.json").exists()

        config = tmp_path / "fn.yaml"
        config.write_text(
            f"system: fn\ndata: {data_dir / 'observations.csv'}\n"
            "grid_refine: 4\nband_size: 20\n"
        )
        assert main(["fit", "--config", str(config), "--dry-run"]) == 0
        run_dir = tmp_path / "out" / "fit-fn"
        for name in ("params.csv", "trajectory.csv", "run.json"):
            assert (run_dir / name).exists()
        assert (run_dir / "trajectory_V.png").stat().st_size > 0

        capsys.readouterr()
        assert (
            main(
                [
                    "evaluate",
                    "--run-dir",
                    str(run_dir),
                    "--truth",
                    str(data_dir / "truth.json"),
                ]
            )
            == 0
        )
        out = capsys.readouterr().out
        assert "trajectory RMSE V" in out
        evaluation = (run_dir / "evaluation.csv").read_text().splitlines()
        assert evaluation[0] == "kind,name,value"
        for line in evaluation[1:]:
            kind, name, value = line.split(",")
            assert float(value) >= 0.0

    def test_dry_run_is_quick_for_each_shipped_config(self, tmp_path, monkeypatch):
        # initialization without sampling stays interactive (< 30 s/config)
        monkeypatch.setenv("MAGI_OUTPUT_DIR", str(tmp_path / "out"))
        monkeypatch.chdir(tmp_path)
        for name in preset_names():
            assert main(["simulate", name, "--seed", "1"]) == 0
            config = load_config(CONFIG_DIR / f"{name}.yaml")
            local = tmp_path / f"{name}.yaml"
            text = (CONFIG_DIR / f"{name}.yaml").read_text().replace(
                f"magi-output/{name}/observations.csv",
                str(tmp_path / "out" / name / "observations.csv"),
            )
            local.write_text(text)
            start = time.perf_counter()
            assert main(["fit", "--config", str(local), "--dry-run"]) == 0
            assert time.perf_counter() - start < 30.0
