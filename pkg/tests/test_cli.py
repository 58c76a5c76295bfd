import json
import math
import subprocess
import sys

import pytest

from noisyprop import traceio
from noisyprop.cli import (
    EXIT_CONFIG,
    EXIT_DOMAIN,
    EXIT_IO,
    PRESETS,
    ConfigError,
    ExperimentConfig,
    config_from_args,
    main,
)

SMALL = ["--width", "60", "--runs", "3", "--inputs", "4"]


class TestExperimentConfig:
    def test_json_round_trip(self):
        cfg = ExperimentConfig(command="cmap", noise=["mult:dropout(0.6)", "none"], c0=[0.1], seed=9,
                               sigma_w=1.3, simulate=True, sweep_values=[0.2, 0.4])
        assert ExperimentConfig.from_json(cfg.to_json()) == cfg

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_valid_and_round_trip(self, name):
        cfg = ExperimentConfig.from_dict({"command": "dynamics", "preset": name, **PRESETS[name]})
        assert ExperimentConfig.from_json(cfg.to_json()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"colour": "red"})

    @pytest.mark.parametrize("kw", [dict(command="plot"), dict(noise=[]), dict(depth=0), dict(format="xml"),
                                    dict(init="he"), dict(q_step=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kw)

    def test_bad_json(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json("[1, 2]")


class TestResolution:
    def test_flags_override_preset(self):
        cfg = config_from_args(["dynamics", "--preset", "fig3-dropout", "--depth", "4"])
        assert cfg.depth == 4 and cfg.multipliers == [0.85, 1.0, 1.15] and cfg.preset == "fig3-dropout"

    def test_config_file_then_flags(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(ExperimentConfig(command="qmap", seed=5, depth=3).to_json())
        cfg = config_from_args(["dynamics", "--config", str(path), "--seed", "6"])
        assert cfg.command == "dynamics" and cfg.depth == 3 and cfg.seed == 6

    def test_sigma_w2(self):
        assert config_from_args(["dynamics", "--sigma-w2", "2.25"]).sigma_w == pytest.approx(1.5)

    def test_sigma_w_conflict(self):
        with pytest.raises(ConfigError):
            config_from_args(["dynamics", "--sigma-w2", "2", "--sigma-w", "1"])

    def test_repeatable_lists(self):
        cfg = config_from_args(["cmap", "--noise", "none", "--noise", "mult:dropout(0.5)", "--c0", "0.2"])
        assert cfg.noise == ["none", "mult:dropout(0.5)"] and cfg.c0 == [0.2]


class TestExitCodes:
    def test_config_error(self, capsys):
        assert main(["dynamics", "--noise", "mult:nothing(1)"]) == EXIT_CONFIG
        assert main(["dynamics", "--depth", "x"]) == EXIT_CONFIG

    def test_domain_error_on_additive_critical(self, capsys):
        assert main(["dynamics", "--noise", "add:gaussian(1)", "--out", "-"]) == EXIT_DOMAIN
        assert "NoCriticalInit" in capsys.readouterr().err

    def test_io_error(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["qmap", "--out", str(blocker / "x.csv")]) == EXIT_IO

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["qmap", "--config", str(tmp_path / "none.json")]) == EXIT_IO

    def test_csv_for_multi_series_is_config_error(self, tmp_path, capsys):
        args = ["dynamics", "--preset", "fig3-dropout", "--format", "csv", "--out", str(tmp_path / "a.csv")]
        assert main(args) == EXIT_CONFIG


class TestSubcommands:
    def test_qmap_identity_table(self, tmp_path):
        out = tmp_path / "q.csv"
        assert main(["qmap", "--noise", "mult:dropout(0.6)", "--out", str(out)]) == 0
        meta, cols = traceio.read_csv(out)
        assert len(cols["q_in"]) == 31
        assert max(abs(a - b) for a, b in zip(cols["q_in"], cols["value"])) < 1e-12
        assert meta["config"]["command"] == "qmap" and meta["seed"] == 0 and meta["version"]

    def test_qmap_additive_affine(self, tmp_path):
        out = tmp_path / "q.csv"
        args = ["qmap", "--noise", "add:gaussian(1)", "--init", "standard", "--out", str(out)]
        assert main(args) == 0
        _, cols = traceio.read_csv(out)
        assert all(abs(v - (q + 2)) < 1e-12 for q, v in zip(cols["q_in"], cols["value"]))

    def test_qmap_simulated_tanh(self, tmp_path):
        out = tmp_path / "q.csv"
        args = ["qmap", "--act", "tanh", "--init", "standard", "--q-step", "5", "--simulate", *SMALL,
                "--out", str(out)]
        assert main(args) == 0
        _, cols = traceio.read_csv(out)
        assert set(cols) == {"q_in", "value", "mean", "std", "n_runs"}

    def test_dynamics_triplet(self, tmp_path):
        out = tmp_path / "d.json"
        assert main(["dynamics", "--preset", "fig3-dropout", "--out", str(out)]) == 0
        series = json.loads(out.read_text())["series"]
        finals = [s["columns"]["value"][-1] for s in series]
        assert finals[0] < 4.0 < finals[2] and finals[1] == pytest.approx(4.0)

    def test_dynamics_byte_identical(self, tmp_path):
        args = ["dynamics", "--noise", "mult:dropout(0.6)", "--depth", "3", "--simulate", *SMALL]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main([*args, "--out", str(a)]) == 0
        assert main([*args, "--out", str(b)]) == 0
        assert a.read_text().replace(str(a), "") == b.read_text().replace(str(b), "")

    def test_cmap(self, tmp_path):
        out = tmp_path / "c.json"
        args = ["cmap", "--noise", "none", "--noise", "mult:dropout(0.5)", "--depth", "4", "--out", str(out)]
        assert main(args) == 0
        series = json.loads(out.read_text())["series"]
        maps = [s for s in series if s["kind"] == "map"]
        assert maps[0]["c_star"] == 1.0
        assert maps[1]["chi"] < 1.0
        assert len(series) == 2 * 4

    def test_cmap_simulated_small(self, tmp_path):
        out = tmp_path / "c.json"
        args = ["cmap", "--noise", "mult:dropout(0.6)", "--depth", "2", "--c-step", "0.5", "--simulate",
                *SMALL, "--out", str(out)]
        assert main(args) == 0
        s = json.loads(out.read_text())["series"][1]
        assert s["columns"]["n_runs"] == [3, 3, 3]

    def test_cmap_tanh_general_path(self, tmp_path):
        out = tmp_path / "c.json"
        args = ["cmap", "--act", "tanh", "--init", "standard", "--depth", "2", "--c-step", "0.5",
                "--out", str(out)]
        assert main(args) == 0
        assert json.loads(out.read_text())["series"][0]["c_star"] is None

    def test_depth_scale_theory(self, tmp_path):
        out = tmp_path / "x.csv"
        assert main(["depth-scale", "--preset", "fig5-gaussian", "--out", str(out)]) == 0
        _, cols = traceio.read_csv(out)
        assert len(cols["param"]) == 13
        assert all(abs(a / b - 1) < 0.1 for a, b in zip(cols["xi_fit_theory"], cols["xi"]) if b > 0)

    def test_depth_scale_requires_relu(self, capsys):
        assert main(["depth-scale", "--act", "tanh", "--out", "-"]) == EXIT_DOMAIN

    def test_overflow_grid_small(self, tmp_path):
        out = tmp_path / "o.csv"
        args = ["overflow-grid", "--noise", "mult:dropout(0.6)", "--q0", "1", "--sigma-w2-min", "2.0",
                "--sigma-w2-max", "2.4", "--sigma-w2-count", "2", "--depth", "200", "--width", "300",
                "--runs", "2", "--inputs", "10", "--out", str(out)]
        assert main(args) == 0
        _, cols = traceio.read_csv(out)
        assert cols["observed_kind"] == ["overflow", "overflow"]
        for pred, obs in zip(cols["predicted_layer"], cols["observed_layer"]):
            assert abs(obs - math.ceil(pred)) <= 6

    def test_critical_init_stdout(self, capsys):
        assert main(["critical-init", "--noise", "mult:dropout(0.5)"]) == 0
        assert capsys.readouterr().out.strip() == "mult:dropout(0.5): sigma_w=1.0 sigma_b=0.0"

    def test_critical_init_additive(self, capsys):
        assert main(["critical-init", "--noise", "add:gaussian(1.0)"]) == EXIT_DOMAIN
        assert "no critical initialisation" in capsys.readouterr().err

    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NOISYPROP_OUTPUT_DIR", str(tmp_path))
        assert main(["qmap", "--q-step", "5"]) == 0
        assert (tmp_path / "qmap.csv").exists()

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "noisyprop", "critical-init", "--noise", "mult:gaussian(0)"],
                              capture_output=True, text=True, check=False)
        assert proc.returncode == 0 and "sigma_w=1.4142135623730951" in proc.stdout
