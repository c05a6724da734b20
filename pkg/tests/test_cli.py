import json

import numpy as np
import pytest
import tomli

from psipde.cli import THREADS_ENV, build_parser, main
from psipde.core import read_field
from psipde.pipeline import EXIT_CONFIG

SMALL_GRID_TOML = """
[grid]
x_min = -1.0
x_max = 1.0
n_x = 129
t_min = 0.0
t_max = 1.0
n_t = 101
"""

QUICK_STAGES_TOML = """
[denoise]
max_epochs = 100
patience = 30

[select]
n_val = 60

[refine]
max_iters = 5
internal_resolution = 128
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A directory with a simulated measured field and the config files the
    chained subcommand tests share."""
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "config.toml"
    cfg.write_text(SMALL_GRID_TOML + QUICK_STAGES_TOML)
    rc = main(
        [
            "simulate", "--system", "burgers1d", "--noise", "0.1",
            "--out", str(d / "measured.psig"),
            "--clean-out", str(d / "clean.psig"),
            "--config", str(cfg), "--seed", "1",
        ]
    )
    assert rc == 0
    return d


class TestParser:
    def test_subcommand_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_all_subcommands_exist(self):
        parser = build_parser()
        for cmd, extra in [
            ("simulate", ["--system", "kdv", "--out", "x"]),
            ("denoise", ["--in", "a", "--out", "b"]),
            ("discover", ["--in", "a", "--out", "b"]),
            ("refine", ["--trace", "a", "--data", "b", "--report", "c"]),
            ("run", []),
            ("compare-stridge", ["--in", "a", "--grid-of-params", "p", "--out", "o"]),
            ("config", []),
        ]:
            args = parser.parse_args([cmd] + extra)
            assert args.command == cmd

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as ei:
            main(["--version"])
        assert ei.value.code == 0


class TestConfigCommand:
    def test_print_defaults_is_valid_toml(self, capsys):
        assert main(["config", "--print-defaults"]) == 0
        out = capsys.readouterr().out
        raw = tomli.loads(out)
        assert raw["pipeline"]["system"] == "burgers1d"

    def test_validate_ok(self, tmp_path, capsys):
        p = tmp_path / "ok.toml"
        p.write_text('[pipeline]\nsystem = "kdv"\n')
        assert main(["config", "--config", str(p)]) == 0
        assert "OK" in capsys.readouterr().out

    def test_validate_rejects_unknown_key(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[pipeline]\nbogus = 1\n")
        with pytest.raises(SystemExit) as ei:
            main(["config", "--config", str(p)])
        assert ei.value.code == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(SystemExit) as ei:
            main(["config", "--config", str(tmp_path / "nope.toml")])
        assert ei.value.code == EXIT_CONFIG


class TestSimulate:
    def test_fields_written(self, workdir):
        measured = read_field(workdir / "measured.psig")
        clean = read_field(workdir / "clean.psig")
        assert measured.grid == clean.grid
        assert measured.grid.n_x == 129
        assert not np.allclose(measured.values, clean.values)

    def test_unknown_system_rejected_by_parser(self):
        with pytest.raises(SystemExit):
            main(["simulate", "--system", "magic", "--out", "x.psig"])


class TestDenoise:
    def test_denoise_roundtrip(self, workdir):
        out = workdir / "denoised.psig"
        rc = main(
            [
                "denoise", "--in", str(workdir / "measured.psig"),
                "--out", str(out), "--config", str(workdir / "config.toml"),
            ]
        )
        assert rc == 0
        den = read_field(out)
        assert den.grid.n_x == 129

    def test_missing_input(self, workdir):
        with pytest.raises(SystemExit):
            main(["denoise", "--in", str(workdir / "nope.psig"), "--out", "d.psig"])


class TestDiscoverRefine:
    def test_discover_then_refine(self, workdir, capsys):
        trace = workdir / "trace.json"
        rc = main(
            [
                "discover", "--in", str(workdir / "clean.psig"),
                "--out", str(trace), "--config", str(workdir / "config.toml"),
            ]
        )
        assert rc == 0
        data = json.loads(trace.read_text())
        main_branches = [b for b in data["branches"] if b["is_main"]]
        assert main_branches[0]["support"] == [6, 9]

        report = workdir / "refine.json"
        rc = main(
            [
                "refine", "--trace", str(trace),
                "--data", str(workdir / "clean.psig"),
                "--report", str(report), "--config", str(workdir / "config.toml"),
            ]
        )
        assert rc == 0
        rep = json.loads(report.read_text())
        win = rep["candidates"][rep["winner"]]
        assert win["optimized"]["support"] == [6, 9]
        assert "u*u_x" in capsys.readouterr().out


class TestRun:
    def test_full_run(self, workdir, tmp_path, capsys):
        cfg = tmp_path / "run.toml"
        cfg.write_text(
            '[pipeline]\nsystem = "burgers1d"\n'
            + SMALL_GRID_TOML.replace("[grid]", "[grid]")
            + QUICK_STAGES_TOML
        )
        out_dir = tmp_path / "artifacts"
        rc = main(["run", "--config", str(cfg), "--out-dir", str(out_dir)])
        assert rc == 0
        assert (out_dir / "report.json").exists()
        assert (out_dir / "report.csv").exists()
        assert "u*u_x" in capsys.readouterr().out

    def test_requires_config(self):
        with pytest.raises(SystemExit) as ei:
            main(["run"])
        assert ei.value.code == EXIT_CONFIG

    def test_bad_config_exit_code(self, tmp_path):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("[pipeline]\nbogus = 1\n")
        with pytest.raises(SystemExit) as ei:
            main(["run", "--config", str(cfg)])
        assert ei.value.code == EXIT_CONFIG


class TestCompareStridge:
    def test_table_written(self, workdir):
        params = workdir / "params.toml"
        params.write_text(
            "[[params]]\nridge_lambda = 1e-5\nd_tol = 1.0\n"
            "[[params]]\nridge_lambda = 1e-1\nd_tol = 0.1\n"
        )
        out = workdir / "stridge.csv"
        rc = main(
            [
                "compare-stridge", "--in", str(workdir / "clean.psig"),
                "--grid-of-params", str(params), "--out", str(out),
            ]
        )
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("ridge_lambda,")
        assert len(lines) == 3

    def test_params_file_must_have_tables(self, workdir, tmp_path):
        p = tmp_path / "empty.toml"
        p.write_text("x = 1\n")
        with pytest.raises(SystemExit) as ei:
            main(
                [
                    "compare-stridge", "--in", str(workdir / "clean.psig"),
                    "--grid-of-params", str(p), "--out", str(tmp_path / "o.csv"),
                ]
            )
        assert ei.value.code == EXIT_CONFIG


class TestThreadsEnv:
    def test_env_fallback(self, monkeypatch):
        from psipde.cli import _threads

        class Args:
            threads = None

        monkeypatch.setenv(THREADS_ENV, "3")
        assert _threads(Args()) == 3
        monkeypatch.setenv(THREADS_ENV, "junk")
        assert _threads(Args()) == 1
        monkeypatch.delenv(THREADS_ENV)
        assert _threads(Args()) == 1

    def test_flag_wins(self, monkeypatch):
        from psipde.cli import _threads

        class Args:
            threads = 2

        monkeypatch.setenv(THREADS_ENV, "7")
        assert _threads(Args()) == 2
