"""CLI tests: config plumbing, verbs, exit codes, SVG and report output."""

import json
import re
import warnings

import numpy as np
import pytest

import eoslab.cli as cli
import eoslab.data as dat
import eoslab.experiment as exp
from eoslab.errors import ConfigError


def run_main(argv):
    """Invoke the CLI with numeric warnings silenced (divergence overflows)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with np.errstate(all="ignore"):
            return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One generated dataset trained over three sizes and analyzed."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    dataset = root / "dice.eosd"
    assert run_main(["gen-dice", "--n-per-class", 5, "--seed", 3, "--out", dataset]) == 0
    assert (
        run_main(
            [
                "train",
                "--dataset",
                dataset,
                "--out-dir",
                root / "runs",
                "--max-steps",
                60,
                "--set",
                "train.sizes=12,18,24",
                "--set",
                "model.depth=3",
                "--set",
                "model.width=6",
                "--set",
                "solver.snapshot_interval=5",
            ]
        )
        == 0
    )
    run_dirs = sorted(p for p in (root / "runs").iterdir() if p.is_dir())
    assert run_main(["analyze", *run_dirs]) == 0
    return {"root": root, "dataset": dataset, "runs": run_dirs}


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------


class TestConfigText:
    def test_parses_keys_comments_and_blanks(self):
        text = "\n".join(
            [
                "# a comment",
                "",
                "solver.eta = 0.5",
                "dice.n_per_class=7   # trailing comment",
                "  train.sizes = 12,24  ",
            ]
        )
        assert cli.parse_config_text(text) == {
            "solver.eta": "0.5",
            "dice.n_per_class": "7",
            "train.sizes": "12,24",
        }

    def test_rejects_malformed_lines(self):
        with pytest.raises(ConfigError, match=":1"):
            cli.parse_config_text("solver eta 0.5")
        with pytest.raises(ConfigError):
            cli.parse_config_text("eta=0.5")  # no section prefix

    def test_known_key_check_owns_only_its_sections(self):
        settings = {"dice.n_per_class": "3", "solver.eta": "1.0"}
        cli.check_known_keys(settings, {"dice": {"n_per_class", "seed", "out"}})
        with pytest.raises(ConfigError, match="dice.seed"):
            cli.check_known_keys(
                {"dice.sed": "1"}, {"dice": {"n_per_class", "seed", "out"}}
            )

    def test_typed_getters(self):
        settings = {"a.flag": "true", "a.off": "0", "a.list": "1,2,3", "a.bad": "x"}
        assert cli.get_bool(settings, "a.flag", False) is True
        assert cli.get_bool(settings, "a.off", True) is False
        assert cli.get_bool(settings, "a.miss", True) is True
        assert cli.get_int_list(settings, "a.list", ()) == (1, 2, 3)
        with pytest.raises(ConfigError, match="a.bad"):
            cli.get_int(settings, "a.bad", 0)
        with pytest.raises(ConfigError):
            cli.get_bool(settings, "a.bad", False)

    def test_thread_budget_caps_from_environment(self, monkeypatch):
        monkeypatch.delenv("EOS_THREADS", raising=False)
        assert cli.thread_budget(4) == 4
        monkeypatch.setenv("EOS_THREADS", "2")
        assert cli.thread_budget(4) == 2
        assert cli.thread_budget(1) == 1
        monkeypatch.setenv("EOS_THREADS", "zero")
        with pytest.raises(ConfigError):
            cli.thread_budget(4)
        monkeypatch.setenv("EOS_THREADS", "0")
        with pytest.raises(ConfigError):
            cli.thread_budget(4)


# ---------------------------------------------------------------------------
# gen-dice
# ---------------------------------------------------------------------------


class TestGenDice:
    def test_writes_six_class_image_dataset(self, tmp_path):
        out = tmp_path / "d.eosd"
        assert run_main(["gen-dice", "--n-per-class", 2, "--out", out]) == 0
        ds = dat.load_dataset(out)
        assert ds.n_samples == 12
        assert ds.num_classes == 6
        assert ds.dim == 32 * 32

    def test_same_seed_is_idempotent(self, tmp_path):
        a, b, c = (tmp_path / name for name in ("a.eosd", "b.eosd", "c.eosd"))
        run_main(["gen-dice", "--n-per-class", 2, "--seed", 5, "--out", a])
        run_main(["gen-dice", "--n-per-class", 2, "--seed", 5, "--out", b])
        run_main(["gen-dice", "--n-per-class", 2, "--seed", 6, "--out", c])
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes() != c.read_bytes()

    def test_minimal_dataset_has_one_image_per_class(self, tmp_path):
        out = tmp_path / "d.eosd"
        assert run_main(["gen-dice", "--n-per-class", 1, "--out", out]) == 0
        assert dat.load_dataset(out).n_samples == 6

    def test_flag_beats_set_beats_config_file(self, tmp_path):
        config = tmp_path / "c.cfg"
        config.write_text("dice.n_per_class = 3\ndice.out = %s\n" % (tmp_path / "x.eosd"))
        assert run_main(["gen-dice", "--config", config]) == 0
        assert dat.load_dataset(tmp_path / "x.eosd").n_samples == 18
        assert (
            run_main(["gen-dice", "--config", config, "--set", "dice.n_per_class=2"])
            == 0
        )
        assert dat.load_dataset(tmp_path / "x.eosd").n_samples == 12
        assert (
            run_main(
                [
                    "gen-dice",
                    "--config",
                    config,
                    "--set",
                    "dice.n_per_class=2",
                    "--n-per-class",
                    1,
                ]
            )
            == 0
        )
        assert dat.load_dataset(tmp_path / "x.eosd").n_samples == 6

    def test_bad_count_is_a_config_error(self, tmp_path, capsys):
        rc = run_main(["gen-dice", "--n-per-class", 0, "--out", tmp_path / "d.eosd"])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_unknown_config_key_is_a_config_error(self, tmp_path, capsys):
        rc = run_main(
            ["gen-dice", "--set", "dice.nperclass=2", "--out", tmp_path / "d.eosd"]
        )
        assert rc == 2
        assert "dice.n_per_class" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


class TestTrain:
    def test_grid_runs_and_reports_status(self, pipeline, capsys):
        manifest = (pipeline["root"] / "runs" / "manifest.txt").read_text()
        assert len(manifest.splitlines()) == 3
        for run_dir in pipeline["runs"]:
            meta = json.loads((run_dir / "run_meta.json").read_text())
            assert meta["status"] in ("converged", "budget")
            assert meta["widths"][0] == 1024

    def test_converges_at_default_threshold(self, pipeline):
        meta = json.loads(
            (pipeline["runs"][0] / "run_meta.json").read_text()
        )
        if meta["status"] == "converged":
            assert meta["final_loss"] <= 0.01

    def test_missing_dataset_key_is_config_error(self, tmp_path, capsys):
        assert run_main(["train", "--out-dir", tmp_path / "r"]) == 2
        assert "train.dataset" in capsys.readouterr().err

    def test_missing_dataset_file_is_data_error(self, tmp_path):
        rc = run_main(
            ["train", "--dataset", tmp_path / "nope.eosd", "--out-dir", tmp_path / "r"]
        )
        assert rc == 3

    def test_unknown_solver_key_is_config_error(self, pipeline, tmp_path, capsys):
        rc = run_main(
            [
                "train",
                "--dataset",
                pipeline["dataset"],
                "--out-dir",
                tmp_path / "r",
                "--set",
                "solver.etaa=2",
            ]
        )
        assert rc == 2
        assert "solver.eta" in capsys.readouterr().err

    def test_divergence_exits_4_and_names_the_step(self, tmp_path, capsys):
        bad = dat.LabeledDataset(
            np.full((12, 4), 1e308),
            np.arange(12) % 2,
            2,
            dat.Provenance("synthetic", 0, 12),
        )
        dat.save_dataset(bad, tmp_path / "bad.eosd")
        rc = run_main(
            [
                "train",
                "--dataset",
                tmp_path / "bad.eosd",
                "--out-dir",
                tmp_path / "r",
                "--max-steps",
                5,
                "--set",
                "model.depth=2",
                "--set",
                "model.width=4",
            ]
        )
        assert rc == 4
        assert re.search(r"diverged at step \d+", capsys.readouterr().err)

    def test_bad_thread_cap_is_config_error(self, pipeline, tmp_path, monkeypatch):
        monkeypatch.setenv("EOS_THREADS", "many")
        rc = run_main(
            ["train", "--dataset", pipeline["dataset"], "--out-dir", tmp_path / "r"]
        )
        assert rc == 2


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


class TestAnalyze:
    def test_writes_one_row_per_snapshot(self, pipeline):
        for run_dir in pipeline["runs"]:
            csv_lines = (run_dir / "metrics.csv").read_text().splitlines()
            snaps = len(list(run_dir.glob("snap_*.eosl")))
            assert len(csv_lines) == snaps + 1

    def test_reanalysis_is_idempotent(self, pipeline):
        run_dir = pipeline["runs"][0]
        before = (run_dir / "metrics.csv").read_bytes()
        assert run_main(["analyze", run_dir]) == 0
        assert (run_dir / "metrics.csv").read_bytes() == before

    def test_non_run_directory_is_data_error(self, tmp_path, capsys):
        assert run_main(["analyze", tmp_path]) == 3
        assert "run_meta.json" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# fit-powerlaw
# ---------------------------------------------------------------------------


class TestFitPowerlaw:
    def test_reports_constants_and_fit_quality(self, pipeline, capsys):
        assert run_main(["fit-powerlaw", *pipeline["runs"]]) == 0
        report = capsys.readouterr().out
        assert "c1 =" in report and "c2 =" in report
        assert "R^2" in report

    def test_pool_mode_keeps_every_run(self, pipeline, capsys):
        assert run_main(["fit-powerlaw", *pipeline["runs"], "--mode", "pool"]) == 0
        assert "R^2" in capsys.readouterr().out

    def test_too_few_sizes_is_data_error(self, pipeline, capsys):
        assert run_main(["fit-powerlaw", pipeline["runs"][0]]) == 3
        assert "3 distinct sizes" in capsys.readouterr().err

    def test_unanalyzed_run_is_data_error(self, pipeline, tmp_path, capsys):
        bare = tmp_path / "bare"
        bare.mkdir()
        (bare / "run_meta.json").write_text(json.dumps({"size": 12}))
        assert run_main(["fit-powerlaw", bare]) == 3
        assert "analyze" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------


class TestPlot:
    def test_writes_one_svg_per_metric(self, pipeline, tmp_path):
        out = tmp_path / "plots"
        rc = run_main(
            [
                "plot",
                *pipeline["runs"],
                "--metric",
                "lambda1_full",
                "--metric",
                "loss",
                "--out-dir",
                out,
            ]
        )
        assert rc == 0
        assert sorted(p.name for p in out.glob("*.svg")) == [
            "lambda1_full.svg",
            "loss.svg",
        ]
        body = (out / "loss.svg").read_text()
        assert body.startswith("<svg ")
        assert "<polyline" in body

    def test_rendering_is_byte_stable(self, pipeline, tmp_path):
        args = ["plot", *pipeline["runs"], "--metric", "rho_K"]
        run_main(args + ["--out-dir", tmp_path / "a"])
        run_main(args + ["--out-dir", tmp_path / "b"])
        assert (tmp_path / "a" / "rho_K.svg").read_bytes() == (
            tmp_path / "b" / "rho_K.svg"
        ).read_bytes()

    def test_same_size_shares_color_and_sizes_differ(self, pipeline, tmp_path):
        out = tmp_path / "plots"
        run_main(
            [
                "plot",
                pipeline["runs"][0],
                pipeline["runs"][0],
                pipeline["runs"][1],
                "--metric",
                "loss",
                "--out-dir",
                out,
            ]
        )
        strokes = re.findall(
            r'<polyline[^>]*stroke="(#\w+)"', (out / "loss.svg").read_text()
        )
        assert len(set(strokes)) == 2
        assert strokes[0] == strokes[1]
        assert strokes[0] != strokes[-1]

    def test_empty_metrics_file_renders_empty_axes(self, tmp_path):
        exp.emit_metrics_csv([], tmp_path / "empty.csv")
        rc = run_main(
            ["plot", tmp_path / "empty.csv", "--metric", "loss", "--out-dir", tmp_path]
        )
        assert rc == 0
        body = (tmp_path / "loss.svg").read_text()
        assert "<polyline" not in body
        assert "<rect" in body

    def test_unknown_column_lists_available(self, pipeline, tmp_path, capsys):
        rc = run_main(
            [
                "plot",
                pipeline["runs"][0],
                "--metric",
                "sharpness",
                "--out-dir",
                tmp_path,
            ]
        )
        assert rc == 2
        err = capsys.readouterr().err
        assert "available" in err
        assert "lambda1_full" in err

    def test_log_scale_and_time_axis(self, pipeline, tmp_path):
        rc = run_main(
            [
                "plot",
                pipeline["runs"][0],
                "--metric",
                "loss",
                "--log-y",
                "--x-axis",
                "flow_time",
                "--out-dir",
                tmp_path,
            ]
        )
        assert rc == 0
        assert "<polyline" in (tmp_path / "loss.svg").read_text()


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


class TestVerify:
    def test_fresh_suite_passes_every_identity(self, capsys):
        assert run_main(["verify", "--seed", 1]) == 0
        out = capsys.readouterr().out
        assert "overall: PASS" in out
        table_lines = [l for l in out.splitlines() if l.endswith("PASS")]
        assert len(table_lines) == 10
        assert all(re.search(r"\d\.\d{3}e[+-]\d{2}", l) for l in table_lines)

    def test_injected_fault_fails_reconstruction_checks(self, capsys):
        assert run_main(["verify", "--seed", 1, "--inject-g-fault"]) == 5
        out = capsys.readouterr().out
        assert "overall: FAIL" in out
        failing = [l for l in out.splitlines() if l.endswith("FAIL")]
        assert any("reconstruct" in l for l in failing)

    def test_checks_are_seed_stable(self, capsys):
        run_main(["verify", "--seed", 4])
        first = capsys.readouterr().out
        run_main(["verify", "--seed", 4])
        assert capsys.readouterr().out == first


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


class TestArguments:
    def test_unknown_verb_and_flag_are_usage_errors(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["transmogrify"])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            cli.main(["verify", "--frobnicate"])
        assert exc.value.code == 2

    def test_help_lists_all_verbs(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for verb in ("gen-dice", "train", "analyze", "fit-powerlaw", "plot", "verify"):
            assert verb in out

    def test_missing_config_file_is_config_error(self, tmp_path, capsys):
        assert run_main(["verify", "--config", tmp_path / "nope.cfg"]) == 2
        assert "not found" in capsys.readouterr().err
