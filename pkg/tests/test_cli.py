import csv
import json
from pathlib import Path

import pytest

from krigwrap import cli
from krigwrap.cli import RUN_ROOT_ENV, main

from test_config_pipeline import TINY


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def ws(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(RUN_ROOT_ENV, str(tmp_path / "root"))
    (tmp_path / "tiny.cfg").write_text("\n".join(s.replace("=", " = ") for s in TINY) + "\n")
    return tmp_path


class TestPrepare:
    def test_synthetic_layout_and_hash(self, ws):
        assert main(["prepare", "--synthetic", "n_nodes=60,n_steps=2016,seed=0", "--out", "p"]) == 0
        names = sorted(p.name for p in (ws / "p").iterdir())
        assert names == sorted(["normalized.csv", "meta.csv", "adj.csv", "mask.csv", "splits.csv", "manifest.json"])
        h1 = json.loads((ws / "p/manifest.json").read_text())["content_hash"]
        assert main(["prepare", "--synthetic", "n_nodes=60,n_steps=2016,seed=0", "--out", "p", "--force"]) == 0
        assert json.loads((ws / "p/manifest.json").read_text())["content_hash"] == h1
        assert main(["prepare", "--synthetic", "n_nodes=60,n_steps=2016,seed=0", "--out", "q"]) == 0
        assert json.loads((ws / "q/manifest.json").read_text())["content_hash"] == h1

    def test_missing_meta(self, ws, capsys):
        (ws / "s.csv").write_text("1,2\n3,4\n")
        assert main(["prepare", "--series", "s.csv", "--meta", "gone/meta.csv", "--out", "p"]) == 2
        assert "gone/meta.csv" in capsys.readouterr().err

    def test_malformed_csv_line(self, ws, capsys):
        (ws / "s.csv").write_text("1,2,3\n3,x,4\n")
        (ws / "m.csv").write_text("sensor_id,x,y\na,0,0\nb,1,1\n")
        assert main(["prepare", "--series", "s.csv", "--meta", "m.csv", "--out", "p"]) == 2
        assert "s.csv:2" in capsys.readouterr().err

    def test_from_files_then_train(self, ws):
        assert main(["prepare", "--synthetic", "n_nodes=12,n_steps=288", "--out", "p"]) == 0
        assert main(["train", "--config", "tiny.cfg", "--data", "p", "--variant", "vanilla", "--out", "r"]) == 0
        assert (ws / "r/results.csv").is_file()


class TestRuns:
    def test_train_artifacts_skip_force_and_reeval(self, ws, capsys):
        assert main(["train", "--config", "tiny.cfg", "--variant", "full", "--out", "t"]) == 0
        for f in ("history.csv", "checkpoint.npz", "results.csv", "config.txt", "manifest.json",
                  "offsets.csv", "index/window_emb.csv", "index/node_emb.csv"):
            assert (ws / "t" / f).is_file(), f
        man = json.loads((ws / "t/manifest.json").read_text())
        assert man["status"] == "complete" and len(man["content_hash"]) == 64
        assert "train.max_epochs = 2" in (ws / "t/config.txt").read_text()
        capsys.readouterr()
        assert main(["train", "--config", "tiny.cfg", "--variant", "full", "--out", "t"]) == 0
        assert "skipping" in capsys.readouterr().out
        assert main(["train", "--config", "tiny.cfg", "--variant", "full", "--out", "t", "--force"]) == 0
        assert json.loads((ws / "t/manifest.json").read_text())["content_hash"] == man["content_hash"]
        assert main(["eval", "--run", "t"]) == 0
        assert _rows(ws / "t/eval.csv")[0]["mae"] == _rows(ws / "t/results.csv")[0]["mae"]

    def test_other_run_in_directory_refused(self, ws):
        assert main(["train", "--config", "tiny.cfg", "--variant", "vanilla", "--out", "t"]) == 0
        assert main(["train", "--config", "tiny.cfg", "--variant", "full", "--out", "t"]) == 2

    def test_default_run_dir_under_env_root(self, ws):
        assert main(["train", "--config", "tiny.cfg", "--variant", "vanilla"]) == 0
        runs = list((ws / "root").glob("train-*"))
        assert len(runs) == 1 and (runs[0] / "results.csv").is_file()
        assert main(["--run-root", "elsewhere", "train", "--config", "tiny.cfg", "--variant", "vanilla"]) == 0
        assert len(list((ws / "elsewhere").glob("train-*"))) == 1

    def test_ablate_six_rows_per_seed(self, ws):
        assert main(["ablate", "--config", "tiny.cfg", "--set", "grid.seeds=0,1", "--out", "a"]) == 0
        rows = _rows(ws / "a/results.csv")
        for s in ("0", "1"):
            assert sorted(r["variant"] for r in rows if r["seed"] == s) == sorted(
                ["full", "wo_J", "wo_M", "wo_A", "wo_L", "wo_JM"])

    def test_sweep_24_rows_and_plot(self, ws):
        args = ["sweep", "--config", "tiny.cfg", "--set", "train.max_epochs=1", "--set", "train.patience=1",
                "--set", "train.batches_per_epoch=1", "--set", "grid.rates=0.2,0.4,0.6,0.8",
                "--set", "grid.seeds=0,1,2", "--set", "grid.unobserved_ratios=0.2,0.5", "--out", "s"]
        assert main(args) == 0
        rows = _rows(ws / "s/results.csv")
        assert len(rows) == 24 and {r["variant"] for r in rows} == {"vanilla", "full"}
        assert len(_rows(ws / "s/results_unobserved.csv")) == 12
        assert main(["plot", "--run", "s", "--out", "figs"]) == 0
        assert {p.name for p in (ws / "figs").iterdir()} >= {"robustness.png", "comparison.png",
                                                             "robustness_unobserved.png"}

    def test_resume_partial_grid(self, ws, monkeypatch):
        from krigwrap import evaluation
        calls = []
        real = evaluation.run_single

        def counting(*a, **k):
            calls.append(a[2])
            if len(calls) == 3:
                raise RuntimeError("simulated crash")
            return real(*a, **k)
        monkeypatch.setattr(evaluation, "run_single", counting)
        args = ["eval", "--config", "tiny.cfg", "--set", "grid.seeds=0,1", "--out", "e"]
        assert main(args) == 1
        assert len(_rows(ws / "e/results.partial.csv")) == 2
        calls.clear()
        assert main(args) == 0
        assert len(calls) == 2 and len(_rows(ws / "e/results.csv")) == 4
        assert not (ws / "e/results.partial.csv").exists()


class TestVerifyPlotErrors:
    def test_verify(self, ws):
        assert main(["verify", "--out", "v"]) == 0
        rows = _rows(ws / "v/theory_report.csv")
        assert len(rows) >= 10 and all(r["pass"] == "True" for r in rows)

    def test_plot_from_csvs_only(self, ws):
        assert main(["train", "--config", "tiny.cfg", "--variant", "full", "--out", "t"]) == 0
        for f in ("checkpoint.npz", "manifest.json", "config.txt"):
            (ws / "t" / f).unlink()
        assert main(["plot", "--run", "t"]) == 0
        assert {p.name for p in (ws / "t/plots").iterdir()} == {"loss_curves.png", "comparison.png", "offsets.png"}

    def test_usage_errors(self, ws):
        assert main([]) == 2
        assert main(["train", "--seed", "x"]) == 2
        assert main(["train", "--set", "train.nope=1"]) == 2
        assert main(["train", "--config", "missing.cfg"]) == 2
        assert main(["plot", "--run", "nowhere"]) == 2
        assert main(["train", "--data", "nowhere"]) == 2

    def test_internal_error_exit_one(self, ws, monkeypatch):
        parser_func = cli.build_parser
        monkeypatch.setattr(cli, "build_parser", lambda: _patched(parser_func()))
        assert main(["verify", "--out", "v"]) == 1

    def test_help(self, capsys):
        assert main(["--help"]) == 0
        out = capsys.readouterr().out
        for sub in ("prepare", "train", "eval", "ablate", "sweep", "verify", "plot"):
            assert sub in out


def _patched(parser):
    sub = next(a for a in parser._actions if a.dest == "command")
    sub.choices["verify"].set_defaults(func=lambda args: 1 / 0)
    return parser
