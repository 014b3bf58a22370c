import json

import numpy as np
import pytest

from stdiff.cli import main
from stdiff.data import (SyntheticSpec, generate_synthetic, load_speed_csv,
                         make_windows, save_speed_csv)
from stdiff.graph import load_adjacency, save_adjacency
from stdiff.model import ModelConfig
from stdiff.training import split_dataset

TINY = ModelConfig(K=2, m=2, s=2, d=4, T=6, H=2)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """Synthetic graph + speed CSV on disk, plus a tiny model config."""
    root = tmp_path_factory.mktemp("data")
    graph, series = generate_synthetic(SyntheticSpec(n=4, steps=60, seed=3))
    save_adjacency(graph, root / "adj")
    save_speed_csv(series, root / "speed.csv")
    (root / "config.json").write_text(TINY.to_json() + "\n")
    return root, graph, series


def train_args(dataset_root, out, **extra):
    args = ["train", "--data", str(dataset_root / "speed.csv"),
            "--adj", str(dataset_root / "adj"),
            "--config", str(dataset_root / "config.json"),
            "--out", str(out), "--epochs", "1", "--batch-size", "16"]
    for flag, value in extra.items():
        args += [f"--{flag.replace('_', '-')}", str(value)]
    return args


def strip_wall_time(log_text):
    rows = [line.split(",") for line in log_text.strip().splitlines()]
    return [row[:-1] for row in rows]


class TestBuildAdj:
    def make_inputs(self, tmp_path):
        dists = {("a", "b"): 1.0, ("a", "c"): 2.0, ("b", "c"): 3.0}
        lines = ["from,to,distance"]
        for (u, v), d in dists.items():
            lines += [f"{u},{v},{d}", f"{v},{u},{d}"]
        (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
        (tmp_path / "ids.txt").write_text("a\nb\nc\n")
        return dists

    def test_matches_entrywise_oracle(self, tmp_path):
        dists = self.make_inputs(tmp_path)
        code = main(["build-adj", "--distances", str(tmp_path / "d.csv"),
                     "--ids", str(tmp_path / "ids.txt"),
                     "--out", str(tmp_path / "adj"), "--quantile", "0"])
        assert code == 0
        graph = load_adjacency(tmp_path / "adj")
        sigma = np.std([1.0, 2.0, 3.0, 1.0, 2.0, 3.0])
        dense = graph.adjacency.to_dense()
        idx = {"a": 0, "b": 1, "c": 2}
        for (u, v), d in dists.items():
            w = np.exp(-d * d / sigma ** 2)
            assert dense[idx[u], idx[v]] == pytest.approx(w, rel=1e-12)
            assert dense[idx[v], idx[u]] == pytest.approx(w, rel=1e-12)
        assert np.all(np.diag(dense) == 0)

    def test_quantile_zero_keeps_complete_graph(self, tmp_path):
        self.make_inputs(tmp_path)
        main(["build-adj", "--distances", str(tmp_path / "d.csv"),
              "--ids", str(tmp_path / "ids.txt"),
              "--out", str(tmp_path / "adj"), "--quantile", "0"])
        assert load_adjacency(tmp_path / "adj").adjacency.nnz == 6

    def test_missing_input_exits_2(self, tmp_path):
        (tmp_path / "ids.txt").write_text("a\n")
        code = main(["build-adj", "--distances", str(tmp_path / "nope.csv"),
                     "--ids", str(tmp_path / "ids.txt"),
                     "--out", str(tmp_path / "adj")])
        assert code == 2


class TestSynth:
    def test_deterministic_output(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text('{"n": 4, "steps": 30, "seed": 11}\n')
        for name in ("a", "b"):
            assert main(["synth", "--spec", str(spec),
                         "--out", str(tmp_path / name)]) == 0
        assert ((tmp_path / "a_speed.csv").read_bytes()
                == (tmp_path / "b_speed.csv").read_bytes())
        assert ((tmp_path / "a_adj.csv").read_bytes()
                == (tmp_path / "b_adj.csv").read_bytes())

    def test_round_trips_through_loader(self, tmp_path):
        main(["synth", "--out", str(tmp_path / "s")])
        graph = load_adjacency(tmp_path / "s_adj")
        series = load_speed_csv(tmp_path / "s_speed.csv", graph=graph)
        assert len(series) == SyntheticSpec().steps


class TestTrain:
    def test_smoke_writes_artifacts(self, dataset, tmp_path):
        root, _graph, _series = dataset
        out = tmp_path / "run"
        assert main(train_args(root, out)) == 0
        for name in ("manifest.json", "config.json", "best.stdf", "log.csv"):
            assert (out / name).exists(), name
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert str(root / "speed.csv") in manifest["inputs"]

    def test_same_seed_bit_identical(self, dataset, tmp_path):
        root, _graph, _series = dataset
        for name in ("r1", "r2"):
            assert main(train_args(root, tmp_path / name, seed=7)) == 0
        a, b = tmp_path / "r1", tmp_path / "r2"
        assert (a / "best.stdf").read_bytes() == (b / "best.stdf").read_bytes()
        assert (strip_wall_time((a / "log.csv").read_text())
                == strip_wall_time((b / "log.csv").read_text()))

    def test_ablation_recorded_in_manifest(self, dataset, tmp_path):
        root, _graph, _series = dataset
        out = tmp_path / "abl"
        assert main(train_args(root, out, ablation="no_iteration")) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["model"]["ablation"] == "no_iteration"
        saved = ModelConfig.from_json((out / "config.json").read_text())
        assert saved.effective_m == saved.T

    def test_manifest_hashes_inputs(self, dataset, tmp_path):
        import hashlib
        root, _graph, _series = dataset
        out = tmp_path / "run"
        main(train_args(root, out))
        manifest = json.loads((out / "manifest.json").read_text())
        digest = hashlib.sha256((root / "speed.csv").read_bytes()).hexdigest()
        assert manifest["inputs"][str(root / "speed.csv")] == digest

    def test_too_short_series_exits_2(self, dataset, tmp_path):
        root, graph, series = dataset
        short = type(series)(series.timestamps[:9], series.values[:9], series.ids)
        save_speed_csv(short, tmp_path / "short.csv")
        code = main(["train", "--data", str(tmp_path / "short.csv"),
                     "--adj", str(root / "adj"),
                     "--config", str(root / "config.json"),
                     "--out", str(tmp_path / "run"), "--epochs", "1"])
        assert code == 2


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    root, graph, series = dataset
    out = tmp_path_factory.mktemp("trained")
    assert main(train_args(root, out)) == 0
    return root, out, series


class TestEval:
    @pytest.mark.filterwarnings("ignore:training stream shorter than one week")
    def test_report_has_model_and_baseline_rows(self, trained, tmp_path):
        root, run, _series = trained
        out = tmp_path / "report.csv"
        code = main(["eval", "--checkpoint", str(run / "best.stdf"),
                     "--data", str(root / "speed.csv"),
                     "--adj", str(root / "adj"), "--out", str(out)])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "model,horizon_min,mae,rmse,mape_pct,n_samples"
        labels = {line.split(",")[0] for line in lines[1:]}
        assert labels == {"istd-gcn", "ha"}
        for line in lines[1:]:
            parts = line.split(",")
            assert len(parts) == 6
            assert float(parts[2]) >= 0 and float(parts[3]) >= float(parts[2]) - 1e-9

    def test_missing_checkpoint_exits_2(self, trained, tmp_path):
        root, _run, _series = trained
        code = main(["eval", "--checkpoint", str(tmp_path / "nope.stdf"),
                     "--data", str(root / "speed.csv"),
                     "--adj", str(root / "adj"),
                     "--config", str(root / "config.json"),
                     "--out", str(tmp_path / "r.csv")])
        assert code == 2


class TestPredict:
    def test_row_count_matches_windows(self, trained, tmp_path):
        root, run, series = trained
        out = tmp_path / "pred.csv"
        code = main(["predict", "--checkpoint", str(run / "best.stdf"),
                     "--data", str(root / "speed.csv"),
                     "--adj", str(root / "adj"), "--out", str(out)])
        assert code == 0
        windows = make_windows(series, TINY.T, TINY.H)
        _tr, _va, test_w = split_dataset(windows)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "timestamp,vertex_id,horizon_min,pred,actual"
        assert len(lines) - 1 == len(test_w) * len(series.ids) * TINY.H

    def test_actuals_round_trip(self, trained, tmp_path):
        root, run, series = trained
        out = tmp_path / "pred.csv"
        main(["predict", "--checkpoint", str(run / "best.stdf"),
              "--data", str(root / "speed.csv"),
              "--adj", str(root / "adj"), "--out", str(out)])
        first = out.read_text().strip().splitlines()[1].split(",")
        ts, vid, horizon = int(first[0]), first[1], int(first[2])
        t_index = int(np.where(series.timestamps == ts)[0][0])
        v_index = series.ids.index(vid)
        assert horizon == 5
        assert float(first[4]) == series.values[t_index, v_index]


class TestGradcheck:
    def test_passes_at_default_tolerance(self, capsys):
        assert main(["gradcheck"]) == 0
        assert "pass" in capsys.readouterr().out

    def test_fails_at_absurd_tolerance(self, capsys):
        assert main(["gradcheck", "--tol", "1e-15"]) == 1
        assert "FAIL" in capsys.readouterr().out
