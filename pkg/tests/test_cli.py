import csv
import json

import pytest
import yaml

from bdecf import cli
from bdecf.evaluation import METRIC_NAMES, read_csv

from conftest import random_dataset

TINY = [
    "--model.hidden_dims", "[8]", "--model.embedding_dim", "8", "--model.num_tokens", "2",
    "--model.num_heads", "2", "--model.mlp_dims", "[4]", "--training.epochs", "2",
    "--training.batch_size", "64", "--ensemble.depth_cycle", "[[8],[8,4]]",
    "--ensemble.meta_epochs", "2", "--eval.num_negatives", "20",
]


@pytest.fixture(scope="module")
def ratings(tmp_path_factory):
    ds = random_dataset(25, 40, 22, 7)
    path = tmp_path_factory.mktemp("data") / "u.data"
    with open(path, "w") as fh:
        for u, i, r, t in zip(ds.users, ds.items, ds.ratings, ds.timestamps):
            fh.write(f"{u + 1}\t{i + 1}\t{int(r)}\t{1000 + t}\n")
    return path


def run(*args):
    return cli.main([str(a) for a in args])


def args_for(ratings, K=3):
    return ["--dataset.path", ratings, "--dataset.min_item_raters", "1", "--ensemble.K", K, *TINY]


@pytest.fixture(scope="module")
def trained(ratings, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "train"
    assert run("train", *args_for(ratings), "--seed", 7, "--output", out) == 0
    return out


class TestCommands:
    def test_train_outputs(self, trained):
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["command"] == "train"
        ck = json.loads((trained / "checkpoint" / "manifest.json").read_text())
        assert len(ck["learners"]) == 3 and ck["meta"] == "meta.ckpt"
        assert (trained / "config.yaml").is_file()
        assert yaml.safe_load((trained / "config.yaml").read_text())["seed"] == 7
        traces = json.loads((trained / "traces.json").read_text())
        assert len(traces["learner_traces"]) == 3

    def test_train_deterministic(self, ratings, trained, tmp_path):
        assert run("train", *args_for(ratings), "--seed", 7, "--output", tmp_path / "again") == 0
        for f in sorted((trained / "checkpoint").iterdir()):
            assert (tmp_path / "again" / "checkpoint" / f.name).read_bytes() == f.read_bytes()

    def test_snapshot_reproduces_run(self, ratings, trained, tmp_path):
        assert run("train", "--config", trained / "config.yaml", "--output", tmp_path / "snap") == 0
        a = (trained / "checkpoint" / "learner_00.ckpt").read_bytes()
        assert (tmp_path / "snap" / "checkpoint" / "learner_00.ckpt").read_bytes() == a

    def test_evaluate(self, ratings, trained, tmp_path):
        args = ["evaluate", "--checkpoint", trained / "checkpoint", *args_for(ratings)]
        assert run(*args, "--output", tmp_path / "e1") == 0
        assert run(*args, "--output", tmp_path / "e2") == 0
        r1 = json.loads((tmp_path / "e1" / "metrics.json").read_text())
        r2 = json.loads((tmp_path / "e2" / "metrics.json").read_text())
        assert set(r1["metrics"]) == set(METRIC_NAMES)
        assert r1["metrics"] == r2["metrics"] and r1["per_user"] == r2["per_user"]
        row = read_csv(tmp_path / "e1" / "metrics.csv")[0]
        for k in METRIC_NAMES:
            assert row[k] == r1["metrics"][k]

    def test_predict(self, trained, capsys):
        assert run("predict", "--checkpoint", trained / "checkpoint", "--user", 3, "--item", 7,
                   "--with-uncertainty") == 0
        out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert 1 <= out["rating"] <= 5
        assert 1 <= out["rating_mc"] <= 5
        assert len(out["members"]) == 3
        for key in ("reparam_user", "reparam_item", "ensemble_std"):
            assert out[key] >= 0
        assert run("predict", "--checkpoint", trained / "checkpoint", "--user", "nobody",
                   "--item", 7) == cli.EXIT_DATA

    def test_uncertainty(self, ratings, trained, tmp_path):
        assert run("uncertainty", "--checkpoint", trained / "checkpoint", "--method", "reparam",
                   *args_for(ratings), "--output", tmp_path / "u") == 0
        with open(tmp_path / "u" / "uncertainty_reparam_curve.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows and set(rows[0]) == {"ratings_bin", "mean_score", "count"}
        with open(tmp_path / "u" / "uncertainty_reparam_pairs.csv") as fh:
            assert next(csv.reader(fh)) == ["user", "item", "method", "score"]

    def test_sweep(self, ratings, tmp_path):
        assert run("sweep", *args_for(ratings, K=1), "--ensemble.enabled", "false",
                   "--eval.sweep_fractions", "[0.5, 1.0]", "--output", tmp_path / "s") == 0
        rows = read_csv(tmp_path / "s" / "sweep.csv")
        assert [r["fraction"] for r in rows] == [0.5, 1.0]
        assert set(rows[0]) == {"fraction", "train_size", "HR@1", "HR@10", "NDCG@10", "MRR@10"}

    def test_ablate(self, ratings, tmp_path):
        assert run("ablate", *args_for(ratings, K=2), "--variants", "full", "cosine_score",
                   "--output", tmp_path / "a") == 0
        rows = read_csv(tmp_path / "a" / "ablation.csv")
        assert [r["variant"] for r in rows] == ["full", "cosine_score"]
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert "ablation.csv" in manifest["files"]

    def test_ingest(self, ratings, tmp_path):
        assert run("ingest", "--dataset.path", ratings, "--dataset.min_item_raters", "1",
                   "--output", tmp_path / "i") == 0
        stats = json.loads((tmp_path / "i" / "stats.json").read_text())
        assert stats["users"] == 25 and stats["ratings"] == 25 * 22

    def test_output_root_env(self, ratings, tmp_path, monkeypatch):
        monkeypatch.setenv("BDECF_OUTPUT_ROOT", str(tmp_path / "root"))
        assert run("ingest", "--dataset.path", ratings, "--dataset.min_item_raters", "1") == 0
        made = list((tmp_path / "root").iterdir())
        assert len(made) == 1 and made[0].name.startswith("ingest-")


class TestExitCodes:
    def test_missing_dataset_path(self, capsys):
        assert run("train") == cli.EXIT_CONFIG
        assert "dataset.path" in capsys.readouterr().err

    def test_unknown_override(self):
        assert run("train", "--model.bogus", "1") == cli.EXIT_CONFIG

    def test_data_error(self, tmp_path, capsys):
        (tmp_path / "bad").write_text("1\t2\n")
        assert run("ingest", "--dataset.path", tmp_path / "bad", "--output", tmp_path / "o") == cli.EXIT_DATA
        assert ":1:" in capsys.readouterr().err
        assert run("ingest", "--dataset.path", tmp_path / "nope") == cli.EXIT_DATA

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, ratings, tmp_path):
        assert run("train", *args_for(ratings, K=1), "--ensemble.enabled", "false",
                   "--training.learning_rate", "1e300", "--output", tmp_path / "d") == cli.EXIT_DIVERGED

    def test_checkpoint_mismatch(self, ratings, trained, tmp_path):
        other = tmp_path / "u.data"
        other.write_text(ratings.read_text() + "".join(f"99\t{i}\t3\t5\n" for i in range(1, 23)))
        assert run("evaluate", "--checkpoint", trained / "checkpoint", *args_for(other),
                   "--output", tmp_path / "m") == cli.EXIT_MISMATCH
        assert run("evaluate", "--checkpoint", tmp_path / "none", *args_for(ratings)) == cli.EXIT_MISMATCH
