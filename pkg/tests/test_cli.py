import json

import pytest

from cellsense.cli import config_hash, load_config, main
from cellsense.corpus import save_dataset
from cellsense.synthetic import MarkerCorpusParams, marker_corpus


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    """A small end-to-end mock experiment shared by the CLI tests."""
    root = tmp_path_factory.mktemp("exp")
    params = MarkerCorpusParams(cells_per_type=20, noise_pool=100, noise_per_cell=30)
    dataset = marker_corpus(0, params)
    data_path = root / "cells.jsonl"
    vocab_path = root / "vocab.json"
    save_dataset(dataset, data_path, vocab_path=vocab_path)
    markers_path = root / "markers.tsv"
    rows = []
    for t in range(3):
        for r in range(1, 6):
            rows.append(f"type{t}\tH{(t * 3 + r):03d}\t{r}")
    markers_path.write_text("\n".join(rows) + "\n")
    config = {
        "dataset": {"path": str(data_path), "format": "sparse-jsonl",
                    "vocab_path": str(vocab_path)},
        "split": {"test_fraction": 0.5, "seed": 7},
        "budget": {"max_tokens": 52, "prefix_tokens": 8},
        "ablations": [
            {"kind": "identity"},
            {"kind": "shuffle_all", "seed": 1},
        ],
        "provider": {"kind": "mock", "dim": 64, "seed": 0},
        "eval": {"k": 10},
        "rerank": {"subset_size": 20, "runs": 2, "seed": 3},
        "lime": {"n_samples": 200, "seed": 0, "classes": ["type0"], "cells_per_class": 2},
        "markers": {"path": str(markers_path)},
        "out": str(root / "out"),
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config))
    return {"root": root, "config": config_path, "out": root / "out"}


def run_cli(*argv):
    return main(list(argv))


class TestPipeline:
    def test_ingest(self, experiment):
        assert run_cli("ingest", "--config", str(experiment["config"])) == 0
        summary = json.loads((experiment["out"] / "summary.json").read_text())
        assert summary["cells"] == 100
        assert summary["split"] == {"train": 50, "test": 50}

    def test_sentences_and_ablate(self, experiment):
        assert run_cli("sentences", "--config", str(experiment["config"])) == 0
        assert run_cli("ablate", "--config", str(experiment["config"])) == 0
        identity = experiment["out"] / "sentences" / "identity.jsonl"
        shuffled = experiment["out"] / "sentences" / "shuffle_all-s1.jsonl"
        assert identity.exists() and shuffled.exists()
        first = json.loads(identity.read_text().splitlines()[0])
        assert first["text"].startswith("A cell with genes ranked by expression: ")
        assert first["variant"] == "identity"

    def test_embed_and_knn_eval(self, experiment):
        assert run_cli("embed", "--config", str(experiment["config"])) == 0
        assert run_cli("knn-eval", "--config", str(experiment["config"])) == 0
        metrics = json.loads((experiment["out"] / "metrics" / "identity.json").read_text())
        protocol_fields = {
            "accuracy", "macro_precision", "macro_recall", "macro_f1", "ari", "ami"
        }
        assert protocol_fields <= set(metrics)
        assert set(metrics["display"]) == protocol_fields
        shuffled = json.loads(
            (experiment["out"] / "metrics" / "shuffle_all-s1.json").read_text()
        )
        assert metrics["accuracy"] > shuffled["accuracy"]

    def test_metrics_reproducible_byte_identical(self, experiment):
        metrics_path = experiment["out"] / "metrics" / "identity.json"
        before = metrics_path.read_bytes()
        assert run_cli("knn-eval", "--config", str(experiment["config"])) == 0
        assert metrics_path.read_bytes() == before

    def test_cluster_eval(self, experiment):
        assert run_cli("cluster-eval", "--config", str(experiment["config"])) == 0
        doc = json.loads(
            (experiment["out"] / "metrics" / "cluster-identity.json").read_text()
        )
        assert {"ari", "ami", "inertia"} <= set(doc)

    def test_train_head(self, experiment):
        assert run_cli("train-head", "--config", str(experiment["config"])) == 0
        assert (experiment["out"] / "models" / "head-identity.json").exists()
        metrics = json.loads((experiment["out"] / "metrics" / "head-identity.json").read_text())
        assert metrics["accuracy"] > 0.5

    def test_train_fusion_multi_seed(self, experiment, tmp_path):
        base = json.loads(experiment["config"].read_text())
        store = str(experiment["out"] / "stores" / "identity.embs.jsonl")
        base["fusion"] = {
            "modality_a": store,
            "modality_b": store,
            "hidden": 32,
            "epochs": 10,
            "seeds": [0, 1],
        }
        config = tmp_path / "fusion.json"
        config.write_text(json.dumps(base))
        assert run_cli("train-fusion", "--config", str(config)) == 0
        doc = json.loads((experiment["out"] / "metrics" / "fusion.json").read_text())
        assert len(doc["runs"]) == 2
        assert "formatted" in doc["aggregate"]["accuracy"]
        assert (experiment["out"] / "models" / "fusion-seed0.json").exists()

    def test_rerank_with_identity_stub(self, experiment):
        assert run_cli(
            "rerank", "--config", str(experiment["config"]), "--provider", "identity-stub"
        ) == 0
        doc = json.loads((experiment["out"] / "metrics" / "rerank.json").read_text())
        assert len(doc["per_run_accuracy"]) == 2
        assert doc["std_accuracy"] == 0.0
        manifest = (experiment["out"] / "rerank-manifest.jsonl").read_text().splitlines()
        assert len(manifest) == 40  # 20 cells x 2 runs

    def test_rerank_oracle_bounds_identity(self, experiment):
        assert run_cli(
            "rerank", "--config", str(experiment["config"]), "--provider", "oracle-stub"
        ) == 0
        oracle = json.loads((experiment["out"] / "metrics" / "rerank.json").read_text())
        assert oracle["mean_accuracy"] >= 0.0

    def test_lime_attribution_artifacts(self, experiment):
        assert run_cli("lime", "--config", str(experiment["config"])) == 0
        lines = (experiment["out"] / "attributions" / "lime.jsonl").read_text().splitlines()
        assert len(lines) == 2  # 2 cells for type0
        top = json.loads((experiment["out"] / "metrics" / "lime-top-genes.json").read_text())
        assert "type0" in top
        overlap = json.loads((experiment["out"] / "metrics" / "marker-overlap.json").read_text())
        assert "type0" in overlap["types"]

    def test_marker_sim(self, experiment):
        assert run_cli("marker-sim", "--config", str(experiment["config"])) == 0
        doc = json.loads(
            (experiment["out"] / "metrics" / "marker-similarity.json").read_text()
        )
        assert set(doc["per_type"]) == {"type0", "type1", "type2"}

    def test_marker_quiz_with_stub(self, experiment):
        assert run_cli(
            "marker-quiz", "--config", str(experiment["config"]), "--provider", "identity-stub"
        ) == 0
        doc = json.loads((experiment["out"] / "metrics" / "marker-quiz.json").read_text())
        assert doc["questions"] == 3
        assert doc["formatted"].endswith("/3")

    def test_report(self, experiment):
        assert run_cli("report", "--config", str(experiment["config"])) == 0
        text = (experiment["out"] / "report.md").read_text()
        assert "No Ablations / Baseline" in text
        assert "Order Ablation (All Genes)" in text
        assert "k-means ARI" in text
        # every number in the ablation table is quoted verbatim from a
        # metrics file's display block
        raw = (experiment["out"] / "metrics" / "identity.json").read_text()
        metrics = json.loads(raw)
        for display_value in metrics["display"].values():
            assert display_value in text
            assert display_value in raw

    def test_manifests_written(self, experiment):
        manifest = json.loads((experiment["out"] / "manifest-knn-eval.json").read_text())
        assert manifest["command"] == "knn-eval"
        assert manifest["config_hash"] == config_hash(load_config(experiment["config"]))
        assert "wall_clock_s" in manifest
        assert any("identity.json" in a for a in manifest["artifacts"])


class TestCliErrors:
    def test_unknown_subcommand_exits_2(self, experiment):
        with pytest.raises(SystemExit) as err:
            run_cli("frobnicate", "--config", str(experiment["config"]))
        assert err.value.code == 2

    def test_missing_config_exits_2(self, tmp_path):
        assert run_cli("ingest", "--config", str(tmp_path / "nope.json")) == 2

    def test_invalid_config_field_exits_2(self, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"out": str(tmp_path / "o")}))
        assert run_cli("knn-eval", "--config", str(config)) == 2

    def test_runtime_failure_exits_1(self, tmp_path):
        config = tmp_path / "c.json"
        config.write_text(
            json.dumps(
                {
                    "dataset": {"path": str(tmp_path / "data.jsonl"), "format": "sparse-jsonl"},
                    "out": str(tmp_path / "o"),
                }
            )
        )
        (tmp_path / "data.jsonl").write_text(
            '{"cell_id":"c1","label":"A","counts":{"G":-1}}\n'
        )
        assert run_cli("ingest", "--config", str(config)) == 1

    def test_partial_failure_keeps_artifacts(self, tmp_path):
        # embed only the identity variant, then ask knn-eval for both: the
        # identity metrics land on disk before the missing store aborts
        from cellsense.synthetic import MarkerCorpusParams, marker_corpus

        params = MarkerCorpusParams(cells_per_type=10, noise_pool=50, noise_per_cell=10)
        dataset = marker_corpus(1, params)
        data = tmp_path / "cells.jsonl"
        save_dataset(dataset, data)
        out = tmp_path / "out"
        base = {
            "dataset": {"path": str(data), "format": "sparse-jsonl"},
            "split": {"test_fraction": 0.5, "seed": 1},
            "provider": {"kind": "mock", "dim": 64},
            "out": str(out),
        }
        only_identity = dict(base, ablations=[{"kind": "identity"}])
        both = dict(
            base, ablations=[{"kind": "identity"}, {"kind": "shuffle_all", "seed": 1}]
        )
        cfg1 = tmp_path / "c1.json"
        cfg1.write_text(json.dumps(only_identity))
        cfg2 = tmp_path / "c2.json"
        cfg2.write_text(json.dumps(both))
        assert run_cli("ablate", "--config", str(cfg1)) == 0
        assert run_cli("embed", "--config", str(cfg1)) == 0
        assert run_cli("knn-eval", "--config", str(cfg2)) != 0
        assert (out / "metrics" / "identity.json").exists()


class TestConfigHandling:
    def test_env_interpolation(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CELLSENSE_TEST_DIR", str(tmp_path / "resolved"))
        config = tmp_path / "c.json"
        config.write_text(json.dumps({"out": "${CELLSENSE_TEST_DIR}"}))
        loaded = load_config(config)
        assert loaded["out"] == str(tmp_path / "resolved")

    def test_missing_env_var_is_config_error(self, tmp_path):
        from cellsense.errors import ConfigError

        config = tmp_path / "c.json"
        config.write_text(json.dumps({"out": "${CELLSENSE_UNSET_VAR_XYZ}"}))
        with pytest.raises(ConfigError):
            load_config(config)

    def test_config_hash_stable_and_order_independent(self):
        a = {"x": 1, "y": [1, 2]}
        b = {"y": [1, 2], "x": 1}
        assert config_hash(a) == config_hash(b)
        assert len(config_hash(a)) == 64
