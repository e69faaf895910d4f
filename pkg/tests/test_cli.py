import json

import pytest

from protolab.cli import main


TINY_TRAIN = {
    "seed": 0,
    "model": {"type": "protopnet", "per_class_count": 1},
    "train": {"warmup_epochs": 1, "joint_epochs": 1, "last_layer_epochs": 1, "batch_size": 8},
}

TINY_TREE = {
    "seed": 0,
    "model": {"type": "prototree", "depth": 2},
    "train": {"warmup_epochs": 1, "joint_epochs": 1, "leaf_epochs": 1, "batch_size": 8},
}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "v2"
    assert main(["generate-data", "--version", "V2", "--n-per-class", "5",
                 "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("model") / "ckpt"
    cfg = tmp_path_factory.mktemp("cfg") / "train.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    assert main(["train", "--data", str(data_dir), "--config", str(cfg),
                 "--out", str(out)]) == 0
    return out


class TestGenerateData:
    def test_outputs_and_manifest(self, data_dir):
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert len(manifest["entries"]) == 15
        assert (data_dir / "images").is_dir()
        assert (data_dir / "masks").is_dir()

    def test_deterministic_rerun(self, data_dir, tmp_path):
        again = tmp_path / "again"
        assert main(["generate-data", "--version", "V2", "--n-per-class", "5",
                     "--seed", "3", "--out", str(again)]) == 0
        a = (data_dir / "images" / "img_00000.png").read_bytes()
        b = (again / "images" / "img_00000.png").read_bytes()
        assert a == b


class TestTrain:
    def test_checkpoint_layout(self, model_dir):
        for name in ("weights.pt", "prototypes.json", "config.json", "metrics.json",
                     "run_manifest.json"):
            assert (model_dir / name).exists(), name
        metrics = json.loads((model_dir / "metrics.json").read_text())
        assert 0.0 <= metrics["test_accuracy"] <= 1.0

    def test_unknown_config_key_rejected(self, data_dir, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"seed": 0, "bogus_key": 1}))
        code = main(["train", "--data", str(data_dir), "--config", str(cfg),
                     "--out", str(tmp_path / "out")])
        assert code == 2
        err = capsys.readouterr().err
        doc = json.loads(err.strip().splitlines()[-1])
        assert doc["error"] == "config"
        assert "bogus_key" in doc["message"]

    def test_train_tree_cli(self, data_dir, tmp_path):
        cfg = tmp_path / "tree.json"
        cfg.write_text(json.dumps(TINY_TREE))
        out = tmp_path / "tree_ckpt"
        assert main(["train-tree", "--data", str(data_dir), "--config", str(cfg),
                     "--out", str(out)]) == 0
        assert (out / "tree.json").exists()


class TestProjectAndExplain:
    def test_project(self, model_dir, data_dir, tmp_path):
        out = tmp_path / "proj"
        assert main(["project", "--model", str(model_dir), "--data", str(data_dir),
                     "--out", str(out)]) == 0
        protos = json.loads((out / "prototypes.json").read_text())
        assert all(p["source"] is not None for p in protos)

    def test_explain_both_backends(self, model_dir, data_dir, tmp_path):
        for backend in ("upsample", "prp"):
            out = tmp_path / backend
            assert main(["explain", "--model", str(model_dir), "--data", str(data_dir),
                         "--index", "0", "--prototype", "0", "--backend", backend,
                         "--out", str(out)]) == 0
            doc = json.loads((out / "explanation.json").read_text())
            assert doc["backend"] == backend
            assert 0.0 <= doc["mass_in_mask"] <= 1.0
            assert (out / "heatmap.png").exists()
            assert (out / "patch.png").exists()


class TestEvaluate:
    def test_report_and_byte_identical_rerun(self, model_dir, data_dir, tmp_path):
        r1 = tmp_path / "a" / "report.json"
        r2 = tmp_path / "b" / "report.json"
        for r in (r1, r2):
            assert main(["evaluate", "--model", str(model_dir), "--data", str(data_dir),
                         "--out", str(r)]) == 0
        assert r1.read_bytes() == r2.read_bytes()
        doc = json.loads(r1.read_text())
        assert doc["schema_version"] == 1
        assert doc["transformation_consistency"][0]["top_k_overlap"] == 1.0


class TestOOD:
    def test_experiment_outputs(self, model_dir, data_dir, tmp_path):
        near = tmp_path / "near"
        assert main(["generate-data", "--version", "V1", "--n-per-class", "3",
                     "--seed", "9", "--out", str(near)]) == 0
        out = tmp_path / "ood"
        assert main(["ood", "--model", str(model_dir), "--id", str(data_dir),
                     "--near", str(near), "--seed", "1", "--out", str(out)]) == 0
        doc = json.loads((out / "result.json").read_text())
        assert 0.0 <= doc["near"]["auroc"] <= 1.0
        assert (out / "histograms.csv").exists()
        assert (out / "histograms.png").exists()


class TestReport:
    def test_render_from_artifacts(self, model_dir, data_dir, tmp_path):
        report_json = tmp_path / "report.json"
        assert main(["evaluate", "--model", str(model_dir), "--data", str(data_dir),
                     "--out", str(report_json)]) == 0
        out = tmp_path / "rendered"
        assert main(["report", "--evaluation", str(report_json), "--model", str(model_dir),
                     "--data", str(data_dir), "--out", str(out)]) == 0
        assert (out / "index.html").exists()
        assert (out / "purity.png").exists()
        assert (out / "gallery_protopnet.png").exists()

    def test_nothing_to_render_fails(self, tmp_path, capsys):
        assert main(["report", "--out", str(tmp_path / "x")]) == 1
        doc = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert doc["error"] == "ValueError"
