import json
import shutil

import pytest
import yaml

from trajbias.artifacts import file_digest, read_csv
from trajbias.cli import main
from trajbias.config import load_config

TINY = {
    "seed": 3,
    "cohort": {"n_patients": 120, "n_binary": 12, "n_labs": 2},
    "preprocess": {"modes": ["E2E", "AFE"]},
    "training": {"feature_embed_dim": 8, "hidden_size": 6, "n_z": 8, "epochs": 2, "batch_size": 16},
    "models": [{"model": "gru"}, {"model": "agru", "alpha": 1.0}, {"model": "tlstm"}],
    "cluster": {"k": 3, "d_out": 3, "restarts": 2},
    "metrics": {"knn": {"n_samples": 40, "k": 3, "repeats": 3},
                "surrogate": {"n_trees": 10, "max_depth": 4, "seeds": 2}},
}


def _write(tmp_path, cfg, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg_path = _write(tmp, TINY)
    assert main(["--config", str(cfg_path), "--stage", "all", "--out", str(tmp / "run")]) == 0
    return cfg_path, tmp / "run"


def test_all_writes_every_stage_artifact(finished_run):
    _, out = finished_run
    for rel in ["cohort/cohort.jsonl", "preprocess/wider.npz", "preprocess/E2E.npz", "train/gru/checkpoint.npz",
                "train/agru_a1/train_log.csv", "embed/tlstm/wider.npz", "cluster/gru/E2E_embedding.csv",
                "cluster/gru/E2E_length_stats.csv", "evaluate/agru_a1.csv", "evaluate/agru_a1.json",
                "report/surrogate_ap_table.csv", "report/knn_error_table.csv", "report/plots/gru_AFE.csv",
                "run_manifest.json"]:
        assert (out / rel).exists(), rel


def test_report_table_shape(finished_run):
    _, out = finished_run
    rows, header = read_csv(out / "report" / "surrogate_ap_table.csv")
    assert [r["model"] for r in rows] == ["gru", "agru_a1", "tlstm"]
    assert {"E2E", "AFE", "wider", "E2E_mean", "E2E_std"} <= set(rows[0])
    assert "±" in rows[0]["E2E"]


def test_config_digest_in_every_header(finished_run):
    cfg_path, out = finished_run
    digest = load_config(cfg_path).digest()
    for csv_path in out.rglob("*.csv"):
        _, header = read_csv(csv_path)
        assert header["config_digest"] == digest, csv_path
    for json_path in out.rglob("*.json"):
        assert json.loads(json_path.read_text())["config_digest"] == digest, json_path
    first = (out / "cohort" / "cohort.jsonl").read_text().splitlines()[0]
    assert json.loads(first)["_header"]["config_digest"] == digest
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert set(manifest["stages"]) == {"generate", "preprocess", "train", "embed", "cluster", "evaluate", "report"}


def test_second_run_is_byte_identical(finished_run, tmp_path):
    cfg_path, out = finished_run
    assert main(["--config", str(cfg_path), "--out", str(tmp_path / "again")]) == 0
    m1 = json.loads((out / "run_manifest.json").read_text())["stages"]
    m2 = json.loads((tmp_path / "again" / "run_manifest.json").read_text())["stages"]
    for stage in m1:
        assert m1[stage]["outputs"] == m2[stage]["outputs"], stage
    for csv_path in (out / "evaluate").glob("*.csv"):
        assert csv_path.read_bytes() == (tmp_path / "again" / "evaluate" / csv_path.name).read_bytes()


def test_rerunning_one_stage_reproduces_its_outputs(finished_run, tmp_path):
    cfg_path, out = finished_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    target = copy / "cluster" / "agru_a1" / "E2E_embedding.csv"
    before = file_digest(target)
    target.unlink()
    assert main(["--config", str(cfg_path), "--stage", "cluster", "--out", str(copy)]) == 0
    assert file_digest(target) == before


def test_missing_upstream_artifact_exit_code(tmp_path, capsys):
    cfg_path = _write(tmp_path, TINY)
    assert main(["--config", str(cfg_path), "--stage", "evaluate", "--out", str(tmp_path / "empty")]) == 3
    err = capsys.readouterr().err
    assert "evaluate" in err and "embed" in err


@pytest.mark.parametrize("mutation, field", [
    (lambda c: c.update(models=[]), "models"),
    (lambda c: c["training"].update(batch_size=0), "training.batch_size"),
    (lambda c: c["preprocess"].update(modes=["XYZ"]), "preprocess.modes"),
    (lambda c: c.update(unknown_key=1), "unknown_key"),
])
def test_schema_violation_exit_code(tmp_path, capsys, mutation, field):
    cfg = json.loads(json.dumps(TINY))
    mutation(cfg)
    assert main(["--config", str(_write(tmp_path, cfg))]) == 2
    assert field in capsys.readouterr().err


def test_yaml_syntax_error_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("seed: 1\nmodels: [\n  - oops: {\n")
    assert main(["--config", str(path)]) == 2
    assert "line" in capsys.readouterr().err


def test_seed_override_changes_digest(tmp_path):
    path = _write(tmp_path, TINY)
    assert load_config(path, seed=7).digest() != load_config(path).digest()
    assert load_config(path, output_dir="x").digest() == load_config(path).digest()
