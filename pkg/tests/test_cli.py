import json
from pathlib import Path

import pytest

from ternarycl.cli import main

from conftest import FIXTURE_DIR

CONFIG = "tests/fixtures/tinykg_config.json"


def prepare_args(workdir):
    return ["prepare", "--workdir", str(workdir),
            "--train", f"{FIXTURE_DIR}/train.tsv",
            "--valid", f"{FIXTURE_DIR}/valid.tsv",
            "--test", f"{FIXTURE_DIR}/test.tsv",
            "--clusters", f"{FIXTURE_DIR}/clusters.tsv"]


@pytest.fixture()
def prepared(tmp_path):
    work = tmp_path / "work"
    assert main(prepare_args(work)) == 0
    return work


def test_prepare_writes_data_and_manifest(prepared):
    data = prepared / "data"
    for name in ("train.tsv", "valid.tsv", "test.tsv", "clusters.tsv"):
        assert (data / name).exists()
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["command"] == "prepare"
    assert manifest["counts"]["train"] == 30
    assert manifest["counts"]["entities"] == 24
    assert len(manifest["dataset_hashes"]) == 4
    assert "started" in manifest["timestamps"]


def test_slice_manifest_records_fraction_seed_counts(prepared):
    assert main(["slice", "--workdir", str(prepared), "--keep", "0.2",
                 "--seed", "7"]) == 0
    out = prepared / "slices" / "keep0.2_seed7"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["keep_fraction"] == 0.2
    assert manifest["seed"] == 7
    assert manifest["counts"]["train"] == 6  # round(0.2 * 30)
    assert len((out / "train.tsv").read_text().splitlines()) == 6


def test_slice_rejects_bad_fraction(prepared):
    assert main(["slice", "--workdir", str(prepared), "--keep", "1.5",
                 "--seed", "1"]) == 1


def test_mine_synonyms_command(prepared):
    assert main(["mine-synonyms", "--workdir", str(prepared),
                 "--idf-threshold", "0.3"]) == 0
    lines = (prepared / "data" / "synonyms.tsv").read_text().splitlines()
    assert any("nbc" in line for line in lines)


def test_unknown_flag_exits_one(capsys):
    assert main(["eval", "--workdir", "/tmp/x", "--no-such-flag"]) == 1
    assert "usage" in capsys.readouterr().err


def test_eval_without_checkpoint_exits_one(prepared, capsys):
    assert main(["eval", "--workdir", str(prepared)]) == 1
    assert "checkpoint not found" in capsys.readouterr().err


def test_missing_input_file_exits_one(tmp_path, capsys):
    rc = main(["prepare", "--workdir", str(tmp_path / "w"),
               "--train", "/nonexistent.tsv", "--valid", "/nonexistent.tsv",
               "--test", "/nonexistent.tsv", "--clusters", "/nonexistent.tsv"])
    assert rc == 1


def test_lock_file_blocks_concurrent_runs(prepared, capsys):
    (prepared / ".lock").write_text("12345")
    rc = main(["slice", "--workdir", str(prepared), "--keep", "0.5", "--seed", "1"])
    assert rc == 2
    assert "locked" in capsys.readouterr().err
    (prepared / ".lock").unlink()
    assert main(["slice", "--workdir", str(prepared), "--keep", "0.5",
                 "--seed", "1"]) == 0


def test_lock_removed_after_run(prepared):
    assert not (prepared / ".lock").exists()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    work = tmp_path_factory.mktemp("pipeline")
    assert main(prepare_args(work)) == 0
    assert main(["mine-synonyms", "--workdir", str(work),
                 "--idf-threshold", "0.3"]) == 0
    assert main(["pretrain", "--workdir", str(work), "--config", CONFIG,
                 "--epochs", "2"]) == 0
    assert main(["finetune", "--workdir", str(work), "--config", CONFIG,
                 "--epochs", "2"]) == 0
    return work


def test_pretrain_outputs(trained):
    assert (trained / "checkpoints" / "pretrain" / "last" / "tensors.bin").exists()
    manifest = json.loads(
        (trained / "checkpoints" / "pretrain" / "manifest.json").read_text())
    assert manifest["command"] == "pretrain"
    assert manifest["epochs_done"] == 2
    log_lines = (trained / "logs" / "pretrain.jsonl").read_text().splitlines()
    assert len(log_lines) == 2


def test_finetune_outputs(trained):
    for which in ("last", "best"):
        assert (trained / "checkpoints" / "finetune" / which / "tensors.bin").exists()
    manifest = json.loads(
        (trained / "checkpoints" / "finetune" / "manifest.json").read_text())
    assert manifest["command"] == "finetune"


def test_eval_full_report(trained):
    assert main(["eval", "--workdir", str(trained), "--protocol", "raw"]) == 0
    out = trained / "reports" / "full_raw"
    report = json.loads((out / "report.json").read_text())
    assert report["n_queries"] == 12
    assert report["protocol"] == "raw"
    assert set(report["H"]) == {"1", "10", "50", "100"}
    assert (out / "ranks.tsv").exists()
    assert json.loads((out / "manifest.json").read_text())["command"] == "eval"


def test_eval_fewshot_reports(trained):
    assert main(["eval", "--workdir", str(trained), "--slice", "fewshot"]) == 0
    out = trained / "reports" / "fewshot_raw"
    names = {p.name for p in out.glob("*.json")} - {"manifest.json"}
    assert names == {"few_shot_entity.json", "few_shot_relation.json",
                     "zero_shot_entity.json", "zero_shot_relation.json"}


def test_eval_filtered_protocol(trained):
    assert main(["eval", "--workdir", str(trained), "--protocol", "filtered"]) == 0
    report = json.loads(
        (trained / "reports" / "full_filtered" / "report.json").read_text())
    assert report["protocol"] == "filtered"


def test_export_embeddings_shapes(trained):
    assert main(["export-embeddings", "--workdir", str(trained),
                 "--format", "tsv"]) == 0
    out = trained / "reports" / "embeddings"
    for name in ("entity_table.tsv", "entity_composed.tsv"):
        lines = (out / name).read_text().splitlines()
        assert len(lines) == 24  # one row per entity
        assert all(len(line.split("\t")) == 1 + 24 for line in lines)


def test_rerun_identical_modulo_timestamps(tmp_path):
    checkpoints = []
    for name in ("w1", "w2"):
        work = tmp_path / name
        assert main(prepare_args(work)) == 0
        assert main(["pretrain", "--workdir", str(work), "--config", CONFIG,
                     "--epochs", "1"]) == 0
        ck = work / "checkpoints" / "pretrain" / "last"
        checkpoints.append(((ck / "tensors.bin").read_bytes(),
                            (ck / "manifest.json").read_bytes()))
        # data files identical too
        if name == "w2":
            assert (tmp_path / "w1" / "data" / "train.tsv").read_bytes() == \
                (work / "data" / "train.tsv").read_bytes()
    assert checkpoints[0] == checkpoints[1]
