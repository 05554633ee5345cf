import json
import math

import numpy as np
import pytest
import torch

from analysis import (
    embedding_separability,
    export_embeddings,
    linear_probe,
    probe_separability,
    sample_indices,
)
from data_process import DatasetHandle, load_dataset
from errors import (
    ArgumentError,
    DataError,
    DataIngestionError,
    MissingInputError,
    StageError,
    UnknownArchitectureError,
)
from model_zoo import instantiate
from reporting import EvalRow, build_report
from scoring import evaluate, safe_divide, top1
from training import StudentBundle, TeacherModel


@pytest.fixture
def packaged(tiny_spec) -> StudentBundle:
    handles = instantiate(tiny_spec, seed=0, with_auxiliary=False).eval()
    return StudentBundle(handles, sn_record_hash="abc", stage="packaged")


def test_from_arrays_normalizes_uint8():
    train = np.full((4, 5, 5), 255, dtype=np.uint8)
    test = np.zeros((2, 5, 5), dtype=np.uint8)
    data = DatasetHandle.from_arrays("u8", train, [0, 1, 0, 1], test, [1, 0])
    assert data.image_shape == (5, 5, 1)
    assert data.num_classes == 2
    assert data.train_images.shape == (4, 1, 5, 5)
    assert data.pixel_range == (0.0, 1.0)


def test_from_arrays_validation():
    images = np.zeros((3, 4, 4, 1), dtype=np.float32)
    with pytest.raises(DataError):
        DatasetHandle.from_arrays("x", images + 2.0, [0, 1, 2], images, [0, 1, 2])
    with pytest.raises(DataError):
        DatasetHandle.from_arrays("x", images, [0, 1, 5], images, [0, 1, 2], num_classes=3)
    with pytest.raises(DataError):
        DatasetHandle.from_arrays("x", images, [0, 1], images, [0, 1, 2])


def test_from_arrays_seeded_shuffle_keeps_pairs():
    images = np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1) / 10
    labels = np.arange(10) % 2
    data = DatasetHandle.from_arrays("s", images, labels, images, labels, seed=3)
    again = DatasetHandle.from_arrays("s", images, labels, images, labels, seed=3)
    assert torch.equal(data.train_images, again.train_images)
    pixel_ids = (data.train_images.reshape(-1) * 10).round().long()
    assert torch.equal(pixel_ids % 2, data.train_labels)


def test_validation_split_and_subset(tiny_data):
    train_idx, val_idx = tiny_data.validation_split(30, seed=1)
    assert len(val_idx) == 30 and len(train_idx) == 270
    assert not set(train_idx.tolist()) & set(val_idx.tolist())
    again, _ = tiny_data.validation_split(30, seed=1)
    assert torch.equal(train_idx, again)
    part = tiny_data.subset(val_idx)
    assert len(part.train_labels) == 30
    assert torch.equal(part.test_images, tiny_data.test_images)
    with pytest.raises(DataError):
        tiny_data.subset([])
    with pytest.raises(DataError):
        tiny_data.split("val")


def test_load_dataset_names_missing_files(tmp_path):
    with pytest.raises(DataIngestionError) as e:
        load_dataset("mnist", str(tmp_path))
    assert e.value.exit_code == 3
    assert any(p.endswith("train-images-idx3-ubyte") for p in e.value.paths)
    with pytest.raises(DataIngestionError) as e:
        load_dataset("pubfig", str(tmp_path))
    assert len(e.value.paths) == 2
    with pytest.raises(UnknownArchitectureError):
        load_dataset("imagenet", str(tmp_path))


def test_top1_ties_go_to_lowest_class():
    logits = torch.tensor([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0]])
    assert top1(logits).tolist() == [1, 0]
    assert safe_divide(1.0, 0.0) == 0.0
    assert safe_divide(3.0, 4.0) == 0.75


def test_evaluate_is_deterministic_and_stage_checked(packaged, tiny_data, tiny_pattern):
    raw = evaluate(packaged, tiny_data)
    assert raw == evaluate(packaged, tiny_data, batch_size=7)
    stamped = evaluate(packaged, tiny_data, tiny_pattern)
    assert 0.0 <= stamped <= 100.0
    assert 0.0 <= evaluate(TeacherModel(packaged.handles), tiny_data, split="train") <= 100.0
    in_training = StudentBundle(instantiate(packaged.handles.spec, seed=0), stage="in_training")
    with pytest.raises(StageError):
        evaluate(in_training, tiny_data)


def test_export_embeddings_shares_indices(packaged, tiny_data, tiny_pattern):
    table = export_embeddings(packaged, tiny_data, tiny_pattern, n=20, seed=4)
    assert len(table) == 40
    raw, stamped = table[table["stamped"] == 0], table[table["stamped"] == 1]
    assert raw["index"].tolist() == stamped["index"].tolist()
    assert raw["label"].tolist() == stamped["label"].tolist()
    feature_columns = [c for c in table.columns if c.startswith("e_")]
    assert len(feature_columns) == packaged.handles.spec.feature_dim()
    assert {"pc1", "pc2"} <= set(table.columns)
    again = export_embeddings(packaged, tiny_data, tiny_pattern, n=20, seed=4)
    assert table.equals(again)

    scores = embedding_separability(table)
    assert set(scores) == {"silhouette_raw", "silhouette_stamped"}
    assert -1.0 <= scores["silhouette_raw"] <= 1.0


def test_export_embeddings_single_image(packaged, tiny_data):
    table = export_embeddings(packaged, tiny_data, n=1)
    assert len(table) == 1
    assert table["pc1"].tolist() == [0.0] and table["pc2"].tolist() == [0.0]
    assert math.isnan(embedding_separability(table)["silhouette_stamped"])
    with pytest.raises(ArgumentError):
        export_embeddings(packaged, tiny_data, n=0)
    with pytest.raises(ArgumentError):
        export_embeddings(packaged, tiny_data, n=len(tiny_data.test_labels) + 1)


def test_sample_indices_are_seeded():
    assert np.array_equal(sample_indices(100, 10, 1), sample_indices(100, 10, 1))
    assert len(set(sample_indices(100, 100, 2).tolist())) == 100


def test_linear_probe_on_separable_features():
    rng = np.random.default_rng(0)
    y = np.arange(200) % 2
    x = rng.normal(size=(200, 5)) + 6.0 * y[:, None]
    assert linear_probe(x[:150], y[:150], x[150:], y[150:]) == 100.0


def test_probe_separability(packaged, tiny_data, tiny_pattern):
    scores = probe_separability(packaged, tiny_data, tiny_pattern, n_train=120, n_test=60)
    assert set(scores) == {"probe_raw", "probe_stamped"}
    assert all(0.0 <= v <= 100.0 for v in scores.values())


def test_eval_row_validation():
    base = dict(model_id="m", stage="packaged", dataset="mnist", checkpoint_hash="h", num_classes=10)
    EvalRow(acc_without_sn=0.0, acc_with_sn=100.0, **base)
    with pytest.raises(ValueError):
        EvalRow(acc_without_sn=101.0, **base)
    with pytest.raises(ValueError):
        EvalRow(acc_without_sn=50.0, acc_with_sn=-1.0, **base)


def write_run(root):
    metrics = root / "metrics"
    EvalRow(
        model_id="teacher", stage="teacher", dataset="mnist", checkpoint_hash="t0",
        num_classes=10, acc_without_sn=99.04,
    ).save(str(metrics / "eval_teacher.json"))
    EvalRow(
        model_id="student", stage="packaged", dataset="mnist", checkpoint_hash="s0",
        num_classes=10, acc_with_sn=98.96, acc_without_sn=11.34,
    ).save(str(metrics / "eval_student.json"))
    summaries = {
        "finetune_10": dict(attack_kind="finetune", dataset="mnist", fraction=0.1, acc_raw=42.06),
        "scratch_baseline_10": dict(
            attack_kind="scratch_baseline", dataset="mnist", fraction=0.1, acc_raw=95.5
        ),
        "prune_20": dict(
            attack_kind="prune", dataset="mnist", ratio=0.2, acc_with_sn=98.5, acc_raw=11.2
        ),
    }
    for name, summary in summaries.items():
        folder = root / "attacks" / name
        folder.mkdir(parents=True)
        (folder / "summary.json").write_text(json.dumps(summary))
    (root / "config.snapshot").write_text("seed: 5216\n")


def test_build_report_tables(tmp_path):
    write_run(tmp_path)
    report = build_report(str(tmp_path))
    summary = report.summary_table()
    assert [row["Task"] for row in summary] == ["MNIST", "GTSRB", "PUBFIG"]
    mnist = summary[0]
    assert mnist["Teacher A_X"] == "99.0"
    assert mnist["Student A_X+K"] == "99.0"
    assert mnist["Student A_X"] == "11.3"
    assert mnist["Random 1/N"] == "10.0"
    assert summary[1]["Teacher A_X"] == "-" and summary[1]["Student A_X"] == "-"

    finetune = report.attack_tables["finetune"]
    assert [row["Task"] for row in finetune] == ["MNIST", "MNIST*"]
    assert finetune[0]["10%"] == "42.1" and finetune[0]["20%"] == "-"
    assert finetune[1]["10%"] == "95.5" and finetune[1]["Student A_X"] == "-"
    assert report.attack_tables["prune"][0]["20%"] == "98.5 / 11.2"
    assert "transfer" not in report.attack_tables
    assert report.environment["checkpoint_student"] == "s0"


def test_report_markdown_tables(tmp_path):
    write_run(tmp_path)
    markdown = build_report(str(tmp_path)).to_markdown()
    rows = [
        [cell.strip() for cell in line.strip().strip("|").split("|")]
        for line in markdown.splitlines()
        if line.startswith("|")
    ]
    assert rows[0] == [
        "Task", "Model", "Teacher A_X", "Student A_X+K", "Student A_X", "Random 1/N"
    ]
    assert ["MNIST", "student", "99.0", "99.0", "11.3", "10.0"] in rows
    assert ["GTSRB", "-", "-", "-", "-", "2.3"] in rows
    assert "## DSN against Fine-tuning Attack" in markdown


def test_build_report_is_reproducible(tmp_path):
    write_run(tmp_path)
    first = build_report(str(tmp_path))
    first.save(str(tmp_path / "reports"))
    second = build_report(str(tmp_path))
    assert first.to_markdown() == second.to_markdown()
    assert (tmp_path / "reports" / "report.md").read_text() == second.to_markdown()
    assert (tmp_path / "reports" / "model_accuracy_with_without_sn.csv").is_file()
    with pytest.raises(MissingInputError):
        build_report(str(tmp_path / "absent"))
