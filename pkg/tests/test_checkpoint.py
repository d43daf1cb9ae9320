import json

import numpy as np
import pytest
import torch
from torch import nn

from pearl_lab.artifacts import JsonlLog, read_csv_comment, read_json, write_csv, write_json
from pearl_lab.checkpoint import (
    FORMAT_TAG,
    checkpoint_exists,
    checkpoint_paths,
    load_checkpoint,
    load_into_module,
    save_checkpoint,
    save_module,
)
from pearl_lab.errors import ArtifactError, ShapeError


def test_checkpoint_round_trip(tmp_path):
    tensors = {"b": torch.arange(6.0).reshape(2, 3), "a": torch.tensor([1.5, -2.25])}
    manifest = save_checkpoint(tmp_path / "ckpt", tensors, {"step": 7})
    assert manifest == tmp_path / "ckpt.json"
    assert checkpoint_exists(tmp_path / "ckpt")

    loaded, meta = load_checkpoint(tmp_path / "ckpt")
    assert meta == {"step": 7}
    assert set(loaded) == {"a", "b"}
    for name in tensors:
        assert torch.equal(loaded[name], tensors[name])


def test_blob_is_little_endian_float32_in_name_order(tmp_path):
    save_checkpoint(tmp_path / "ckpt", {"z": torch.tensor([2.0]), "a": torch.tensor([1.0, 3.0])})
    manifest_path, blob_path = checkpoint_paths(tmp_path / "ckpt")
    manifest = json.loads(manifest_path.read_text())
    assert manifest["format"] == FORMAT_TAG
    assert [(e["name"], e["offset"]) for e in manifest["entries"]] == [("a", 0), ("z", 8)]
    assert blob_path.read_bytes() == np.array([1.0, 3.0, 2.0], dtype="<f4").tobytes()


def test_load_rejects_broken_checkpoints(tmp_path):
    with pytest.raises(ArtifactError):
        load_checkpoint(tmp_path / "missing")

    save_checkpoint(tmp_path / "ckpt", {"w": torch.zeros(4)})
    manifest_path, blob_path = checkpoint_paths(tmp_path / "ckpt")
    blob_path.write_bytes(blob_path.read_bytes()[:8])
    with pytest.raises(ArtifactError, match="overruns"):
        load_checkpoint(tmp_path / "ckpt")

    manifest = json.loads(manifest_path.read_text())
    manifest["format"] = "other"
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(ArtifactError, match="format"):
        load_checkpoint(tmp_path / "ckpt")


def test_module_round_trip_and_mismatch(tmp_path):
    torch.manual_seed(0)
    source = nn.Linear(3, 2)
    save_module(tmp_path / "lin", source, {"kind": "test"})
    target = nn.Linear(3, 2)
    tensors, meta = load_checkpoint(tmp_path / "lin")
    load_into_module(target, tensors)
    assert meta["kind"] == "test"
    assert torch.equal(target.weight, source.weight)

    with pytest.raises(ShapeError, match="shape"):
        load_into_module(nn.Linear(4, 2), tensors)
    with pytest.raises(ShapeError, match="missing"):
        load_into_module(nn.Sequential(nn.Linear(3, 2)), tensors)


def test_csv_with_comment_line(tmp_path):
    path = tmp_path / "t.csv"
    write_csv(path, [{"a": 1, "b": 0.5}, {"a": 2, "b": None}], {"format": "x"})
    lines = path.read_text().splitlines()
    assert lines == ['# {"format": "x"}', "a,b", "1,0.5", "2,"]
    assert read_csv_comment(path) == {"format": "x"}
    write_csv(path, [{"a": 1}])
    assert read_csv_comment(path) is None


def test_json_documents(tmp_path):
    path = tmp_path / "doc.json"
    write_json(path, {"b": 1, "a": [1, 2]})
    assert path.read_text() == '{\n  "a": [\n    1,\n    2\n  ],\n  "b": 1\n}\n'
    assert read_json(path) == {"a": [1, 2], "b": 1}
    path.write_text("{")
    with pytest.raises(ArtifactError):
        read_json(path)


def test_jsonl_log_truncation(tmp_path):
    log = JsonlLog(tmp_path / "log.jsonl")
    log.start({"format": "test"})
    for step in range(5):
        log.append({"step": step, "value": step * 2})
    assert log.truncate_from(3) == 2
    records = log.read()
    assert records[0] == {"format": "test"}
    assert [r["step"] for r in records[1:]] == [0, 1, 2]
    assert JsonlLog(tmp_path / "none.jsonl").read() == []
