from __future__ import annotations

import json

import pytest

from app.audit import write_audit_log
from app.errors import CorruptFileError
from app.models import ModelConfig
from app.utils import canonical_json, parse_record, sha256_bytes


def test_canonical_json_is_order_independent():
    assert canonical_json({"b": 1, "a": [1, 2]}) == canonical_json({"a": [1, 2], "b": 1}) == '{"a":[1,2],"b":1}'


def test_sha256_bytes_matches_concatenation():
    assert sha256_bytes([b"ab", b"c"]) == sha256_bytes([b"abc"])


def test_parse_record_wraps_failures():
    record = canonical_json(ModelConfig(in_channels=4).model_dump(mode="json")).encode("utf-8")
    assert parse_record(ModelConfig, record, CorruptFileError, "config").in_channels == 4
    with pytest.raises(CorruptFileError, match="config unreadable"):
        parse_record(ModelConfig, b"{not json", CorruptFileError, "config")
    with pytest.raises(CorruptFileError):
        parse_record(ModelConfig, '{"in_channels": "many"}', CorruptFileError, "config")


def test_audit_log_appends_lines(tmp_path):
    path = tmp_path / "logs" / "audit.jsonl"
    assert write_audit_log(str(path), {"command": "train", "exit_code": 0})
    assert write_audit_log(str(path), {"command": "predict", "exit_code": 3})
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    assert [r["command"] for r in records] == ["train", "predict"]
    assert all("ts" in r for r in records)


def test_audit_log_failure_is_not_raised(tmp_path, caplog):
    blocker = tmp_path / "blocker"
    blocker.write_text("", encoding="utf-8")
    assert write_audit_log(str(blocker / "audit.jsonl"), {"command": "train"}) is False
    assert "audit log" in caplog.text
