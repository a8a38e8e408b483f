from __future__ import annotations

import json
import os
import struct

import numpy as np
import pytest

from app.dataset import (
    MANIFEST_NAME,
    dataset_checksum,
    decode_prediction,
    decode_sample,
    encode_prediction,
    encode_sample,
    read_dataset,
    read_manifest,
    write_dataset,
)
from app.errors import (
    BadMagicError,
    CorruptFileError,
    IntegrityError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from app.models import PhantomSpec
from app.phantom import generate_sample


@pytest.fixture
def samples(small_spec):
    return [generate_sample(small_spec, index) for index in range(3)]


def test_sample_file_layout(sample):
    blob = encode_sample(sample)
    magic, version, height, width, n_oar = struct.unpack_from("<4sIIII", blob)
    assert (magic, version, height, width, n_oar) == (b"TCTD", 1, 32, 32, 2)
    assert len(blob) == 20 + (3 + 2) * 32 * 32 * 4


def test_sample_round_trip_is_bitwise(sample):
    decoded = decode_sample(encode_sample(sample), name=sample.name)
    for field in ("ct", "ptv", "oars", "dose"):
        assert getattr(decoded, field).tobytes() == getattr(sample, field).tobytes()


def test_decode_errors(sample):
    blob = encode_sample(sample)
    with pytest.raises(BadMagicError):
        decode_sample(b"XXXX" + blob[4:])
    with pytest.raises(UnsupportedVersionError):
        decode_sample(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(TruncatedFileError):
        decode_sample(blob[:-4])
    with pytest.raises(TruncatedFileError):
        decode_sample(blob[:10])
    with pytest.raises(CorruptFileError):
        decode_sample(blob + b"\x00")


def test_prediction_round_trip_and_magic(sample):
    blob = encode_prediction(sample.dose)
    assert blob[:4] == b"TCTP"
    np.testing.assert_array_equal(decode_prediction(blob), sample.dose)
    with pytest.raises(BadMagicError):
        decode_prediction(encode_sample(sample))


def test_write_and_read_dataset(samples, tmp_path):
    path = str(tmp_path / "data")
    splits = {"sample_0000": "train", "sample_0001": "val", "sample_0002": "test"}
    manifest = write_dataset(samples, path, splits=splits, organs=["a", "b"], seed=4)
    assert manifest.count == 3
    assert manifest.files == ["sample_0000.tctd", "sample_0001.tctd", "sample_0002.tctd"]
    assert read_manifest(path) == manifest
    assert [s.name for s in read_dataset(path)] == ["sample_0000", "sample_0001", "sample_0002"]
    assert [s.name for s in read_dataset(path, "val")] == ["sample_0001"]
    assert dataset_checksum(path) == manifest.checksum


def test_checksum_is_deterministic(samples, tmp_path):
    first = write_dataset(samples, str(tmp_path / "a")).checksum
    second = write_dataset(samples, str(tmp_path / "b")).checksum
    assert first == second
    assert write_dataset(samples[:2], str(tmp_path / "c")).checksum != first


def test_manifest_mismatch_is_an_integrity_error(samples, tmp_path):
    path = str(tmp_path / "data")
    write_dataset(samples, path)
    os.remove(os.path.join(path, "sample_0001.tctd"))
    with pytest.raises(IntegrityError):
        read_manifest(path)


def test_manifest_count_disagreeing_with_files(samples, tmp_path):
    path = str(tmp_path / "data")
    write_dataset(samples, path)
    manifest_path = os.path.join(path, MANIFEST_NAME)
    with open(manifest_path, encoding="utf-8") as handle:
        data = json.load(handle)
    data["count"] = 5
    with open(manifest_path, "w", encoding="utf-8") as handle:
        json.dump(data, handle)
    with pytest.raises(IntegrityError):
        read_dataset(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(IntegrityError):
        read_manifest(str(tmp_path))


def test_inconsistent_samples_are_rejected(sample, tmp_path):
    other = generate_sample(PhantomSpec(size=(64, 64), n_oar=2, falloff_sigma=3.0, seed=1), 0)
    with pytest.raises(IntegrityError):
        write_dataset([sample, other], str(tmp_path / "data"))


def test_empty_dataset_writes_manifest(tmp_path):
    manifest = write_dataset([], str(tmp_path / "empty"))
    assert manifest.count == 0
    assert read_dataset(str(tmp_path / "empty")) == []
