from __future__ import annotations

import struct

import numpy as np
import pytest

from app import autodiff as ad
from app.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from app.errors import BadMagicError, CorruptFileError, ShapeError, TruncatedFileError, UnsupportedVersionError
from app.network import build_model, stack_inputs


@pytest.fixture
def checkpoint(small_model_config):
    return Checkpoint.from_model(build_model(small_model_config, seed=2))


def test_round_trip_is_bit_exact(checkpoint, tmp_path):
    path = str(tmp_path / "nested" / "model.tctc")
    save_checkpoint(checkpoint, path)
    loaded = load_checkpoint(path)
    assert loaded.config == checkpoint.config
    assert list(loaded.state) == list(checkpoint.state)
    for name, value in checkpoint.state.items():
        assert loaded.state[name].tobytes() == value.astype("<f4").tobytes()


def test_restored_model_predicts_identically(checkpoint, sample):
    original = build_model(checkpoint.config, seed=2)
    restored = decode_checkpoint(encode_checkpoint(checkpoint)).to_model()
    x = stack_inputs([sample])
    assert np.array_equal(original(x).y_hat.data, restored(x).y_hat.data)


def test_header_fields(checkpoint):
    blob = encode_checkpoint(checkpoint)
    assert blob[:4] == b"TCTC"
    assert struct.unpack_from("<I", blob, 4)[0] == 1


def test_decode_errors(checkpoint):
    blob = encode_checkpoint(checkpoint)
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"NOPE" + blob[4:])
    with pytest.raises(UnsupportedVersionError):
        decode_checkpoint(blob[:4] + struct.pack("<I", 9) + blob[8:])
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(blob[:2])
    with pytest.raises(CorruptFileError):
        decode_checkpoint(blob + b"\x00\x00")


def test_unreadable_config_record(checkpoint):
    blob = encode_checkpoint(checkpoint)
    (length,) = struct.unpack_from("<I", blob, 8)
    garbled = blob[:12] + b"{" * length + blob[12 + length :]
    with pytest.raises(CorruptFileError):
        decode_checkpoint(garbled)


def test_non_utf8_parameter_name(checkpoint):
    blob = bytearray(encode_checkpoint(checkpoint))
    (length,) = struct.unpack_from("<I", blob, 8)
    blob[20 + length] = 0xFF
    with pytest.raises(CorruptFileError, match="not UTF-8"):
        decode_checkpoint(bytes(blob))


def test_loading_into_a_different_architecture_fails(checkpoint, small_model_config):
    other = build_model(small_model_config.model_copy(update={"use_transformer": False}), seed=0)
    with pytest.raises(ShapeError):
        other.load_state_dict(checkpoint.state)


def test_double_precision_state_is_stored_as_float32(small_model_config):
    with ad.precision("double"):
        model = build_model(small_model_config, seed=0)
    decoded = decode_checkpoint(encode_checkpoint(Checkpoint.from_model(model)))
    assert all(value.dtype == np.float32 for value in decoded.state.values())
