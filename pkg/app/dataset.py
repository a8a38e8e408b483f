"""TCTD sample files, TCTP dose-only prediction files and the directory manifest."""
from __future__ import annotations

import json
import logging
import os
import struct
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import (
    BadMagicError,
    CorruptFileError,
    IntegrityError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from app.models import DatasetManifest, Split
from app.phantom import Sample
from app.utils import parse_record, sha256_bytes


logger = logging.getLogger(__name__)

SAMPLE_MAGIC = b"TCTD"
PREDICTION_MAGIC = b"TCTP"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

_SAMPLE_HEADER = struct.Struct("<4sIIII")
_PREDICTION_HEADER = struct.Struct("<4sIII")


def encode_sample(sample: Sample) -> bytes:
    height, width = sample.size
    header = _SAMPLE_HEADER.pack(SAMPLE_MAGIC, FORMAT_VERSION, height, width, sample.n_oar)
    planes = [sample.ct[None], sample.ptv[None], sample.oars, sample.dose[None]]
    body = np.concatenate(planes, axis=0).astype("<f4").tobytes()
    return header + body


def _check_header(blob: bytes, header: struct.Struct, magic: bytes, label: str) -> Tuple[int, ...]:
    if len(blob) < 4:
        raise TruncatedFileError(f"{label}: {len(blob)} bytes, header needs {header.size}")
    if blob[:4] != magic:
        raise BadMagicError(f"{label}: magic {blob[:4]!r}, expected {magic!r}")
    if len(blob) < header.size:
        raise TruncatedFileError(f"{label}: {len(blob)} bytes, header needs {header.size}")
    fields = header.unpack_from(blob)
    if fields[1] != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{label}: version {fields[1]}, supported {FORMAT_VERSION}")
    return fields


def _planes(blob: bytes, offset: int, count: int, height: int, width: int, label: str) -> np.ndarray:
    expected = offset + count * height * width * 4
    if len(blob) < expected:
        raise TruncatedFileError(f"{label}: {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise CorruptFileError(f"{label}: {len(blob) - expected} trailing bytes")
    data = np.frombuffer(blob, dtype="<f4", count=count * height * width, offset=offset)
    return data.reshape(count, height, width).astype(np.float32)


def decode_sample(blob: bytes, name: str = "") -> Sample:
    _, _, height, width, n_oar = _check_header(blob, _SAMPLE_HEADER, SAMPLE_MAGIC, name or "sample")
    if height == 0 or width == 0:
        raise CorruptFileError(f"{name}: empty plane {height}x{width}")
    planes = _planes(blob, _SAMPLE_HEADER.size, n_oar + 3, height, width, name or "sample")
    return Sample(ct=planes[0], ptv=planes[1], oars=planes[2 : 2 + n_oar], dose=planes[2 + n_oar], name=name)


def encode_prediction(dose: np.ndarray) -> bytes:
    height, width = dose.shape
    return _PREDICTION_HEADER.pack(PREDICTION_MAGIC, FORMAT_VERSION, height, width) + dose.astype("<f4").tobytes()


def decode_prediction(blob: bytes, name: str = "") -> np.ndarray:
    _, _, height, width = _check_header(blob, _PREDICTION_HEADER, PREDICTION_MAGIC, name or "prediction")
    return _planes(blob, _PREDICTION_HEADER.size, 1, height, width, name or "prediction")[0]


def write_dataset(
    samples: Sequence[Sample],
    path: str,
    *,
    splits: Optional[Dict[str, str]] = None,
    organs: Optional[List[str]] = None,
    spec: Optional[Dict[str, object]] = None,
    seed: int = 0,
) -> DatasetManifest:
    """Write one TCTD file per sample plus `manifest.json`; returns the manifest."""
    os.makedirs(path, exist_ok=True)
    sizes = {s.size for s in samples}
    n_oars = {s.n_oar for s in samples}
    if len(sizes) > 1 or len(n_oars) > 1:
        raise IntegrityError(f"inconsistent samples: sizes {sorted(sizes)}, n_oar {sorted(n_oars)}")
    files: List[str] = []
    blobs: List[bytes] = []
    for index, sample in enumerate(samples):
        stem = sample.name or f"sample_{index:04d}"
        filename = f"{stem}.tctd"
        blob = encode_sample(sample)
        with open(os.path.join(path, filename), "wb") as handle:
            handle.write(blob)
        files.append(filename)
        blobs.append(blob)
    manifest = DatasetManifest(
        count=len(files),
        files=files,
        splits=splits or {},
        organs=organs or [],
        spec=spec or {},
        seed=seed,
        checksum=sha256_bytes(blobs),
    )
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as handle:
        json.dump(manifest.model_dump(), handle, ensure_ascii=True, indent=2, sort_keys=True)
        handle.write("\n")
    logger.info("wrote %d samples to %s (sha256 %s)", len(files), path, manifest.checksum[:12])
    return manifest


def read_manifest(path: str) -> DatasetManifest:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise IntegrityError(f"no {MANIFEST_NAME} in {path}")
    with open(manifest_path, "r", encoding="utf-8") as handle:
        manifest = parse_record(DatasetManifest, handle.read(), IntegrityError, f"manifest in {path}")
    if manifest.count != len(manifest.files):
        raise IntegrityError(f"manifest count {manifest.count} != {len(manifest.files)} listed files")
    present = {name for name in os.listdir(path) if name.endswith(".tctd")}
    missing = [name for name in manifest.files if name not in present]
    extra = sorted(present - set(manifest.files))
    if missing or extra:
        raise IntegrityError(f"manifest lists {manifest.count} samples; missing {missing[:3]}, unlisted {extra[:3]}")
    return manifest


def read_dataset(path: str, split: Split = "all") -> List[Sample]:
    manifest = read_manifest(path)
    samples: List[Sample] = []
    for filename in manifest.files:
        stem = filename[: -len(".tctd")]
        if split != "all" and manifest.splits.get(stem, "train") != split:
            continue
        with open(os.path.join(path, filename), "rb") as handle:
            samples.append(decode_sample(handle.read(), name=stem))
    return samples


def dataset_checksum(path: str) -> str:
    manifest = read_manifest(path)
    blobs = []
    for filename in manifest.files:
        with open(os.path.join(path, filename), "rb") as handle:
            blobs.append(handle.read())
    return sha256_bytes(blobs)
