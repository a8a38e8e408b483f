from __future__ import annotations

import hashlib
import json
from typing import Any, Dict, Iterable, Type, TypeVar, Union

from pydantic import BaseModel, ValidationError

from app.errors import DataError


RecordT = TypeVar("RecordT", bound=BaseModel)


def sha256_bytes(chunks: Iterable[bytes]) -> str:
    digest = hashlib.sha256()
    for chunk in chunks:
        digest.update(chunk)
    return digest.hexdigest()


def canonical_json(data: Dict[str, Any]) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def parse_record(
    model: Type[RecordT],
    raw: Union[str, bytes],
    error: Type[DataError],
    what: str,
) -> RecordT:
    """Decode a JSON record into `model`, raising `error` for bad text or bad fields."""
    try:
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        return model.model_validate(json.loads(text))
    except (ValueError, ValidationError) as exc:
        raise error(f"{what} unreadable: {exc}") from exc
