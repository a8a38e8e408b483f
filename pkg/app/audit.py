from __future__ import annotations

import json
import logging
import os
from datetime import datetime, timezone
from typing import Any, Dict


logger = logging.getLogger(__name__)


def write_audit_log(path: str, record: Dict[str, Any]) -> bool:
    """Append one command record as a JSON line. A failed write is logged, never raised."""
    payload = {"ts": datetime.now(timezone.utc).isoformat(), **record}
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(payload, ensure_ascii=True, sort_keys=True, default=str) + "\n")
    except OSError as exc:
        logger.warning("audit log %s not written: %s", path, exc)
        return False
    return True
