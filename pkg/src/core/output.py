"""
Result Writers

Atomic CSV and JSON artifacts stamped with seed, version and wall time.
"""

from pathlib import Path
from typing import Any, Dict, Optional, Union
import json
import logging
import math
import os
import subprocess
import tempfile

import numpy as np
import pandas as pd

from . import __version__

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def version_string() -> str:
    """`git describe --tags --always --dirty` of the source tree, else the package version."""
    try:
        result = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return __version__
    described = result.stdout.strip()
    return described if result.returncode == 0 and described else __version__


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


def encode_json(value: Any, indent: int = 2, _level: int = 0) -> str:
    """
    Serialize to JSON with every float written to 17 significant digits.

    NaN and infinities become null; keys keep their insertion order.
    """
    value = _plain(value)
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            return "null"
        text = FLOAT_FORMAT % value
        return text if any(c in text for c in ".eEn") else text + ".0"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {encode_json(v, indent, _level + 1)}" for k, v in value.items()]
        return "{\n" + ",\n".join(items) + f"\n{end}}}"
    if isinstance(value, list):
        if not value:
            return "[]"
        items = [f"{pad}{encode_json(v, indent, _level + 1)}" for v in value]
        return "[\n" + ",\n".join(items) + f"\n{end}]"
    raise TypeError(f"cannot serialize {type(value).__name__} to JSON")


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    """Write text to a temp file next to path, then rename it over path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def stamp(payload: Dict[str, Any], seed: int, wall_time_s: float, config: Optional[Dict] = None) -> Dict[str, Any]:
    """Add the seed, version, wall time and config echo to an artifact payload."""
    stamped = dict(payload)
    stamped["seed"] = int(seed)
    stamped["version"] = version_string()
    stamped["wall_time_s"] = float(wall_time_s)
    stamped["config"] = dict(config or {})
    return stamped


def write_json(path: Union[str, Path], payload: Dict[str, Any]) -> Path:
    path = atomic_write_text(path, encode_json(payload) + "\n")
    logger.info(f"JSON written: {path}")
    return path


def dataframe_csv(frame: pd.DataFrame, seed: int, stamps: Optional[Dict[str, Any]] = None) -> str:
    """
    CSV text with a header row, 17-digit floats and a trailing seed column.

    `stamps` adds constant columns (version, wall time) before the seed.
    """
    frame = frame.copy()
    for name, value in (stamps or {}).items():
        frame[name] = value
    frame["seed"] = int(seed)
    return frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\r\n")


def write_csv(
    path: Union[str, Path], frame: pd.DataFrame, seed: int, stamps: Optional[Dict[str, Any]] = None
) -> Path:
    path = atomic_write_text(path, dataframe_csv(frame, seed, stamps))
    logger.info(f"CSV written: {path} ({len(frame)} rows)")
    return path


def strip_volatile(payload: Any) -> Any:
    """Payload without the wall-time fields, at any depth."""
    if isinstance(payload, dict):
        return {k: strip_volatile(v) for k, v in payload.items() if k != "wall_time_s"}
    if isinstance(payload, list):
        return [strip_volatile(v) for v in payload]
    return payload
