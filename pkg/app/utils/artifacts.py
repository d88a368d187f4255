"""
Run Artifacts
=============

Table writers and the reproducibility manifest
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Union

import pandas as pd

from app.core.exceptions import InputValidationError
from app.models.schemas import RunManifest

logger = logging.getLogger(__name__)

FORMATS = ("csv", "json", "both")
DATE_FORMAT = "%Y-%m-%d"


def sha256_file(path: Union[str, Path]) -> str:
    """Hex digest of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_table(frame: pd.DataFrame, directory: Union[str, Path], name: str, fmt: str = "csv") -> List[Path]:
    """
    Write a table as CSV, JSON records or both

    Args:
        frame: Table; a named index is written as a column
        directory: Output directory (created if missing)
        name: File stem
        fmt: csv, json or both

    Returns:
        Paths written
    """
    if fmt not in FORMATS:
        raise InputValidationError(f"unknown output format '{fmt}', expected one of {', '.join(FORMATS)}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = frame.reset_index() if frame.index.name else frame
    written = []
    if fmt in ("csv", "both"):
        path = directory / f"{name}.csv"
        table.to_csv(path, index=False, date_format=DATE_FORMAT, float_format="%.10g")
        written.append(path)
    if fmt in ("json", "both"):
        path = directory / f"{name}.json"
        table.to_json(path, orient="records", date_format="iso", double_precision=10, indent=2)
        written.append(path)
    for path in written:
        logger.info(f"wrote {path} ({len(table)} rows)")
    return written


def digests(paths: List[Path]) -> Dict[str, str]:
    return {path.name: sha256_file(path) for path in paths}


def write_manifest(manifest: RunManifest, directory: Union[str, Path]) -> Path:
    """Write manifest.json next to the outputs it describes"""
    path = Path(directory) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2))
    logger.info(f"wrote manifest {path}")
    return path


def read_manifest(path: Union[str, Path]) -> RunManifest:
    try:
        return RunManifest.model_validate(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise InputValidationError(f"manifest {path} is not valid JSON: {exc}") from exc
