"""
Utility functions for validation, hashing and output paths
"""
import hashlib
from pathlib import Path
from typing import Union

import orjson
from pydantic import BaseModel

from ..errors import StorageError


def compute_sha256(data: bytes) -> str:
    """
    Compute the SHA-256 hex digest of a byte string

    Args:
        data: Bytes to hash

    Returns:
        Hex digest
    """
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: Union[str, Path]) -> str:
    """
    Hash a file in chunks

    Args:
        path: File to hash

    Returns:
        Hex digest of the file contents
    """
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as handle:
            for chunk in iter(lambda: handle.read(1 << 20), b""):
                digest.update(chunk)
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    return digest.hexdigest()


def config_hash(config: BaseModel) -> str:
    """SHA-256 of the sorted-key JSON dump of a config model"""
    payload = orjson.dumps(config.model_dump(mode="json"), option=orjson.OPT_SORT_KEYS)
    return compute_sha256(payload)


def stable_name_hash(name: str) -> int:
    """Process-independent 64-bit integer derived from a name"""
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def ensure_output_dir(path: Union[str, Path]) -> Path:
    """
    Create an output directory if needed

    Args:
        path: Directory to create

    Returns:
        The directory as a Path
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create output directory {out}: {e}") from e
    return out

