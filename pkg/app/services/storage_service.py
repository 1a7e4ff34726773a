"""
Storage service for corpora, checkpoints, logs and reports
"""
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import orjson
import torch
from pydantic import BaseModel

from ..errors import ContractError, ParseError, StorageError
from ..models.configs import ModelConfig
from ..models.scene import Scene
from ..models.trajectory import Vocabulary
from ..utils.validators import config_hash, ensure_output_dir, file_sha256
from .denoiser_service import DenoiserModel
from .scene_service import decode_scene, encode_scene

logger = logging.getLogger(__name__)

RECORD_SCHEMA_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
ORJSON_OPTIONS = orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY


class Checkpoint(BaseModel):
    """Loaded checkpoint contents"""
    model_config = {"arbitrary_types_allowed": True}

    model: Any
    optimizer_state: Optional[Dict[str, Any]] = None
    step: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    run_config: Dict[str, Any] = {}
    checkpoint_hash: str


class StorageService:
    """Service for all on-disk artifacts: JSONL records and torch checkpoints"""

    def header(
        self,
        kind: str,
        run_config: Union[BaseModel, str, None] = None,
        checkpoint_hash: Optional[str] = None,
        **extra: Any,
    ) -> Dict[str, Any]:
        run_hash = run_config if isinstance(run_config, str) or run_config is None else config_hash(run_config)
        return {
            "schema_version": RECORD_SCHEMA_VERSION,
            "kind": kind,
            "run_config_hash": run_hash,
            "checkpoint_hash": checkpoint_hash,
            **extra,
        }

    def write_records(self, path: Union[str, Path], header: Dict[str, Any], records: Iterable[Any]) -> Path:
        """Write a header line followed by one JSON record per line"""
        path = Path(path)
        ensure_output_dir(path.parent)
        try:
            with open(path, "wb") as f:
                f.write(orjson.dumps(header, option=ORJSON_OPTIONS) + b"\n")
                for record in records:
                    if isinstance(record, BaseModel):
                        record = record.model_dump(mode="json")
                    f.write(orjson.dumps(record, option=ORJSON_OPTIONS) + b"\n")
        except OSError as e:
            logger.error(f"Failed to write {path}: {e}")
            raise StorageError(f"cannot write {path}: {e}") from e
        logger.info(f"wrote {header.get('kind')} records to {path}")
        return path

    def read_records(self, path: Union[str, Path], kind: Optional[str] = None) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
        """
        Parse a record file

        Returns:
            (header, records)

        Raises:
            ParseError: malformed line, missing header or kind mismatch (with the offending line number)
        """
        path = Path(path)
        try:
            lines = path.read_bytes().splitlines()
        except OSError as e:
            logger.error(f"Failed to read {path}: {e}")
            raise StorageError(f"cannot read {path}: {e}") from e
        parsed = []
        for number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                value = orjson.loads(line)
            except orjson.JSONDecodeError as e:
                raise ParseError(f"{path.name}: invalid JSON ({e})", number) from e
            if not isinstance(value, dict):
                raise ParseError(f"{path.name}: record is not an object", number)
            parsed.append((number, value))
        if not parsed:
            raise ParseError(f"{path.name}: empty file, header missing", 1)
        first_line, header = parsed[0]
        if header.get("schema_version") != RECORD_SCHEMA_VERSION or "kind" not in header:
            raise ParseError(f"{path.name}: missing or unsupported header", first_line)
        if kind is not None and header["kind"] != kind:
            raise ParseError(f"{path.name}: expected kind {kind!r}, got {header['kind']!r}", first_line)
        return header, [v for _, v in parsed[1:]]

    def save_corpus(self, path: Union[str, Path], scenes: List[Scene], header: Dict[str, Any]) -> Path:
        return self.write_records(path, header, (encode_scene(s) for s in scenes))

    def load_corpus(self, path: Union[str, Path]) -> Tuple[Dict[str, Any], List[Scene]]:
        header, records = self.read_records(path, kind="corpus")
        scenes = []
        for i, record in enumerate(records):
            try:
                scenes.append(decode_scene(record))
            except ContractError as e:
                # header occupies line 1
                raise ParseError(f"{Path(path).name}: {e}", i + 2) from e
        return header, scenes

    def save_checkpoint(
        self,
        path: Union[str, Path],
        model: DenoiserModel,
        optimizer: Optional[torch.optim.Optimizer] = None,
        step: int = 0,
        run_config: Optional[BaseModel] = None,
        rng_state: Optional[Dict[str, Any]] = None,
    ) -> str:
        """Save a checkpoint container; returns its SHA-256"""
        path = Path(path)
        ensure_output_dir(path.parent)
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model_config": model.config.model_dump(),
            "vocabulary": model.vocab.model_dump(),
            "state_dict": model.state_dict(),
            "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
            "step": step,
            "params_version": model.params_version,
            "rng_state": rng_state,
            "run_config": run_config.model_dump(mode="json") if run_config is not None else {},
        }
        try:
            torch.save(payload, path)
        except OSError as e:
            logger.error(f"Failed to save checkpoint {path}: {e}")
            raise StorageError(f"cannot write checkpoint {path}: {e}") from e
        digest = file_sha256(path)
        logger.info(f"saved checkpoint {path} (step {step}, sha256 {digest[:12]})")
        return digest

    def load_checkpoint(self, path: Union[str, Path]) -> Checkpoint:
        path = Path(path)
        if not path.exists():
            raise StorageError(f"checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as e:
            logger.error(f"Failed to load checkpoint {path}: {e}")
            raise StorageError(f"cannot load checkpoint {path}: {e}") from e
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise StorageError(f"unsupported checkpoint format {payload.get('format_version')!r}")
        model = DenoiserModel(ModelConfig(**payload["model_config"]), Vocabulary(**payload["vocabulary"]))
        model.load_state_dict(payload["state_dict"])
        model.params_version = payload.get("params_version", 0)
        model.eval()
        return Checkpoint(
            model=model,
            optimizer_state=payload.get("optimizer_state"),
            step=payload.get("step", 0),
            rng_state=payload.get("rng_state"),
            run_config=payload.get("run_config") or {},
            checkpoint_hash=file_sha256(path),
        )


storage_service = StorageService()
