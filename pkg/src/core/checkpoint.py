"""정책 체크포인트 저장/로드.

체크포인트는 디렉토리 하나입니다:
    manifest.json  형식 버전, 종류(single/twin), 모델 설정, 스위치, 정규화 통계,
                   텐서 목록(name/shape/dtype/offset/nbytes), 별칭 목록(name/target/offset), 내용 해시
    tensors.bin    이름 순서로 이어 붙인 little-endian float32

별칭 텐서는 한 번만 저장되고 대상과 같은 offset을 가리킵니다.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np
from loguru import logger

from src.core.numkernel import ParamStore, Tensor
from src.core.policy import ModelConfig, Normalizer, Policy, SinglePolicy, TwinFlags, TwinPolicy
from src.utils.exceptions import ArtifactMissingError, ValidationError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
_DTYPE = "<f4"


def _canonical(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def _content_hash(structure: dict[str, Any], blob: bytes) -> str:
    digest = hashlib.sha256()
    digest.update(_canonical(structure).encode("utf-8"))
    digest.update(blob)
    return digest.hexdigest()


def save_checkpoint(policy: Policy, path: Path, extra: dict[str, Any] | None = None) -> str:
    """정책을 path 디렉토리에 저장하고 내용 해시를 반환합니다.

    Args:
        policy: 저장할 정책
        path: 체크포인트 디렉토리
        extra: manifest에 함께 기록할 부가 정보 (해시에는 포함되지 않음)

    Returns:
        sha256 내용 해시
    """
    chunks: list[bytes] = []
    tensors: list[dict[str, Any]] = []
    offsets: dict[str, int] = {}
    offset = 0
    for name, tensor in policy.store.items():
        raw = np.ascontiguousarray(tensor.data, dtype=_DTYPE).tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        offsets[name] = offset
        chunks.append(raw)
        offset += len(raw)
    aliases = [
        {"name": name, "target": target, "offset": offsets[target]}
        for name, target in policy.store.aliases()
    ]
    structure: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "kind": policy.kind,
        "model_config": policy.config.model_dump(),
        "flags": policy.flags.model_dump() if isinstance(policy, TwinPolicy) else None,
        "normalizer": policy.normalizer.to_dict(),
        "tensors": tensors,
        "aliases": aliases,
    }
    blob = b"".join(chunks)
    content_hash = _content_hash(structure, blob)

    path.mkdir(parents=True, exist_ok=True)
    (path / BLOB_NAME).write_bytes(blob)
    manifest = {**structure, "content_hash": content_hash, "extra": extra or {}}
    (path / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info(
        f"Saved {policy.kind} checkpoint to {path} "
        f"({len(tensors)} tensors, {len(aliases)} aliases, hash {content_hash[:12]})"
    )
    return content_hash


def read_manifest(path: Path, stage: str | None = None) -> dict[str, Any]:
    """manifest.json을 읽습니다.

    Raises:
        ArtifactMissingError: 체크포인트가 없는 경우
    """
    manifest_file = path / MANIFEST_NAME
    if not manifest_file.exists() or not (path / BLOB_NAME).exists():
        where = f" (produced by '{stage}')" if stage else ""
        raise ArtifactMissingError(f"Checkpoint not found: {path}{where}", stage=stage)
    data: dict[str, Any] = json.loads(manifest_file.read_text(encoding="utf-8"))
    if data.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"Unsupported checkpoint format: {data.get('format_version')}")
    return data


def checkpoint_hash(path: Path, stage: str | None = None) -> str:
    """저장된 내용 해시를 반환합니다."""
    return str(read_manifest(path, stage)["content_hash"])


def load_checkpoint(path: Path, stage: str | None = None) -> Policy:
    """체크포인트를 읽어 SinglePolicy 또는 TwinPolicy를 복원합니다.

    별칭은 같은 텐서 객체로 복원됩니다.

    Raises:
        ArtifactMissingError: 체크포인트가 없는 경우
        ValidationError: 내용 해시가 맞지 않는 경우
    """
    manifest = read_manifest(path, stage)
    blob = (path / BLOB_NAME).read_bytes()
    structure = {key: manifest[key] for key in manifest if key not in ("content_hash", "extra")}
    if _content_hash(structure, blob) != manifest["content_hash"]:
        raise ValidationError(f"Checkpoint content hash mismatch: {path}")

    store = ParamStore()
    for entry in manifest["tensors"]:
        start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        values = np.frombuffer(blob[start : start + nbytes], dtype=_DTYPE)
        store.register(entry["name"], Tensor(values.reshape(entry["shape"])))
    for entry in manifest["aliases"]:
        store.alias(entry["name"], entry["target"])

    config = ModelConfig(**manifest["model_config"])
    normalizer = Normalizer.from_dict(manifest["normalizer"])
    if manifest["kind"] == "twin":
        return TwinPolicy(config, store, normalizer, TwinFlags(**manifest["flags"]))
    return SinglePolicy(config, store, normalizer)
