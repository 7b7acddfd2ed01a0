"""시연 데이터셋 저장 형식과 학습용 배치 샘플링.

디렉토리 구조:
    meta.json                   작업, 주파수, 차원, 정규화 통계, 에피소드 목록, 전문가 감사
    episodes/episode_NNNNN.rec  8바이트 little-endian 헤더 길이 + JSON 헤더 + float32 blob

에피소드는 저장 전에 목표 주파수(기본 20 Hz)로 재표본화됩니다.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np
from loguru import logger
from numpy.typing import NDArray

from src.core.geometry import ARM_DIM, DEFAULT_HZ, ActionChunk, resample_chunk, resample_linear
from src.core.numkernel import named_stream
from src.core.policy import STD_FLOOR, Normalizer, ObsBatch
from src.core.sim import Episode, tokenize
from src.utils.exceptions import ArtifactMissingError, ValidationError

Array = NDArray[np.float64]

META_NAME = "meta.json"
EPISODE_DIR = "episodes"
_HEADER = struct.Struct("<Q")
_DTYPE = "<f4"
_ARRAYS = ("ego", "wrist", "proprio", "actions")


# ---------------------------------------------------------------- 재표본화 / 통계
def resample_episode(episode: Episode, target_hz: float = DEFAULT_HZ) -> Episode:
    """행동과 고유감각은 resample_chunk로, 특징은 선형 보간으로 재표본화합니다."""
    if episode.frequency == target_hz:
        return episode
    n_arms = len(episode.arms)
    actions = resample_chunk(ActionChunk(episode.actions, episode.frequency), target_hz).actions
    steps = episode.proprio.shape[0]
    proprio_flat = episode.proprio.reshape(steps, n_arms * ARM_DIM)
    proprio = resample_chunk(ActionChunk(proprio_flat, episode.frequency), target_hz).actions
    return replace(
        episode,
        frequency=float(target_hz),
        ego=resample_linear(episode.ego, episode.frequency, target_hz),
        wrist=resample_linear(episode.wrist, episode.frequency, target_hz),
        proprio=proprio.reshape(actions.shape[0], n_arms, ARM_DIM),
        actions=actions,
    )


def compute_stats(episodes: Sequence[Episode]) -> Normalizer:
    """행동과 고유감각의 10차원 블록을 팔 구분 없이 모아 평균/표준편차를 계산합니다."""
    if not episodes:
        raise ValidationError("cannot compute statistics of an empty dataset")
    rows = []
    for ep in episodes:
        rows.append(ep.actions.reshape(-1, ARM_DIM))
        rows.append(ep.proprio.reshape(-1, ARM_DIM))
    pooled = np.concatenate(rows).astype(np.float64)
    return Normalizer(mean=pooled.mean(axis=0), std=np.maximum(pooled.std(axis=0), STD_FLOOR))


# ---------------------------------------------------------------- 직렬화
def _episode_bytes(episode: Episode) -> bytes:
    arrays = []
    blobs = []
    offset = 0
    for name in _ARRAYS:
        data = np.ascontiguousarray(getattr(episode, name), dtype=_DTYPE)
        raw = data.tobytes()
        arrays.append(
            {"name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "task": episode.task,
        "seed": episode.seed,
        "instruction": episode.instruction,
        "frequency": episode.frequency,
        "arms": list(episode.arms),
        "success": episode.success,
        "combo": list(episode.combo) if episode.combo is not None else None,
        "holder_trace": [list(h) for h in episode.holder_trace],
        "arrays": arrays,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(len(header_bytes)) + header_bytes + b"".join(blobs)


def write_episode(path: Path, episode: Episode) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_episode_bytes(episode))


def _combo(value: list[int] | None) -> tuple[int, int] | None:
    return None if value is None else (int(value[0]), int(value[1]))


def read_episode(path: Path) -> Episode:
    """.rec 파일 하나를 읽습니다."""
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"Episode file too short: {path}")
    (header_len,) = _HEADER.unpack_from(raw, 0)
    start = _HEADER.size + header_len
    header = json.loads(raw[_HEADER.size : start].decode("utf-8"))
    arrays: dict[str, Array] = {}
    for entry in header["arrays"]:
        lo = start + int(entry["offset"])
        values = np.frombuffer(raw[lo : lo + int(entry["nbytes"])], dtype=_DTYPE)
        arrays[entry["name"]] = values.reshape(entry["shape"]).astype(np.float64)
    return Episode(
        task=header["task"],
        seed=int(header["seed"]),
        instruction=header["instruction"],
        frequency=float(header["frequency"]),
        arms=tuple(header["arms"]),
        success=bool(header["success"]),
        combo=_combo(header["combo"]),
        holder_trace=tuple(tuple(h) for h in header["holder_trace"]),
        **arrays,
    )


def write_dataset(directory: Path, episodes: Sequence[Episode], meta: dict[str, Any]) -> Path:
    """meta.json과 에피소드 파일을 씁니다. 정규화 통계는 여기서 계산해 meta에 넣습니다."""
    if not episodes:
        raise ValidationError("refusing to write an empty dataset")
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for index, episode in enumerate(episodes):
        name = f"{EPISODE_DIR}/episode_{index:05d}.rec"
        write_episode(directory / name, episode)
        names.append(name)
    n_arms = {len(ep.arms) for ep in episodes}
    if len(n_arms) != 1:
        raise ValidationError("all episodes in a dataset must control the same number of arms")
    full_meta = {
        **meta,
        "frequency": episodes[0].frequency,
        "n_arms": n_arms.pop(),
        "feat_dim": int(episodes[0].ego.shape[1]),
        "arm_dim": ARM_DIM,
        "normalization": compute_stats(episodes).to_dict(),
        "episodes": names,
        "count": len(names),
    }
    (directory / META_NAME).write_text(
        json.dumps(full_meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info(f"Wrote {len(names)} episodes to {directory}")
    return directory


def dataset_hash(directory: Path) -> str:
    """meta.json과 모든 에피소드 파일 바이트에 대한 sha256."""
    meta = read_meta(directory)
    digest = hashlib.sha256((directory / META_NAME).read_bytes())
    for name in meta["episodes"]:
        digest.update((directory / name).read_bytes())
    return digest.hexdigest()


def read_meta(directory: Path, stage: str = "gen-data") -> dict[str, Any]:
    meta_file = directory / META_NAME
    if not meta_file.exists():
        raise ArtifactMissingError(
            f"Dataset not found: {directory} (produced by '{stage}')", stage=stage
        )
    meta: dict[str, Any] = json.loads(meta_file.read_text(encoding="utf-8"))
    return meta


# ---------------------------------------------------------------- 학습 데이터셋
@dataclass(frozen=True)
class DemoBatch:
    """지시어 길이별로 묶인 학습 배치.

    Attributes:
        groups: (관측 배치, 원래 좌표계 행동 청크 (b, T, D)) 목록
        size: 전체 배치 크기
    """

    groups: tuple[tuple[ObsBatch, Array], ...]
    size: int


class DemoDataset:
    """메모리에 올린 시연 에피소드와 정규화 통계."""

    def __init__(self, episodes: Sequence[Episode], normalizer: Normalizer | None = None) -> None:
        if not episodes:
            raise ValidationError("dataset is empty")
        self.episodes = list(episodes)
        self.n_arms = len(self.episodes[0].arms)
        if any(len(ep.arms) != self.n_arms for ep in self.episodes):
            raise ValidationError("all episodes must control the same number of arms")
        self.normalizer = normalizer or compute_stats(self.episodes)
        self._lengths = np.array([ep.length for ep in self.episodes], dtype=np.int64)
        self._offsets = np.concatenate([[0], np.cumsum(self._lengths)])

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def n_windows(self) -> int:
        return int(self._offsets[-1])

    @classmethod
    def load(cls, directory: Path, stage: str = "gen-data") -> DemoDataset:
        """디렉토리에서 데이터셋을 읽습니다.

        Raises:
            ArtifactMissingError: meta.json이 없는 경우
        """
        meta = read_meta(directory, stage)
        episodes = [read_episode(directory / name) for name in meta["episodes"]]
        return cls(episodes, Normalizer.from_dict(meta["normalization"]))

    def subset(self, n: int, seed: int) -> DemoDataset:
        """고정 순열의 앞 n개 에피소드 (n이 커지면 포함 관계가 유지됨)."""
        if not 1 <= n <= len(self.episodes):
            raise ValidationError(f"subset size {n} outside [1, {len(self.episodes)}]")
        order = named_stream(seed, "subset").permutation(len(self.episodes))
        chosen = sorted(int(i) for i in order[:n])
        return DemoDataset([self.episodes[i] for i in chosen])

    def window(self, episode_index: int, start: int, chunk_len: int) -> tuple[Episode, Array]:
        """start부터 chunk_len 길이의 행동 창. 끝을 넘으면 마지막 행동을 반복합니다."""
        ep = self.episodes[episode_index]
        idx = np.minimum(np.arange(start, start + chunk_len), ep.length - 1)
        return ep, ep.actions[idx]

    def sample_batch(self, rng: np.random.Generator, batch_size: int, chunk_len: int) -> DemoBatch:
        """모든 (에피소드, 시작 인덱스) 쌍에서 균등하게 batch_size개를 뽑습니다."""
        if batch_size < 1:
            raise ValidationError(f"batch size must be positive, got {batch_size}")
        flat = rng.integers(0, self.n_windows, size=batch_size)
        by_length: dict[int, list[tuple[Episode, int, Array]]] = {}
        for value in flat:
            ep_index = int(np.searchsorted(self._offsets, value, side="right") - 1)
            start = int(value - self._offsets[ep_index])
            ep, chunk = self.window(ep_index, start, chunk_len)
            length = len(ep.instruction.split())
            by_length.setdefault(length, []).append((ep, start, chunk))
        groups = []
        for length in sorted(by_length):
            items = by_length[length]
            obs = ObsBatch(
                instruction=np.array(
                    [tokenize(ep.instruction) for ep, _, _ in items], dtype=np.int64
                ).reshape(len(items), length),
                ego=np.stack([ep.ego[s] for ep, s, _ in items]),
                wrist=np.stack([ep.wrist[s] for ep, s, _ in items]),
                proprio=np.stack([ep.proprio[s] for ep, s, _ in items]),
            )
            groups.append((obs, np.stack([chunk for _, _, chunk in items])))
        return DemoBatch(groups=tuple(groups), size=batch_size)
