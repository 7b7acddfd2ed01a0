"""Pytest configuration and shared fixtures."""

import json
from collections.abc import Callable, Iterator
from pathlib import Path
from typing import Any

import numpy as np
import pytest
from loguru import logger

from src.core.numkernel import named_stream
from src.core.policy import ModelConfig, ObsBatch, SinglePolicy, TwinPolicy, duplicate

ObsFactory = Callable[..., ObsBatch]


@pytest.fixture(autouse=True)
def _reset_logger() -> Iterator[None]:
    """setup_logger가 추가한 파일 싱크를 테스트마다 닫습니다."""
    yield
    logger.remove()


@pytest.fixture
def tiny_model() -> ModelConfig:
    """그래디언트 검사와 빠른 학습에 쓰는 작은 모델 설정."""
    return ModelConfig(
        embed_dim=8,
        n_heads=2,
        n_blocks=2,
        feat_dim=4,
        vocab_size=8,
        chunk_len=3,
        max_instruction_len=3,
        head_blocks=1,
    )


@pytest.fixture
def single_policy(tiny_model: ModelConfig) -> SinglePolicy:
    return SinglePolicy.fresh(tiny_model, seed=0)


@pytest.fixture
def twin_policy(single_policy: SinglePolicy) -> TwinPolicy:
    return duplicate(single_policy)


@pytest.fixture
def make_obs(tiny_model: ModelConfig) -> ObsFactory:
    """임의 관측 배치를 만드는 팩토리."""

    def factory(
        seed: int = 0, size: int = 2, n_arms: int = 1, instruction_len: int = 2
    ) -> ObsBatch:
        rng = named_stream(seed, "obs")
        cfg = tiny_model
        return ObsBatch(
            instruction=rng.integers(0, cfg.vocab_size, size=(size, instruction_len)),
            ego=rng.normal(size=(size, cfg.feat_dim)),
            wrist=rng.normal(size=(size, n_arms, cfg.feat_dim)),
            proprio=rng.normal(size=(size, n_arms, cfg.proprio_dim)),
        )

    return factory


@pytest.fixture
def mirrored() -> Callable[[ObsBatch], ObsBatch]:
    """단일 관측 배치를 두 팔 입력이 같은 배치로 바꿉니다."""

    def convert(batch: ObsBatch) -> ObsBatch:
        return ObsBatch(
            instruction=batch.instruction,
            ego=batch.ego,
            wrist=np.repeat(batch.wrist, 2, axis=1),
            proprio=np.repeat(batch.proprio, 2, axis=1),
        )

    return convert


@pytest.fixture
def smoke_config_data() -> dict[str, Any]:
    """몇 초 안에 끝나는 전체 파이프라인 설정."""
    return {
        "seed": 0,
        "model": {
            "embed_dim": 8,
            "n_heads": 2,
            "n_blocks": 1,
            "chunk_len": 4,
            "head_blocks": 1,
        },
        "sampler": {"n_steps": 2},
        "data": {
            "pretrain_tasks": ["reach"],
            "pretrain_episodes": 2,
            "finetune_task": "coordinated_lift",
            "finetune_episodes": 3,
            "audit_threshold": 0.5,
            "max_seed_attempts": 3,
        },
        "pretrain": {"total_steps": 3, "batch_size": 2, "log_every": 1},
        "finetune": {"total_steps": 3, "batch_size": 2, "log_every": 1},
        "eval": {"rollouts": 2, "horizon": 5},
        "ablate": {"seeds": [0], "rollouts": 1, "initial_loss_batch": 2},
        "sweep": {"demo_counts": [2, 3], "seeds": [0], "rollouts": 1},
    }


@pytest.fixture
def smoke_config(tmp_path: Path, smoke_config_data: dict[str, Any]) -> Path:
    """smoke 설정을 tmp_path/run.json으로 쓰고 출력 디렉토리를 tmp_path/out으로 지정합니다."""
    data = dict(smoke_config_data)
    data["paths"] = {"out": str(tmp_path / "out")}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path
