"""Pydantic Settings를 사용한 실행 설정 관리.

명령마다 하나의 설정 문서(JSON 또는 YAML)를 읽어 RunConfig로 검증합니다.
알 수 없는 키는 거부되며, 검증은 어떤 작업보다 먼저 수행됩니다.
환경 변수는 TWINFLOW_ 접두사와 __ 중첩 구분자로 덮어쓸 수 있습니다 (예: TWINFLOW_THREADS).
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import pydantic
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.core.flowmatch import SamplerConfig
from src.core.policy import ModelConfig, TwinFlags
from src.core.sim import SINGLE_ARM_KINDS, TaskKind, TaskSpec
from src.core.train import TrainConfig
from src.utils.exceptions import ConfigurationError

HASH_EXCLUDED = frozenset({"threads", "logging"})


class AppConfig(BaseModel):
    """애플리케이션 기본 설정.

    Attributes:
        name: 애플리케이션 이름
        version: 애플리케이션 버전
        debug: 디버그 모드 (로그 레벨을 DEBUG로 올림)
    """

    model_config = ConfigDict(extra="forbid")

    name: str = Field(default="twinflow")
    version: str = Field(default="0.1.0")
    debug: bool = Field(default=False)


class LoggingConfig(BaseModel):
    """로깅 설정.

    Attributes:
        level: 로그 레벨 (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        format: 로그 포맷 문자열
        rotation: 로그 파일 로테이션 기준 (크기 또는 시각)
        retention: 로그 파일 보관 기간
        json_logs: JSON 직렬화 로그 출력 여부
    """

    model_config = ConfigDict(extra="forbid")

    level: str = Field(default="INFO")
    format: str = Field(
        default="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} | {message}"
    )
    rotation: str = Field(default="50 MB")
    retention: str = Field(default="10 days")
    json_logs: bool = Field(default=False)


class PathsConfig(BaseModel):
    """산출물 경로. 명시하지 않은 경로는 out 아래의 기본 위치를 씁니다.

    Attributes:
        out: 실행 출력 디렉토리
        pretrain_data: 사전학습 데이터셋 디렉토리
        finetune_data: 미세조정 데이터셋 디렉토리
        single_checkpoint: 단일 정책 체크포인트
        twin_checkpoint: 복제된 두 팔 정책 체크포인트
        finetuned_checkpoint: 미세조정된 두 팔 정책 체크포인트
    """

    model_config = ConfigDict(extra="forbid")

    out: Path = Field(default=Path("runs/default"))
    pretrain_data: Path | None = None
    finetune_data: Path | None = None
    single_checkpoint: Path | None = None
    twin_checkpoint: Path | None = None
    finetuned_checkpoint: Path | None = None

    def resolve(self, name: str) -> Path:
        """경로 이름을 실제 경로로 바꿉니다."""
        defaults = {
            "pretrain_data": "data/pretrain",
            "finetune_data": "data/finetune",
            "single_checkpoint": "checkpoints/single",
            "twin_checkpoint": "checkpoints/twin",
            "finetuned_checkpoint": "checkpoints/twin_finetuned",
        }
        if name not in defaults:
            raise ConfigurationError(f"Unknown artifact path: {name}")
        explicit: Path | None = getattr(self, name)
        return explicit if explicit is not None else self.out / defaults[name]


class DataConfig(BaseModel):
    """데이터 생성 설정.

    Attributes:
        pretrain_tasks: 사전학습 혼합에 쓰는 단일 팔 작업들
        pretrain_episodes: 작업마다 생성할 사전학습 에피소드 수
        finetune_task: 미세조정 두 팔 작업
        finetune_episodes: 미세조정 에피소드 수
        target_hz: 재표본화 목표 주파수
        audit_threshold: 전문가 성공률 하한
        max_seed_attempts: 요청한 에피소드 수의 몇 배까지 시드를 시도할지
    """

    model_config = ConfigDict(extra="forbid")

    pretrain_tasks: list[TaskKind] = Field(default_factory=lambda: ["reach", "pick_place"])
    pretrain_episodes: int = Field(default=100, ge=1)
    finetune_task: TaskKind = "coordinated_lift"
    finetune_episodes: int = Field(default=50, ge=1)
    target_hz: float = Field(default=20.0, gt=0)
    audit_threshold: float = Field(default=0.95, ge=0, le=1)
    max_seed_attempts: int = Field(default=2, ge=1)

    @model_validator(mode="after")
    def validate_tasks(self) -> DataConfig:
        """사전학습은 단일 팔 작업, 미세조정은 두 팔 작업이어야 합니다."""
        if not self.pretrain_tasks:
            raise ValueError("data.pretrain_tasks must not be empty")
        for kind in self.pretrain_tasks:
            if kind not in SINGLE_ARM_KINDS:
                raise ValueError(f"pretraining task must be single-arm, got {kind}")
        if self.finetune_task in SINGLE_ARM_KINDS:
            raise ValueError(f"finetuning task must be bimanual, got {self.finetune_task}")
        return self


class EvalConfig(BaseModel):
    """평가 설정.

    Attributes:
        task: 평가 작업 (None이면 data.finetune_task)
        rollouts: 롤아웃 수
        horizon: 최대 환경 스텝 (None이면 작업 기본값)
        execution_prefix: 청크에서 실행할 환경 스텝 수 (None이면 전체)
    """

    model_config = ConfigDict(extra="forbid")

    task: TaskKind | None = None
    rollouts: int = Field(default=20, ge=1)
    horizon: int | None = Field(default=None, ge=1)
    execution_prefix: int | None = Field(default=None, ge=1)


class AblateConfig(BaseModel):
    """ablation 사다리 설정.

    Attributes:
        seeds: 학습/평가 반복 시드
        rollouts: 단계별 평가 롤아웃 수
        initial_loss_batch: 초기 손실 측정 배치 크기
    """

    model_config = ConfigDict(extra="forbid")

    seeds: list[int] = Field(default_factory=lambda: [0])
    rollouts: int = Field(default=20, ge=1)
    initial_loss_batch: int = Field(default=32, ge=1)


class SweepConfig(BaseModel):
    """데이터 효율 스윕 설정.

    Attributes:
        demo_counts: 미세조정 시연 수 목록 (포함 관계의 부분집합)
        subset_seed: 부분집합 순열 시드
        seeds: 학습/평가 반복 시드
        rollouts: 평가 롤아웃 수
    """

    model_config = ConfigDict(extra="forbid")

    demo_counts: list[int] = Field(default_factory=lambda: [20, 35, 50])
    subset_seed: int = Field(default=0, ge=0)
    seeds: list[int] = Field(default_factory=lambda: [0])
    rollouts: int = Field(default=20, ge=1)

    @model_validator(mode="after")
    def validate_counts(self) -> SweepConfig:
        if not self.demo_counts or any(n < 1 for n in self.demo_counts):
            raise ValueError("sweep.demo_counts must be positive")
        if sorted(self.demo_counts) != self.demo_counts:
            raise ValueError("sweep.demo_counts must be increasing")
        return self


class RunConfig(BaseSettings):
    """명령 하나의 전체 설정.

    Attributes:
        app: 애플리케이션 기본 설정
        logging: 로깅 설정
        seed: 루트 시드 (데이터/초기화/학습/평가 스트림이 여기서 파생됨)
        threads: 롤아웃/데이터 생성 병렬 상한 (TWINFLOW_THREADS)
        paths: 산출물 경로
        model: 모델 설정
        sampler: Euler 적분 설정
        data: 데이터 생성 설정
        pretrain: 단일 정책 사전학습 설정
        finetune: 두 팔 정책 미세조정 설정
        flags: 두 팔 구성 스위치
        eval: 평가 설정
        ablate: ablation 설정
        sweep: 데이터 스윕 설정
    """

    model_config = SettingsConfigDict(
        env_prefix="TWINFLOW_",
        env_nested_delimiter="__",
        extra="forbid",
    )

    app: AppConfig = Field(default_factory=AppConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)
    seed: int = Field(default=0, ge=0)
    threads: int = Field(default=1, ge=1)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    pretrain: TrainConfig = Field(default_factory=lambda: TrainConfig(total_steps=5000))
    finetune: TrainConfig = Field(default_factory=lambda: TrainConfig(total_steps=3000))
    flags: TwinFlags = Field(default_factory=TwinFlags)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ablate: AblateConfig = Field(default_factory=AblateConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    def eval_task(self) -> TaskSpec:
        """평가 작업 명세."""
        return TaskSpec(kind=self.eval.task or self.data.finetune_task)

    def summary(self) -> str:
        """로그용 설정 요약 (정렬된 JSON)."""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)


def load_run_config(path: Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """JSON 또는 YAML 설정 문서를 읽어 검증합니다.

    Args:
        path: 설정 파일 경로
        overrides: 최상위 키 덮어쓰기 (CLI의 --seed 등)

    Returns:
        검증된 RunConfig

    Raises:
        ConfigurationError: 파일이 없거나, 최상위가 매핑이 아니거나, 스키마 검증에 실패한 경우
    """
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}")

    try:
        with path.open(encoding="utf-8") as f:
            config_data: Any = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"Config file is not valid JSON/YAML: {path}: {exc}") from exc

    if config_data is None:
        config_data = {}
    elif not isinstance(config_data, Mapping):
        raise ConfigurationError(f"Config file root must be a mapping: {path}")

    data = dict(config_data)
    for key, value in (overrides or {}).items():
        if key == "out":
            paths = dict(data.get("paths") or {})
            paths["out"] = value
            data["paths"] = paths
        else:
            data[key] = value

    try:
        return RunConfig(**data)
    except pydantic.ValidationError as exc:
        raise ConfigurationError(f"Invalid config {path}:\n{exc}") from exc


def config_hash(cfg: RunConfig) -> str:
    """결과에 영향을 주는 설정만으로 계산한 sha256 (threads, logging 제외)."""
    payload = cfg.model_dump(mode="json", exclude=set(HASH_EXCLUDED))
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
