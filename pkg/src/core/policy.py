"""데스크 규모 단일 팔 / 두 팔 정책 모델.

관측 인코딩(readout 토큰 포함), 백본, 공유 flow matching 행동 헤드,
그리고 단일 정책을 두 팔 정책으로 복제하는 절차를 제공합니다.

토큰 배치:
    공유 구간 = [지시어 토큰들, ego 토큰] + 공유 위치 임베딩
    팔 구간 = [손목 토큰, 고유감각(proprio) 토큰, readout 토큰] + 팔 위치 임베딩

파라미터 이름:
    단일: encoder.*, proprio.*, backbone.*, head.*
    두 팔: encoder.*, head.* (left./right. 별칭으로도 참조), left./right.backbone.*,
          left./right.proprio.*, router.block{i}.*

팔 인덱스 0은 오른팔, 1은 왼팔이며 행동 배치도 같은 순서입니다.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.flowmatch import SamplerConfig, euler_sample
from src.core.geometry import ARM_DIM, DEFAULT_HZ, ActionChunk
from src.core.numkernel import (
    ParamStore,
    Tensor,
    concat,
    embedding,
    gelu,
    no_grad,
)
from src.core.twinattn import (
    ArmBlockParams,
    ArmBranch,
    Branch,
    BlockWeights,
    GateRouter,
    MergedBranch,
    ModalitySegments,
    build_duplicated_mask,
    build_joint_mask,
    joint_block,
    linear,
    transformer_block,
)
from src.utils.exceptions import ValidationError

Array = NDArray[Any]
PolicyKind = Literal["single", "twin"]

ARM_TOKENS = 3
STD_FLOOR = 1e-2
_TAU_SCALE = 100.0


class ModelConfig(BaseModel):
    """모델 구조 설정 (생성 후 변경 불가).

    Attributes:
        embed_dim: 토큰 임베딩 차원
        n_heads: attention 헤드 수
        n_blocks: 백본 블록 수
        feat_dim: ego/손목 특징 벡터 차원
        proprio_dim: 고유감각 벡터 차원 (팔 하나의 10차원 포즈)
        vocab_size: 지시어 어휘 크기
        chunk_len: 행동 청크 길이 T (환경 주파수로 재표본화하려면 2 이상)
        arm_dim: 팔 하나의 행동 차원
        max_instruction_len: 지시어 최대 토큰 수
        n_ego_tokens: ego 토큰 수
        ffn_mult: FFN 은닉 배수
        head_blocks: 행동 헤드 블록 수
        chunk_hz: 예측 청크의 제어 주파수
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    embed_dim: int = Field(default=64, ge=2)
    n_heads: int = Field(default=4, ge=1)
    n_blocks: int = Field(default=4, ge=1)
    feat_dim: int = Field(default=16, ge=1)
    proprio_dim: int = Field(default=ARM_DIM, ge=1)
    vocab_size: int = Field(default=32, ge=1)
    chunk_len: int = Field(default=20, ge=2)
    arm_dim: int = Field(default=ARM_DIM)
    max_instruction_len: int = Field(default=8, ge=0)
    n_ego_tokens: int = Field(default=1, ge=1)
    ffn_mult: int = Field(default=2, ge=1)
    head_blocks: int = Field(default=2, ge=1)
    chunk_hz: float = Field(default=DEFAULT_HZ, gt=0)

    @model_validator(mode="after")
    def validate_shapes(self) -> ModelConfig:
        """헤드 분할과 사인 임베딩이 가능한 차원인지 검증합니다."""
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        if self.arm_dim != ARM_DIM:
            raise ValueError(f"arm_dim must be {ARM_DIM}")
        return self

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim * self.ffn_mult


class TwinFlags(BaseModel):
    """두 팔 정책 구성요소 스위치 (ablation용).

    Attributes:
        joint_attention: 팔 사이 attention 허용
        moe: 공유 토큰을 하나의 구간으로 두고 MoE로 라우팅 (끄면 팔마다 공유 토큰 복사)
        reweight: 공유 key attention 재가중 (조인트 attention이 켜져 있을 때만 적용)
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    joint_attention: bool = True
    moe: bool = True
    reweight: bool = True

    @property
    def effective_reweight(self) -> bool:
        return self.reweight and self.joint_attention


@dataclass(frozen=True)
class Normalizer:
    """팔 블록(10차원)별 평균/표준편차 정규화. 행동과 고유감각에 함께 씁니다."""

    mean: Array = field(default_factory=lambda: np.zeros(ARM_DIM))
    std: Array = field(default_factory=lambda: np.ones(ARM_DIM))

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64).reshape(ARM_DIM)
        std = np.maximum(np.asarray(self.std, dtype=np.float64).reshape(ARM_DIM), STD_FLOOR)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def _tile(self, width: int) -> tuple[Array, Array]:
        if width % ARM_DIM:
            raise ValidationError(f"normalized width must be a multiple of {ARM_DIM}, got {width}")
        reps = width // ARM_DIM
        return np.tile(self.mean, reps), np.tile(self.std, reps)

    def normalize(self, values: ArrayLike) -> Array:
        data = np.asarray(values, dtype=np.float64)
        mean, std = self._tile(data.shape[-1])
        return (data - mean) / std

    def denormalize(self, values: ArrayLike) -> Array:
        data = np.asarray(values, dtype=np.float64)
        mean, std = self._tile(data.shape[-1])
        return data * std + mean

    def to_dict(self) -> dict[str, list[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Normalizer:
        return cls(mean=np.asarray(data["mean"]), std=np.asarray(data["std"]))


@dataclass(frozen=True)
class ObservationSingle:
    """단일 팔 관측 ((지시어, ego), (손목, 고유감각))."""

    instruction: tuple[int, ...]
    ego_feat: Array
    wrist_feat: Array
    proprio: Array


@dataclass(frozen=True)
class ObservationTwin:
    """두 팔 관측. ego와 지시어는 공유, 손목/고유감각은 팔별."""

    instruction: tuple[int, ...]
    ego_feat: Array
    wrist_feat_R: Array
    proprio_R: Array
    wrist_feat_L: Array
    proprio_L: Array

    @classmethod
    def mirrored(cls, obs: ObservationSingle) -> ObservationTwin:
        """두 팔 입력이 모두 obs와 같은 관측."""
        return cls(
            instruction=obs.instruction,
            ego_feat=obs.ego_feat,
            wrist_feat_R=obs.wrist_feat,
            proprio_R=obs.proprio,
            wrist_feat_L=obs.wrist_feat,
            proprio_L=obs.proprio,
        )

    def swapped(self) -> ObservationTwin:
        """왼팔과 오른팔 입력을 맞바꾼 관측."""
        return ObservationTwin(
            instruction=self.instruction,
            ego_feat=self.ego_feat,
            wrist_feat_R=self.wrist_feat_L,
            proprio_R=self.proprio_L,
            wrist_feat_L=self.wrist_feat_R,
            proprio_L=self.proprio_R,
        )


@dataclass(frozen=True)
class ObsBatch:
    """같은 지시어 길이를 가진 관측 배치.

    Attributes:
        instruction: (B, L) 정수 id
        ego: (B, F)
        wrist: (B, K, F), K = 팔 수 (두 팔이면 0 = 오른팔, 1 = 왼팔)
        proprio: (B, K, 10) 정규화 전 포즈
    """

    instruction: NDArray[np.int64]
    ego: Array
    wrist: Array
    proprio: Array

    def __post_init__(self) -> None:
        ids = np.asarray(self.instruction, dtype=np.int64)
        if ids.ndim != 2:
            raise ValidationError(f"instruction ids must be (B, L), got shape {ids.shape}")
        object.__setattr__(self, "instruction", ids)
        batch = self.ego.shape[0]
        if ids.shape[0] != batch or self.wrist.shape[0] != batch or self.proprio.shape[0] != batch:
            raise ValidationError("observation batch fields have different batch sizes")
        if self.wrist.shape[1] != self.proprio.shape[1]:
            raise ValidationError("wrist and proprio arm counts differ")

    @property
    def size(self) -> int:
        return int(self.ego.shape[0])

    @property
    def n_arms(self) -> int:
        return int(self.wrist.shape[1])

    def take(self, index: ArrayLike) -> ObsBatch:
        idx = np.asarray(index, dtype=np.int64)
        return ObsBatch(self.instruction[idx], self.ego[idx], self.wrist[idx], self.proprio[idx])

    @classmethod
    def from_single(cls, observations: Sequence[ObservationSingle]) -> ObsBatch:
        length = {len(obs.instruction) for obs in observations}
        if len(length) != 1:
            raise ValidationError("observations in a batch must share the instruction length")
        return cls(
            instruction=np.array([obs.instruction for obs in observations], dtype=np.int64).reshape(
                len(observations), length.pop()
            ),
            ego=np.stack([np.asarray(obs.ego_feat, dtype=np.float64) for obs in observations]),
            wrist=np.stack([np.asarray(obs.wrist_feat, dtype=np.float64) for obs in observations])[
                :, None, :
            ],
            proprio=np.stack([np.asarray(obs.proprio, dtype=np.float64) for obs in observations])[
                :, None, :
            ],
        )

    @classmethod
    def from_twin(cls, observations: Sequence[ObservationTwin]) -> ObsBatch:
        length = {len(obs.instruction) for obs in observations}
        if len(length) != 1:
            raise ValidationError("observations in a batch must share the instruction length")
        return cls(
            instruction=np.array([obs.instruction for obs in observations], dtype=np.int64).reshape(
                len(observations), length.pop()
            ),
            ego=np.stack([np.asarray(obs.ego_feat, dtype=np.float64) for obs in observations]),
            wrist=np.stack(
                [np.stack([obs.wrist_feat_R, obs.wrist_feat_L]) for obs in observations]
            ).astype(np.float64),
            proprio=np.stack(
                [np.stack([obs.proprio_R, obs.proprio_L]) for obs in observations]
            ).astype(np.float64),
        )


class SinglePolicy:
    """단일 팔 정책: 하나의 ParamStore와 불변 설정."""

    kind: PolicyKind = "single"

    def __init__(
        self,
        config: ModelConfig,
        store: ParamStore,
        normalizer: Normalizer | None = None,
    ) -> None:
        self.config = config
        self.store = store
        self.normalizer = normalizer or Normalizer()

    @property
    def n_arms(self) -> int:
        return 1

    @classmethod
    def fresh(cls, config: ModelConfig, seed: int) -> SinglePolicy:
        """이름별 PRNG 스트림으로 초기화한 새 정책."""
        store = ParamStore()
        _create_encoder(store, config, seed)
        _create_arm(store, config, seed, prefix="")
        _create_head(store, config, seed)
        return cls(config, store)


class TwinPolicy:
    """두 팔 정책: 공유 인코더/헤드, 팔별 백본과 고유감각 인코더, 블록별 라우터."""

    kind: PolicyKind = "twin"

    def __init__(
        self,
        config: ModelConfig,
        store: ParamStore,
        normalizer: Normalizer | None = None,
        flags: TwinFlags | None = None,
    ) -> None:
        self.config = config
        self.store = store
        self.normalizer = normalizer or Normalizer()
        self.flags = flags or TwinFlags()

    @property
    def n_arms(self) -> int:
        return 2

    def with_flags(self, flags: TwinFlags) -> TwinPolicy:
        """같은 파라미터를 공유하고 스위치만 다른 정책 뷰."""
        return TwinPolicy(self.config, self.store, self.normalizer, flags)

    def arm_params(self, block: int) -> ArmBlockParams:
        router = GateRouter(
            w=self.store[f"router.block{block}.w"], b=self.store[f"router.block{block}.b"]
        )
        return ArmBlockParams(
            left=BlockWeights.from_store(self.store, f"left.backbone.block{block}"),
            right=BlockWeights.from_store(self.store, f"right.backbone.block{block}"),
            router=router,
        )


Policy = SinglePolicy | TwinPolicy


# ---------------------------------------------------------------- 파라미터 생성
def _create_encoder(store: ParamStore, cfg: ModelConfig, seed: int) -> None:
    e, f = cfg.embed_dim, cfg.feat_dim
    store.create("encoder.instr_emb", (cfg.vocab_size, e), seed=seed, fan_in=1)
    store.create("encoder.ego_w", (f, cfg.n_ego_tokens * e), seed=seed, fan_in=f)
    store.create("encoder.ego_b", (cfg.n_ego_tokens * e,), seed=seed, fan_in=f)
    store.create("encoder.wrist_w", (f, e), seed=seed, fan_in=f)
    store.create("encoder.wrist_b", (e,), seed=seed, fan_in=f)
    n_shared = cfg.max_instruction_len + cfg.n_ego_tokens
    store.create("encoder.pos_shared", (n_shared, e), seed=seed, fan_in=e)
    store.create("encoder.pos_arm", (ARM_TOKENS, e), seed=seed, fan_in=e)


def _create_arm(store: ParamStore, cfg: ModelConfig, seed: int, prefix: str) -> None:
    e, p, hidden = cfg.embed_dim, cfg.proprio_dim, cfg.hidden_dim
    store.create(f"{prefix}proprio.w1", (p, hidden), seed=seed, fan_in=p)
    store.create(f"{prefix}proprio.b1", (hidden,), seed=seed, fan_in=p)
    store.create(f"{prefix}proprio.w2", (hidden, e), seed=seed, fan_in=hidden)
    store.create(f"{prefix}proprio.b2", (e,), seed=seed, fan_in=hidden)
    store.create(f"{prefix}backbone.readout", (e,), seed=seed, fan_in=e)
    for i in range(cfg.n_blocks):
        BlockWeights.create(store, f"{prefix}backbone.block{i}", e, hidden, seed)


def _create_head(store: ParamStore, cfg: ModelConfig, seed: int) -> None:
    e, a = cfg.embed_dim, cfg.arm_dim
    store.create("head.tau_w", (e, e), seed=seed, fan_in=e)
    store.create("head.tau_b", (e,), seed=seed, fan_in=e)
    store.create("head.h_w", (e, e), seed=seed, fan_in=e)
    store.create("head.h_b", (e,), seed=seed, fan_in=e)
    store.create("head.d_w", (e, e), seed=seed, fan_in=e)
    store.create("head.d_b", (e,), seed=seed, fan_in=e)
    store.create("head.a_w", (a, e), seed=seed, fan_in=a)
    store.create("head.a_b", (e,), seed=seed, fan_in=a)
    store.create("head.pos", (cfg.chunk_len, e), seed=seed, fan_in=e)
    store.create("head.out_w", (e, a), seed=seed, fan_in=e)
    store.create("head.out_b", (a,), seed=seed, fan_in=e)
    for j in range(cfg.head_blocks):
        BlockWeights.create(store, f"head.block{j}", e, cfg.hidden_dim, seed)


# ---------------------------------------------------------------- 인코딩
@dataclass(frozen=True)
class EncodedSequence:
    """인코딩된 공유/팔 토큰과 구간 정보."""

    shared: Tensor
    arm: Tensor
    proprio_token: Tensor
    segments: ModalitySegments


def _check_batch(cfg: ModelConfig, batch: ObsBatch, n_arms: int) -> None:
    if batch.n_arms != n_arms:
        raise ValidationError(f"expected {n_arms} arm(s) in observation, got {batch.n_arms}")
    if batch.ego.shape[1] != cfg.feat_dim or batch.wrist.shape[2] != cfg.feat_dim:
        raise ValidationError(f"feature dims must be {cfg.feat_dim}")
    if batch.proprio.shape[2] != cfg.proprio_dim:
        raise ValidationError(f"proprio dim must be {cfg.proprio_dim}")
    if batch.instruction.shape[1] > cfg.max_instruction_len:
        raise ValidationError(
            f"instruction has {batch.instruction.shape[1]} tokens, "
            f"limit is {cfg.max_instruction_len}"
        )
    if batch.instruction.size and (
        batch.instruction.min() < 0 or batch.instruction.max() >= cfg.vocab_size
    ):
        raise ValidationError(f"unknown instruction id (vocabulary size {cfg.vocab_size})")


def _encode_shared(store: ParamStore, cfg: ModelConfig, batch: ObsBatch, prefix: str) -> Tensor:
    size, e = batch.size, cfg.embed_dim
    parts: list[Tensor] = []
    if batch.instruction.shape[1]:
        parts.append(embedding(store[f"{prefix}encoder.instr_emb"], batch.instruction))
    ego_w, ego_b = store[f"{prefix}encoder.ego_w"], store[f"{prefix}encoder.ego_b"]
    ego = linear(Tensor(batch.ego), ego_w, ego_b)
    parts.append(ego.reshape(size, cfg.n_ego_tokens, e))
    tokens = concat(parts, axis=1)
    return tokens + store[f"{prefix}encoder.pos_shared"][: tokens.shape[1]]


def _encode_arm(
    store: ParamStore,
    cfg: ModelConfig,
    wrist: Array,
    proprio: Array,
    prefix: str,
) -> tuple[Tensor, Tensor]:
    size, e = wrist.shape[0], cfg.embed_dim
    wrist_tok = linear(
        Tensor(wrist), store[f"{prefix}encoder.wrist_w"], store[f"{prefix}encoder.wrist_b"]
    ).reshape(size, 1, e)
    w1, b1 = store[f"{prefix}proprio.w1"], store[f"{prefix}proprio.b1"]
    w2, b2 = store[f"{prefix}proprio.w2"], store[f"{prefix}proprio.b2"]
    hidden = gelu(linear(Tensor(proprio), w1, b1))
    proprio_tok = linear(hidden, w2, b2).reshape(size, 1, e)
    readout = store[f"{prefix}backbone.readout"].reshape(1, 1, e) + np.zeros((size, 1, e))
    tokens = concat([wrist_tok, proprio_tok, readout], axis=1) + store[f"{prefix}encoder.pos_arm"]
    return tokens, proprio_tok


def _as_batch(obs: ObservationSingle | ObservationTwin | ObsBatch) -> ObsBatch:
    if isinstance(obs, ObsBatch):
        return obs
    if isinstance(obs, ObservationSingle):
        return ObsBatch.from_single([obs])
    return ObsBatch.from_twin([obs])


def encode_single(obs: ObservationSingle | ObsBatch, policy: SinglePolicy) -> EncodedSequence:
    """단일 관측을 [공유 | 팔] 토큰으로 인코딩합니다.

    Raises:
        ValidationError: 차원이 맞지 않거나 어휘에 없는 지시어 id가 있는 경우
    """
    cfg = policy.config
    batch = _as_batch(obs)
    _check_batch(cfg, batch, 1)
    proprio = policy.normalizer.normalize(batch.proprio[:, 0])
    shared = _encode_shared(policy.store, cfg, batch, "")
    arm, proprio_tok = _encode_arm(policy.store, cfg, batch.wrist[:, 0], proprio, "")
    seg = ModalitySegments(shared.shape[1], arm.shape[1], 0)
    return EncodedSequence(shared=shared, arm=arm, proprio_token=proprio_tok, segments=seg)


def _single_conditioning(
    obs: ObservationSingle | ObsBatch, policy: SinglePolicy
) -> tuple[Tensor, Tensor]:
    cfg = policy.config
    enc = encode_single(obs, policy)
    x = concat([enc.shared, enc.arm], axis=1)
    visible = build_joint_mask(enc.segments).visible
    for i in range(cfg.n_blocks):
        weights = BlockWeights.from_store(policy.store, f"backbone.block{i}")
        x = transformer_block(x, weights, visible, cfg.n_heads)
    return x[:, -1, :], enc.proprio_token[:, 0, :]


def forward_single(obs: ObservationSingle | ObsBatch, policy: SinglePolicy) -> Tensor:
    """마지막 층 readout 위치의 은닉 상태 h (B, E)."""
    return _single_conditioning(obs, policy)[0]


@dataclass(frozen=True)
class TwinOutput:
    """두 팔 백본 출력.

    Attributes:
        h_right: 오른팔 readout 은닉 (B, E)
        h_left: 왼팔 readout 은닉 (B, E)
        d_right: 오른팔 고유감각 토큰 (B, E)
        d_left: 왼팔 고유감각 토큰 (B, E)
        n_tokens: 백본이 처리한 전체 토큰 수
    """

    h_right: Tensor
    h_left: Tensor
    d_right: Tensor
    d_left: Tensor
    n_tokens: int


def twin_forward(
    obs: ObservationTwin | ObsBatch,
    twin: TwinPolicy,
    flags: TwinFlags | None = None,
) -> TwinOutput:
    """두 팔 백본을 실행합니다.

    - moe ON: 공유 구간 하나를 병합 경로와 MoE FFN으로 처리
    - moe OFF: 공유 토큰을 팔마다 복사해 각 팔 파라미터로 처리
    - joint_attention OFF: 팔 사이 마스크 블록을 끔
    - reweight OFF (또는 조인트 attention OFF): alpha = 1

    Raises:
        ValidationError: 팔 구간 길이가 서로 다른 경우 등 구간 정보가 맞지 않을 때
    """
    cfg = twin.config
    flags = flags or twin.flags
    batch = _as_batch(obs)
    _check_batch(cfg, batch, 2)
    proprio = twin.normalizer.normalize(batch.proprio)
    store = twin.store

    shared = _encode_shared(store, cfg, batch, "")
    right, d_right = _encode_arm(store, cfg, batch.wrist[:, 0], proprio[:, 0], "right.")
    left, d_left = _encode_arm(store, cfg, batch.wrist[:, 1], proprio[:, 1], "left.")
    if left.shape[1] != right.shape[1]:
        raise ValidationError("left and right arm segments must have equal length")
    n_shared, n_arm = shared.shape[1], left.shape[1]
    alpha = 2.0 if flags.effective_reweight else 1.0

    if flags.moe:
        mask = build_joint_mask(ModalitySegments(n_shared, n_arm, n_arm), flags.joint_attention)
        tokens = [shared, left, right]
    else:
        mask = build_duplicated_mask(n_shared, n_arm, flags.joint_attention)
        tokens = [shared, left, shared, right]

    for i in range(cfg.n_blocks):
        params = twin.arm_params(i)
        branches: list[Branch]
        if flags.moe:
            branches = [
                MergedBranch(params.left, params.right, params.router),
                ArmBranch(params.left),
                ArmBranch(params.right),
            ]
        else:
            branches = [
                ArmBranch(params.left),
                ArmBranch(params.left),
                ArmBranch(params.right),
                ArmBranch(params.right),
            ]
        tokens = joint_block(
            list(zip(tokens, branches, strict=True)),
            mask.visible,
            cfg.n_heads,
            mask.shared_cols if alpha != 1.0 else None,
            alpha,
        )

    out_left, out_right = tokens[1], tokens[-1]
    return TwinOutput(
        h_right=out_right[:, -1, :],
        h_left=out_left[:, -1, :],
        d_right=d_right[:, 0, :],
        d_left=d_left[:, 0, :],
        n_tokens=mask.size,
    )


def token_count(twin: TwinPolicy, instruction_len: int, flags: TwinFlags | None = None) -> int:
    """주어진 지시어 길이에서 백본이 처리하는 토큰 수."""
    flags = flags or twin.flags
    n_shared = instruction_len + twin.config.n_ego_tokens
    copies = 1 if flags.moe else 2
    return copies * n_shared + 2 * ARM_TOKENS


# ---------------------------------------------------------------- 행동 헤드
def tau_embedding(tau: ArrayLike, width: int) -> Array:
    """tau의 사인/코사인 임베딩 (B, width)."""
    t = np.asarray(tau, dtype=np.float64).reshape(-1)
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * _TAU_SCALE * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def head_mask(n_arms: int, chunk_len: int) -> NDArray[np.bool_]:
    """[tau | (h, d, a_1..T) x n_arms] 배치용 마스크. 각 그룹은 tau와 자기 그룹만 봅니다."""
    group = chunk_len + 2
    total = 1 + n_arms * group
    visible = np.zeros((total, total), dtype=bool)
    visible[:, 0] = True
    for k in range(n_arms):
        span = slice(1 + k * group, 1 + (k + 1) * group)
        visible[span, span] = True
    return visible


def action_head(
    store: ParamStore,
    cfg: ModelConfig,
    h_list: Sequence[Tensor],
    d_list: Sequence[Tensor],
    A_tau: Tensor | ArrayLike,
    tau: ArrayLike,
) -> Tensor:
    """readout 은닉, 고유감각 토큰, tau 토큰을 조건으로 흐름을 예측합니다.

    Args:
        store: head.* 파라미터를 가진 저장소
        cfg: 모델 설정
        h_list: 팔별 readout 은닉 (B, E), 두 팔이면 오른팔 먼저
        d_list: 팔별 고유감각 토큰 (B, E)
        A_tau: (B, T, 10 * 팔 수) 노이즈 섞인 청크
        tau: (B,) 시점

    Returns:
        A_tau와 같은 형상의 예측 흐름

    Raises:
        ValidationError: 형상이 맞지 않는 경우
    """
    n_arms = len(h_list)
    chunk = A_tau if isinstance(A_tau, Tensor) else Tensor(A_tau)
    if n_arms < 1 or len(d_list) != n_arms:
        raise ValidationError("action head needs one readout and one proprio token per arm")
    if chunk.ndim != 3 or chunk.shape[1:] != (cfg.chunk_len, n_arms * cfg.arm_dim):
        raise ValidationError(
            f"noised chunk must be (B, {cfg.chunk_len}, {n_arms * cfg.arm_dim}), got {chunk.shape}"
        )
    taus = np.asarray(tau, dtype=np.float64).reshape(-1)
    size, e = chunk.shape[0], cfg.embed_dim
    if taus.size == 1 and size > 1:
        taus = np.full(size, float(taus[0]))
    if taus.shape != (size,) or taus.min() < 0.0 or taus.max() > 1.0:
        raise ValidationError("tau must be one value in [0, 1] per batch element")

    tau_tok = linear(Tensor(tau_embedding(taus, e)), store["head.tau_w"], store["head.tau_b"])
    parts = [tau_tok.reshape(size, 1, e)]
    for k in range(n_arms):
        block = chunk[:, :, k * cfg.arm_dim : (k + 1) * cfg.arm_dim]
        h_tok = linear(h_list[k], store["head.h_w"], store["head.h_b"]).reshape(size, 1, e)
        d_tok = linear(d_list[k], store["head.d_w"], store["head.d_b"]).reshape(size, 1, e)
        a_tok = linear(block, store["head.a_w"], store["head.a_b"]) + store["head.pos"]
        parts.extend([h_tok, d_tok, a_tok])
    x = concat(parts, axis=1)
    visible = head_mask(n_arms, cfg.chunk_len)
    for j in range(cfg.head_blocks):
        weights = BlockWeights.from_store(store, f"head.block{j}")
        x = transformer_block(x, weights, visible, cfg.n_heads)

    outs = []
    group = cfg.chunk_len + 2
    for k in range(n_arms):
        start = 1 + k * group + 2
        tokens = x[:, start : start + cfg.chunk_len, :]
        outs.append(linear(tokens, store["head.out_w"], store["head.out_b"]))
    return concat(outs, axis=2)


def conditioning(
    policy: Policy, obs: ObservationSingle | ObservationTwin | ObsBatch
) -> tuple[list[Tensor], list[Tensor], int]:
    """헤드 조건 (h 목록, d 목록, 백본 토큰 수)."""
    if isinstance(policy, TwinPolicy):
        out = twin_forward(_as_batch(obs), policy)
        return [out.h_right, out.h_left], [out.d_right, out.d_left], out.n_tokens
    if isinstance(obs, ObservationTwin):
        raise ValidationError("single policy cannot consume a twin observation")
    h, d = _single_conditioning(obs, policy)
    enc_tokens = _as_batch(obs).instruction.shape[1] + policy.config.n_ego_tokens + ARM_TOKENS
    return [h], [d], enc_tokens


def predict_flow(
    policy: Policy,
    obs: ObservationSingle | ObservationTwin | ObsBatch,
    A_tau: Tensor | ArrayLike,
    tau: ArrayLike,
) -> Tensor:
    """정규화된 좌표계에서 흐름 v(A_tau, tau | obs)를 예측합니다."""
    h_list, d_list, _ = conditioning(policy, obs)
    return action_head(policy.store, policy.config, h_list, d_list, A_tau, tau)


def predict_chunks(
    policy: Policy,
    obs: ObsBatch,
    sampler: SamplerConfig,
    rng: np.random.Generator,
) -> Array:
    """관측 배치마다 Euler 적분으로 청크를 만들고 역정규화합니다. (B, T, D) 반환."""
    cfg = policy.config
    width = policy.n_arms * cfg.arm_dim
    with no_grad():
        h_list, d_list, _ = conditioning(policy, obs)

        def velocity(a_tau: Array, tau: float) -> Array:
            with no_grad():
                flow = action_head(policy.store, cfg, h_list, d_list, a_tau, np.full(obs.size, tau))
            return flow.data

        sampled = euler_sample(velocity, (obs.size, cfg.chunk_len, width), sampler, rng)
    return policy.normalizer.denormalize(sampled)


def predict_chunk(
    policy: Policy,
    obs: ObservationSingle | ObservationTwin,
    sampler: SamplerConfig,
    rng: np.random.Generator,
) -> ActionChunk:
    """관측 하나에 대한 행동 청크 (chunk_hz 주파수)."""
    actions = predict_chunks(policy, _as_batch(obs), sampler, rng)[0]
    return ActionChunk(actions, policy.config.chunk_hz)


# ---------------------------------------------------------------- 복제
SHARED_GROUPS = ("encoder.", "head.")
ARM_GROUPS = ("backbone.", "proprio.")


def duplicate(single: SinglePolicy, flags: TwinFlags | None = None) -> TwinPolicy:
    """단일 정책으로부터 두 팔 정책을 만듭니다.

    인코더와 헤드는 한 번만 복사해 두 팔이 별칭으로 공유하고,
    백본과 고유감각 인코더는 팔마다 복사합니다. 라우터는 0으로 초기화해 게이트가 (0.5, 0.5)입니다.
    """
    cfg = single.config
    store = ParamStore()
    for name, tensor in single.store.items():
        if name.startswith(SHARED_GROUPS):
            store.register(name, Tensor(tensor.data.copy()))
            store.alias(f"left.{name}", name)
            store.alias(f"right.{name}", name)
        elif name.startswith(ARM_GROUPS):
            store.register(f"left.{name}", Tensor(tensor.data.copy()))
            store.register(f"right.{name}", Tensor(tensor.data.copy()))
        else:
            raise ValidationError(f"parameter {name} has no duplication rule")
    for i in range(cfg.n_blocks):
        store.create(f"router.block{i}.w", (cfg.embed_dim, 2), seed=0, kind="zeros")
        store.create(f"router.block{i}.b", (2,), seed=0, kind="zeros")
    return TwinPolicy(cfg, store, single.normalizer, flags or TwinFlags())


def fresh_policy(kind: PolicyKind, config: ModelConfig, seed: int) -> Policy:
    """kind에 맞는 새 정책. 두 팔 정책은 새 단일 정책을 복제해 만듭니다 (scratch 기준선)."""
    single = SinglePolicy.fresh(config, seed)
    return single if kind == "single" else duplicate(single)
