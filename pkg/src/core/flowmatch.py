"""행동 청크를 위한 조건부 flow matching.

노이즈 경로 A^tau = tau*A + (1-tau)*eps, 기준 흐름 u = eps - A,
평균 제곱 손실, Beta 기반 시점 샘플링, 그리고 Euler 적분기를 제공합니다.
tau = 0이 노이즈, tau = 1이 데이터 쪽이므로 적분기는 흐름을 빼는 방향으로 진행합니다.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field

from src.core.numkernel import Tensor, as_tensor
from src.utils.exceptions import NumericalError, ValidationError

TAU_CEIL = 0.999
BETA_A = 1.5
BETA_B = 1.0

Array = NDArray[Any]
VelocityField = Callable[[Array, float], ArrayLike]


class SamplerConfig(BaseModel):
    """Euler 적분 설정.

    Attributes:
        n_steps: 적분 단계 수 (>= 1)
        tau_max: 적분 구간 끝 (0, 1], 단계 크기는 tau_max / n_steps
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_steps: int = Field(default=10, ge=1)
    tau_max: float = Field(default=1.0, gt=0.0, le=1.0)

    @property
    def delta(self) -> float:
        return self.tau_max / self.n_steps


@dataclass(frozen=True)
class FlowSample:
    """하나의 flow matching 학습 표본.

    Attributes:
        A: 목표 행동 청크
        eps: 표준 정규 노이즈
        tau: 시점 (배치면 배치 축으로 브로드캐스트되는 배열)
        A_tau: 노이즈가 섞인 청크
        u: 기준 흐름 eps - A
    """

    A: Array
    eps: Array
    tau: Array
    A_tau: Array
    u: Array


def tau_from_draw(x: ArrayLike) -> Array:
    """Beta(1.5, 1) 표본 x를 tau = 0.999 * (1 - x)로 변환합니다."""
    return TAU_CEIL * (1.0 - np.asarray(x, dtype=np.float64))


def sample_tau(rng: np.random.Generator, size: int | tuple[int, ...] | None = None) -> Any:
    """학습용 시점 tau를 뽑습니다. size가 없으면 float 하나를 반환합니다."""
    draw = rng.beta(BETA_A, BETA_B, size=size)
    tau = np.clip(tau_from_draw(draw), 0.0, TAU_CEIL)
    return float(tau) if size is None else tau


def tau_cdf(t: ArrayLike) -> Array:
    """sample_tau 분포의 누적분포함수 1 - (1 - t/0.999)^1.5."""
    ratio = np.clip(np.asarray(t, dtype=np.float64) / TAU_CEIL, 0.0, 1.0)
    return 1.0 - (1.0 - ratio) ** BETA_A


def make_flow_sample(
    A: ArrayLike,
    rng: np.random.Generator,
    tau: float | None = None,
) -> FlowSample:
    """청크 하나에 대한 FlowSample을 만듭니다 (노이즈를 먼저, 그다음 tau를 뽑음).

    Args:
        A: 목표 청크
        rng: 시드가 고정된 PRNG
        tau: 강제로 지정할 시점 (None이면 sample_tau)

    Raises:
        ValidationError: A가 유한하지 않거나 tau가 [0, 1] 밖인 경우
    """
    target = np.asarray(A)
    if target.dtype.kind != "f":
        target = target.astype(np.float64)
    if not np.isfinite(target).all():
        raise ValidationError("flow sample target must be finite")
    eps = rng.standard_normal(target.shape).astype(target.dtype)
    t = sample_tau(rng) if tau is None else float(tau)
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {t}")
    tau_arr = np.asarray(t, dtype=target.dtype)
    return FlowSample(
        A=target,
        eps=eps,
        tau=tau_arr,
        A_tau=tau_arr * target + (1 - tau_arr) * eps,
        u=eps - target,
    )


def make_flow_batch(actions: ArrayLike, rng: np.random.Generator) -> FlowSample:
    """(B, T, D) 배치에 대해 표본마다 다른 tau를 쓰는 FlowSample을 만듭니다."""
    target = np.asarray(actions)
    if target.ndim != 3:
        raise ValidationError(f"flow batch must be (B, T, D), got {target.shape}")
    if not np.isfinite(target).all():
        raise ValidationError("flow sample target must be finite")
    eps = rng.standard_normal(target.shape).astype(target.dtype)
    tau = sample_tau(rng, size=target.shape[0]).astype(target.dtype)
    tau_b = tau[:, None, None]
    return FlowSample(
        A=target,
        eps=eps,
        tau=tau,
        A_tau=tau_b * target + (1 - tau_b) * eps,
        u=eps - target,
    )


def fm_loss(v_pred: Tensor | ArrayLike, u: Tensor | ArrayLike) -> Tensor:
    """예측 흐름과 기준 흐름의 원소별 제곱 오차 평균.

    Raises:
        ValidationError: 형상이 다른 경우
    """
    pred = as_tensor(v_pred)
    ref = as_tensor(u)
    if pred.shape != ref.shape:
        raise ValidationError(f"flow shapes differ: {pred.shape} vs {ref.shape}")
    diff = pred - ref
    return (diff * diff).mean()


def euler_sample(
    v_field: VelocityField,
    shape: tuple[int, ...],
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> Array:
    """노이즈에서 출발해 A <- A - delta * v(A, tau)로 적분합니다.

    tau는 {0, delta, ..., tau_max - delta}에서 평가되며 tau = 1에는 닿지 않습니다.

    Args:
        v_field: (A, tau) -> 흐름
        shape: 청크 형상
        cfg: 적분 설정
        rng: 초기 노이즈 PRNG

    Returns:
        최종 청크 (float64)

    Raises:
        NumericalError: 중간 값이 유한하지 않은 경우 (step 포함)
    """
    current = rng.standard_normal(shape)
    delta = cfg.delta
    for step in range(cfg.n_steps):
        flow = np.asarray(v_field(current, step * delta), dtype=np.float64)
        if flow.shape != current.shape:
            raise ValidationError(f"velocity field returned {flow.shape}, expected {current.shape}")
        current = current - delta * flow
        if not np.isfinite(current).all():
            raise NumericalError(f"non-finite sample at integration step {step}", step=step)
    return current
