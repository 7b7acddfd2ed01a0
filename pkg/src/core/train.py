"""학습 루프, 옵티마이저, 폐루프 평가.

- lr_at: 선형 워밍업 뒤 코사인(또는 상수) 학습률
- AdamW: 분리된(decoupled) weight decay를 쓰는 Adam
- train_loop: 배치 샘플링 → FlowSample → fm_loss → 역전파 → 전역 L2 클리핑 → 갱신
- evaluate: 청크를 예측해 실행하고 다시 관측하는 롤아웃을 스레드 풀에서 병렬로 실행
"""

from __future__ import annotations

import json
import math
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Literal, Protocol

import numpy as np
from loguru import logger
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from src.core.dataset import DemoBatch, DemoDataset
from src.core.flowmatch import SamplerConfig, fm_loss, make_flow_batch
from src.core.geometry import ActionChunk, resample_chunk
from src.core.numkernel import ParamStore, Tensor, derive_seed, named_stream, no_grad
from src.core.policy import (
    Normalizer,
    Policy,
    SinglePolicy,
    TwinPolicy,
    predict_chunks,
    predict_flow,
)
from src.core.sim import (
    PlanRunner,
    SceneState,
    SimObservation,
    TaskSpec,
    combo_label,
    plan_waypoints,
    reset,
    step,
    success,
)
from src.utils.exceptions import NumericalError, TrainingError, ValidationError
from src.utils.signals import GracefulShutdown

Array = NDArray[np.float64]


class TrainConfig(BaseModel):
    """학습 하이퍼파라미터.

    Attributes:
        lr: 최대 학습률
        warmup_ratio: 전체 스텝 대비 워밍업 비율, [0, 1)
        total_steps: 전체 스텝 수
        batch_size: 배치 크기
        grad_clip: 전역 L2 클리핑 임계값
        weight_decay: 분리된 weight decay 계수
        adam_eps: Adam 분모 안정화 상수
        beta1: 1차 모멘트 감쇠
        beta2: 2차 모멘트 감쇠
        schedule: cosine 또는 constant (둘 다 워밍업 사용)
        seed: 배치/노이즈 샘플링 시드
        log_every: INFO 로그 간격 (스텝)
        fixed_batch: 매 스텝 같은 배치와 같은 (노이즈, tau)를 다시 뽑음 (과적합 진단용)
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(default=1e-4, gt=0)
    warmup_ratio: float = Field(default=0.05, ge=0, lt=1)
    total_steps: int = Field(default=5000, ge=1)
    batch_size: int = Field(default=8, ge=1)
    grad_clip: float = Field(default=1.0, gt=0)
    weight_decay: float = Field(default=1e-5, ge=0)
    adam_eps: float = Field(default=1e-8, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.95, ge=0, lt=1)
    schedule: Literal["cosine", "constant"] = "cosine"
    seed: int = Field(default=0, ge=0)
    log_every: int = Field(default=100, ge=1)
    fixed_batch: bool = False


def lr_at(step_index: int, cfg: TrainConfig) -> float:
    """스텝 step_index에서의 학습률.

    0에서 lr까지 warmup_ratio * total_steps 동안 선형 증가한 뒤,
    cosine이면 total_steps에서 0이 되도록 감소하고 constant면 lr을 유지합니다.

    Raises:
        ValidationError: step_index가 [0, total_steps] 밖인 경우
    """
    total = cfg.total_steps
    if not 0 <= step_index <= total:
        raise ValidationError(f"step {step_index} outside [0, {total}]")
    warmup = cfg.warmup_ratio * total
    if step_index < warmup:
        return cfg.lr * step_index / warmup
    if cfg.schedule == "constant":
        return cfg.lr
    progress = (step_index - warmup) / (total - warmup)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """전역 L2 노름이 max_norm을 넘으면 모든 그래디언트를 같은 비율로 줄입니다.

    Returns:
        클리핑 전 전역 노름
    """
    grads = [t.grad for _, t in store.items() if t.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for _, tensor in store.items():
            if tensor.grad is not None:
                tensor.grad = tensor.grad * scale
    return total


class AdamW:
    """분리된 weight decay를 쓰는 Adam.

    p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)
    그래디언트가 없는 파라미터는 건너뜁니다.
    """

    def __init__(
        self,
        store: ParamStore,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 1e-5,
    ) -> None:
        self.store = store
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: dict[str, Array] = {}
        self._v: dict[str, Array] = {}

    @classmethod
    def from_config(cls, store: ParamStore, cfg: TrainConfig) -> AdamW:
        return cls(store, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)

    def step(self, lr: float) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for name, tensor in self.store.items():
            if tensor.grad is None:
                continue
            grad = tensor.grad.astype(np.float64)
            m = self._m.get(name, np.zeros_like(grad))
            v = self._v.get(name, np.zeros_like(grad))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self._m[name], self._v[name] = m, v
            weights = tensor.data.astype(np.float64)
            weights = weights - lr * self.weight_decay * weights
            weights = weights - lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            tensor.data = weights.astype(tensor.data.dtype)


@dataclass(frozen=True)
class MetricsRecord:
    """스텝 하나의 학습 지표 (JSON lines 한 줄)."""

    step: int
    loss: float
    lr: float
    grad_norm: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    """train_loop 결과.

    Attributes:
        steps: 실제로 수행한 스텝 수
        final_loss: 마지막 스텝 손실
        interrupted: 종료 시그널로 일찍 멈췄는지 여부
        records: 스텝별 지표
    """

    steps: int
    final_loss: float
    interrupted: bool = False
    records: list[MetricsRecord] = field(default_factory=list)


def _with_normalizer(policy: Policy, normalizer: Normalizer) -> Policy:
    if isinstance(policy, TwinPolicy):
        return TwinPolicy(policy.config, policy.store, normalizer, policy.flags)
    return SinglePolicy(policy.config, policy.store, normalizer)


def batch_loss(policy: Policy, batch: DemoBatch, rng: np.random.Generator) -> Tensor:
    """지시어 길이 그룹별 fm_loss를 그룹 크기로 가중 평균합니다.

    행동은 정책의 정규화 통계로 정규화한 뒤 FlowSample을 만듭니다.
    """
    total: Tensor | None = None
    for obs, actions in batch.groups:
        flow = make_flow_batch(policy.normalizer.normalize(actions), rng)
        v_pred = predict_flow(policy, obs, flow.A_tau, flow.tau)
        part = fm_loss(v_pred, flow.u) * (obs.size / batch.size)
        total = part if total is None else total + part
    if total is None:
        raise ValidationError("batch has no groups")
    return total


def _check_dims(policy: Policy, dataset: DemoDataset) -> None:
    if policy.n_arms != dataset.n_arms:
        raise ValidationError(
            f"{policy.kind} policy controls {policy.n_arms} arm(s) "
            f"but the dataset records {dataset.n_arms}"
        )


def train_loop(
    policy: Policy,
    dataset: DemoDataset,
    cfg: TrainConfig,
    metrics_path: Path | None = None,
    shutdown: GracefulShutdown | None = None,
) -> TrainResult:
    """정책을 제자리에서 학습합니다.

    정책의 정규화 통계는 데이터셋 통계로 바뀝니다. 같은 시드면 결과 파라미터가 같습니다.

    Args:
        policy: 학습할 정책 (파라미터가 갱신됨)
        dataset: 시연 데이터셋
        cfg: 학습 설정
        metrics_path: 스텝별 지표 JSON lines 파일 (None이면 쓰지 않음)
        shutdown: 스텝마다 확인할 종료 플래그

    Returns:
        TrainResult

    Raises:
        ValidationError: 정책과 데이터셋의 팔 수가 다른 경우
        TrainingError: 손실이나 그래디언트가 유한하지 않은 경우 (스텝 포함)
    """
    _check_dims(policy, dataset)
    policy.normalizer = dataset.normalizer
    rng = named_stream(cfg.seed, "train")
    optimizer = AdamW.from_config(policy.store, cfg)
    result = TrainResult(steps=0, final_loss=float("nan"))
    logger.info(
        f"Training {policy.kind} policy: {cfg.total_steps} steps, batch {cfg.batch_size}, "
        f"lr {cfg.lr:g}, {len(dataset)} episodes, {policy.store.num_parameters()} parameters"
    )

    sink = None
    if metrics_path is not None:
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        sink = metrics_path.open("w", encoding="utf-8")
    try:
        for index in range(1, cfg.total_steps + 1):
            started = time.perf_counter()
            if cfg.fixed_batch:
                rng = named_stream(cfg.seed, "train")
            batch = dataset.sample_batch(rng, cfg.batch_size, policy.config.chunk_len)
            policy.store.zero_grad()
            try:
                loss = batch_loss(policy, batch, rng)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError("loss is not finite", step=index)
                loss.backward()
            except NumericalError as exc:
                message = f"Non-finite values at step {index}: {exc}"
                raise TrainingError(message, step=index) from exc
            grad_norm = clip_grad_norm(policy.store, cfg.grad_clip)
            if not math.isfinite(grad_norm):
                raise TrainingError(f"Non-finite gradient norm at step {index}", step=index)
            lr = lr_at(index, cfg)
            optimizer.step(lr)

            record = MetricsRecord(
                step=index,
                loss=value,
                lr=lr,
                grad_norm=grad_norm,
                wall_ms=(time.perf_counter() - started) * 1000.0,
            )
            result.records.append(record)
            result.steps, result.final_loss = index, value
            if sink is not None:
                sink.write(record.to_json() + "\n")
            logger.debug(f"step {index} loss {value:.6f} lr {lr:.3e} grad_norm {grad_norm:.4f}")
            if index % cfg.log_every == 0 or index == cfg.total_steps:
                logger.info(f"step {index}/{cfg.total_steps} loss {value:.5f}")

            if shutdown is not None and shutdown.should_exit:
                logger.warning(f"Training interrupted after step {index}")
                result.interrupted = True
                break
    finally:
        if sink is not None:
            sink.close()
    return result


def initial_loss(policy: Policy, dataset: DemoDataset, batch_size: int, seed: int) -> float:
    """고정된 배치와 고정된 (노이즈, tau)에서의 손실. 정책은 바뀌지 않습니다.

    같은 seed면 정책과 무관하게 같은 배치와 같은 노이즈를 씁니다.
    """
    _check_dims(policy, dataset)
    view = _with_normalizer(policy, dataset.normalizer)
    rng = named_stream(seed, "initial_loss")
    batch = dataset.sample_batch(rng, batch_size, policy.config.chunk_len)
    with no_grad():
        return batch_loss(view, batch, rng).item()


# ---------------------------------------------------------------- 평가
class Controller(Protocol):
    """롤아웃 중 행동을 내는 주체. 에피소드마다 새로 만듭니다."""

    def begin(self, state: SceneState, seed: int) -> None: ...

    def act(self, state: SceneState, obs: SimObservation, rng: np.random.Generator) -> Array: ...

    def after_step(self, state: SceneState) -> None: ...


class ModelController:
    """정책으로 청크를 예측하고 환경 주파수로 재표본화해 실행합니다.

    Args:
        policy: 평가할 정책
        sampler: Euler 적분 설정
        env_hz: 환경 제어 주파수
        execution_prefix: 청크에서 실행할 앞부분 스텝 수 (None이면 전체)
    """

    def __init__(
        self,
        policy: Policy,
        sampler: SamplerConfig,
        env_hz: float,
        execution_prefix: int | None = None,
    ) -> None:
        self.policy = policy
        self.sampler = sampler
        self.env_hz = env_hz
        self.execution_prefix = execution_prefix

    def begin(self, state: SceneState, seed: int) -> None:
        return None

    def act(self, state: SceneState, obs: SimObservation, rng: np.random.Generator) -> Array:
        actions = predict_chunks(self.policy, obs.as_batch(), self.sampler, rng)[0]
        chunk = resample_chunk(ActionChunk(actions, self.policy.config.chunk_hz), self.env_hz)
        executed = chunk.actions
        if self.execution_prefix is not None:
            executed = executed[: self.execution_prefix]
        return executed

    def after_step(self, state: SceneState) -> None:
        return None


class ExpertController:
    """스크립트 전문가를 정책처럼 감싼 컨트롤러 (전문가 감사용)."""

    def __init__(self, task: TaskSpec) -> None:
        self.task = task
        self._runner: PlanRunner | None = None

    def begin(self, state: SceneState, seed: int) -> None:
        rng = named_stream(seed, "expert", self.task.kind)
        self._runner = PlanRunner(plan_waypoints(self.task, state, rng))

    def act(self, state: SceneState, obs: SimObservation, rng: np.random.Generator) -> Array:
        if self._runner is None:
            raise ValidationError("expert controller used before begin()")
        return self._runner.command(state)[None, :]

    def after_step(self, state: SceneState) -> None:
        if self._runner is not None:
            self._runner.update(state)


ControllerFactory = Callable[[], Controller]


@dataclass(frozen=True)
class EpisodeLog:
    """롤아웃 하나의 기록."""

    index: int
    seed: int
    task: str
    instruction: str
    success: bool
    steps: int
    combo: str | None = None


@dataclass(frozen=True)
class EvalResult:
    """평가 결과.

    Attributes:
        task: 작업 종류
        seed: 평가 루트 시드
        episodes: 에피소드 기록 (인덱스 순서)
    """

    task: str
    seed: int
    episodes: tuple[EpisodeLog, ...]

    @property
    def n_rollouts(self) -> int:
        return len(self.episodes)

    @property
    def successes(self) -> int:
        return sum(ep.success for ep in self.episodes)

    @property
    def rate(self) -> float:
        return self.successes / self.n_rollouts

    def by_combination(self) -> dict[str, tuple[int, int]]:
        """지시어 조합별 (성공 수, 시도 수)."""
        counts: dict[str, tuple[int, int]] = {}
        for ep in self.episodes:
            if ep.combo is None:
                continue
            wins, total = counts.get(ep.combo, (0, 0))
            counts[ep.combo] = (wins + int(ep.success), total + 1)
        return dict(sorted(counts.items()))


def episode_seed(seed: int, task: TaskSpec, index: int) -> int:
    """평가 에피소드 장면 시드. 연속된 값이라 put_x_into_y 조합이 고르게 돌아갑니다."""
    return derive_seed(seed, "eval", task.kind) + index


def rollout(
    controller: Controller,
    task: TaskSpec,
    scene_seed: int,
    horizon: int,
    rng: np.random.Generator,
) -> tuple[bool, int, SceneState]:
    """성공하거나 horizon에 닿을 때까지 청크 단위로 실행합니다.

    Returns:
        (성공 여부, 실행한 환경 스텝 수, 마지막 장면)
    """
    state, obs = reset(task, scene_seed)
    controller.begin(state, scene_seed)
    steps = 0
    done = success(task, state)
    while not done and steps < horizon:
        actions = controller.act(state, obs, rng)
        if len(actions) == 0:
            raise ValidationError("controller returned an empty action chunk")
        for action in actions:
            state, obs = step(state, action)
            controller.after_step(state)
            steps += 1
            done = success(task, state)
            if done or steps >= horizon:
                break
    return done, steps, state


def evaluate(
    policy: Policy | ControllerFactory,
    task: TaskSpec,
    n_rollouts: int,
    seed: int,
    horizon: int | None = None,
    execution_prefix: int | None = None,
    sampler: SamplerConfig | None = None,
    threads: int = 1,
) -> EvalResult:
    """폐루프 롤아웃으로 성공률을 잽니다.

    Args:
        policy: 정책 또는 에피소드마다 컨트롤러를 만드는 함수
        task: 평가 작업
        n_rollouts: 롤아웃 수
        seed: 루트 시드 (에피소드 장면과 샘플링 노이즈가 모두 여기서 파생됨)
        horizon: 최대 환경 스텝 (None이면 task.horizon)
        execution_prefix: 청크에서 실행할 스텝 수 (None이면 전체)
        sampler: Euler 적분 설정
        threads: 동시에 실행할 롤아웃 수 상한

    Returns:
        EvalResult

    Raises:
        ValidationError: n_rollouts < 1이거나 정책 팔 수가 작업과 다른 경우
    """
    if n_rollouts < 1:
        raise ValidationError(f"n_rollouts must be at least 1, got {n_rollouts}")
    limit = horizon if horizon is not None else task.horizon
    if isinstance(policy, (SinglePolicy, TwinPolicy)):
        if policy.n_arms != task.n_arms:
            raise ValidationError(
                f"{policy.kind} policy cannot run {task.kind} ({task.n_arms} arm(s))"
            )
        factory: ControllerFactory = partial(
            ModelController, policy, sampler or SamplerConfig(), task.frequency, execution_prefix
        )
    else:
        factory = policy

    def run(index: int) -> EpisodeLog:
        scene_seed = episode_seed(seed, task, index)
        rng = named_stream(seed, "eval", task.kind, index)
        ok, steps, state = rollout(factory(), task, scene_seed, limit, rng)
        log = EpisodeLog(
            index=index,
            seed=scene_seed,
            task=task.kind,
            instruction=state.instruction,
            success=ok,
            steps=steps,
            combo=combo_label(state.combo) if state.combo is not None else None,
        )
        suffix = f" [{log.combo}]" if log.combo else ""
        logger.info(
            f"eval {task.kind} #{index} seed {scene_seed}{suffix}: "
            f"{'success' if ok else 'failure'} after {steps} steps"
        )
        return log

    workers = max(1, min(threads, n_rollouts))
    if workers == 1:
        episodes = [run(i) for i in range(n_rollouts)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(run, range(n_rollouts)))
    result = EvalResult(task=task.kind, seed=seed, episodes=tuple(episodes))
    logger.info(
        f"Evaluated {task.kind}: {result.successes}/{result.n_rollouts} "
        f"(rate {result.rate:.3f})"
    )
    return result


def write_episode_log(path: Path, result: EvalResult) -> None:
    """에피소드 기록을 JSON lines로 씁니다."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(asdict(ep), sort_keys=True) for ep in result.episodes]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
