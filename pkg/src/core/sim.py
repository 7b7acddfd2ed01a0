"""결정적 평면 두 팔 운동학 시뮬레이터와 스크립트 전문가.

작업 종류:
    reach, pick_place          단일 팔 (사전학습 혼합용, 팔은 시드로 선택)
    parallel_pickplace         병렬: 두 팔이 각자 상자를 옮김
    coordinated_lift           협응: 두 팔이 막대 양 끝을 함께 들어 올림
    sequential_handover        순차: 오른팔이 집어 왼팔에 건네고 왼팔이 놓음
    put_x_into_y               언어 조건: 지시된 색 상자를 지시된 쪽 냄비에 넣음

팔은 점 그리퍼이며 충돌이 없습니다. z는 평면 작업에서 0이고 coordinated_lift에서만 들어 올림 높이로 쓰입니다.

관측 특징(16차원):
    ego   = 물체 3개 xyz (9) + 목표 영역 2개 xy (4) + goal xyz (3)
    wrist = 물체 3개 상대 xyz (9) + 목표 영역 2개 상대 xy (4) + goal 상대 xy (2) + 파지 여부 (1)
고유감각(10차원) = [위치 3 | rot6(yaw) 6 | 그리퍼 1]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Literal

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field

from src.core.geometry import ARM_DIM, rotmat_to_6d, yaw_to_rotmat
from src.core.numkernel import named_stream
from src.core.policy import ObsBatch
from src.utils.exceptions import SimulationError, ValidationError

Array = NDArray[np.float64]
TaskKind = Literal[
    "reach",
    "pick_place",
    "parallel_pickplace",
    "coordinated_lift",
    "sequential_handover",
    "put_x_into_y",
]

ENV_HZ = 10.0
FEAT_DIM = 16
RIGHT, LEFT = 0, 1
ARM_NAMES = ("right", "left")
BOUNDS_LO = np.array([-0.6, 0.0, 0.0])
BOUNDS_HI = np.array([0.6, 0.6, 0.3])
HOME_POSITIONS = (np.array([0.3, 0.15, 0.0]), np.array([-0.3, 0.15, 0.0]))
HOME_YAWS = (0.0, math.pi)
HANDLE_OFFSETS = (np.array([0.15, 0.0, 0.0]), np.array([-0.15, 0.0, 0.0]))
HANDOVER_POINT = np.array([0.0, 0.3, 0.0])
MAX_YAW_STEP = 0.3
COLORS = ("red", "green", "blue")
POT_SIDES = ("left", "right")

SINGLE_ARM_KINDS = ("reach", "pick_place")

TEMPLATES: dict[str, str] = {
    "reach": "reach the goal",
    "pick_place": "place the box on the target",
    "parallel_pickplace": "place both boxes on their targets",
    "coordinated_lift": "lift the bar with both arms",
    "sequential_handover": "hand the box over to the left",
    "put_x_into_y": "put {color} box into {side} pot",
}

VOCAB: tuple[str, ...] = (
    "reach", "the", "goal", "place", "box", "on", "target", "both", "boxes", "their",
    "targets", "lift", "bar", "with", "arms", "hand", "over", "to", "left", "put",
    "red", "green", "blue", "into", "right", "pot",
)  # fmt: skip
_WORD_IDS = {word: index for index, word in enumerate(VOCAB)}


def tokenize(instruction: str) -> tuple[int, ...]:
    """지시어 문자열을 어휘 id로 바꿉니다."""
    ids = []
    for word in instruction.split():
        if word not in _WORD_IDS:
            raise ValidationError(f"unknown instruction word: {word!r}")
        ids.append(_WORD_IDS[word])
    return tuple(ids)


class TaskSpec(BaseModel):
    """작업 종류와 허용 오차.

    Attributes:
        kind: 작업 종류
        grasp_radius: 그리퍼가 물체를 잡을 수 있는 거리 (m)
        place_tol: 목표 영역 허용 오차 (m)
        pot_tol: 냄비 영역 허용 오차 (m)
        reach_tol: reach 허용 오차 (m)
        lift_height: 들어 올림 목표 높이 (m)
        sync_tol: 두 팔 높이 차 허용치 (m), 넘으면 막대가 떨어짐
        max_step: 한 스텝 최대 이동 거리 (m)
        horizon: 최대 환경 스텝 수
        frequency: 환경 제어 주파수 (Hz)
        expert_noise: 전문가 경유점 xy 잡음 한계 (m)
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: TaskKind
    grasp_radius: float = Field(default=0.04, gt=0)
    place_tol: float = Field(default=0.06, gt=0)
    pot_tol: float = Field(default=0.08, gt=0)
    reach_tol: float = Field(default=0.03, gt=0)
    lift_height: float = Field(default=0.15, gt=0, le=0.3)
    sync_tol: float = Field(default=0.03, gt=0)
    max_step: float = Field(default=0.06, gt=0)
    horizon: int = Field(default=150, ge=1)
    frequency: float = Field(default=ENV_HZ, gt=0)
    expert_noise: float = Field(default=0.01, ge=0, le=0.02)

    @property
    def n_arms(self) -> int:
        return 1 if self.kind in SINGLE_ARM_KINDS else 2

    @property
    def template(self) -> str:
        return TEMPLATES[self.kind]


@dataclass(frozen=True)
class ArmState:
    position: Array
    yaw: float
    gripper: float

    @property
    def closed(self) -> bool:
        return self.gripper > 0.5

    def pose10(self) -> Array:
        rot6 = rotmat_to_6d(yaw_to_rotmat(self.yaw))
        return np.concatenate([self.position, rot6, [self.gripper]])


@dataclass(frozen=True)
class ObjectState:
    id: int
    color: str
    position: Array
    held_by: frozenset[int] = frozenset()


@dataclass(frozen=True)
class TargetRegion:
    id: int
    color: str
    center: Array
    radius: float


@dataclass(frozen=True)
class SceneState:
    """장면 상태.

    Attributes:
        task: 작업 설정
        arms: (오른팔, 왼팔)
        objects: 물체 목록 (coordinated_lift에서는 막대 하나)
        targets: 목표 영역 목록
        goal: reach 목표 또는 건네줄 지점 (없으면 0)
        active_arms: 조작하는 팔 (두 팔 작업이면 (0, 1))
        instruction: 지시어 문자열
        combo: put_x_into_y의 (색 인덱스, 냄비 인덱스)
        t: 경과 스텝 수
    """

    task: TaskSpec
    arms: tuple[ArmState, ArmState]
    objects: tuple[ObjectState, ...]
    targets: tuple[TargetRegion, ...]
    goal: Array
    active_arms: tuple[int, ...]
    instruction: str
    combo: tuple[int, int] | None = None
    t: int = 0


@dataclass(frozen=True)
class SimObservation:
    """활성 팔 순서의 관측 배열."""

    instruction: tuple[int, ...]
    ego: Array
    wrist: Array
    proprio: Array

    def as_batch(self) -> ObsBatch:
        return ObsBatch(
            instruction=np.array([self.instruction], dtype=np.int64).reshape(
                1, len(self.instruction)
            ),
            ego=self.ego[None, :],
            wrist=self.wrist[None, :, :],
            proprio=self.proprio[None, :, :],
        )


@dataclass(frozen=True)
class Episode:
    """시뮬레이터 궤적 (관측과 행동 길이가 같음).

    Attributes:
        task: 작업 종류
        seed: 장면 시드
        instruction: 지시어
        frequency: 기록 주파수 (Hz)
        arms: 기록된 팔 (오른팔 먼저)
        ego: (S, F)
        wrist: (S, K, F)
        proprio: (S, K, 10)
        actions: (S, 10K)
        success: 성공 여부
        holder_trace: 스텝마다 물체 0을 잡은 팔 목록
        combo: put_x_into_y의 (색, 냄비) 조합
    """

    task: str
    seed: int
    instruction: str
    frequency: float
    arms: tuple[int, ...]
    ego: Array
    wrist: Array
    proprio: Array
    actions: Array
    success: bool
    holder_trace: tuple[tuple[int, ...], ...] = ()
    combo: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        steps = self.actions.shape[0]
        if not (self.ego.shape[0] == self.wrist.shape[0] == self.proprio.shape[0] == steps):
            raise ValidationError("episode observation and action lengths differ")
        if self.frequency <= 0:
            raise ValidationError(f"episode frequency must be positive, got {self.frequency}")

    @property
    def length(self) -> int:
        return int(self.actions.shape[0])


# ---------------------------------------------------------------- 장면 생성
def _u(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi))


def _point(x: float, y: float, z: float = 0.0) -> Array:
    return np.array([x, y, z], dtype=np.float64)


def _spot(
    rng: np.random.Generator,
    x_range: tuple[float, float],
    y_range: tuple[float, float],
    sign: float = 1.0,
) -> Array:
    """x를 먼저, y를 다음으로 뽑은 평면 위 점 (x에 sign을 곱함)."""
    x = sign * _u(rng, *x_range)
    return _point(x, _u(rng, *y_range))


def _home_arms() -> tuple[ArmState, ArmState]:
    return (
        ArmState(HOME_POSITIONS[RIGHT].copy(), HOME_YAWS[RIGHT], 0.0),
        ArmState(HOME_POSITIONS[LEFT].copy(), HOME_YAWS[LEFT], 0.0),
    )


def combo_for_seed(seed: int) -> tuple[int, int]:
    """put_x_into_y의 (색 인덱스, 냄비 인덱스). seed % 6으로 결정됩니다."""
    combo = seed % 6
    return combo // 2, combo % 2


def combo_label(combo: tuple[int, int]) -> str:
    return f"{COLORS[combo[0]]}->{POT_SIDES[combo[1]]}"


def reset(task: TaskSpec, seed: int) -> tuple[SceneState, SimObservation]:
    """시드로부터 결정적인 장면을 만듭니다."""
    rng = named_stream(seed, "scene", task.kind)
    objects: list[ObjectState] = []
    targets: list[TargetRegion] = []
    goal = np.zeros(3)
    combo: tuple[int, int] | None = None
    instruction = task.template

    if task.kind in SINGLE_ARM_KINDS:
        arm = int(rng.integers(2))
        sign = 1.0 if arm == RIGHT else -1.0
        active: tuple[int, ...] = (arm,)
        if task.kind == "reach":
            goal = _spot(rng, (0.1, 0.5), (0.25, 0.55), sign)
        else:
            objects.append(ObjectState(0, "red", _spot(rng, (0.1, 0.45), (0.1, 0.25), sign)))
            targets.append(
                TargetRegion(0, "red", _spot(rng, (0.1, 0.45), (0.4, 0.55), sign), task.place_tol)
            )
    else:
        active = (RIGHT, LEFT)
        if task.kind == "parallel_pickplace":
            for slot, sign in enumerate((1.0, -1.0)):
                objects.append(
                    ObjectState(slot, COLORS[slot], _spot(rng, (0.15, 0.45), (0.1, 0.25), sign))
                )
                targets.append(
                    TargetRegion(
                        slot,
                        COLORS[slot],
                        _spot(rng, (0.15, 0.45), (0.4, 0.55), sign),
                        task.place_tol,
                    )
                )
        elif task.kind == "coordinated_lift":
            objects.append(ObjectState(0, "red", _spot(rng, (-0.05, 0.05), (0.3, 0.45))))
        elif task.kind == "sequential_handover":
            objects.append(ObjectState(0, "red", _spot(rng, (0.2, 0.45), (0.15, 0.35))))
            targets.append(
                TargetRegion(0, "red", _spot(rng, (-0.45, -0.2), (0.15, 0.45)), task.place_tol)
            )
            goal = HANDOVER_POINT.copy()
        else:
            lanes = rng.permutation(np.array([-0.2, 0.0, 0.2]))
            for slot, color in enumerate(COLORS):
                x = float(lanes[slot]) + _u(rng, -0.03, 0.03)
                objects.append(ObjectState(slot, color, _point(x, _u(rng, 0.15, 0.3))))
            left_pot = _spot(rng, (-0.45, -0.35), (0.45, 0.55))
            targets.append(TargetRegion(0, "left", left_pot, task.pot_tol))
            right_pot = _spot(rng, (0.35, 0.45), (0.45, 0.55))
            targets.append(TargetRegion(1, "right", right_pot, task.pot_tol))
            combo = combo_for_seed(seed)
            instruction = task.template.format(color=COLORS[combo[0]], side=POT_SIDES[combo[1]])

    state = SceneState(
        task=task,
        arms=_home_arms(),
        objects=tuple(objects),
        targets=tuple(targets),
        goal=goal,
        active_arms=active,
        instruction=instruction,
        combo=combo,
    )
    return state, observe(state)


# ---------------------------------------------------------------- 관측
def grasp_points(state: SceneState) -> list[Array]:
    """관측에 쓰이는 물체 점들. coordinated_lift는 [막대 중심, 오른쪽 손잡이, 왼쪽 손잡이]."""
    if state.task.kind == "coordinated_lift":
        bar = state.objects[0].position
        return [bar, bar + HANDLE_OFFSETS[RIGHT], bar + HANDLE_OFFSETS[LEFT]]
    return [obj.position for obj in state.objects]


def _holding(state: SceneState, arm: int) -> bool:
    return any(arm in obj.held_by for obj in state.objects)


def ego_features(state: SceneState) -> Array:
    feat = np.zeros(FEAT_DIM)
    for i, point in enumerate(grasp_points(state)[:3]):
        feat[3 * i : 3 * i + 3] = point
    for j, target in enumerate(state.targets[:2]):
        feat[9 + 2 * j : 11 + 2 * j] = target.center[:2]
    feat[13:16] = state.goal
    return feat


def wrist_features(state: SceneState, arm: int) -> Array:
    here = state.arms[arm].position
    feat = np.zeros(FEAT_DIM)
    for i, point in enumerate(grasp_points(state)[:3]):
        feat[3 * i : 3 * i + 3] = point - here
    for j, target in enumerate(state.targets[:2]):
        feat[9 + 2 * j : 11 + 2 * j] = target.center[:2] - here[:2]
    feat[13:15] = state.goal[:2] - here[:2]
    feat[15] = 1.0 if _holding(state, arm) else 0.0
    return feat


def observe(state: SceneState) -> SimObservation:
    """활성 팔 순서의 관측."""
    return SimObservation(
        instruction=tokenize(state.instruction),
        ego=ego_features(state),
        wrist=np.stack([wrist_features(state, arm) for arm in state.active_arms]),
        proprio=np.stack([state.arms[arm].pose10() for arm in state.active_arms]),
    )


# ---------------------------------------------------------------- 동역학
def clamp_move(current: Array, commanded: ArrayLike, max_step: float) -> Array:
    """명령 위치를 작업 공간에 자르고 한 스텝 이동 거리를 제한합니다."""
    goal = np.clip(np.asarray(commanded, dtype=np.float64), BOUNDS_LO, BOUNDS_HI)
    delta = goal - current
    dist = float(np.linalg.norm(delta))
    if dist > max_step:
        delta = delta * (max_step / dist)
    return np.clip(current + delta, BOUNDS_LO, BOUNDS_HI)


def _commanded_yaw(rot6: Array, fallback: float) -> float:
    first = rot6[:2]
    if float(np.linalg.norm(first)) < 1e-6:
        return fallback
    return math.atan2(float(first[1]), float(first[0]))


def _turn(current: float, target: float) -> float:
    diff = (target - current + math.pi) % (2 * math.pi) - math.pi
    return current + max(-MAX_YAW_STEP, min(MAX_YAW_STEP, diff))


def _split_action(state: SceneState, action: ArrayLike) -> dict[int, Array]:
    vec = np.asarray(action, dtype=np.float64).reshape(-1)
    expected = ARM_DIM * len(state.active_arms)
    if vec.size != expected:
        raise ValidationError(f"action must have {expected} entries, got {vec.size}")
    if not np.isfinite(vec).all():
        raise ValidationError("action must be finite")
    return {arm: vec[i * ARM_DIM : (i + 1) * ARM_DIM] for i, arm in enumerate(state.active_arms)}


def step(state: SceneState, action: ArrayLike) -> tuple[SceneState, SimObservation]:
    """활성 팔에 포즈 명령을 적용하고 한 스텝 진행합니다.

    Args:
        state: 현재 장면
        action: 활성 팔 순서의 10차원 포즈 명령들 (두 팔이면 오른팔 먼저)

    Returns:
        (다음 장면, 관측)
    """
    task = state.task
    commands = _split_action(state, action)
    arms = list(state.arms)
    for arm, cmd in commands.items():
        current = arms[arm]
        arms[arm] = ArmState(
            position=clamp_move(current.position, cmd[0:3], task.max_step),
            yaw=_turn(current.yaw, _commanded_yaw(cmd[3:9], current.yaw)),
            gripper=1.0 if cmd[9] > 0.5 else 0.0,
        )

    points = grasp_points(state)
    holders = [{k for k in obj.held_by if arms[k].closed} for obj in state.objects]
    for arm in state.active_arms:
        if not arms[arm].closed or any(arm in h for h in holders):
            continue
        best, best_dist = None, task.grasp_radius
        for index, obj in enumerate(state.objects):
            if task.kind == "coordinated_lift":
                point = points[0] + HANDLE_OFFSETS[arm]
            else:
                point = obj.position
            dist = float(np.linalg.norm(arms[arm].position - point))
            if dist <= best_dist:
                best, best_dist = index, dist
        if best is not None:
            holders[best].add(arm)

    objects = []
    for obj, held in zip(state.objects, holders, strict=True):
        position = obj.position.copy()
        if task.kind == "coordinated_lift":
            if held == {RIGHT, LEFT}:
                heights = [arms[k].position[2] for k in (RIGHT, LEFT)]
                if abs(heights[0] - heights[1]) < task.sync_tol:
                    position = np.mean(
                        [arms[k].position - HANDLE_OFFSETS[k] for k in (RIGHT, LEFT)], axis=0
                    )
                else:
                    logger.debug(
                        f"Bar dropped: lift heights {heights[0]:.3f}/{heights[1]:.3f} out of sync"
                    )
                    held = set()
                    position[2] = 0.0
            else:
                position[2] = 0.0
        elif held:
            position = np.mean([arms[k].position for k in sorted(held)], axis=0)
        else:
            position[2] = 0.0
        objects.append(replace(obj, position=position, held_by=frozenset(held)))

    next_state = replace(state, arms=(arms[0], arms[1]), objects=tuple(objects), t=state.t + 1)
    return next_state, observe(next_state)


# ---------------------------------------------------------------- 성공 판정
def _placed(obj: ObjectState, target: TargetRegion) -> bool:
    distance = float(np.linalg.norm(obj.position[:2] - target.center[:2]))
    return not obj.held_by and distance <= target.radius


def success(task: TaskSpec, state: SceneState) -> bool:
    """작업 성공 여부 (순수 함수)."""
    kind = task.kind
    if kind == "reach":
        arm = state.arms[state.active_arms[0]]
        return float(np.linalg.norm(arm.position - state.goal)) <= task.reach_tol
    if kind in ("pick_place", "sequential_handover"):
        return _placed(state.objects[0], state.targets[0])
    if kind == "parallel_pickplace":
        return all(_placed(obj, tgt) for obj, tgt in zip(state.objects, state.targets, strict=True))
    if kind == "coordinated_lift":
        bar = state.objects[0]
        return bar.held_by == {RIGHT, LEFT} and bar.position[2] >= task.lift_height - 0.01
    if state.combo is None:
        return False
    color, pot = state.combo
    for index, obj in enumerate(state.objects):
        in_any_pot = any(_placed(obj, tgt) for tgt in state.targets)
        if index == color:
            if not _placed(obj, state.targets[pot]):
                return False
        elif in_any_pot:
            return False
    return True


# ---------------------------------------------------------------- 스크립트 전문가
@dataclass(frozen=True)
class Waypoint:
    """전문가 경유점. barrier가 있으면 다른 팔도 같은 barrier에 도착해야 다음으로 넘어갑니다."""

    position: Array
    grip: float
    dwell: int = 0
    barrier: str | None = None


def _noisy(point: Array, rng: np.random.Generator, noise: float) -> Array:
    jitter = np.zeros(3)
    if noise > 0:
        jitter[:2] = rng.uniform(-noise, noise, size=2)
    return point + jitter


def plan_waypoints(
    task: TaskSpec, state: SceneState, rng: np.random.Generator
) -> dict[int, list[Waypoint]]:
    """작업별 팔 경유점 계획.

    Raises:
        SimulationError: 계획할 수 없는 장면인 경우
    """
    noise = task.expert_noise
    kind = task.kind

    def pick_and_place(source: Array, dest: Array) -> list[Waypoint]:
        grab = _noisy(source, rng, noise)
        drop = _noisy(dest, rng, noise)
        return [
            Waypoint(grab, 0.0),
            Waypoint(grab, 1.0, dwell=1),
            Waypoint(drop, 1.0),
            Waypoint(drop, 0.0, dwell=1),
        ]

    if kind == "reach":
        return {state.active_arms[0]: [Waypoint(_noisy(state.goal, rng, noise), 0.0)]}
    if kind == "pick_place":
        source, dest = state.objects[0].position, state.targets[0].center
        return {state.active_arms[0]: pick_and_place(source, dest)}
    if kind == "parallel_pickplace":
        return {
            arm: pick_and_place(state.objects[arm].position, state.targets[arm].center)
            for arm in (RIGHT, LEFT)
        }
    if kind == "coordinated_lift":
        bar = state.objects[0].position
        plans: dict[int, list[Waypoint]] = {}
        for arm in (RIGHT, LEFT):
            handle = _noisy(bar + HANDLE_OFFSETS[arm], rng, noise)
            lifted = handle + np.array([0.0, 0.0, task.lift_height])
            plans[arm] = [
                Waypoint(handle, 0.0, barrier="at_handle"),
                Waypoint(handle, 1.0, dwell=1, barrier="closed"),
                Waypoint(lifted, 1.0),
            ]
        return plans
    if kind == "sequential_handover":
        grab = _noisy(state.objects[0].position, rng, noise)
        meet_r = _noisy(HANDOVER_POINT, rng, noise)
        meet_l = _noisy(HANDOVER_POINT, rng, noise)
        drop = _noisy(state.targets[0].center, rng, noise)
        return {
            RIGHT: [
                Waypoint(grab, 0.0),
                Waypoint(grab, 1.0, dwell=1),
                Waypoint(meet_r, 1.0, barrier="meet"),
                Waypoint(meet_r, 1.0, barrier="left_closed"),
                Waypoint(meet_r, 0.0, dwell=1, barrier="right_open"),
                Waypoint(HOME_POSITIONS[RIGHT].copy(), 0.0),
            ],
            LEFT: [
                Waypoint(meet_l, 0.0, barrier="meet"),
                Waypoint(meet_l, 1.0, dwell=1, barrier="left_closed"),
                Waypoint(meet_l, 1.0, barrier="right_open"),
                Waypoint(drop, 1.0),
                Waypoint(drop, 0.0, dwell=1),
            ],
        }
    if state.combo is None:
        raise SimulationError("put_x_into_y scene has no instruction combination")
    color, pot = state.combo
    arm = LEFT if POT_SIDES[pot] == "left" else RIGHT
    return {arm: pick_and_place(state.objects[color].position, state.targets[pot].center)}


@dataclass
class PlanRunner:
    """경유점 계획을 스텝 명령으로 바꾸는 실행기 (barrier 동기화 포함)."""

    plans: dict[int, list[Waypoint]]
    index: dict[int, int] = field(default_factory=dict)
    waited: dict[int, int] = field(default_factory=dict)
    reached: dict[int, set[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for arm in self.plans:
            self.index.setdefault(arm, 0)
            self.waited.setdefault(arm, 0)
            self.reached.setdefault(arm, set())

    def _current(self, arm: int) -> Waypoint | None:
        plan = self.plans.get(arm, [])
        i = self.index.get(arm, 0)
        return plan[i] if i < len(plan) else None

    def command(self, state: SceneState) -> Array:
        """활성 팔 순서의 다음 포즈 명령."""
        task = state.task
        parts = []
        for arm in state.active_arms:
            current = state.arms[arm]
            wp = self._current(arm)
            if wp is None:
                position, grip = current.position.copy(), current.gripper
            else:
                position, grip = clamp_move(current.position, wp.position, task.max_step), wp.grip
            rot6 = rotmat_to_6d(yaw_to_rotmat(current.yaw))
            parts.append(np.concatenate([position, rot6, [grip]]))
        return np.concatenate(parts)

    def update(self, state: SceneState) -> None:
        """스텝 후 도착/대기/barrier 상태를 갱신합니다 (두 팔 동시 판정)."""
        finished: dict[int, Waypoint] = {}
        for arm in self.plans:
            wp = self._current(arm)
            if wp is None:
                continue
            target = np.clip(wp.position, BOUNDS_LO, BOUNDS_HI)
            if float(np.linalg.norm(state.arms[arm].position - target)) > 1e-6:
                continue
            self.waited[arm] += 1
            if self.waited[arm] > wp.dwell:
                finished[arm] = wp
                if wp.barrier is not None:
                    self.reached[arm].add(wp.barrier)
        for arm, wp in finished.items():
            others = [other for other in self.plans if other != arm]
            if wp.barrier is None or all(wp.barrier in self.reached[o] for o in others):
                self.index[arm] += 1
                self.waited[arm] = 0


def scripted_expert(task: TaskSpec, seed: int) -> Episode:
    """스크립트 전문가로 시연 에피소드 하나를 기록합니다.

    Raises:
        SimulationError: horizon 안에 성공하지 못한 경우
    """
    state, obs = reset(task, seed)
    runner = PlanRunner(plan_waypoints(task, state, named_stream(seed, "expert", task.kind)))
    ego, wrist, proprio, actions = [], [], [], []
    trace: list[tuple[int, ...]] = []
    for _ in range(task.horizon):
        action = runner.command(state)
        ego.append(obs.ego)
        wrist.append(obs.wrist)
        proprio.append(obs.proprio)
        actions.append(action)
        state, obs = step(state, action)
        if state.objects:
            trace.append(tuple(sorted(state.objects[0].held_by)))
        runner.update(state)
        if success(task, state):
            break
    else:
        raise SimulationError(f"Expert failed {task.kind} seed {seed} within {task.horizon} steps")

    return Episode(
        task=task.kind,
        seed=seed,
        instruction=state.instruction,
        frequency=task.frequency,
        arms=state.active_arms,
        ego=np.stack(ego),
        wrist=np.stack(wrist),
        proprio=np.stack(proprio),
        actions=np.stack(actions),
        success=True,
        holder_trace=tuple(trace),
        combo=state.combo,
    )


def phases(trace: tuple[tuple[int, ...], ...]) -> list[tuple[int, ...]]:
    """연속 중복을 제거한 파지 단계 목록."""
    out: list[tuple[int, ...]] = []
    for holders in trace:
        if not out or out[-1] != holders:
            out.append(holders)
    return out


def describe(state: SceneState) -> dict[str, Any]:
    """로그용 장면 요약."""
    return {
        "task": state.task.kind,
        "t": state.t,
        "instruction": state.instruction,
        "arms": [arm.position.round(4).tolist() for arm in state.arms],
        "objects": [obj.position.round(4).tolist() for obj in state.objects],
    }
