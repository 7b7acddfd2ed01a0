"""Tests for the tabletop simulator and the scripted expert."""

from dataclasses import replace
from typing import get_args

import numpy as np
import pytest

from src.core.geometry import rotmat_to_6d, yaw_to_rotmat
from src.core.sim import (
    BOUNDS_HI,
    BOUNDS_LO,
    HANDLE_OFFSETS,
    LEFT,
    RIGHT,
    SceneState,
    TaskKind,
    TaskSpec,
    combo_for_seed,
    combo_label,
    describe,
    phases,
    reset,
    scripted_expert,
    step,
    success,
    tokenize,
)
from src.utils.exceptions import SimulationError, ValidationError

ALL_KINDS: tuple[str, ...] = get_args(TaskKind)


def _command(state: SceneState, targets: dict[int, tuple[np.ndarray, float]]) -> np.ndarray:
    """활성 팔마다 (위치, 그리퍼) 명령을 만들고, 지정하지 않은 팔은 제자리에 둡니다."""
    parts = []
    for arm in state.active_arms:
        current = state.arms[arm]
        position, grip = targets.get(arm, (current.position, current.gripper))
        rot6 = rotmat_to_6d(yaw_to_rotmat(current.yaw))
        parts.append(np.concatenate([position, rot6, [grip]]))
    return np.concatenate(parts)


def _drive(
    state: SceneState, targets: dict[int, tuple[np.ndarray, float]], steps: int = 20
) -> SceneState:
    for _ in range(steps):
        state, _ = step(state, _command(state, targets))
    return state


def _in_bounds(point: np.ndarray) -> bool:
    return bool(np.all(point >= BOUNDS_LO - 1e-9) and np.all(point <= BOUNDS_HI + 1e-9))


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_reset_is_deterministic(kind: str) -> None:
    task = TaskSpec(kind=kind)
    first, obs_a = reset(task, 11)
    second, obs_b = reset(task, 11)

    assert describe(first) == describe(second)
    np.testing.assert_array_equal(obs_a.ego, obs_b.ego)
    np.testing.assert_array_equal(obs_a.wrist, obs_b.wrist)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_reset_positions_stay_in_bounds(kind: str) -> None:
    task = TaskSpec(kind=kind)
    for seed in range(200):
        state, obs = reset(task, seed)
        assert all(_in_bounds(obj.position) for obj in state.objects)
        assert all(_in_bounds(np.append(tgt.center[:2], 0.0)) for tgt in state.targets)
        assert _in_bounds(state.goal)
        assert obs.wrist.shape == (task.n_arms, 16)
        assert obs.proprio.shape == (task.n_arms, 10)


def test_put_x_into_y_instruction_from_seed() -> None:
    state, obs = reset(TaskSpec(kind="put_x_into_y"), 0)
    assert state.combo == (0, 0)
    assert state.instruction == "put red box into left pot"
    assert obs.instruction == tokenize("put red box into left pot")


def test_combinations_cycle_over_consecutive_seeds() -> None:
    combos = {combo_for_seed(seed) for seed in range(12, 18)}
    assert len(combos) == 6
    assert combo_label((2, 1)) == "blue->right"


def test_tokenize_templates_and_unknown_words() -> None:
    for kind in ALL_KINDS:
        state, _ = reset(TaskSpec(kind=kind), 1)
        assert 0 < len(tokenize(state.instruction)) <= 8
    with pytest.raises(ValidationError):
        tokenize("fly to the moon")


def test_zero_displacement_leaves_scene_unchanged() -> None:
    state, _ = reset(TaskSpec(kind="pick_place"), 3)
    moved, _ = step(state, _command(state, {}))

    for before, after in zip(state.arms, moved.arms, strict=True):
        np.testing.assert_allclose(after.position, before.position)
        assert after.yaw == pytest.approx(before.yaw)
        assert after.gripper == before.gripper
    for before_obj, after_obj in zip(state.objects, moved.objects, strict=True):
        np.testing.assert_array_equal(after_obj.position, before_obj.position)
    assert moved.t == state.t + 1


def test_grasp_with_nothing_in_reach_holds_nothing() -> None:
    state, _ = reset(TaskSpec(kind="coordinated_lift"), 0)
    closed = {arm: (state.arms[arm].position, 1.0) for arm in state.active_arms}
    moved, obs = step(state, _command(state, closed))

    assert all(arm.closed for arm in moved.arms)
    assert moved.objects[0].held_by == frozenset()
    assert obs.wrist[:, 15].tolist() == [0.0, 0.0]


def test_single_arm_cannot_lift_bar() -> None:
    task = TaskSpec(kind="coordinated_lift")
    state, _ = reset(task, 5)
    handle = state.objects[0].position + HANDLE_OFFSETS[RIGHT]

    state = _drive(state, {RIGHT: (handle, 0.0)})
    state = _drive(state, {RIGHT: (handle, 1.0)}, steps=2)
    assert state.objects[0].held_by == frozenset({RIGHT})
    state = _drive(state, {RIGHT: (handle + np.array([0.0, 0.0, 0.15]), 1.0)})

    assert state.arms[RIGHT].position[2] == pytest.approx(0.15)
    assert state.objects[0].position[2] == 0.0
    assert not success(task, state)


def test_unsynchronized_lift_drops_bar() -> None:
    task = TaskSpec(kind="coordinated_lift")
    state, _ = reset(task, 6)
    bar = state.objects[0].position
    handles = {arm: bar + HANDLE_OFFSETS[arm] for arm in (RIGHT, LEFT)}

    state = _drive(state, {arm: (handles[arm], 0.0) for arm in (RIGHT, LEFT)})
    state = _drive(state, {arm: (handles[arm], 1.0) for arm in (RIGHT, LEFT)}, steps=2)
    assert state.objects[0].held_by == frozenset({RIGHT, LEFT})
    state, _ = step(
        state,
        _command(state, {RIGHT: (handles[RIGHT] + np.array([0.0, 0.0, 0.06]), 1.0)}),
    )

    assert state.objects[0].held_by == frozenset()
    assert state.objects[0].position[2] == 0.0


def test_step_validates_action() -> None:
    state, _ = reset(TaskSpec(kind="parallel_pickplace"), 0)
    with pytest.raises(ValidationError):
        step(state, np.zeros(10))
    with pytest.raises(ValidationError):
        step(state, np.full(20, np.nan))


def test_moves_are_clamped_to_max_step() -> None:
    task = TaskSpec(kind="reach")
    state, _ = reset(task, 2)
    arm = state.active_arms[0]
    far = state.arms[arm].position + np.array([0.0, 0.4, 0.0])
    moved, _ = step(state, _command(state, {arm: (far, 0.0)}))

    travelled = np.linalg.norm(moved.arms[arm].position - state.arms[arm].position)
    assert travelled == pytest.approx(task.max_step)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_initial_scene_is_not_success(kind: str) -> None:
    task = TaskSpec(kind=kind)
    for seed in range(10):
        state, _ = reset(task, seed)
        assert not success(task, state)


def test_put_x_into_y_case_table() -> None:
    task = TaskSpec(kind="put_x_into_y")
    state, _ = reset(task, 4)
    assert state.combo is not None
    color, pot = state.combo
    wrong_pot = 1 - pot
    wrong_color = (color + 1) % 3

    def place(scene: SceneState, moves: dict[int, int]) -> SceneState:
        objects = tuple(
            replace(obj, position=scene.targets[moves[i]].center.copy()) if i in moves else obj
            for i, obj in enumerate(scene.objects)
        )
        return replace(scene, objects=objects)

    assert success(task, place(state, {color: pot}))
    assert not success(task, place(state, {color: wrong_pot}))
    assert not success(task, place(state, {color: pot, wrong_color: wrong_pot}))
    assert not success(task, place(state, {wrong_color: pot}))


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_expert_solves_every_task(kind: str) -> None:
    task = TaskSpec(kind=kind)
    for seed in range(20):
        episode = scripted_expert(task, seed)
        assert episode.success
        assert episode.length <= task.horizon
        assert episode.actions.shape[1] == 10 * task.n_arms
        assert all(_in_bounds(p[:3]) for p in episode.proprio.reshape(-1, 10))


def test_expert_reach_ends_within_tolerance() -> None:
    task = TaskSpec(kind="reach")
    episode = scripted_expert(task, 8)
    state, _ = reset(task, 8)
    final = episode.actions[-1][:3]
    assert np.linalg.norm(final - state.goal) <= task.reach_tol


def test_expert_handover_phases() -> None:
    episode = scripted_expert(TaskSpec(kind="sequential_handover"), 3)
    assert phases(episode.holder_trace) == [(), (RIGHT,), (RIGHT, LEFT), (LEFT,), ()]


def test_expert_is_deterministic() -> None:
    task = TaskSpec(kind="coordinated_lift")
    first, second = scripted_expert(task, 9), scripted_expert(task, 9)
    np.testing.assert_array_equal(first.actions, second.actions)
    np.testing.assert_array_equal(first.ego, second.ego)


def test_expert_reports_horizon_failure() -> None:
    with pytest.raises(SimulationError):
        scripted_expert(TaskSpec(kind="sequential_handover", horizon=3), 0)


@pytest.mark.slow
@pytest.mark.parametrize("kind", ALL_KINDS)
def test_expert_success_rate_audit(kind: str) -> None:
    task = TaskSpec(kind=kind)
    solved = 0
    for seed in range(500):
        try:
            scripted_expert(task, seed)
            solved += 1
        except SimulationError:
            pass
    assert solved / 500 >= 0.99
