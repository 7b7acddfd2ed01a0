"""Desk-scale trend tests: training and evaluating real policies with the shipped configs.

Each test runs for minutes, so all of them carry the ``slow`` marker.
"""

from pathlib import Path
from typing import Any

import pytest

from src.core import pipeline
from src.core.policy import ModelConfig, SinglePolicy
from src.core.sim import TaskSpec
from src.core.train import evaluate
from src.utils.config import RunConfig, load_run_config

CONFIG_DIR = Path(__file__).parent.parent / "config"
MARGIN = 0.05

pytestmark = pytest.mark.slow


def _config(name: str, out: Path, **sections: dict[str, Any]) -> RunConfig:
    """저장소 설정을 읽어 출력 경로와 일부 섹션만 바꿉니다."""
    cfg = load_run_config(CONFIG_DIR / name)
    update: dict[str, Any] = {"paths": cfg.paths.model_copy(update={"out": out})}
    for section, values in sections.items():
        update[section] = getattr(cfg, section).model_copy(update=values)
    return cfg.model_copy(update=update)


def _prepare(cfg: RunConfig) -> None:
    pipeline.gen_data(cfg)
    pipeline.pretrain_single(cfg)
    pipeline.duplicate_stage(cfg)


def test_fresh_policy_does_not_solve_pick_place() -> None:
    policy = SinglePolicy.fresh(ModelConfig(), seed=0)
    result = evaluate(policy, TaskSpec(kind="pick_place"), n_rollouts=100, seed=0)
    assert result.rate <= 0.05


def test_ablation_ladder_trend(tmp_path: Path) -> None:
    cfg = _config(
        "coordinated_lift.json", tmp_path, ablate={"seeds": [0, 1, 2], "rollouts": 100}
    )
    _prepare(cfg)

    success = {row["rung"]: row["success"] for row in pipeline.ablate(cfg)["rows"]}

    assert success["full"] - success["w/o joint attention"] >= MARGIN
    assert success["full"] - success[pipeline.SCRATCH_RUNG] >= MARGIN


def test_more_demonstrations_help(tmp_path: Path) -> None:
    cfg = _config(
        "coordinated_lift.json",
        tmp_path,
        sweep={"demo_counts": [20, 50], "seeds": [0, 1, 2], "rollouts": 100},
    )
    _prepare(cfg)

    few, many = pipeline.data_sweep(cfg)["rows"]

    assert (few["demos"], many["demos"]) == (20, 50)
    assert many["success"] - few["success"] >= MARGIN


def test_language_following_beats_random_pairing(tmp_path: Path) -> None:
    cfg = _config("put_x_into_y.yaml", tmp_path, eval={"rollouts": 120})
    assert cfg.data.finetune_episodes == 60

    summary = pipeline.run_pipeline(cfg)["eval"]

    rows = summary["combinations"]
    assert len(rows) == 6
    for row in rows:
        assert row["rollouts"] == 20
        assert row["rate"] > pipeline.LANGUAGE_BASELINE, row["combination"]
