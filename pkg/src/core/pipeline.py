"""명령 단계: 데이터 생성, 단일 사전학습, 복제, 두 팔 미세조정, 평가, ablation, 데이터 스윕.

각 cmd_* 함수는 출력 디렉토리 잠금을 잡고 실행되며 결과 요약 dict를 반환합니다.
모든 난수는 RunConfig.seed에서 이름 붙은 스트림(data/init/train/eval)으로 파생됩니다.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any

import numpy as np
from loguru import logger

from src.core.checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from src.core.dataset import (
    DemoDataset,
    dataset_hash,
    resample_episode,
    write_dataset,
)
from src.core.numkernel import derive_seed
from src.core.policy import Policy, SinglePolicy, TwinFlags, TwinPolicy, duplicate, token_count
from src.core.report import bar_chart, line_chart, write_csv, write_report
from src.core.sim import (
    COLORS,
    POT_SIDES,
    Episode,
    TaskKind,
    TaskSpec,
    combo_label,
    scripted_expert,
)
from src.core.train import (
    EvalResult,
    TrainConfig,
    TrainResult,
    evaluate,
    initial_loss,
    train_loop,
    write_episode_log,
)
from src.utils.config import RunConfig, config_hash
from src.utils.exceptions import SimulationError, ValidationError
from src.utils.runlock import RunLock
from src.utils.signals import GracefulShutdown

LANGUAGE_BASELINE = 1.0 / (len(COLORS) * len(POT_SIDES))

ABLATION_LADDER: tuple[tuple[str, TwinFlags], ...] = (
    ("full", TwinFlags(joint_attention=True, moe=True, reweight=True)),
    ("w/o reweight", TwinFlags(joint_attention=True, moe=True, reweight=False)),
    ("w/o moe", TwinFlags(joint_attention=True, moe=False, reweight=False)),
    ("w/o joint attention", TwinFlags(joint_attention=False, moe=False, reweight=False)),
)
SCRATCH_RUNG = "scratch"


# ---------------------------------------------------------------- 데이터 생성
def _try_expert(task: TaskSpec, seed: int) -> Episode | None:
    try:
        return scripted_expert(task, seed)
    except SimulationError as exc:
        logger.warning(f"Unsolvable seed skipped: {exc}")
        return None


def generate_episodes(
    task: TaskSpec,
    count: int,
    root_seed: int,
    threads: int = 1,
    max_seed_attempts: int = 2,
    audit_threshold: float = 0.95,
) -> tuple[list[Episode], dict[str, Any]]:
    """연속된 장면 시드로 전문가 시연을 count개 모읍니다.

    Returns:
        (에피소드 목록, 감사 정보 {attempted, solved, rate, unsolvable_seeds})

    Raises:
        SimulationError: 전문가 성공률이 audit_threshold보다 낮거나 시드가 모자란 경우
    """
    base = derive_seed(root_seed, "data", task.kind)
    episodes: list[Episode] = []
    unsolvable: list[int] = []
    attempted = 0
    budget = count * max_seed_attempts
    workers = max(1, threads)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        while len(episodes) < count and attempted < budget:
            want = min(count - len(episodes), budget - attempted)
            seeds = [base + attempted + i for i in range(want)]
            for seed, episode in zip(seeds, pool.map(lambda s: _try_expert(task, s), seeds)):
                if episode is None:
                    unsolvable.append(seed)
                else:
                    episodes.append(episode)
            attempted += want

    rate = len(episodes) / attempted if attempted else 0.0
    audit = {
        "task": task.kind,
        "attempted": attempted,
        "solved": len(episodes),
        "rate": rate,
        "unsolvable_seeds": unsolvable,
    }
    logger.info(f"Expert audit {task.kind}: {len(episodes)}/{attempted} solved (rate {rate:.3f})")
    if rate < audit_threshold:
        raise SimulationError(
            f"Expert success rate {rate:.3f} on {task.kind} is below {audit_threshold:.2f}"
        )
    if len(episodes) < count:
        raise SimulationError(
            f"Only {len(episodes)} of {count} {task.kind} episodes within {attempted} seeds"
        )
    return episodes, audit


def _build_dataset(
    cfg: RunConfig, kinds: Sequence[TaskKind], count: int, directory: Path, role: str
) -> dict[str, Any]:
    episodes: list[Episode] = []
    audits = []
    source_hz = 0.0
    for kind in kinds:
        task = TaskSpec(kind=kind)
        source_hz = task.frequency
        found, audit = generate_episodes(
            task,
            count,
            cfg.seed,
            cfg.threads,
            cfg.data.max_seed_attempts,
            cfg.data.audit_threshold,
        )
        episodes.extend(resample_episode(ep, cfg.data.target_hz) for ep in found)
        audits.append(audit)
    meta = {
        "role": role,
        "tasks": list(kinds),
        "source_hz": source_hz,
        "seed": cfg.seed,
        "audit": audits,
    }
    write_dataset(directory, episodes, meta)
    return {"path": str(directory), "count": len(episodes), "audit": audits}


def gen_data(cfg: RunConfig) -> dict[str, Any]:
    """사전학습 혼합 데이터셋과 미세조정 데이터셋을 만듭니다."""
    pretrain = _build_dataset(
        cfg,
        cfg.data.pretrain_tasks,
        cfg.data.pretrain_episodes,
        cfg.paths.resolve("pretrain_data"),
        "pretrain",
    )
    finetune = _build_dataset(
        cfg,
        [cfg.data.finetune_task],
        cfg.data.finetune_episodes,
        cfg.paths.resolve("finetune_data"),
        "finetune",
    )
    return {"pretrain": pretrain, "finetune": finetune}


# ---------------------------------------------------------------- 학습 단계
def _train_config(base: TrainConfig, root_seed: int, *names: str | int) -> TrainConfig:
    return base.model_copy(update={"seed": derive_seed(root_seed, "train", *names, base.seed)})


def _train_and_save(
    policy: Policy,
    dataset: DemoDataset,
    train_cfg: TrainConfig,
    checkpoint: Path,
    metrics: Path,
    shutdown: GracefulShutdown | None,
    extra: dict[str, Any],
) -> tuple[TrainResult, str]:
    result = train_loop(policy, dataset, train_cfg, metrics, shutdown)
    info = {
        **extra,
        "steps": result.steps,
        "final_loss": result.final_loss,
        "interrupted": result.interrupted,
    }
    digest = save_checkpoint(policy, checkpoint, info)
    return result, digest


def pretrain_single(cfg: RunConfig, shutdown: GracefulShutdown | None = None) -> dict[str, Any]:
    """단일 팔 혼합 데이터로 새 단일 정책을 사전학습합니다."""
    data_dir = cfg.paths.resolve("pretrain_data")
    dataset = DemoDataset.load(data_dir, stage="gen-data")
    policy = SinglePolicy.fresh(cfg.model, derive_seed(cfg.seed, "init", "single"))
    result, digest = _train_and_save(
        policy,
        dataset,
        _train_config(cfg.pretrain, cfg.seed, "pretrain"),
        cfg.paths.resolve("single_checkpoint"),
        cfg.paths.out / "metrics" / "pretrain.jsonl",
        shutdown,
        {"stage": "pretrain-single", "dataset_hash": dataset_hash(data_dir)},
    )
    return {
        "checkpoint": str(cfg.paths.resolve("single_checkpoint")),
        "hash": digest,
        "final_loss": result.final_loss,
        "interrupted": result.interrupted,
    }


def duplicate_stage(cfg: RunConfig) -> dict[str, Any]:
    """사전학습된 단일 정책을 두 팔 정책으로 복제합니다."""
    single = load_checkpoint(cfg.paths.resolve("single_checkpoint"), stage="pretrain-single")
    if not isinstance(single, SinglePolicy):
        raise ValidationError("duplicate expects a single-arm checkpoint")
    twin = duplicate(single, cfg.flags)
    census = twin.store.census(depth=2)
    logger.info(
        f"Duplicated {single.store.num_parameters()} -> {twin.store.num_parameters()} parameters; "
        f"census {json.dumps(census, sort_keys=True)}"
    )
    target = cfg.paths.resolve("twin_checkpoint")
    source = checkpoint_hash(cfg.paths.resolve("single_checkpoint"))
    digest = save_checkpoint(twin, target, {"stage": "duplicate", "source": source})
    return {"checkpoint": str(target), "hash": digest, "census": census}


def _load_twin(path: Path, flags: TwinFlags, stage: str) -> TwinPolicy:
    policy = load_checkpoint(path, stage=stage)
    if not isinstance(policy, TwinPolicy):
        raise ValidationError(f"{path} is not a twin checkpoint")
    return policy.with_flags(flags)


def _scratch_twin(cfg: RunConfig, seed: int) -> TwinPolicy:
    """사전학습 없이 새로 초기화한 단일 정책을 복제한 두 팔 정책 (scratch 기준선)."""
    single = SinglePolicy.fresh(cfg.model, derive_seed(seed, "init", "scratch"))
    return duplicate(single, cfg.flags)


def finetune_twin(
    cfg: RunConfig,
    scratch: bool = False,
    shutdown: GracefulShutdown | None = None,
) -> dict[str, Any]:
    """두 팔 정책을 미세조정합니다. scratch면 사전학습 없이 새로 초기화한 정책을 씁니다."""
    data_dir = cfg.paths.resolve("finetune_data")
    dataset = DemoDataset.load(data_dir, stage="gen-data")
    if scratch:
        twin = _scratch_twin(cfg, cfg.seed)
        target = cfg.paths.out / "checkpoints" / "twin_scratch"
        source = "scratch"
    else:
        twin = _load_twin(cfg.paths.resolve("twin_checkpoint"), cfg.flags, "duplicate")
        target = cfg.paths.resolve("finetuned_checkpoint")
        source = checkpoint_hash(cfg.paths.resolve("twin_checkpoint"))
    result, digest = _train_and_save(
        twin,
        dataset,
        _train_config(cfg.finetune, cfg.seed, "finetune"),
        target,
        cfg.paths.out / "metrics" / ("finetune_scratch.jsonl" if scratch else "finetune.jsonl"),
        shutdown,
        {"stage": "finetune-twin", "source": source, "dataset_hash": dataset_hash(data_dir)},
    )
    return {
        "checkpoint": str(target),
        "hash": digest,
        "final_loss": result.final_loss,
        "interrupted": result.interrupted,
    }


# ---------------------------------------------------------------- 평가
def language_rows(result: EvalResult) -> list[dict[str, Any]]:
    """지시어 조합 6개 모두에 대한 성공률 행 (시도가 없는 조합도 포함)."""
    counts = result.by_combination()
    rows = []
    for color in range(len(COLORS)):
        for pot in range(len(POT_SIDES)):
            label = combo_label((color, pot))
            wins, total = counts.get(label, (0, 0))
            rows.append(
                {
                    "combination": label,
                    "successes": wins,
                    "rollouts": total,
                    "rate": wins / total if total else 0.0,
                    "baseline": LANGUAGE_BASELINE,
                }
            )
    return rows


def eval_stage(cfg: RunConfig, checkpoint: Path | None = None) -> dict[str, Any]:
    """체크포인트를 평가하고 에피소드 로그와 보고서를 씁니다."""
    path = checkpoint or cfg.paths.resolve("finetuned_checkpoint")
    policy = load_checkpoint(path, stage="finetune-twin")
    task = cfg.eval_task()
    result = evaluate(
        policy,
        task,
        cfg.eval.rollouts,
        derive_seed(cfg.seed, "eval"),
        horizon=cfg.eval.horizon,
        execution_prefix=cfg.eval.execution_prefix,
        sampler=cfg.sampler,
        threads=cfg.threads,
    )
    out = cfg.paths.out / "eval"
    write_episode_log(out / "episodes.jsonl", result)
    summary: dict[str, Any] = {
        "task": task.kind,
        "rollouts": result.n_rollouts,
        "successes": result.successes,
        "rate": result.rate,
    }
    if task.kind == "put_x_into_y":
        rows = language_rows(result)
        columns = ["combination", "successes", "rollouts", "rate", "baseline"]
        write_csv(out / "language.csv", rows, columns)
        bar_chart(
            out / "language.svg",
            [row["combination"] for row in rows],
            [row["rate"] for row in rows],
            title="Per-combination success",
            ylabel="success rate",
            baseline=LANGUAGE_BASELINE,
        )
        summary["combinations"] = rows
    write_report(
        out / "report.json",
        "eval",
        config_hash(cfg),
        {"policy": checkpoint_hash(path)},
        summary,
    )
    return summary


def run_pipeline(cfg: RunConfig, shutdown: GracefulShutdown | None = None) -> dict[str, Any]:
    """gen-data → pretrain-single → duplicate → finetune-twin → eval."""
    results: dict[str, Any] = {"gen-data": gen_data(cfg)}
    results["pretrain-single"] = pretrain_single(cfg, shutdown)
    if results["pretrain-single"]["interrupted"]:
        logger.warning("Pipeline stopped after an interrupted pretraining stage")
        return results
    results["duplicate"] = duplicate_stage(cfg)
    results["finetune-twin"] = finetune_twin(cfg, shutdown=shutdown)
    if results["finetune-twin"]["interrupted"]:
        logger.warning("Pipeline stopped after an interrupted finetuning stage")
        return results
    results["eval"] = eval_stage(cfg)
    return results


# ---------------------------------------------------------------- ablation / 스윕
def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else 0.0


def _rung_policy(cfg: RunConfig, rung: str, flags: TwinFlags, seed: int) -> TwinPolicy:
    if rung == SCRATCH_RUNG:
        return _scratch_twin(cfg, seed).with_flags(flags)
    return _load_twin(cfg.paths.resolve("twin_checkpoint"), flags, "duplicate")


def _train_eval(
    cfg: RunConfig,
    twin: TwinPolicy,
    dataset: DemoDataset,
    seed: int,
    rollouts: int,
    shutdown: GracefulShutdown | None,
) -> float:
    train_loop(twin, dataset, _train_config(cfg.finetune, seed, "finetune"), None, shutdown)
    result = evaluate(
        twin,
        cfg.eval_task(),
        rollouts,
        derive_seed(seed, "eval"),
        horizon=cfg.eval.horizon,
        execution_prefix=cfg.eval.execution_prefix,
        sampler=cfg.sampler,
        threads=cfg.threads,
    )
    return result.rate


def ablate(cfg: RunConfig, shutdown: GracefulShutdown | None = None) -> dict[str, Any]:
    """ablation 사다리 (full → w/o reweight → w/o moe → w/o joint attention, + scratch)."""
    dataset = DemoDataset.load(cfg.paths.resolve("finetune_data"), stage="gen-data")
    base_hash = checkpoint_hash(cfg.paths.resolve("twin_checkpoint"), stage="duplicate")
    instruction_len = len(dataset.episodes[0].instruction.split())
    rungs: list[tuple[str, TwinFlags]] = [*ABLATION_LADDER, (SCRATCH_RUNG, ABLATION_LADDER[0][1])]

    rows = []
    for rung, flags in rungs:
        rates, losses = [], []
        tokens = 0
        params = 0
        for seed in cfg.ablate.seeds:
            twin = _rung_policy(cfg, rung, flags, seed)
            tokens = token_count(twin, instruction_len)
            params = twin.store.num_parameters()
            losses.append(initial_loss(twin, dataset, cfg.ablate.initial_loss_batch, seed))
            rates.append(
                _train_eval(cfg, twin, dataset, seed, cfg.ablate.rollouts, shutdown)
            )
        logger.info(
            f"Ablation {rung}: success {_mean(rates):.3f}, initial loss {_mean(losses):.4f}, "
            f"{tokens} tokens"
        )
        rows.append(
            {
                "rung": rung,
                "joint_attention": flags.joint_attention,
                "moe": flags.moe,
                "reweight": flags.reweight,
                "success": _mean(rates),
                "success_per_seed": " ".join(f"{r:.4f}" for r in rates),
                "initial_loss": _mean(losses),
                "tokens": tokens,
                "parameters": params,
                "seeds": " ".join(str(s) for s in cfg.ablate.seeds),
            }
        )

    out = cfg.paths.out / "ablate"
    columns = list(rows[0])
    write_csv(out / "ablation.csv", rows, columns)
    labels = [row["rung"] for row in rows]
    bar_chart(
        out / "ablation_success.svg",
        labels,
        [row["success"] for row in rows],
        title="Ablation: success rate",
        ylabel="success rate",
    )
    bar_chart(
        out / "ablation_initial_loss.svg",
        labels,
        [row["initial_loss"] for row in rows],
        title="Ablation: initial finetuning loss",
        ylabel="flow matching loss",
    )
    results = {"rows": rows}
    write_report(out / "report.json", "ablate", config_hash(cfg), {"twin": base_hash}, results)
    return results


def data_sweep(cfg: RunConfig, shutdown: GracefulShutdown | None = None) -> dict[str, Any]:
    """미세조정 시연 수를 바꿔 가며 학습/평가합니다 (포함 관계의 부분집합)."""
    dataset = DemoDataset.load(cfg.paths.resolve("finetune_data"), stage="gen-data")
    base_hash = checkpoint_hash(cfg.paths.resolve("twin_checkpoint"), stage="duplicate")
    largest = cfg.sweep.demo_counts[-1]
    if len(dataset) < largest:
        raise ValidationError(f"data sweep needs {largest} demonstrations, found {len(dataset)}")

    rows = []
    for count in cfg.sweep.demo_counts:
        subset = dataset.subset(count, cfg.sweep.subset_seed)
        rates = []
        for seed in cfg.sweep.seeds:
            twin = _load_twin(cfg.paths.resolve("twin_checkpoint"), cfg.flags, "duplicate")
            rates.append(
                _train_eval(cfg, twin, subset, seed, cfg.sweep.rollouts, shutdown)
            )
        logger.info(f"Data sweep {count} demos: success {_mean(rates):.3f}")
        rows.append(
            {
                "demos": count,
                "success": _mean(rates),
                "success_per_seed": " ".join(f"{r:.4f}" for r in rates),
                "subset_seed": cfg.sweep.subset_seed,
                "seeds": " ".join(str(s) for s in cfg.sweep.seeds),
            }
        )

    out = cfg.paths.out / "sweep"
    write_csv(out / "sweep.csv", rows, list(rows[0]))
    line_chart(
        out / "sweep.svg",
        [row["demos"] for row in rows],
        [row["success"] for row in rows],
        title="Data efficiency",
        xlabel="finetuning demonstrations",
        ylabel="success rate",
    )
    results = {"rows": rows}
    write_report(out / "report.json", "data-sweep", config_hash(cfg), {"twin": base_hash}, results)
    return results


# ---------------------------------------------------------------- 잠금 래퍼
def _locked(cfg: RunConfig, command: str, work: Callable[[], dict[str, Any]]) -> dict[str, Any]:
    with RunLock(cfg.paths.out, command):
        return work()


def cmd_gen_data(cfg: RunConfig) -> dict[str, Any]:
    return _locked(cfg, "gen-data", lambda: gen_data(cfg))


def cmd_pretrain_single(cfg: RunConfig, shutdown: GracefulShutdown | None = None) -> dict[str, Any]:
    return _locked(cfg, "pretrain-single", lambda: pretrain_single(cfg, shutdown))


def cmd_duplicate(cfg: RunConfig) -> dict[str, Any]:
    return _locked(cfg, "duplicate", lambda: duplicate_stage(cfg))


def cmd_finetune_twin(
    cfg: RunConfig, scratch: bool = False, shutdown: GracefulShutdown | None = None
) -> dict[str, Any]:
    return _locked(cfg, "finetune-twin", lambda: finetune_twin(cfg, scratch, shutdown))


def cmd_eval(cfg: RunConfig, checkpoint: Path | None = None) -> dict[str, Any]:
    return _locked(cfg, "eval", lambda: eval_stage(cfg, checkpoint))


def cmd_pipeline(cfg: RunConfig, shutdown: GracefulShutdown | None = None) -> dict[str, Any]:
    return _locked(cfg, "pipeline", lambda: run_pipeline(cfg, shutdown))


def cmd_ablate(cfg: RunConfig, shutdown: GracefulShutdown | None = None) -> dict[str, Any]:
    return _locked(cfg, "ablate", lambda: ablate(cfg, shutdown))


def cmd_data_sweep(cfg: RunConfig, shutdown: GracefulShutdown | None = None) -> dict[str, Any]:
    return _locked(cfg, "data-sweep", lambda: data_sweep(cfg, shutdown))
