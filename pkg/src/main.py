"""Typer를 사용한 CLI 진입점.

twinflow gen-data|pretrain-single|duplicate|finetune-twin|eval|ablate|data-sweep|pipeline
    --config <path> [--seed N] [--out DIR]

종료 코드: 0 성공, 1 그 밖의 실행 오류, 2 설정 오류, 3 상위 단계 산출물 누락.
"""

import json
from collections.abc import Callable
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

import typer
from loguru import logger

from src.core import pipeline
from src.utils.config import RunConfig, config_hash, load_run_config
from src.utils.exceptions import AppException, ArtifactMissingError, ConfigurationError
from src.utils.logger import run_log_path, setup_logger
from src.utils.signals import GracefulShutdown, signal_handlers

CLI_NAME = "twinflow"
DIST_NAME = "twinflow"
EXIT_RUN_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_MISSING_ARTIFACT = 3

app = typer.Typer(
    name=CLI_NAME,
    help="Desk-scale single-to-twin policy pipeline",
    add_completion=False,
)

Work = Callable[[RunConfig, GracefulShutdown], dict[str, Any]]

CONFIG_OPTION = typer.Option(..., "--config", "-c", help="Run config (JSON or YAML)")
SEED_OPTION = typer.Option(None, "--seed", help="Override the root seed")
OUT_OPTION = typer.Option(None, "--out", help="Override the output directory")
LOG_LEVEL_OPTION = typer.Option(None, "--log-level", "-l", help="Override log level")
VERBOSE_OPTION = typer.Option(False, "--verbose", help="Shortcut for --log-level DEBUG")


def _resolve_log_level(cfg: RunConfig, log_level: str | None, verbose: bool) -> str:
    if verbose or cfg.app.debug:
        return "DEBUG"
    if log_level:
        return log_level.upper()
    return cfg.logging.level


def _configure_runtime(
    command: str, cfg: RunConfig, log_level: str | None, verbose: bool
) -> None:
    """로거를 초기화하고 설정 요약을 남깁니다."""
    level = _resolve_log_level(cfg, log_level, verbose)
    log_file = setup_logger(
        level=level,
        log_file=run_log_path(cfg.paths.out),
        format_str=cfg.logging.format,
        rotation=cfg.logging.rotation,
        retention=cfg.logging.retention,
        json_logs=cfg.logging.json_logs,
    )
    logger.info(f"{CLI_NAME} {command}: out={cfg.paths.out}, log={log_file}, level={level}")
    logger.info("Loaded config summary: {}", cfg.summary())
    logger.info(f"Config hash: {config_hash(cfg)}")


def _load(config: Path, seed: int | None, out: Path | None) -> RunConfig:
    overrides: dict[str, Any] = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["out"] = str(out)
    return load_run_config(config, overrides)


def _run(
    command: str,
    config: Path,
    seed: int | None,
    out: Path | None,
    log_level: str | None,
    verbose: bool,
    work: Work,
    adjust: Callable[[RunConfig], RunConfig] | None = None,
) -> dict[str, Any]:
    """설정을 읽고, 로거를 구성하고, 작업을 실행하고, 예외를 종료 코드로 바꿉니다."""
    try:
        cfg = _load(config, seed, out)
        if adjust is not None:
            cfg = adjust(cfg)
    except ConfigurationError as exc:
        typer.echo(f"Configuration error: {exc}", err=True)
        raise typer.Exit(EXIT_CONFIG_ERROR) from exc

    _configure_runtime(command, cfg, log_level, verbose)
    shutdown = GracefulShutdown()
    try:
        with shutdown, signal_handlers(shutdown):
            result = work(cfg, shutdown)
    except ConfigurationError as exc:
        logger.error(f"Configuration error: {exc}")
        typer.echo(f"Configuration error: {exc}", err=True)
        raise typer.Exit(EXIT_CONFIG_ERROR) from exc
    except ArtifactMissingError as exc:
        logger.error(f"Missing artifact from stage '{exc.stage}': {exc}")
        typer.echo(f"Missing artifact: {exc}", err=True)
        raise typer.Exit(EXIT_MISSING_ARTIFACT) from exc
    except AppException as exc:
        logger.error(f"{command} failed: {type(exc).__name__}: {exc}")
        typer.echo(f"Error: {exc}", err=True)
        raise typer.Exit(EXIT_RUN_FAILED) from exc

    typer.echo(json.dumps(result, indent=2, sort_keys=True, default=str))
    return result


def _package_version() -> str:
    """설치된 패키지 버전을 반환합니다."""
    try:
        return version(DIST_NAME)
    except PackageNotFoundError:
        return "0.1.0"


def version_callback(value: bool) -> None:
    """버전 정보를 출력하고 종료합니다."""
    if value:
        typer.echo(f"{CLI_NAME} version {_package_version()}")
        raise typer.Exit()


@app.callback()
def main(
    version: bool = typer.Option(
        False,
        "--version",
        "-v",
        callback=version_callback,
        is_eager=True,
        help="Show version and exit",
    ),
) -> None:
    """twinflow - 단일 팔 정책을 두 팔 정책으로 복제해 미세조정하는 데스크 규모 파이프라인."""
    pass


@app.command("gen-data")
def gen_data(
    config: Path = CONFIG_OPTION,
    seed: int | None = SEED_OPTION,
    out: Path | None = OUT_OPTION,
    log_level: str | None = LOG_LEVEL_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """스크립트 전문가로 사전학습/미세조정 시연 데이터셋을 만듭니다."""
    _run(
        "gen-data", config, seed, out, log_level, verbose,
        lambda cfg, _: pipeline.cmd_gen_data(cfg),
    )  # fmt: skip


@app.command("pretrain-single")
def pretrain_single(
    config: Path = CONFIG_OPTION,
    seed: int | None = SEED_OPTION,
    out: Path | None = OUT_OPTION,
    log_level: str | None = LOG_LEVEL_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """단일 팔 혼합 데이터로 단일 정책을 사전학습합니다."""
    _run(
        "pretrain-single", config, seed, out, log_level, verbose,
        lambda cfg, shutdown: pipeline.cmd_pretrain_single(cfg, shutdown),
    )  # fmt: skip


@app.command("duplicate")
def duplicate(
    config: Path = CONFIG_OPTION,
    seed: int | None = SEED_OPTION,
    out: Path | None = OUT_OPTION,
    log_level: str | None = LOG_LEVEL_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """사전학습된 단일 정책을 두 팔 정책으로 복제합니다."""
    _run(
        "duplicate", config, seed, out, log_level, verbose,
        lambda cfg, _: pipeline.cmd_duplicate(cfg),
    )  # fmt: skip


@app.command("finetune-twin")
def finetune_twin(
    config: Path = CONFIG_OPTION,
    seed: int | None = SEED_OPTION,
    out: Path | None = OUT_OPTION,
    scratch: bool = typer.Option(False, "--scratch", help="Start from a fresh twin policy"),
    log_level: str | None = LOG_LEVEL_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """두 팔 정책을 미세조정합니다."""
    _run(
        "finetune-twin", config, seed, out, log_level, verbose,
        lambda cfg, shutdown: pipeline.cmd_finetune_twin(cfg, scratch, shutdown),
    )  # fmt: skip


@app.command("eval")
def eval_command(
    config: Path = CONFIG_OPTION,
    seed: int | None = SEED_OPTION,
    out: Path | None = OUT_OPTION,
    rollouts: int | None = typer.Option(None, "--rollouts", min=1, help="Override rollouts"),
    checkpoint: Path | None = typer.Option(None, "--checkpoint", help="Checkpoint to evaluate"),
    log_level: str | None = LOG_LEVEL_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """체크포인트를 폐루프 롤아웃으로 평가하고 성공률을 출력합니다."""

    def adjust(cfg: RunConfig) -> RunConfig:
        if rollouts is None:
            return cfg
        return cfg.model_copy(update={"eval": cfg.eval.model_copy(update={"rollouts": rollouts})})

    result = _run(
        "eval", config, seed, out, log_level, verbose,
        lambda cfg, _: pipeline.cmd_eval(cfg, checkpoint),
        adjust,
    )  # fmt: skip
    typer.echo(f"success rate: {result['rate']:.4f}")


@app.command("ablate")
def ablate(
    config: Path = CONFIG_OPTION,
    seed: int | None = SEED_OPTION,
    out: Path | None = OUT_OPTION,
    log_level: str | None = LOG_LEVEL_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """ablation 사다리를 실행하고 CSV/SVG 보고서를 씁니다."""
    _run(
        "ablate", config, seed, out, log_level, verbose,
        lambda cfg, shutdown: pipeline.cmd_ablate(cfg, shutdown),
    )  # fmt: skip


@app.command("data-sweep")
def data_sweep(
    config: Path = CONFIG_OPTION,
    seed: int | None = SEED_OPTION,
    out: Path | None = OUT_OPTION,
    log_level: str | None = LOG_LEVEL_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """시연 수를 바꿔 가며 미세조정/평가하고 CSV/SVG 보고서를 씁니다."""
    _run(
        "data-sweep", config, seed, out, log_level, verbose,
        lambda cfg, shutdown: pipeline.cmd_data_sweep(cfg, shutdown),
    )  # fmt: skip


@app.command("pipeline")
def run_pipeline(
    config: Path = CONFIG_OPTION,
    seed: int | None = SEED_OPTION,
    out: Path | None = OUT_OPTION,
    log_level: str | None = LOG_LEVEL_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """gen-data → pretrain-single → duplicate → finetune-twin → eval을 차례로 실행합니다."""
    _run(
        "pipeline", config, seed, out, log_level, verbose,
        lambda cfg, shutdown: pipeline.cmd_pipeline(cfg, shutdown),
    )  # fmt: skip


if __name__ == "__main__":
    app()
