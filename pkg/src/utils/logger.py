"""Loguru를 사용한 로깅 설정.

콘솔(stderr) 핸들러와 실행별 파일 핸들러(<out>/logs/twinflow.log)를 구성합니다.
파일 경로에 쓸 수 없으면 임시 디렉토리로 대체합니다.
"""

import sys
import tempfile
from pathlib import Path

from loguru import logger

DEFAULT_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} | {message}"
LOG_NAME = "twinflow.log"


def run_log_path(out_dir: Path) -> Path:
    """실행 디렉토리의 로그 파일 경로."""
    return out_dir / "logs" / LOG_NAME


def _build_console_format(format_str: str, json_logs: bool) -> str:
    """콘솔 로그 포맷에 컬러 태그를 적용합니다 (이미 태그가 있으면 그대로)."""
    if json_logs or ("<" in format_str and ">" in format_str):
        return format_str
    colored = format_str.replace("{level}", "<level>{level}</level>")
    return colored.replace("{message}", "<level>{message}</level>")


def _can_write(path: Path) -> bool:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(
            mode="a", dir=str(path.parent), prefix=f".{path.name}.", suffix=".writable", delete=True
        ):
            pass
        return True
    except OSError:
        return False


def _resolve_log_file_path(log_file: Path) -> Path:
    """쓰기 가능한 로그 경로를 고릅니다. 원래 경로가 안 되면 임시 디렉토리 경로."""
    if _can_write(log_file):
        return log_file
    return Path(tempfile.gettempdir()) / "twinflow_logs" / log_file.name


def setup_logger(
    level: str = "INFO",
    log_file: Path | None = None,
    format_str: str = DEFAULT_FORMAT,
    rotation: str = "50 MB",
    retention: str = "10 days",
    json_logs: bool = False,
) -> Path | None:
    """Loguru 로거를 설정합니다.

    기본 핸들러를 제거하고 콘솔 핸들러와 (지정된 경우) 파일 핸들러를 추가합니다.

    Args:
        level: 로그 레벨 (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: 로그 파일 경로 (None이면 파일 로깅 비활성화)
        format_str: 로그 포맷 문자열
        rotation: 로그 파일 로테이션 기준 (예: "50 MB", "00:00")
        retention: 로그 파일 보관 기간 (예: "10 days")
        json_logs: JSON 직렬화 출력 여부

    Returns:
        실제로 사용된 로그 파일 경로 (파일 로깅이 없으면 None)
    """
    logger.remove()
    logger.add(
        sys.stderr,
        format=_build_console_format(format_str, json_logs),
        level=level,
        colorize=not json_logs,
        backtrace=True,
        diagnose=False,
        serialize=json_logs,
    )

    if log_file is None:
        logger.debug(f"Logger initialized: level={level}, console only")
        return None

    resolved = _resolve_log_file_path(log_file)
    if resolved != log_file:
        logger.warning(f"Could not write to {log_file}. Falling back to {resolved}")
    try:
        logger.add(
            resolved,
            format=format_str,
            level=level,
            rotation=rotation,
            retention=retention,
            encoding="utf-8",
            backtrace=True,
            diagnose=False,
            serialize=json_logs,
        )
    except OSError as exc:
        logger.warning(f"Failed to configure file logger ({exc}). Continuing with console only.")
        return None

    logger.debug(f"Logger initialized: level={level}, file={resolved}")
    return resolved
