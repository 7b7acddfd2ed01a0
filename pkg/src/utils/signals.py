"""학습 중 SIGINT/SIGTERM을 받아 현재 스텝을 마치고 멈추게 하는 Graceful Shutdown.

train_loop는 스텝마다 should_exit를 확인합니다. 멈춘 실행도 체크포인트는 저장합니다.

사용 예시:
    shutdown = GracefulShutdown()
    with shutdown, signal_handlers(shutdown):
        train_loop(policy, dataset, cfg, shutdown=shutdown)
"""

import signal
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from types import FrameType, TracebackType
from typing import Any

from loguru import logger

_SIGNALS = (signal.SIGTERM, signal.SIGINT)


class GracefulShutdown:
    """종료 플래그와 정리 콜백.

    컨텍스트 종료 시 시그널을 받은 적이 있으면 등록된 콜백을 순서대로 실행합니다.
    """

    def __init__(self) -> None:
        self.should_exit = False
        self._cleanup_callbacks: list[Callable[[], None]] = []

    def register_cleanup(self, callback: Callable[[], None]) -> None:
        """종료 시 실행할 정리 콜백을 등록합니다."""
        self._cleanup_callbacks.append(callback)

    def request_exit(self) -> None:
        self.should_exit = True

    def _handle_signal(self, signum: int, frame: FrameType | None) -> None:
        logger.warning(f"Received signal {signum}, stopping after the current step")
        self.should_exit = True

    def __enter__(self) -> "GracefulShutdown":
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        if not self.should_exit:
            return
        logger.info("Running cleanup callbacks")
        for callback in self._cleanup_callbacks:
            try:
                callback()
            except Exception as e:
                logger.error(f"Cleanup callback failed: {e}")


def setup_signal_handlers(shutdown: GracefulShutdown) -> dict[int, Any]:
    """SIGTERM/SIGINT 핸들러를 설치하고 이전 핸들러를 반환합니다."""
    previous = {int(sig): signal.getsignal(sig) for sig in _SIGNALS}
    for sig in _SIGNALS:
        signal.signal(sig, shutdown._handle_signal)
    logger.debug("Signal handlers registered (SIGTERM, SIGINT)")
    return previous


@contextmanager
def signal_handlers(shutdown: GracefulShutdown) -> Iterator[GracefulShutdown]:
    """블록 동안만 시그널 핸들러를 설치합니다."""
    previous = setup_signal_handlers(shutdown)
    try:
        yield shutdown
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler if handler is not None else signal.SIG_DFL)
