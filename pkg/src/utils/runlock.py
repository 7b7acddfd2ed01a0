"""출력 디렉토리 단위의 단일 작성자 잠금.

같은 출력 경로에 두 명령이 동시에 쓰지 못하도록 <out>/.twinflow.lock을 배타적으로 만듭니다.
"""

import json
import os
from pathlib import Path
from types import TracebackType

from loguru import logger

from src.utils.exceptions import RetryExhaustedError, RunLockError
from src.utils.retry import with_retry

LOCK_NAME = ".twinflow.lock"


class RunLock:
    """출력 디렉토리 잠금 (컨텍스트 매니저).

    Args:
        out_dir: 잠글 출력 디렉토리
        command: 잠금 파일에 기록할 명령 이름
        attempts: 잠금 획득 시도 횟수
        wait_seconds: 첫 재시도 대기 시간 (초)
    """

    def __init__(
        self,
        out_dir: Path,
        command: str = "twinflow",
        attempts: int = 3,
        wait_seconds: float = 0.5,
    ) -> None:
        self.out_dir = out_dir
        self.path = out_dir / LOCK_NAME
        self.command = command
        self.attempts = attempts
        self.wait_seconds = wait_seconds
        self._held = False

    def _create(self) -> None:
        fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump({"pid": os.getpid(), "command": self.command}, f)

    def acquire(self) -> None:
        """잠금을 얻습니다.

        Raises:
            RunLockError: 다른 작성자가 잠금을 가지고 있는 경우
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        create = with_retry(
            max_attempts=self.attempts,
            wait_seconds=self.wait_seconds,
            max_wait_seconds=self.wait_seconds * 4,
            retry_on=(FileExistsError,),
        )(self._create)
        try:
            create()
        except RetryExhaustedError as exc:
            holder = self._holder()
            raise RunLockError(
                f"Output directory {self.out_dir} is locked by another run ({holder}); "
                f"remove {self.path} if that run is gone"
            ) from exc
        self._held = True
        logger.debug(f"Acquired run lock {self.path}")

    def _holder(self) -> str:
        try:
            return self.path.read_text(encoding="utf-8").strip()
        except OSError:
            return "unknown holder"

    def release(self) -> None:
        if not self._held:
            return
        self.path.unlink(missing_ok=True)
        self._held = False
        logger.debug(f"Released run lock {self.path}")

    def __enter__(self) -> "RunLock":
        self.acquire()
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        self.release()
