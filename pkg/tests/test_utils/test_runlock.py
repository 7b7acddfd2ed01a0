import json
import os
from pathlib import Path

import pytest

from src.utils.exceptions import RunLockError
from src.utils.runlock import LOCK_NAME, RunLock


def test_lock_file_lifecycle(tmp_path: Path) -> None:
    out = tmp_path / "run"
    with RunLock(out, "gen-data") as lock:
        holder = json.loads(lock.path.read_text(encoding="utf-8"))
        assert holder == {"pid": os.getpid(), "command": "gen-data"}
    assert not (out / LOCK_NAME).exists()


def test_second_writer_is_rejected(tmp_path: Path) -> None:
    with RunLock(tmp_path, "pipeline"):
        contender = RunLock(tmp_path, "eval", attempts=2, wait_seconds=0.01)
        with pytest.raises(RunLockError, match="locked by another run"):
            contender.acquire()
    assert not (tmp_path / LOCK_NAME).exists()


def test_lock_released_on_error(tmp_path: Path) -> None:
    with pytest.raises(ValueError):
        with RunLock(tmp_path):
            raise ValueError("stage failed")
    assert not (tmp_path / LOCK_NAME).exists()


def test_release_without_acquire_keeps_foreign_lock(tmp_path: Path) -> None:
    (tmp_path / LOCK_NAME).write_text("{}", encoding="utf-8")
    RunLock(tmp_path).release()
    assert (tmp_path / LOCK_NAME).exists()
