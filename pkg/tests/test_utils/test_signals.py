import signal
from unittest.mock import patch

from src.utils.signals import GracefulShutdown, setup_signal_handlers, signal_handlers


def test_graceful_shutdown_context() -> None:
    shutdown = GracefulShutdown()

    with shutdown:
        assert shutdown.should_exit is False

    assert shutdown.should_exit is False


def test_graceful_shutdown_runs_cleanup_after_signal() -> None:
    shutdown = GracefulShutdown()
    calls: list[str] = []
    shutdown.register_cleanup(lambda: calls.append("first"))
    shutdown.register_cleanup(lambda: calls.append("second"))

    with shutdown:
        shutdown._handle_signal(signal.SIGTERM, None)

    assert shutdown.should_exit is True
    assert calls == ["first", "second"]


def test_cleanup_skipped_without_signal() -> None:
    shutdown = GracefulShutdown()
    calls: list[str] = []
    shutdown.register_cleanup(lambda: calls.append("ran"))

    with shutdown:
        pass

    assert calls == []


def test_failing_cleanup_does_not_stop_others() -> None:
    shutdown = GracefulShutdown()
    calls: list[str] = []

    def broken() -> None:
        raise RuntimeError("boom")

    shutdown.register_cleanup(broken)
    shutdown.register_cleanup(lambda: calls.append("after"))
    shutdown.request_exit()

    with shutdown:
        pass

    assert calls == ["after"]


def test_setup_signal_handlers() -> None:
    shutdown = GracefulShutdown()

    with patch("signal.signal") as mock_signal:
        setup_signal_handlers(shutdown)

    registered = {call.args[0] for call in mock_signal.call_args_list}
    assert registered == {signal.SIGTERM, signal.SIGINT}


def test_signal_handlers_restore_previous() -> None:
    before = signal.getsignal(signal.SIGTERM)
    shutdown = GracefulShutdown()

    with signal_handlers(shutdown):
        assert signal.getsignal(signal.SIGTERM) == shutdown._handle_signal

    assert signal.getsignal(signal.SIGTERM) == before
