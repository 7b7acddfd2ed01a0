from src.utils.exceptions import (
    AppException,
    ArtifactMissingError,
    ConfigurationError,
    GeometryError,
    NumericalError,
    RetryExhaustedError,
    RunLockError,
    SimulationError,
    TrainingError,
    ValidationError,
)


def test_app_exception_with_message() -> None:
    exc = AppException("test error")
    assert str(exc) == "test error"
    assert exc.args == ("test error",)


def test_exception_hierarchy() -> None:
    """모든 예외는 AppException을 상속합니다."""
    for cls in (
        ConfigurationError,
        ArtifactMissingError,
        ValidationError,
        NumericalError,
        SimulationError,
        TrainingError,
        RunLockError,
        RetryExhaustedError,
    ):
        assert issubclass(cls, AppException)
    assert issubclass(GeometryError, ValidationError)


def test_artifact_missing_error_names_stage() -> None:
    exc = ArtifactMissingError("Checkpoint not found", stage="duplicate")
    assert str(exc) == "Checkpoint not found"
    assert exc.stage == "duplicate"
    assert ArtifactMissingError("no stage").stage is None


def test_step_carrying_errors() -> None:
    assert NumericalError("inf", step=3).step == 3
    assert NumericalError("inf").step is None
    assert TrainingError("nan loss", step=12).step == 12
