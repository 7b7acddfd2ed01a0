"""애플리케이션 커스텀 예외 정의.

예외 계층 구조:
- AppException (기본 예외)
  ├─ ConfigurationError (설정 오류, CLI 종료 코드 2)
  ├─ ArtifactMissingError (상위 단계 산출물 누락, CLI 종료 코드 3)
  ├─ ValidationError (입력 형상/전제 조건 위반)
  │  └─ GeometryError (회전 행렬/6D 표현 오류)
  ├─ NumericalError (NaN/Inf, 빈 attention 행)
  ├─ SimulationError (풀 수 없는 장면, 전문가 감사 실패)
  ├─ TrainingError (학습 중 비유한 손실)
  ├─ RunLockError (출력 디렉토리 동시 쓰기)
  └─ RetryExhaustedError (재시도 횟수 초과)
"""


class AppException(Exception):
    """모든 애플리케이션 오류의 기본 예외 클래스."""

    pass


class ConfigurationError(AppException):
    """설정 파일 관련 오류.

    설정 파일이 없거나, 형식이 잘못되었거나, 스키마 검증에 실패한 경우 발생합니다.
    """

    pass


class ArtifactMissingError(AppException):
    """파이프라인 상위 단계의 산출물(데이터셋, 체크포인트)이 없을 때 발생하는 오류.

    Attributes:
        stage: 산출물을 만들어야 하는 상위 단계 이름
    """

    def __init__(self, message: str, stage: str | None = None) -> None:
        super().__init__(message)
        self.stage = stage


class ValidationError(AppException):
    """데이터 검증 실패 시 발생하는 오류.

    텐서 형상 불일치, 범위를 벗어난 인자 등 전제 조건 위반을 나타냅니다.
    """

    pass


class GeometryError(ValidationError):
    """회전 행렬이 아니거나 퇴화된 6D 입력에서 발생하는 오류."""

    pass


class NumericalError(AppException):
    """수치 연산 결과가 유한하지 않을 때 발생하는 오류.

    Attributes:
        step: 오류가 발생한 적분/학습 단계 (알 수 있는 경우)
    """

    def __init__(self, message: str, step: int | None = None) -> None:
        super().__init__(message)
        self.step = step


class SimulationError(AppException):
    """시뮬레이터 장면을 풀 수 없거나 전문가 감사가 기준에 못 미칠 때 발생하는 오류."""

    pass


class TrainingError(AppException):
    """학습 루프가 중단되어야 하는 오류 (비유한 손실 등).

    Attributes:
        step: 중단된 학습 단계
    """

    def __init__(self, message: str, step: int | None = None) -> None:
        super().__init__(message)
        self.step = step


class RunLockError(AppException):
    """다른 프로세스가 같은 출력 디렉토리에 쓰는 중일 때 발생하는 오류."""

    pass


class RetryExhaustedError(AppException):
    """재시도 횟수가 모두 소진된 경우 발생하는 오류.

    설정된 최대 재시도 횟수만큼 시도했지만 여전히 실패한 경우 발생합니다.
    """

    pass
