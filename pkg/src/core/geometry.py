"""행동 공간 정규화: 6D 회전 표현, 10차원 절대 EEF 포즈, 제어 주파수 매칭.

팔 하나의 행동은 [위치 3 | rot6 6 | 그리퍼 1] = 10차원이며,
두 팔 행동은 오른팔 블록 다음 왼팔 블록 순서의 20차원입니다.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray

from src.utils.exceptions import GeometryError, ValidationError

ARM_DIM = 10
DEFAULT_HZ = 20.0
POS = slice(0, 3)
ROT6 = slice(3, 9)
GRIP = 9

_ORTHO_TOL = 1e-4
_DEGENERATE_TOL = 1e-6

Array = NDArray[np.float64]


@dataclass(frozen=True)
class Pose10:
    """팔 하나의 10차원 절대 EEF 포즈.

    Attributes:
        position: 위치 (m)
        rot6: 회전 행렬의 첫 두 열
        gripper: 그리퍼 개폐 [0, 1]
    """

    position: Array
    rot6: Array
    gripper: float

    def as_array(self) -> Array:
        return np.concatenate([self.position, self.rot6, [self.gripper]]).astype(np.float64)


@dataclass(frozen=True)
class ActionChunk:
    """T x D 절대 EEF 행동 행렬과 제어 주파수.

    Attributes:
        actions: (T, D) 배열, D는 10(한 팔) 또는 20(오른팔, 왼팔)
        frequency: 제어 주파수 (Hz)
    """

    actions: Array
    frequency: float = DEFAULT_HZ

    def __post_init__(self) -> None:
        data = np.asarray(self.actions, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1:
            raise ValidationError(
                f"action chunk must be a non-empty T x D matrix, got {data.shape}"
            )
        if data.shape[1] not in (ARM_DIM, 2 * ARM_DIM):
            raise ValidationError(f"action chunk width must be 10 or 20, got {data.shape[1]}")
        if not self.frequency > 0:
            raise ValidationError(f"frequency must be positive, got {self.frequency}")
        object.__setattr__(self, "actions", data)

    @property
    def length(self) -> int:
        return int(self.actions.shape[0])

    @property
    def width(self) -> int:
        return int(self.actions.shape[1])

    @property
    def n_arms(self) -> int:
        return self.width // ARM_DIM

    @property
    def span(self) -> float:
        """첫 샘플부터 마지막 샘플까지의 시간 (초)."""
        return (self.length - 1) / self.frequency

    def arm(self, index: int) -> Array:
        """index번째 팔 블록 (0 = 오른팔, 1 = 왼팔)."""
        if not 0 <= index < self.n_arms:
            raise ValidationError(f"arm index {index} out of range for width {self.width}")
        return self.actions[:, index * ARM_DIM : (index + 1) * ARM_DIM]


def _as_matrix(R: ArrayLike) -> Array:
    mat = np.asarray(R, dtype=np.float64)
    if mat.shape != (3, 3):
        raise GeometryError(f"rotation must be 3x3, got {mat.shape}")
    return mat


def is_rotation(R: ArrayLike, tol: float = _ORTHO_TOL) -> bool:
    """직교 행렬이며 det가 +1인지 검사합니다."""
    mat = _as_matrix(R)
    if not np.isfinite(mat).all():
        return False
    ortho_err = float(np.abs(mat.T @ mat - np.eye(3)).max())
    return ortho_err <= tol and abs(float(np.linalg.det(mat)) - 1.0) <= tol


def rotmat_to_6d(R: ArrayLike) -> Array:
    """회전 행렬의 첫 두 열을 [c0, c1] 순서로 반환합니다.

    Raises:
        GeometryError: 회전 행렬이 아닌 경우
    """
    mat = _as_matrix(R)
    if not is_rotation(mat):
        raise GeometryError("input is not a rotation matrix (orthonormal with det +1)")
    return np.concatenate([mat[:, 0], mat[:, 1]])


def r6_to_rotmat(r6: ArrayLike) -> Array:
    """6D 표현을 Gram-Schmidt로 회전 행렬로 복원합니다.

    (..., 6) 입력을 받아 (..., 3, 3)을 반환합니다.

    Raises:
        GeometryError: 첫 벡터가 0이거나 두 벡터가 평행한 경우
    """
    vec = np.asarray(r6, dtype=np.float64)
    if vec.shape[-1] != 6:
        raise GeometryError(f"6D rotation needs 6 components, got shape {vec.shape}")
    a = vec[..., 0:3]
    b = vec[..., 3:6]
    norm_a = np.linalg.norm(a, axis=-1, keepdims=True)
    if (norm_a <= _DEGENERATE_TOL).any():
        raise GeometryError("degenerate 6D rotation: first column has zero norm")
    e1 = a / norm_a
    b_perp = b - (e1 * b).sum(axis=-1, keepdims=True) * e1
    norm_b = np.linalg.norm(b_perp, axis=-1, keepdims=True)
    if (norm_b <= _DEGENERATE_TOL).any():
        raise GeometryError("degenerate 6D rotation: columns are parallel")
    e2 = b_perp / norm_b
    e3 = np.cross(e1, e2)
    return np.stack([e1, e2, e3], axis=-1)


def orthonormalize_r6(r6: ArrayLike) -> Array:
    """6D 값을 가장 가까운 유효한 6D 표현으로 되돌립니다 (Gram-Schmidt 후 두 열)."""
    mats = r6_to_rotmat(r6)
    return np.concatenate([mats[..., :, 0], mats[..., :, 1]], axis=-1)


def yaw_to_rotmat(yaw: float) -> Array:
    """z축 회전 행렬."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotmat_to_yaw(R: ArrayLike) -> float:
    """회전 행렬의 첫 열로부터 z축 회전 각을 읽습니다."""
    mat = np.asarray(R, dtype=np.float64)
    return math.atan2(float(mat[1, 0]), float(mat[0, 0]))


def pack_pose(position: ArrayLike, rotation: ArrayLike, gripper: float) -> Pose10:
    """위치, 회전 행렬, 그리퍼 값을 Pose10으로 묶습니다.

    그리퍼가 [0, 1]을 벗어나면 경고와 함께 잘라냅니다.

    Raises:
        ValidationError: 위치, 회전, 그리퍼 중 유한하지 않은 값이 있는 경우
    """
    pos = np.asarray(position, dtype=np.float64).reshape(3)
    rot = np.asarray(rotation, dtype=np.float64)
    grip = float(gripper)
    if not (np.isfinite(pos).all() and np.isfinite(rot).all() and math.isfinite(grip)):
        raise ValidationError("pose components must be finite")
    if not 0.0 <= grip <= 1.0:
        clamped = min(max(grip, 0.0), 1.0)
        logger.warning(f"Gripper value {grip} outside [0, 1], clamped to {clamped}")
        grip = clamped
    return Pose10(position=pos, rot6=rotmat_to_6d(rot), gripper=grip)


def unpack_pose(pose: Pose10 | ArrayLike) -> tuple[Array, Array, float]:
    """Pose10 또는 10차원 벡터를 (위치, 회전 행렬, 그리퍼)로 풉니다."""
    vec = pose.as_array() if isinstance(pose, Pose10) else np.asarray(pose, dtype=np.float64)
    if vec.shape != (ARM_DIM,):
        raise ValidationError(f"pose vector must have 10 entries, got {vec.shape}")
    return vec[POS].copy(), r6_to_rotmat(vec[ROT6]), float(vec[GRIP])


def resample_times(length: int, source_hz: float, target_hz: float) -> tuple[Array, Array]:
    """원본/목표 타임스탬프를 같은 시간 범위로 만듭니다."""
    if length < 2:
        raise ValidationError(f"resampling needs at least 2 samples, got {length}")
    if not (source_hz > 0 and target_hz > 0):
        raise ValidationError(f"frequencies must be positive, got {source_hz} -> {target_hz}")
    span = (length - 1) / source_hz
    n_out = int(math.floor(span * target_hz + 1e-9)) + 1
    return np.arange(length) / source_hz, np.arange(n_out) / target_hz


def resample_linear(values: ArrayLike, source_hz: float, target_hz: float) -> Array:
    """(S, ...) 배열을 시간축을 따라 선형 보간합니다."""
    data = np.asarray(values, dtype=np.float64)
    t_in, t_out = resample_times(data.shape[0], source_hz, target_hz)
    flat = data.reshape(data.shape[0], -1)
    out = np.empty((t_out.size, flat.shape[1]), dtype=np.float64)
    for col in range(flat.shape[1]):
        out[:, col] = np.interp(t_out, t_in, flat[:, col])
    return out.reshape((t_out.size, *data.shape[1:]))


def resample_chunk(chunk: ActionChunk, target_hz: float = DEFAULT_HZ) -> ActionChunk:
    """행동 청크를 target_hz로 재표본화합니다.

    위치와 그리퍼는 선형 보간하고, rot6는 선형 보간 후 Gram-Schmidt로 다시 정규직교화합니다.
    같은 시간 범위를 유지하며 목표 주파수와 같으면 그대로 반환합니다.

    Args:
        chunk: 원본 청크 (T >= 2)
        target_hz: 목표 주파수

    Returns:
        target_hz의 새 청크

    Raises:
        ValidationError: T < 2이거나 주파수가 양수가 아닌 경우
    """
    if chunk.length < 2:
        raise ValidationError(f"resampling needs at least 2 samples, got {chunk.length}")
    if not target_hz > 0:
        raise ValidationError(f"target frequency must be positive, got {target_hz}")
    if target_hz == chunk.frequency:
        return ActionChunk(chunk.actions.copy(), chunk.frequency)

    out = resample_linear(chunk.actions, chunk.frequency, target_hz)
    for arm in range(chunk.n_arms):
        rot = slice(arm * ARM_DIM + ROT6.start, arm * ARM_DIM + ROT6.stop)
        out[:, rot] = orthonormalize_r6(out[:, rot])
    return ActionChunk(out, float(target_hz))


def split_arms(actions: ArrayLike) -> tuple[Array, Array]:
    """(T, 20) 두 팔 행동을 (오른팔, 왼팔)로 나눕니다."""
    data = np.asarray(actions, dtype=np.float64)
    if data.shape[-1] != 2 * ARM_DIM:
        raise ValidationError(f"twin actions must have width 20, got {data.shape[-1]}")
    return data[..., :ARM_DIM], data[..., ARM_DIM:]


def join_arms(right: ArrayLike, left: ArrayLike) -> Array:
    """오른팔, 왼팔 블록을 20차원 행동으로 이어 붙입니다."""
    r = np.asarray(right, dtype=np.float64)
    lft = np.asarray(left, dtype=np.float64)
    if r.shape != lft.shape or r.shape[-1] != ARM_DIM:
        raise ValidationError(f"arm blocks must both be (..., 10), got {r.shape} and {lft.shape}")
    return np.concatenate([r, lft], axis=-1)


def random_rotation(rng: np.random.Generator) -> Array:
    """균등 분포 회전 행렬 (QR 분해 기반)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q
