"""numpy 위에 얹은 최소 역전파(reverse-mode) 수치 커널.

이 모듈은 정책 모델 전체가 사용하는 텐서, 파라미터 저장소, 그래디언트 검사기를 제공합니다.

- 저장 dtype은 float32이며, 축약(reduction)과 행렬곱은 float64로 누적한 뒤 반올림합니다.
- 모든 연산 결과는 유한해야 하며, NaN/Inf가 나오면 NumericalError를 발생시킵니다.
- 연산 그래프는 그래디언트가 필요한 입력이 있을 때만 기록됩니다.

사용 예시:
    store = ParamStore()
    w = store.create("w", (3, 2), fan_in=3, seed=0)
    loss = (Tensor(x) @ w).sum()
    loss.backward()
"""

from __future__ import annotations

import math
import zlib
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from src.utils.exceptions import NumericalError, ValidationError

Array = NDArray[Any]
Backward = Callable[[Array], None]

_DTYPE: ContextVar[Any] = ContextVar("twinflow_dtype", default=np.float32)
_GRAD_ENABLED: ContextVar[bool] = ContextVar("twinflow_grad_enabled", default=True)

_GELU_C = math.sqrt(2.0 / math.pi)


@contextmanager
def precision(dtype: Any) -> Iterator[None]:
    """새로 만드는 텐서의 기본 dtype을 일시적으로 바꿉니다 (그래디언트 오라클용 float64)."""
    token = _DTYPE.set(dtype)
    try:
        yield
    finally:
        _DTYPE.reset(token)


@contextmanager
def no_grad() -> Iterator[None]:
    """블록 안에서는 연산 그래프를 기록하지 않습니다 (추론용)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def default_dtype() -> Any:
    """현재 컨텍스트의 기본 dtype을 반환합니다."""
    return _DTYPE.get()


def named_stream(seed: int, *names: str | int) -> np.random.Generator:
    """루트 시드와 이름 경로로부터 독립적인 PRNG 스트림을 만듭니다.

    같은 (seed, names)는 프로세스/플랫폼과 무관하게 같은 스트림을 돌려줍니다.

    Args:
        seed: 0 이상의 루트 시드
        names: 스트림 이름 경로 (예: "init", "encoder.ego_w")

    Returns:
        numpy Generator
    """
    if seed < 0:
        raise ValidationError(f"seed must be non-negative, got {seed}")
    spawn_key = tuple(zlib.crc32(str(name).encode("utf-8")) for name in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=spawn_key))


def derive_seed(seed: int, *names: str | int) -> int:
    """이름 경로로부터 하위 정수 시드를 파생합니다."""
    return int(named_stream(seed, *names).integers(0, 2**31 - 1))


def _check_finite(data: Array, op: str) -> None:
    if data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NumericalError(f"non-finite values produced by {op}")


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """브로드캐스트된 축을 합산해 원래 형상으로 되돌립니다."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_basic_index(idx: Any) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(item, (int, slice)) or item is None or item is Ellipsis for item in items)


class Tensor:
    """역전파를 지원하는 다차원 배열.

    Attributes:
        data: 행 우선(row-major) numpy 배열
        grad: 누적된 그래디언트 (없으면 None)
        requires_grad: 그래디언트 계산 대상 여부
        name: 파라미터 이름 (선택)
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        self.data: Array = np.array(data, dtype=_DTYPE.get())
        _check_finite(self.data, name or "tensor construction")
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None

    @classmethod
    def _from_op(
        cls,
        data: Array,
        parents: tuple[Tensor, ...],
        backward: Backward,
        op: str,
    ) -> Tensor:
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        tracked = _GRAD_ENABLED.get() and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = parents if tracked else ()
        out._backward = backward if tracked else None
        return out

    # ------------------------------------------------------------------ 속성
    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> Array:
        """데이터 복사본을 반환합니다."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    # --------------------------------------------------------------- 역전파
    def _accumulate(self, grad: Array) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.data.shape).astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    def backward(self, grad: ArrayLike | None = None) -> None:
        """기록된 그래프를 역순으로 따라가며 그래디언트를 누적합니다.

        Args:
            grad: 출력에 대한 상위 그래디언트 (스칼라 출력이면 생략 가능)
        """
        if grad is None:
            if self.data.size != 1:
                raise ValidationError("backward() needs a scalar output or an explicit gradient")
            seed_grad = np.ones_like(self.data)
        else:
            seed_grad = np.asarray(grad, dtype=self.data.dtype)
        if not self.requires_grad:
            return
        order = _topological_order(self)
        self._accumulate(seed_grad)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            # 중간 노드의 그래디언트는 더 이상 필요 없음
            node.grad = None

    # ------------------------------------------------------------ 산술 연산
    def __add__(self, other: Tensor | ArrayLike) -> Tensor:
        other_t = as_tensor(other)
        out_data = self.data + other_t.data

        def backward(g: Array) -> None:
            self._accumulate(g)
            other_t._accumulate(g)

        return Tensor._from_op(out_data, (self, other_t), backward, "add")

    def __radd__(self, other: ArrayLike) -> Tensor:
        return self + other

    def __neg__(self) -> Tensor:
        def backward(g: Array) -> None:
            self._accumulate(-g)

        return Tensor._from_op(-self.data, (self,), backward, "neg")

    def __sub__(self, other: Tensor | ArrayLike) -> Tensor:
        other_t = as_tensor(other)
        out_data = self.data - other_t.data

        def backward(g: Array) -> None:
            self._accumulate(g)
            other_t._accumulate(-g)

        return Tensor._from_op(out_data, (self, other_t), backward, "sub")

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return as_tensor(other) - self

    def __mul__(self, other: Tensor | ArrayLike) -> Tensor:
        other_t = as_tensor(other)
        out_data = self.data * other_t.data

        def backward(g: Array) -> None:
            self._accumulate(g * other_t.data)
            other_t._accumulate(g * self.data)

        return Tensor._from_op(out_data, (self, other_t), backward, "mul")

    def __rmul__(self, other: ArrayLike) -> Tensor:
        return self * other

    def __truediv__(self, other: Tensor | ArrayLike) -> Tensor:
        other_t = as_tensor(other)
        out_data = self.data / other_t.data

        def backward(g: Array) -> None:
            self._accumulate(g / other_t.data)
            other_t._accumulate(-g * self.data / (other_t.data * other_t.data))

        return Tensor._from_op(out_data, (self, other_t), backward, "div")

    def __matmul__(self, other: Tensor | ArrayLike) -> Tensor:
        return matmul(self, as_tensor(other))

    # ------------------------------------------------------------ 형상 연산
    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        out_data = self.data.astype(np.float64).sum(axis=axis, keepdims=keepdims)
        out_data = np.asarray(out_data).astype(self.data.dtype)
        in_shape = self.data.shape

        def backward(g: Array) -> None:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, in_shape))

        return Tensor._from_op(out_data, (self,), backward, "sum")

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))

    def reshape(self, *shape: int) -> Tensor:
        in_shape = self.data.shape

        def backward(g: Array) -> None:
            self._accumulate(g.reshape(in_shape))

        return Tensor._from_op(self.data.reshape(shape), (self,), backward, "reshape")

    def transpose(self, *axes: int) -> Tensor:
        inverse = tuple(int(i) for i in np.argsort(axes))

        def backward(g: Array) -> None:
            self._accumulate(g.transpose(inverse))

        return Tensor._from_op(self.data.transpose(axes), (self,), backward, "transpose")

    def swapaxes(self, axis1: int, axis2: int) -> Tensor:
        def backward(g: Array) -> None:
            self._accumulate(np.swapaxes(g, axis1, axis2))

        return Tensor._from_op(
            np.swapaxes(self.data, axis1, axis2), (self,), backward, "swapaxes"
        )

    def __getitem__(self, idx: Any) -> Tensor:
        in_shape = self.data.shape
        dtype = self.data.dtype

        def backward(g: Array) -> None:
            full = np.zeros(in_shape, dtype=dtype)
            if _is_basic_index(idx):
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor._from_op(np.array(self.data[idx]), (self,), backward, "getitem")


def as_tensor(value: Tensor | ArrayLike) -> Tensor:
    """상수를 그래디언트가 없는 텐서로 감쌉니다."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _topological_order(root: Tensor) -> list[Tensor]:
    """부모가 자식보다 먼저 오는 순서로 그래프 노드를 나열합니다 (반복 DFS)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """배치 행렬곱 (float64 누적).

    Args:
        a: (..., n, k) 텐서
        b: (..., k, m) 또는 (k, m) 텐서
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValidationError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValidationError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_dtype = np.result_type(a.data, b.data)
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out_data = np.matmul(a64, b64).astype(out_dtype)

    def backward(g: Array) -> None:
        g64 = g.astype(np.float64)
        a._accumulate(np.matmul(g64, np.swapaxes(b64, -1, -2)))
        b._accumulate(np.matmul(np.swapaxes(a64, -1, -2), g64))

    return Tensor._from_op(out_data, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """텐서들을 한 축을 따라 이어 붙입니다."""
    if not tensors:
        raise ValidationError("concat needs at least one tensor")
    parts = tuple(tensors)
    sizes = [t.data.shape[axis] for t in parts]
    out_data = np.concatenate([t.data for t in parts], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def backward(g: Array) -> None:
        for tensor, piece in zip(parts, np.split(g, bounds, axis=axis), strict=True):
            tensor._accumulate(piece)

    return Tensor._from_op(out_data, parts, backward, "concat")


def gelu(x: Tensor) -> Tensor:
    """GELU (tanh 근사) 비선형 함수."""
    x64 = x.data.astype(np.float64)
    t = np.tanh(_GELU_C * (x64 + 0.044715 * x64**3))
    out_data = (0.5 * x64 * (1.0 + t)).astype(x.data.dtype)

    def backward(g: Array) -> None:
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * 0.044715 * x64 * x64)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x64 * dt))

    return Tensor._from_op(out_data, (x,), backward, "gelu")


def embedding(table: Tensor, ids: ArrayLike) -> Tensor:
    """정수 id로 임베딩 테이블의 행을 조회합니다."""
    index = np.asarray(ids, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ValidationError(f"embedding id out of range [0, {table.shape[0]})")
    return table[index]


def masked_softmax(scores: Tensor, mask: ArrayLike) -> Tensor:
    """마스크된 항목을 제외하고 마지막 축에 대해 softmax를 계산합니다.

    마스크된 항목은 정확히 0이며, 각 행의 합은 1입니다 (최댓값을 빼서 안정화).

    Args:
        scores: (..., N, M) 점수 텐서
        mask: scores에 브로드캐스트 가능한 bool 배열 (True = 보임)

    Returns:
        같은 형상의 attention 가중치

    Raises:
        ValidationError: 마스크 형상이 맞지 않는 경우
        NumericalError: 보이는 항목이 없는 행이 있는 경우
    """
    visible = np.asarray(mask, dtype=bool)
    try:
        broadcast_shape = np.broadcast_shapes(visible.shape, scores.shape)
    except ValueError as exc:
        raise ValidationError(f"mask {visible.shape} does not match scores {scores.shape}") from exc
    if broadcast_shape != scores.shape:
        raise ValidationError(f"mask {visible.shape} does not match scores {scores.shape}")
    visible = np.broadcast_to(visible, scores.shape)
    if not visible.any(axis=-1).all():
        raise NumericalError("empty attention row")

    s64 = np.where(visible, scores.data.astype(np.float64), -np.inf)
    s64 = s64 - s64.max(axis=-1, keepdims=True)
    e64 = np.where(visible, np.exp(s64), 0.0)
    y64 = e64 / e64.sum(axis=-1, keepdims=True)

    def backward(g: Array) -> None:
        g64 = g.astype(np.float64)
        dot = (g64 * y64).sum(axis=-1, keepdims=True)
        scores._accumulate(y64 * (g64 - dot))

    return Tensor._from_op(y64.astype(scores.data.dtype), (scores,), backward, "masked_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """마지막 축에 대한 layer normalization.

    Args:
        x: (..., E) 입력
        gain: (E,) 스케일
        bias: (E,) 시프트
        eps: 분산 안정화 상수 (> 0)
    """
    if eps <= 0:
        raise ValidationError(f"layer_norm eps must be positive, got {eps}")
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ValidationError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {width}"
        )
    x64 = x.data.astype(np.float64)
    centered = x64 - x64.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    g64 = gain.data.astype(np.float64)
    out_dtype = np.result_type(x.data, gain.data, bias.data)
    out_data = (xhat * g64 + bias.data.astype(np.float64)).astype(out_dtype)

    def backward(g: Array) -> None:
        up = g.astype(np.float64)
        dxhat = up * g64
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        x._accumulate(dx)
        gain._accumulate((up * xhat).reshape(-1, width).sum(axis=0))
        bias._accumulate(up.reshape(-1, width).sum(axis=0))

    return Tensor._from_op(out_data, (x, gain, bias), backward, "layer_norm")


InitKind = Literal["uniform", "zeros", "ones"]


def init_array(
    seed: int,
    name: str,
    shape: tuple[int, ...],
    fan_in: int,
    kind: InitKind = "uniform",
) -> Array:
    """파라미터 이름별 PRNG 스트림으로 결정적인 초기값을 만듭니다.

    uniform은 fan-in 스케일 균등분포 U(-1/sqrt(fan_in), 1/sqrt(fan_in))입니다.
    """
    if kind == "zeros":
        return np.zeros(shape, dtype=np.float32)
    if kind == "ones":
        return np.ones(shape, dtype=np.float32)
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    rng = named_stream(seed, "init", name)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class ParamStore:
    """이름으로 관리되는 학습 파라미터 저장소.

    이름 순서로 결정적으로 순회하며, 하나의 텐서는 정확히 한 번만 등록됩니다.
    별칭(alias)은 같은 텐서를 다른 이름으로 가리키며 파라미터 수에 포함되지 않습니다.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._aliases: dict[str, str] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        """기존 텐서를 이름으로 등록합니다."""
        if name in self._params or name in self._aliases:
            raise ValidationError(f"parameter name already registered: {name}")
        if any(existing is tensor for existing in self._params.values()):
            raise ValidationError(f"tensor already registered under another name: {name}")
        tensor.requires_grad = True
        tensor.name = name
        self._params[name] = tensor
        return tensor

    def create(
        self,
        name: str,
        shape: tuple[int, ...],
        *,
        seed: int,
        fan_in: int = 1,
        kind: InitKind = "uniform",
    ) -> Tensor:
        """결정적으로 초기화한 새 파라미터를 만들고 등록합니다."""
        return self.register(name, Tensor(init_array(seed, name, shape, fan_in, kind)))

    def alias(self, name: str, target: str) -> None:
        """target 파라미터를 name으로도 참조할 수 있게 합니다."""
        if target not in self._params:
            raise ValidationError(f"alias target is not a parameter: {target}")
        if name in self._params or name in self._aliases:
            raise ValidationError(f"alias name already in use: {name}")
        self._aliases[name] = target

    def __getitem__(self, name: str) -> Tensor:
        key = self._aliases.get(name, name)
        try:
            return self._params[key]
        except KeyError as exc:
            raise ValidationError(f"unknown parameter: {name}") from exc

    def __contains__(self, name: object) -> bool:
        return name in self._params or name in self._aliases

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(name, self._params[name]) for name in self.names()]

    def aliases(self) -> list[tuple[str, str]]:
        """(별칭, 대상) 목록을 이름 순서로 반환합니다."""
        return sorted(self._aliases.items())

    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def census(self, depth: int = 1) -> dict[str, int]:
        """이름의 앞 depth개 구간별 스칼라 파라미터 수."""
        counts: dict[str, int] = {}
        for name, tensor in self.items():
            group = ".".join(name.split(".")[:depth])
            counts[group] = counts.get(group, 0) + tensor.size
        return counts

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None


def grad_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    h: float = 1e-3,
    *,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """역전파 그래디언트를 중심 차분과 비교해 최대 상대 오차를 반환합니다.

    오라클은 float64에서 실행되는 5점 중심 차분입니다 (파라미터를 잠시 승격한 뒤 복원).
    좌표마다 |analytic - fd| / (|analytic| + |fd| + 1e-8)을 계산해 최댓값을 반환합니다.
    max_coords가 주어지면 텐서마다 그만큼의 좌표만 표본으로 씁니다.

    Args:
        f: 파라미터로부터 스칼라 텐서를 계산하는 함수
        params: 검사할 파라미터 저장소
        h: 차분 간격, [1e-4, 1e-2]
        max_coords: 텐서당 검사할 최대 좌표 수 (None이면 전체)
        seed: 좌표 표본 시드

    Returns:
        파라미터 텐서들에 대한 최대 상대 오차

    Raises:
        ValidationError: h가 범위를 벗어난 경우
        NumericalError: f가 유한하지 않은 값을 낸 경우
    """
    if not 1e-4 <= h <= 1e-2:
        raise ValidationError(f"grad_check step must lie in [1e-4, 1e-2], got {h}")

    originals = {name: tensor.data for name, tensor in params.items()}
    rng = named_stream(seed, "grad_check")
    worst = 0.0
    try:
        with precision(np.float64):
            for _, tensor in params.items():
                tensor.data = tensor.data.astype(np.float64)
            params.zero_grad()
            loss = f()
            _require_finite_scalar(loss)
            loss.backward()
            analytic = {
                name: (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
                for name, t in params.items()
            }
            with no_grad():
                for name, tensor in params.items():
                    flat = tensor.data.reshape(-1)
                    if max_coords is None or flat.size <= max_coords:
                        coords = np.arange(flat.size)
                    else:
                        coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
                    fd = np.empty(coords.size, dtype=np.float64)
                    for k, coord in enumerate(coords):
                        base = flat[coord]
                        values = []
                        for offset in (2.0, 1.0, -1.0, -2.0):
                            flat[coord] = base + offset * h
                            values.append(_require_finite_scalar(f()))
                        flat[coord] = base
                        f_p2, f_p1, f_m1, f_m2 = values
                        fd[k] = (-f_p2 + 8.0 * f_p1 - 8.0 * f_m1 + f_m2) / (12.0 * h)
                    exact = analytic[name][coords]
                    err = np.abs(exact - fd) / (np.abs(exact) + np.abs(fd) + 1e-8)
                    if err.size:
                        worst = max(worst, float(err.max()))
    finally:
        for name, tensor in params.items():
            tensor.data = originals[name]
        params.zero_grad()
    return worst


def _require_finite_scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ValidationError(f"grad_check needs a scalar function, got shape {value.shape}")
    scalar = value.item()
    if not math.isfinite(scalar):
        raise NumericalError("grad_check function returned a non-finite value")
    return scalar
