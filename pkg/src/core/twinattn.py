"""두 팔 융합 연산: 조인트 attention 마스크, 모달리티별 조인트 attention,
attention 재가중(re-weighting), 공유 토큰 MoE 라우팅, 출력 평균 병합.

토큰 순서는 [공유 | 왼팔 | 오른팔]이며 팔 토큰의 로컬 인덱스는 시점 위치로 정렬됩니다.
블록은 post-norm 구조입니다: H = LN1(X + O), Y = LN2(H + FFN(H)).
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, fields
from typing import Literal, Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray

from src.core.numkernel import (
    ParamStore,
    Tensor,
    as_tensor,
    concat,
    gelu,
    layer_norm,
    masked_softmax,
)
from src.utils.exceptions import ValidationError

DEFAULT_ALPHA = 2.0
MERGE_WEIGHT = 0.5

BoolMatrix = NDArray[np.bool_]
Projection = Literal["q", "k", "v", "o"]
Component = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class ModalitySegments:
    """토큰 구간 길이 (공유, 왼팔, 오른팔)."""

    n_shared: int
    n_left: int
    n_right: int

    def __post_init__(self) -> None:
        if min(self.n_shared, self.n_left, self.n_right) < 0:
            raise ValidationError(f"segment counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.n_shared + self.n_left + self.n_right

    def shared_columns(self) -> NDArray[np.bool_]:
        cols = np.zeros(self.total, dtype=bool)
        cols[: self.n_shared] = True
        return cols


@dataclass(frozen=True)
class JointMask:
    """행 = query, 열 = key인 attention 가시성 행렬."""

    visible: BoolMatrix
    segments: ModalitySegments
    shared_cols: NDArray[np.bool_]

    @property
    def size(self) -> int:
        return int(self.visible.shape[0])


def _lower(n_rows: int, n_cols: int) -> BoolMatrix:
    """로컬 인덱스 j <= i인 항목이 True인 (포함) 하삼각."""
    return np.tril(np.ones((n_rows, n_cols), dtype=bool))


def build_joint_mask(seg: ModalitySegments, cross_arm: bool = True) -> JointMask:
    """공유 접두부와 팔별/팔 사이 하삼각으로 이루어진 조인트 마스크를 만듭니다.

    - 공유 query는 공유 key 전체만 봅니다.
    - 팔 query는 공유 key 전체를 봅니다.
    - 같은 팔 안에서는 j <= i인 key만 봅니다.
    - cross_arm이면 다른 팔의 j <= i key도 봅니다.
    """
    s, n_l, n_r = seg.n_shared, seg.n_left, seg.n_right
    left = slice(s, s + n_l)
    right = slice(s + n_l, s + n_l + n_r)
    visible = np.zeros((seg.total, seg.total), dtype=bool)
    visible[:s, :s] = True
    visible[s:, :s] = True
    visible[left, left] = _lower(n_l, n_l)
    visible[right, right] = _lower(n_r, n_r)
    if cross_arm:
        visible[left, right] = _lower(n_l, n_r)
        visible[right, left] = _lower(n_r, n_l)
    return JointMask(visible=visible, segments=seg, shared_cols=seg.shared_columns())


def build_duplicated_mask(n_shared: int, n_arm: int, cross_arm: bool = True) -> JointMask:
    """MoE를 끈 배치 [공유 사본->왼팔 | 왼팔 | 공유 사본->오른팔 | 오른팔]용 마스크.

    각 팔 스트림은 자기 공유 사본을 접두부로 보고, 팔 사이 가시성은 팔 토큰끼리만 적용됩니다.
    두 공유 사본 모두 재가중 대상 열입니다.
    """
    stream = n_shared + n_arm
    total = 2 * stream
    visible = np.zeros((total, total), dtype=bool)
    shared_cols = np.zeros(total, dtype=bool)
    arm_slices = []
    for start in (0, stream):
        shared = slice(start, start + n_shared)
        arm = slice(start + n_shared, start + stream)
        visible[shared, shared] = True
        visible[arm, shared] = True
        visible[arm, arm] = _lower(n_arm, n_arm)
        shared_cols[shared] = True
        arm_slices.append(arm)
    if cross_arm:
        visible[arm_slices[0], arm_slices[1]] = _lower(n_arm, n_arm)
        visible[arm_slices[1], arm_slices[0]] = _lower(n_arm, n_arm)
    seg = ModalitySegments(2 * n_shared, n_arm, n_arm)
    return JointMask(visible=visible, segments=seg, shared_cols=shared_cols)


BLOCK_FIELDS = (
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln1_g", "ln1_b", "ln2_g", "ln2_b",
    "ff1_w", "ff1_b", "ff2_w", "ff2_b",
)  # fmt: skip


@dataclass(frozen=True)
class BlockWeights:
    """트랜스포머 블록 하나의 투영, 정규화, FFN 파라미터."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {f.name: getattr(self, f.name).shape for f in fields(self)}

    @classmethod
    def create(
        cls, store: ParamStore, prefix: str, embed: int, hidden: int, seed: int
    ) -> BlockWeights:
        """prefix 아래에 블록 파라미터를 새로 만들어 등록합니다."""
        made: dict[str, Tensor] = {}
        for proj in ("q", "k", "v", "o"):
            made[f"w{proj}"] = store.create(
                f"{prefix}.w{proj}", (embed, embed), seed=seed, fan_in=embed
            )
            made[f"b{proj}"] = store.create(f"{prefix}.b{proj}", (embed,), seed=seed, fan_in=embed)
        for ln in ("ln1", "ln2"):
            made[f"{ln}_g"] = store.create(f"{prefix}.{ln}_g", (embed,), seed=seed, kind="ones")
            made[f"{ln}_b"] = store.create(f"{prefix}.{ln}_b", (embed,), seed=seed, kind="zeros")
        made["ff1_w"] = store.create(f"{prefix}.ff1_w", (embed, hidden), seed=seed, fan_in=embed)
        made["ff1_b"] = store.create(f"{prefix}.ff1_b", (hidden,), seed=seed, fan_in=embed)
        made["ff2_w"] = store.create(f"{prefix}.ff2_w", (hidden, embed), seed=seed, fan_in=hidden)
        made["ff2_b"] = store.create(f"{prefix}.ff2_b", (embed,), seed=seed, fan_in=hidden)
        return cls(**made)

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> BlockWeights:
        return cls(**{name: store[f"{prefix}.{name}"] for name in BLOCK_FIELDS})


@dataclass(frozen=True)
class GateRouter:
    """토큰 임베딩 -> 팔 전문가 2개의 로짓."""

    w: Tensor
    b: Tensor

    def gates(self, x: Tensor) -> Tensor:
        logits = linear(x, self.w, self.b)
        return masked_softmax(logits, np.ones(logits.shape[-1], dtype=bool))


@dataclass(frozen=True)
class ArmBlockParams:
    """한 블록의 왼팔/오른팔 파라미터와 공유 토큰 라우터."""

    left: BlockWeights
    right: BlockWeights
    router: GateRouter | None = None

    def __post_init__(self) -> None:
        if self.left.shapes() != self.right.shapes():
            raise ValidationError("left and right block parameter shapes differ")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def feed_forward(x: Tensor, weights: BlockWeights) -> Tensor:
    return linear(gelu(linear(x, weights.ff1_w, weights.ff1_b)), weights.ff2_w, weights.ff2_b)


def merged_apply(x: Tensor, comp_left: Component, comp_right: Component) -> Tensor:
    """두 구성요소의 출력 평균 0.5 * left(x) + 0.5 * right(x)."""
    return comp_left(x) * MERGE_WEIGHT + comp_right(x) * (1.0 - MERGE_WEIGHT)


def moe_ffn(x: Tensor, ffn_left: Component, ffn_right: Component, router: GateRouter) -> Tensor:
    """게이트 g = softmax(router(x))로 두 팔 FFN 출력을 섞습니다."""
    gates = router.gates(x)
    return gates[..., 0:1] * ffn_left(x) + gates[..., 1:2] * ffn_right(x)


class Branch(Protocol):
    def project(self, x: Tensor, kind: Projection) -> Tensor: ...

    def norm(self, x: Tensor, which: int) -> Tensor: ...

    def ffn(self, x: Tensor) -> Tensor: ...


class ArmBranch:
    """자기 팔 파라미터만 쓰는 토큰 처리 경로."""

    def __init__(self, weights: BlockWeights) -> None:
        self.weights = weights

    def project(self, x: Tensor, kind: Projection) -> Tensor:
        return linear(x, getattr(self.weights, f"w{kind}"), getattr(self.weights, f"b{kind}"))

    def norm(self, x: Tensor, which: int) -> Tensor:
        w = self.weights
        gain, bias = (w.ln1_g, w.ln1_b) if which == 1 else (w.ln2_g, w.ln2_b)
        return layer_norm(x, gain, bias)

    def ffn(self, x: Tensor) -> Tensor:
        return feed_forward(x, self.weights)


class MergedBranch:
    """공유 토큰 경로: 투영과 정규화는 출력 평균, FFN은 MoE 라우팅."""

    def __init__(self, left: BlockWeights, right: BlockWeights, router: GateRouter | None) -> None:
        self.left = ArmBranch(left)
        self.right = ArmBranch(right)
        self.router = router

    def project(self, x: Tensor, kind: Projection) -> Tensor:
        return merged_apply(
            x, lambda t: self.left.project(t, kind), lambda t: self.right.project(t, kind)
        )

    def norm(self, x: Tensor, which: int) -> Tensor:
        return merged_apply(
            x, lambda t: self.left.norm(t, which), lambda t: self.right.norm(t, which)
        )

    def ffn(self, x: Tensor) -> Tensor:
        if self.router is None:
            return merged_apply(x, self.left.ffn, self.right.ffn)
        return moe_ffn(x, self.left.ffn, self.right.ffn, self.router)


def reweight_columns(A: Tensor | ArrayLike, shared_cols: ArrayLike, alpha: float) -> Tensor:
    """shared_cols 열을 alpha배 한 뒤 행을 다시 정규화하고 잔차 형태 A + (A' - A)로 반환합니다."""
    if not alpha > 0:
        raise ValidationError(f"re-weighting factor must be positive, got {alpha}")
    attn = as_tensor(A)
    cols = np.asarray(shared_cols, dtype=bool)
    if cols.shape != (attn.shape[-1],):
        raise ValidationError(
            f"shared column mask {cols.shape} does not match keys {attn.shape[-1]}"
        )
    scale = np.where(cols, alpha, 1.0).astype(attn.data.dtype)
    weighted = attn * scale
    renormed = weighted / weighted.sum(axis=-1, keepdims=True)
    return attn + (renormed - attn)


def reweight_attention(
    A: Tensor | ArrayLike, seg: ModalitySegments, alpha: float = DEFAULT_ALPHA
) -> Tensor:
    """공유 key 열(처음 n_shared개)의 attention 질량을 alpha배로 키우고 재정규화합니다."""
    return reweight_columns(A, seg.shared_columns(), alpha)


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    batch, n_tok, width = t.shape
    return t.reshape(batch, n_tok, n_heads, width // n_heads).transpose(0, 2, 1, 3)


def attention_mix(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    visible: BoolMatrix,
    n_heads: int,
    shared_cols: NDArray[np.bool_] | None = None,
    alpha: float = 1.0,
) -> Tensor:
    """다중 헤드 마스크 attention. (B, N, E) 입력, (B, N, E) 출력."""
    batch, n_tok, width = q.shape
    if width % n_heads:
        raise ValidationError(f"embedding width {width} not divisible by {n_heads} heads")
    scale = 1.0 / math.sqrt(width // n_heads)
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    attn = masked_softmax((qh @ kh.swapaxes(-1, -2)) * scale, visible)
    if shared_cols is not None and alpha != 1.0:
        attn = reweight_columns(attn, shared_cols, alpha)
    return (attn @ vh).transpose(0, 2, 1, 3).reshape(batch, n_tok, width)


def joint_block(
    groups: Sequence[tuple[Tensor, Branch]],
    visible: BoolMatrix,
    n_heads: int,
    shared_cols: NDArray[np.bool_] | None = None,
    alpha: float = 1.0,
) -> list[Tensor]:
    """토큰 그룹마다 자기 경로로 투영하고, 하나의 전역 마스크 attention으로 섞습니다.

    Args:
        groups: 순서대로 이어 붙일 (토큰 (B, n, E), 처리 경로) 목록
        visible: 이어 붙인 전체 시퀀스의 (N, N) 가시성
        n_heads: attention 헤드 수
        shared_cols: 재가중할 key 열 (None이면 재가중 없음)
        alpha: 재가중 배율

    Returns:
        그룹별 출력 토큰
    """
    outputs = [x for x, _ in groups]
    active = [(i, x, branch) for i, (x, branch) in enumerate(groups) if x.shape[1] > 0]
    if not active:
        return outputs
    batch, width = active[0][1].shape[0], active[0][1].shape[2]
    for _, x, _ in active:
        if x.ndim != 3 or x.shape[0] != batch or x.shape[2] != width:
            raise ValidationError(
                f"token group shape {x.shape} does not match ({batch}, n, {width})"
            )
    total = sum(x.shape[1] for x, _ in groups)
    if visible.shape != (total, total):
        raise ValidationError(f"mask {visible.shape} does not match {total} tokens")

    q, k, v = (concat([br.project(x, kind) for _, x, br in active], axis=1) for kind in "qkv")
    mixed = attention_mix(q, k, v, visible, n_heads, shared_cols, alpha)

    offset = 0
    for index, x, branch in active:
        n_tok = x.shape[1]
        attended = branch.project(mixed[:, offset : offset + n_tok, :], "o")
        hidden = branch.norm(x + attended, 1)
        outputs[index] = branch.norm(hidden + branch.ffn(hidden), 2)
        offset += n_tok
    return outputs


def transformer_block(
    x: Tensor, weights: BlockWeights, visible: BoolMatrix, n_heads: int
) -> Tensor:
    """단일 경로 트랜스포머 블록."""
    return joint_block([(x, ArmBranch(weights))], visible, n_heads)[0]


def joint_attention(
    x_shared: Tensor,
    x_left: Tensor,
    x_right: Tensor,
    params: ArmBlockParams,
    mask: JointMask,
    reweight: bool,
    alpha: float = DEFAULT_ALPHA,
    n_heads: int = 4,
) -> tuple[Tensor, Tensor, Tensor]:
    """[공유 | 왼팔 | 오른팔] 토큰에 대한 조인트 attention 블록.

    팔 토큰은 자기 팔 파라미터로, 공유 토큰은 두 팔 파라미터의 출력 평균과 MoE FFN으로 처리합니다.

    Raises:
        ValidationError: 임베딩 차원이나 마스크 구간이 맞지 않는 경우
    """
    seg = mask.segments
    counts = (x_shared.shape[1], x_left.shape[1], x_right.shape[1])
    if counts != (seg.n_shared, seg.n_left, seg.n_right):
        raise ValidationError(f"token counts {counts} do not match mask segments {seg}")
    width = params.left.width
    for x in (x_shared, x_left, x_right):
        if x.shape[-1] != width:
            raise ValidationError(f"token width {x.shape[-1]} does not match block width {width}")
    shared_branch = MergedBranch(params.left, params.right, params.router)
    y_shared, y_left, y_right = joint_block(
        [
            (x_shared, shared_branch),
            (x_left, ArmBranch(params.left)),
            (x_right, ArmBranch(params.right)),
        ],
        mask.visible,
        n_heads,
        mask.shared_cols if reweight else None,
        alpha if reweight else 1.0,
    )
    return y_shared, y_left, y_right
