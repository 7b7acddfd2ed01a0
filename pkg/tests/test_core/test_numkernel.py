"""Tests for the autodiff kernel."""

import numpy as np
import pytest

from src.core.numkernel import (
    ParamStore,
    Tensor,
    concat,
    derive_seed,
    embedding,
    gelu,
    grad_check,
    layer_norm,
    masked_softmax,
    named_stream,
    no_grad,
)
from src.utils.exceptions import NumericalError, ValidationError


def test_named_stream_is_reproducible() -> None:
    a = named_stream(7, "init", "encoder").normal(size=5)
    b = named_stream(7, "init", "encoder").normal(size=5)
    c = named_stream(7, "init", "decoder").normal(size=5)

    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_named_stream_rejects_negative_seed() -> None:
    with pytest.raises(ValidationError):
        named_stream(-1, "x")


def test_derive_seed_is_stable_and_bounded() -> None:
    seed = derive_seed(3, "data", "reach")
    assert seed == derive_seed(3, "data", "reach")
    assert 0 <= seed < 2**31 - 1


def test_add_and_mul_backward_unbroadcast() -> None:
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    ((x * 2.0 + b).sum()).backward()

    assert x.grad is not None and b.grad is not None
    np.testing.assert_allclose(x.grad, np.full((3, 2), 2.0))
    np.testing.assert_allclose(b.grad, np.array([3.0, 3.0]))


def test_storage_dtype_is_float32() -> None:
    t = Tensor([1.0, 2.0])
    assert t.data.dtype == np.float32


def test_non_finite_raises() -> None:
    x = Tensor(np.array([1.0, 0.0]))
    with pytest.raises(NumericalError):
        _ = x / Tensor(np.array([1.0, 0.0]))


def test_backward_needs_scalar_or_gradient() -> None:
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValidationError):
        (x * 2.0).backward()


def test_matmul_shape_validation() -> None:
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 2)))
    with pytest.raises(ValidationError):
        _ = a @ b


def test_masked_softmax_rows_sum_to_one_and_zero_masked() -> None:
    scores = Tensor(np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]]))
    mask = np.array([[True, False, True], [True, True, True]])

    y = masked_softmax(scores, mask).numpy()

    np.testing.assert_allclose(y.sum(axis=-1), 1.0, rtol=1e-6)
    assert y[0, 1] == 0.0


def test_masked_softmax_is_shift_stable() -> None:
    scores = Tensor(np.array([[1000.0, 1001.0]]))
    y = masked_softmax(scores, np.ones((1, 2), dtype=bool)).numpy()
    assert np.isfinite(y).all()


def test_masked_softmax_values() -> None:
    uniform = masked_softmax(Tensor(np.zeros(3)), np.ones(3, dtype=bool)).numpy()
    single = masked_softmax(Tensor(np.zeros(3)), np.array([True, False, False])).numpy()
    ratio = masked_softmax(Tensor(np.array([np.log(2.0), 0.0])), np.ones(2, dtype=bool)).numpy()

    np.testing.assert_allclose(uniform, [1 / 3, 1 / 3, 1 / 3], rtol=1e-6)
    np.testing.assert_array_equal(single, [1.0, 0.0, 0.0])
    np.testing.assert_allclose(ratio, [2 / 3, 1 / 3], rtol=1e-6)


def test_masked_softmax_empty_row_raises() -> None:
    scores = Tensor(np.zeros((2, 2)))
    with pytest.raises(NumericalError):
        masked_softmax(scores, np.array([[True, True], [False, False]]))


def test_masked_softmax_bad_mask_shape_raises() -> None:
    with pytest.raises(ValidationError):
        masked_softmax(Tensor(np.zeros((2, 2))), np.ones((3, 2), dtype=bool))


def test_layer_norm_values() -> None:
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))

    flat = layer_norm(Tensor(np.ones(3)), ones, zeros).numpy()
    unit = layer_norm(Tensor(np.array([-1.0, 1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    affine = layer_norm(Tensor(np.array([0.0, 2.0, 4.0])), Tensor(np.full(3, 2.0)), ones)

    np.testing.assert_allclose(flat, [0.0, 0.0, 0.0], atol=1e-6)
    np.testing.assert_allclose(unit.numpy(), [-1.0, 1.0], atol=1e-5)
    expected = 1.0 + 2.0 * np.array([-2.0, 0.0, 2.0]) / np.sqrt(8.0 / 3.0 + 1e-5)
    np.testing.assert_allclose(affine.numpy(), expected, rtol=1e-6)


def test_layer_norm_output_is_standardized() -> None:
    x = named_stream(3, "ln").normal(loc=4.0, scale=3.0, size=(5, 16))
    y = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).numpy()

    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-5)


def test_layer_norm_rejects_bad_eps() -> None:
    x = Tensor(np.ones((2, 4)))
    with pytest.raises(ValidationError):
        layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=0.0)


def test_embedding_range_check() -> None:
    table = Tensor(np.eye(3))
    with pytest.raises(ValidationError):
        embedding(table, [0, 3])


def test_no_grad_skips_graph() -> None:
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert y.requires_grad is False


def test_param_store_is_deterministic_and_ordered() -> None:
    a, b = ParamStore(), ParamStore()
    for store in (a, b):
        store.create("z.w", (2, 2), seed=1, fan_in=2)
        store.create("a.w", (3,), seed=1, fan_in=3)

    assert a.names() == ["a.w", "z.w"]
    np.testing.assert_array_equal(a["z.w"].data, b["z.w"].data)
    assert a.num_parameters() == 7
    assert a.census() == {"a": 3, "z": 4}


def test_param_store_rejects_duplicate_registration() -> None:
    store = ParamStore()
    t = store.create("w", (2,), seed=0)
    with pytest.raises(ValidationError):
        store.register("w", Tensor(np.ones(2)))
    with pytest.raises(ValidationError):
        store.register("w2", t)


def test_param_store_alias_shares_tensor() -> None:
    store = ParamStore()
    store.create("w", (2,), seed=0)
    store.alias("w_copy", "w")

    assert store["w_copy"] is store["w"]
    assert store.num_parameters() == 2
    assert store.aliases() == [("w_copy", "w")]


def test_grad_check_small_graph() -> None:
    store = ParamStore()
    w = store.create("w", (4, 3), seed=0, fan_in=4)
    g = store.create("g", (3,), seed=0, kind="ones")
    b = store.create("b", (3,), seed=0, kind="zeros")
    x = named_stream(0, "x").normal(size=(2, 5, 4))
    mask = np.tril(np.ones((5, 5), dtype=bool))

    def f() -> Tensor:
        h = gelu(layer_norm(Tensor(x) @ w, g, b))
        attn = masked_softmax(h @ h.swapaxes(-1, -2), mask)
        return concat([attn @ h, h], axis=-1).mean()

    assert grad_check(f, store, h=1e-3) <= 1e-4


def test_grad_check_square_and_constant() -> None:
    store = ParamStore()
    w = store.create("w", (1,), seed=0)
    w.data = np.array([3.0], dtype=np.float32)

    assert grad_check(lambda: (store["w"] * store["w"]).sum(), store) < 1e-8
    assert grad_check(lambda: (store["w"] * 0.0).sum() + 5.0, store) == 0.0


def test_grad_check_is_per_coordinate() -> None:
    store = ParamStore()
    w = store.create("w", (2,), seed=0)
    w.data = np.array([1.0, 1e-3], dtype=np.float32)

    # 두 번째 좌표의 그래디언트는 첫 번째보다 여섯 자릿수 작습니다.
    def f() -> Tensor:
        return (store["w"] * store["w"] * store["w"]).sum()

    assert grad_check(f, store) < 1e-6


def test_grad_check_step_range() -> None:
    store = ParamStore()
    store.create("w", (1,), seed=0)
    with pytest.raises(ValidationError):
        grad_check(lambda: store["w"].sum(), store, h=0.5)


def test_grad_check_restores_float32() -> None:
    store = ParamStore()
    store.create("w", (3,), seed=0)
    grad_check(lambda: (store["w"] * store["w"]).sum(), store)
    assert store["w"].data.dtype == np.float32
    assert store["w"].grad is None
