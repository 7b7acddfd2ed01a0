"""Tests for flow matching samples, loss and the Euler sampler."""

import numpy as np
import pytest

from src.core.flowmatch import (
    TAU_CEIL,
    SamplerConfig,
    euler_sample,
    fm_loss,
    make_flow_batch,
    make_flow_sample,
    sample_tau,
    tau_cdf,
)
from src.core.numkernel import Tensor, named_stream
from src.utils.exceptions import NumericalError, ValidationError


def test_tau_samples_follow_cdf() -> None:
    taus = np.sort(sample_tau(named_stream(0, "tau"), size=20000))

    assert taus.min() >= 0.0
    assert taus.max() <= TAU_CEIL
    empirical = np.arange(1, taus.size + 1) / taus.size
    assert np.abs(empirical - tau_cdf(taus)).max() < 0.02
    assert abs(taus.mean() - TAU_CEIL * 0.4) < 0.01


def test_sample_tau_scalar() -> None:
    tau = sample_tau(named_stream(0, "one"))
    assert isinstance(tau, float)


def test_flow_sample_path_endpoints() -> None:
    A = np.arange(20, dtype=np.float64).reshape(2, 10)
    rng = named_stream(0, "path")

    at_data = make_flow_sample(A, rng, tau=1.0)
    at_noise = make_flow_sample(A, named_stream(0, "path"), tau=0.0)

    np.testing.assert_allclose(at_data.A_tau, A)
    np.testing.assert_allclose(at_noise.A_tau, at_noise.eps)
    np.testing.assert_allclose(at_noise.u, at_noise.eps - A)


def test_flow_sample_rejects_bad_tau_and_nan() -> None:
    with pytest.raises(ValidationError):
        make_flow_sample(np.zeros((2, 10)), named_stream(0, "x"), tau=1.5)
    with pytest.raises(ValidationError):
        make_flow_sample(np.full((2, 10), np.nan), named_stream(0, "x"))


def test_flow_batch_uses_per_sample_tau() -> None:
    batch = make_flow_batch(np.zeros((5, 4, 10), dtype=np.float32), named_stream(0, "b"))

    assert batch.tau.shape == (5,)
    assert len(set(batch.tau.tolist())) == 5
    np.testing.assert_allclose(batch.A_tau, (1 - batch.tau[:, None, None]) * batch.eps, rtol=1e-6)


def test_flow_batch_needs_three_dims() -> None:
    with pytest.raises(ValidationError):
        make_flow_batch(np.zeros((4, 10)), named_stream(0, "b"))


def test_fm_loss_value_and_shape_check() -> None:
    loss = fm_loss(Tensor(np.ones((2, 3))), np.zeros((2, 3)))
    assert loss.item() == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        fm_loss(np.ones((2, 3)), np.ones((3, 2)))


def test_euler_sample_recovers_target_with_exact_field() -> None:
    target = named_stream(0, "target").normal(size=(4, 10))

    def exact(A_tau: np.ndarray, tau: float) -> np.ndarray:
        return (A_tau - target) / (1.0 - tau)

    result = euler_sample(exact, target.shape, SamplerConfig(n_steps=10), named_stream(0, "e"))
    np.testing.assert_allclose(result, target, atol=1e-9)


def test_euler_sample_reports_non_finite_step() -> None:
    def explode(A_tau: np.ndarray, tau: float) -> np.ndarray:
        return np.full_like(A_tau, np.inf)

    with pytest.raises(NumericalError) as exc_info:
        euler_sample(explode, (2, 10), SamplerConfig(n_steps=3), named_stream(0, "e"))
    assert exc_info.value.step == 0


def test_euler_sample_shape_mismatch() -> None:
    with pytest.raises(ValidationError):
        euler_sample(lambda a, t: np.zeros((1,)), (2, 10), SamplerConfig(), named_stream(0, "e"))


def test_sampler_config_delta() -> None:
    assert SamplerConfig(n_steps=4, tau_max=0.8).delta == pytest.approx(0.2)
