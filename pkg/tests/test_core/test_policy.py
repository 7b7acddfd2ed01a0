"""Tests for the single and twin policies, duplication and the action head."""

from collections.abc import Callable

import numpy as np
import pytest

from src.core.flowmatch import SamplerConfig, fm_loss, make_flow_batch
from src.core.numkernel import Tensor, grad_check, named_stream, precision
from src.core.policy import (
    ModelConfig,
    Normalizer,
    ObsBatch,
    ObservationSingle,
    ObservationTwin,
    SinglePolicy,
    TwinFlags,
    TwinPolicy,
    action_head,
    conditioning,
    duplicate,
    encode_single,
    forward_single,
    head_mask,
    predict_chunk,
    predict_chunks,
    predict_flow,
    token_count,
    twin_forward,
)
from src.utils.exceptions import ValidationError

ObsFactory = Callable[..., ObsBatch]


def _swap(batch: ObsBatch) -> ObsBatch:
    return ObsBatch(batch.instruction, batch.ego, batch.wrist[:, ::-1], batch.proprio[:, ::-1])


def _perturb_right(twin: TwinPolicy, seed: int = 1) -> None:
    rng = named_stream(seed, "perturb")
    for name, tensor in twin.store.items():
        if name.startswith("right.backbone"):
            tensor.data = tensor.data + rng.normal(scale=0.1, size=tensor.shape).astype(np.float32)


def test_encode_token_counts() -> None:
    cfg = ModelConfig(embed_dim=8, n_heads=2, n_blocks=1, vocab_size=16, n_ego_tokens=1)
    policy = SinglePolicy.fresh(cfg, seed=0)
    obs = ObservationSingle(
        instruction=(1, 2, 3),
        ego_feat=np.zeros(cfg.feat_dim),
        wrist_feat=np.zeros(cfg.feat_dim),
        proprio=np.zeros(cfg.proprio_dim),
    )

    enc = encode_single(obs, policy)
    assert (enc.segments.n_shared, enc.segments.n_left) == (4, 3)


def test_encode_empty_instruction_keeps_ego_only(
    single_policy: SinglePolicy, make_obs: ObsFactory
) -> None:
    enc = encode_single(make_obs(instruction_len=0), single_policy)
    assert enc.segments.n_shared == single_policy.config.n_ego_tokens


def test_encode_rejects_bad_inputs(single_policy: SinglePolicy, make_obs: ObsFactory) -> None:
    batch = make_obs()
    bad_ids = ObsBatch(batch.instruction + 100, batch.ego, batch.wrist, batch.proprio)
    with pytest.raises(ValidationError):
        encode_single(bad_ids, single_policy)
    too_long = make_obs(instruction_len=single_policy.config.max_instruction_len + 1)
    with pytest.raises(ValidationError):
        encode_single(too_long, single_policy)
    with pytest.raises(ValidationError):
        encode_single(make_obs(n_arms=2), single_policy)


def test_forward_single_is_deterministic_and_instruction_sensitive(
    tiny_model: ModelConfig, make_obs: ObsFactory
) -> None:
    batch = make_obs()
    a = forward_single(batch, SinglePolicy.fresh(tiny_model, seed=3)).numpy()
    b = forward_single(batch, SinglePolicy.fresh(tiny_model, seed=3)).numpy()
    np.testing.assert_array_equal(a, b)

    changed = ObsBatch(
        (batch.instruction + 1) % tiny_model.vocab_size, batch.ego, batch.wrist, batch.proprio
    )
    c = forward_single(changed, SinglePolicy.fresh(tiny_model, seed=3)).numpy()
    assert np.abs(a - c).max() > 0


@pytest.mark.parametrize("seed", range(20))
def test_duplicate_equivalence_at_initialization(
    tiny_model: ModelConfig,
    make_obs: ObsFactory,
    mirrored: Callable[[ObsBatch], ObsBatch],
    seed: int,
) -> None:
    single = SinglePolicy.fresh(tiny_model, seed=seed)
    twin = duplicate(single)
    batch = make_obs(seed=seed)

    h = forward_single(batch, single).numpy()
    out = twin_forward(mirrored(batch), twin)

    np.testing.assert_allclose(out.h_right.numpy(), h, atol=1e-5)
    np.testing.assert_allclose(out.h_left.numpy(), h, atol=1e-5)


def test_duplicate_equivalence_without_joint_attention(
    single_policy: SinglePolicy, make_obs: ObsFactory, mirrored: Callable[[ObsBatch], ObsBatch]
) -> None:
    twin = duplicate(single_policy, TwinFlags(joint_attention=False))
    batch = make_obs()

    out = twin_forward(mirrored(batch), twin)
    np.testing.assert_allclose(
        out.h_right.numpy(), forward_single(batch, single_policy).numpy(), atol=1e-5
    )


def test_duplicate_parameter_census(single_policy: SinglePolicy, twin_policy: TwinPolicy) -> None:
    cfg = single_policy.config
    census = single_policy.store.census()
    routers = cfg.n_blocks * (cfg.embed_dim * 2 + 2)

    expected = (
        single_policy.store.num_parameters() + census["backbone"] + census["proprio"] + routers
    )
    assert twin_policy.store.num_parameters() == expected


def test_duplicate_aliases_encoder_and_head(twin_policy: TwinPolicy) -> None:
    store = twin_policy.store
    assert store["left.encoder.ego_w"] is store["encoder.ego_w"]
    assert store["right.head.out_w"] is store["head.out_w"]
    assert store["left.backbone.readout"] is not store["right.backbone.readout"]

    store["left.encoder.ego_w"].data[0, 0] += 1.0
    assert store["right.encoder.ego_w"].data[0, 0] == store["encoder.ego_w"].data[0, 0]


def test_duplicate_routers_emit_uniform_gates(twin_policy: TwinPolicy) -> None:
    router = twin_policy.arm_params(0).router
    assert router is not None
    gates = router.gates(Tensor(np.ones((1, 2, twin_policy.config.embed_dim)))).numpy()
    np.testing.assert_array_equal(gates, np.full((1, 2, 2), 0.5, dtype=np.float32))


def test_duplicate_copies_are_independent(
    single_policy: SinglePolicy, twin_policy: TwinPolicy
) -> None:
    twin_policy.store["encoder.ego_w"].data[0, 0] += 5.0
    assert single_policy.store["encoder.ego_w"].data[0, 0] != (
        twin_policy.store["encoder.ego_w"].data[0, 0]
    )


def test_twin_swap_symmetry(twin_policy: TwinPolicy, make_obs: ObsFactory) -> None:
    batch = make_obs(n_arms=2)
    with precision(np.float64):
        out = twin_forward(batch, twin_policy)
        swapped = twin_forward(_swap(batch), twin_policy)
    np.testing.assert_allclose(swapped.h_right.numpy(), out.h_left.numpy(), atol=1e-6)
    np.testing.assert_allclose(swapped.h_left.numpy(), out.h_right.numpy(), atol=1e-6)


def test_twin_observation_helpers() -> None:
    single = ObservationSingle((1,), np.zeros(4), np.ones(4), np.full(10, 2.0))
    twin = ObservationTwin.mirrored(single)
    np.testing.assert_array_equal(twin.wrist_feat_L, twin.wrist_feat_R)

    moved = ObservationTwin((1,), np.zeros(4), np.ones(4), np.zeros(10), np.zeros(4), np.ones(10))
    back = moved.swapped()
    np.testing.assert_array_equal(back.proprio_R, moved.proprio_L)
    batch = ObsBatch.from_twin([moved])
    assert batch.n_arms == 2
    np.testing.assert_array_equal(batch.wrist[0, 0], moved.wrist_feat_R)


@pytest.mark.parametrize(
    "flags",
    [
        TwinFlags(joint_attention=False),
        TwinFlags(reweight=False),
    ],
)
def test_flags_change_outputs_on_distinct_arms(
    twin_policy: TwinPolicy, make_obs: ObsFactory, flags: TwinFlags
) -> None:
    batch = make_obs(n_arms=2)
    full = twin_forward(batch, twin_policy).h_right.numpy()
    toggled = twin_forward(batch, twin_policy, flags).h_right.numpy()
    assert np.abs(full - toggled).max() > 0


def test_moe_toggle_changes_outputs_once_arms_diverge(
    twin_policy: TwinPolicy, make_obs: ObsFactory
) -> None:
    batch = make_obs(n_arms=2)
    with precision(np.float64):
        before = twin_forward(batch, twin_policy).h_right.numpy()
        no_moe = twin_forward(batch, twin_policy, TwinFlags(moe=False)).h_right.numpy()
    np.testing.assert_allclose(before, no_moe, atol=1e-6)

    _perturb_right(twin_policy)
    full = twin_forward(batch, twin_policy).h_right.numpy()
    toggled = twin_forward(batch, twin_policy, TwinFlags(moe=False)).h_right.numpy()
    assert np.abs(full - toggled).max() > 1e-6


def test_moe_off_adds_one_shared_copy(twin_policy: TwinPolicy, make_obs: ObsFactory) -> None:
    batch = make_obs(n_arms=2, instruction_len=3)
    n_shared = 3 + twin_policy.config.n_ego_tokens

    on = twin_forward(batch, twin_policy).n_tokens
    off = twin_forward(batch, twin_policy, TwinFlags(moe=False)).n_tokens

    assert off - on == n_shared
    assert token_count(twin_policy, 3) == on
    assert token_count(twin_policy, 3, TwinFlags(moe=False)) == off


def test_head_mask_groups() -> None:
    visible = head_mask(n_arms=2, chunk_len=2)
    assert visible.shape == (9, 9)
    assert visible[:, 0].all()
    assert not visible[1:5, 5:].any()
    assert visible[5:, 5:].all()


def test_action_head_shapes_and_tau_conditioning(
    single_policy: SinglePolicy, twin_policy: TwinPolicy, make_obs: ObsFactory
) -> None:
    cfg = single_policy.config
    single_obs, twin_obs = make_obs(), make_obs(n_arms=2)
    a_single = named_stream(0, "a").normal(size=(2, cfg.chunk_len, 10))
    a_twin = named_stream(0, "a").normal(size=(2, cfg.chunk_len, 20))

    assert predict_flow(single_policy, single_obs, a_single, [0.3, 0.3]).shape == a_single.shape
    assert predict_flow(twin_policy, twin_obs, a_twin, [0.3, 0.3]).shape == a_twin.shape

    at_zero = predict_flow(single_policy, single_obs, a_single, 0.0).numpy()
    at_half = predict_flow(single_policy, single_obs, a_single, 0.5).numpy()
    assert np.abs(at_zero - at_half).max() > 0


def test_action_head_shape_errors(single_policy: SinglePolicy, make_obs: ObsFactory) -> None:
    cfg = single_policy.config
    h_list, d_list, _ = conditioning(single_policy, make_obs())
    with pytest.raises(ValidationError):
        action_head(single_policy.store, cfg, h_list, d_list, np.zeros((2, cfg.chunk_len, 20)), 0.1)
    with pytest.raises(ValidationError):
        action_head(single_policy.store, cfg, h_list, d_list, np.zeros((2, cfg.chunk_len, 10)), 2.0)
    with pytest.raises(ValidationError):
        action_head(single_policy.store, cfg, h_list, [], np.zeros((2, cfg.chunk_len, 10)), 0.1)


def test_single_policy_rejects_twin_observation(single_policy: SinglePolicy) -> None:
    obs = ObservationTwin((1,), np.zeros(4), np.zeros(4), np.zeros(10), np.zeros(4), np.zeros(10))
    with pytest.raises(ValidationError):
        conditioning(single_policy, obs)


def test_twin_gradients_pass_finite_difference_check(
    twin_policy: TwinPolicy, make_obs: ObsFactory
) -> None:
    batch = make_obs(n_arms=2)
    cfg = twin_policy.config
    flow = make_flow_batch(
        named_stream(0, "target").normal(size=(2, cfg.chunk_len, 20)), named_stream(0, "flow")
    )
    _perturb_right(twin_policy)

    def loss() -> Tensor:
        return fm_loss(predict_flow(twin_policy, batch, flow.A_tau, flow.tau), flow.u)

    assert grad_check(loss, twin_policy.store, max_coords=3) <= 1e-4


def test_predict_chunk_is_finite_and_deterministic(
    single_policy: SinglePolicy, twin_policy: TwinPolicy, make_obs: ObsFactory
) -> None:
    sampler = SamplerConfig(n_steps=3)
    cfg = single_policy.config
    batch = make_obs(n_arms=2, size=3)

    first = predict_chunks(twin_policy, batch, sampler, named_stream(0, "sample"))
    second = predict_chunks(twin_policy, batch, sampler, named_stream(0, "sample"))
    assert first.shape == (3, cfg.chunk_len, 20)
    assert np.isfinite(first).all()
    np.testing.assert_array_equal(first, second)

    obs = ObservationSingle((1,), np.zeros(4), np.zeros(4), np.zeros(10))
    chunk = predict_chunk(single_policy, obs, sampler, named_stream(0, "one"))
    assert chunk.actions.shape == (cfg.chunk_len, 10)
    assert chunk.frequency == cfg.chunk_hz


def test_predictions_are_denormalized(single_policy: SinglePolicy, make_obs: ObsFactory) -> None:
    sampler = SamplerConfig(n_steps=2)
    batch = make_obs()
    plain = predict_chunks(single_policy, batch, sampler, named_stream(0, "s"))

    single_policy.normalizer = Normalizer(mean=np.full(10, 5.0), std=np.ones(10))
    proprio_shift = ObsBatch(batch.instruction, batch.ego, batch.wrist, batch.proprio + 5.0)
    shifted = predict_chunks(single_policy, proprio_shift, sampler, named_stream(0, "s"))

    np.testing.assert_allclose(shifted, plain + 5.0, atol=1e-4)


def test_normalizer_floor_and_round_trip() -> None:
    norm = Normalizer(mean=np.arange(10.0), std=np.zeros(10))
    assert norm.std.min() > 0
    values = np.arange(20.0).reshape(1, 20)
    np.testing.assert_allclose(norm.denormalize(norm.normalize(values)), values)
    assert Normalizer.from_dict(norm.to_dict()).std.tolist() == norm.std.tolist()
    with pytest.raises(ValidationError):
        norm.normalize(np.zeros(7))


def test_model_config_validation() -> None:
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(arm_dim=7)


def test_model_config_needs_resamplable_chunks() -> None:
    with pytest.raises(ValueError, match="chunk_len"):
        ModelConfig(chunk_len=1)
    assert ModelConfig(chunk_len=2).chunk_len == 2
