"""Tests for checkpoint save/load."""

import json
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from src.core.checkpoint import (
    BLOB_NAME,
    MANIFEST_NAME,
    checkpoint_hash,
    load_checkpoint,
    save_checkpoint,
)
from src.core.policy import (
    Normalizer,
    ObsBatch,
    SinglePolicy,
    TwinFlags,
    TwinPolicy,
    forward_single,
    twin_forward,
)
from src.utils.exceptions import ArtifactMissingError, ValidationError

ObsFactory = Callable[..., ObsBatch]


def test_single_round_trip_preserves_outputs(
    tmp_path: Path, single_policy: SinglePolicy, make_obs: ObsFactory
) -> None:
    single_policy.normalizer = Normalizer(mean=np.full(10, 0.1), std=np.full(10, 2.0))
    save_checkpoint(single_policy, tmp_path / "ckpt")

    loaded = load_checkpoint(tmp_path / "ckpt")
    assert isinstance(loaded, SinglePolicy)
    assert loaded.config == single_policy.config
    np.testing.assert_array_equal(loaded.normalizer.std, single_policy.normalizer.std)
    batch = make_obs()
    np.testing.assert_array_equal(
        forward_single(batch, loaded).numpy(), forward_single(batch, single_policy).numpy()
    )


def test_twin_aliases_stored_once_and_restored_shared(
    tmp_path: Path, twin_policy: TwinPolicy, make_obs: ObsFactory
) -> None:
    twin = twin_policy.with_flags(TwinFlags(reweight=False))
    save_checkpoint(twin, tmp_path / "twin")

    manifest = json.loads((tmp_path / "twin" / MANIFEST_NAME).read_text(encoding="utf-8"))
    offsets = {entry["name"]: entry["offset"] for entry in manifest["tensors"]}
    alias = {entry["name"]: entry for entry in manifest["aliases"]}
    assert "left.encoder.ego_w" not in offsets
    assert alias["left.encoder.ego_w"]["offset"] == offsets["encoder.ego_w"]
    blob_size = (tmp_path / "twin" / BLOB_NAME).stat().st_size
    assert blob_size == 4 * twin.store.num_parameters()

    loaded = load_checkpoint(tmp_path / "twin")
    assert isinstance(loaded, TwinPolicy)
    assert loaded.flags == TwinFlags(reweight=False)
    assert loaded.store["left.head.out_w"] is loaded.store["head.out_w"]
    batch = make_obs(n_arms=2)
    np.testing.assert_array_equal(
        twin_forward(batch, loaded).h_left.numpy(), twin_forward(batch, twin).h_left.numpy()
    )


def test_save_is_byte_stable(tmp_path: Path, single_policy: SinglePolicy) -> None:
    first = save_checkpoint(single_policy, tmp_path / "a")
    second = save_checkpoint(single_policy, tmp_path / "b", extra={"steps": 3})

    assert first == second
    assert (tmp_path / "a" / BLOB_NAME).read_bytes() == (tmp_path / "b" / BLOB_NAME).read_bytes()
    assert checkpoint_hash(tmp_path / "a") == first


def test_hash_changes_with_parameters(tmp_path: Path, single_policy: SinglePolicy) -> None:
    before = save_checkpoint(single_policy, tmp_path / "a")
    single_policy.store["head.out_b"].data[0] += 1.0
    assert save_checkpoint(single_policy, tmp_path / "b") != before


def test_missing_checkpoint_names_stage(tmp_path: Path) -> None:
    with pytest.raises(ArtifactMissingError) as exc_info:
        load_checkpoint(tmp_path / "nothing", stage="pretrain-single")
    assert exc_info.value.stage == "pretrain-single"
    assert "pretrain-single" in str(exc_info.value)


def test_corrupted_blob_is_rejected(tmp_path: Path, single_policy: SinglePolicy) -> None:
    save_checkpoint(single_policy, tmp_path / "c")
    blob = bytearray((tmp_path / "c" / BLOB_NAME).read_bytes())
    blob[0] ^= 0xFF
    (tmp_path / "c" / BLOB_NAME).write_bytes(bytes(blob))

    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "c")


def test_unknown_format_version(tmp_path: Path, single_policy: SinglePolicy) -> None:
    save_checkpoint(single_policy, tmp_path / "v")
    manifest_path = tmp_path / "v" / MANIFEST_NAME
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    manifest["format_version"] = 99
    manifest_path.write_text(json.dumps(manifest), encoding="utf-8")

    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "v")
