"""Binary checkpoint format: round-trips and corruption diagnostics."""

from __future__ import annotations

import numpy as np
import pytest

from epc.checkpoint import (
    CheckpointError,
    load_agent_set,
    load_checkpoint,
    save_agent_set,
    save_checkpoint,
)
from epc.envs import FOOD, GRASSLAND, World, make_game
from epc.evolution import AgentSet, Provenance
from epc.maddpg import make_learners
from epc.nets import net_spec_for


def sample_params(seed=0):
    rng = np.random.default_rng(seed)
    return [
        ("layer0/w", rng.standard_normal((3, 4)).astype(np.float32)),
        ("layer0/b", rng.standard_normal(4).astype(np.float32)),
        ("scalar", np.float32(2.5).reshape(())),
    ]


def test_round_trip_is_bitwise_exact(tmp_path):
    path = tmp_path / "net.ckpt"
    meta = {"game": FOOD, "scale": [3], "stage": 1, "role": 0, "set_id": 2, "seed": 7}
    params = sample_params()
    save_checkpoint(path, meta, params)
    loaded_meta, loaded = load_checkpoint(path)
    assert loaded_meta == meta
    assert sorted(loaded) == sorted(name for name, _ in params)
    for name, arr in params:
        assert loaded[name].shape == arr.shape
        assert (loaded[name] == arr).all()


def test_bad_magic_reports_offset_zero(tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, {}, sample_params())
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="offset 0"):
        load_checkpoint(path)


def test_truncated_file_reports_byte_offset(tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, {"k": 1}, sample_params())
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 9])
    with pytest.raises(CheckpointError, match=r"byte offset \d+"):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, {}, sample_params())
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, {}, sample_params())
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def make_role_set(kind=FOOD, scale=3, role=0, seed=3):
    cfg = make_game(kind, scale)
    spec = net_spec_for(cfg, embed_dim=8, key_dim=4, hidden_dim=8)
    learners = make_learners(cfg, spec, seed=seed)
    idx = cfg.role_indices(role)
    return cfg, spec, AgentSet(role, [learners[i] for i in idx], Provenance(stage=1, mutant_id=0))


def set_metadata(cfg, spec, role=0):
    return {
        "game": cfg.kind,
        "scale": list(cfg.scale),
        "stage": 1,
        "role": role,
        "set_id": 0,
        "seed": 3,
        "embed_dim": spec.embed_dim,
        "key_dim": spec.key_dim,
        "hidden_dim": spec.hidden_dim,
    }


def test_agent_set_round_trip_reproduces_actions(tmp_path):
    cfg, spec, src = make_role_set()
    path = tmp_path / "set.ckpt"
    save_agent_set(path, src, set_metadata(cfg, spec))
    loaded, meta = load_agent_set(path)
    assert meta["members"] == 3
    assert loaded.role == 0 and loaded.size == src.size
    world = World(cfg, seed=9)
    world.reset()
    obs = world.observe()
    for a, b in zip(src.learners, loaded.learners):
        assert (a.policy.act(obs[0]) == b.policy.act(obs[0])).all()
        for name, arr in a.state_dict().items():
            assert (arr == b.state_dict()[name]).all()


def test_agent_set_round_trip_two_role_game(tmp_path):
    cfg, spec, wolves = make_role_set(GRASSLAND, (2, 2), role=1, seed=5)
    path = tmp_path / "wolves.ckpt"
    save_agent_set(path, wolves, set_metadata(cfg, spec, role=1))
    loaded, meta = load_agent_set(path)
    assert loaded.role == 1 and loaded.size == 2


def test_missing_parameter_is_detected(tmp_path):
    cfg, spec, src = make_role_set()
    path = tmp_path / "set.ckpt"
    meta = set_metadata(cfg, spec)
    params = []
    for idx, learner in enumerate(src.learners):
        for name, values in sorted(learner.state_dict().items()):
            params.append((f"agent{idx:03d}/{name}", values))
    save_checkpoint(path, {**meta, "members": 3, "role": 0}, params[:-1])
    from epc.errors import ContractError

    with pytest.raises(ContractError, match="missing"):
        load_agent_set(path)


def test_foreign_parameter_is_detected(tmp_path):
    cfg, spec, src = make_role_set()
    path = tmp_path / "set.ckpt"
    meta = set_metadata(cfg, spec)
    params = []
    for idx, learner in enumerate(src.learners):
        for name, values in sorted(learner.state_dict().items()):
            params.append((f"agent{idx:03d}/{name}", values))
    params.append(("agent777/bogus", np.zeros(1, np.float32)))
    save_checkpoint(path, {**meta, "members": 3, "role": 0}, params)
    with pytest.raises(CheckpointError, match="agent777"):
        load_agent_set(path)


def test_missing_file_is_a_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "absent.ckpt")
