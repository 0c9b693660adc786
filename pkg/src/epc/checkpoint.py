"""Binary checkpoint format for agent sets.

Layout (all integers and floats little-endian):

    magic "EPC1" | u32 version | u32 metadata length | metadata JSON (UTF-8)
    | u32 entry count | entries

    entry := u32 name length | name UTF-8 | u32 rank | u32 x rank dims
             | f32 x prod(dims) values

Round-trips are bitwise exact. Loads fail with the byte offset of the first
problem so truncated or corrupted files are easy to diagnose.
"""

from __future__ import annotations

import json
import struct
from typing import Sequence

import numpy as np

from .errors import ContractError

MAGIC = b"EPC1"
VERSION = 1


class CheckpointError(ContractError):
    """Malformed checkpoint file."""


def save_checkpoint(path, metadata: dict, params: Sequence[tuple[str, np.ndarray]]) -> None:
    meta = json.dumps(metadata).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(params)))
        for name, values in params:
            arr = np.asarray(values, dtype="<f4")  # tobytes() emits C order
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: needed {count} bytes for {what} at byte offset {self.offset}"
            )
        piece = self.blob[self.offset : end]
        self.offset = end
        return piece

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            reader = _Reader(fh.read())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at byte offset 0")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at byte offset 4")
    meta_len = reader.u32("metadata length")
    try:
        metadata = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable metadata at byte offset 12: {exc}") from exc
    count = reader.u32("entry count")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = reader.u32("name length")
        name = reader.take(name_len, "name").decode("utf-8")
        rank = reader.u32("rank")
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank, "dims"))
        n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = reader.take(4 * n_values, f"values of {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if reader.offset != len(reader.blob):
        raise CheckpointError(f"trailing bytes at byte offset {reader.offset}")
    return metadata, params


def save_agent_set(path, agent_set, metadata: dict) -> None:
    """Persist every member's parameters (targets included) with metadata."""
    meta = dict(metadata)
    meta.setdefault("members", len(agent_set.learners))
    meta.setdefault("role", agent_set.role)
    params: list[tuple[str, np.ndarray]] = []
    for idx, learner in enumerate(agent_set.learners):
        for name, values in sorted(learner.state_dict().items()):
            params.append((f"agent{idx:03d}/{name}", values))
    save_checkpoint(path, meta, params)


def load_agent_set(path):
    """Rebuild an agent set from a checkpoint; returns (set, metadata)."""
    from .envs import make_game
    from .evolution import AgentSet, Provenance
    from .maddpg import AgentLearner
    from .nets import net_spec_for

    metadata, params = load_checkpoint(path)
    for key in ("game", "scale", "role", "members"):
        if key not in metadata:
            raise CheckpointError(f"metadata is missing {key!r}")
    scale = metadata["scale"]
    config = make_game(metadata["game"], scale if len(scale) > 1 else scale[0])
    spec = net_spec_for(
        config,
        embed_dim=metadata.get("embed_dim", 64),
        key_dim=metadata.get("key_dim", 32),
        hidden_dim=metadata.get("hidden_dim", 64),
    )
    learners = []
    for idx in range(metadata["members"]):
        prefix = f"agent{idx:03d}/"
        state = {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}
        learner = AgentLearner(spec, np.random.default_rng(0), lr=metadata.get("lr", 0.01))
        learner.load_state_dict(state)
        learners.append(learner)
    known = {f"agent{idx:03d}" for idx in range(metadata["members"])}
    for key in params:
        if key.split("/", 1)[0] not in known:
            raise CheckpointError(f"parameter {key!r} does not belong to any declared member")
    prov = Provenance(
        stage=metadata.get("stage", 0),
        mutant_id=metadata.get("set_id", -1),
    )
    return AgentSet(role=metadata["role"], learners=learners, provenance=prov), metadata
