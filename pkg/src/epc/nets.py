"""Population-invariant attention networks for the particle games.

Per-entity-type encoders feed attention pools whose query is the agent's own
embedding; the pooled type embeddings concatenate with the self (and action)
embedding into a fixed-width vector, so parameter counts never depend on how
many agents or landmarks are in the game. The critic additionally pools the
per-agent embeddings of all other agents (split into teammate and opponent
pools when the game has two roles) before its scalar head.

Policies and critics never share parameters; each agent owns its own copies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, concat, const, matmul, mul, param, relu, reshape, softmax_lastdim, transpose
from .envs import ACTION_DIM, GameConfig, ObsLayout, Observation, split_flat_batch
from .errors import ContractError

_MASK_OFF = np.float32(-1e9)


@dataclass(frozen=True)
class NetSpec:
    """Architecture description shared by all agents of one game kind."""

    entity_types: tuple[tuple[str, int], ...]
    self_dim: int = 4
    action_dim: int = 2
    n_roles: int = 1
    embed_dim: int = 64
    key_dim: int = 32
    hidden_dim: int = 64


def net_spec_for(config: GameConfig, embed_dim: int = 64, key_dim: int = 32, hidden_dim: int = 64) -> NetSpec:
    return NetSpec(
        entity_types=config.entity_types(),
        n_roles=config.n_roles,
        embed_dim=embed_dim,
        key_dim=key_dim,
        hidden_dim=hidden_dim,
    )


class Linear:
    """Fully connected layer with fan-in uniform init (optionally rescaled)."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, name: str, init_scale: float = 1.0):
        bound = init_scale / np.sqrt(n_in)
        self.w = param(rng.uniform(-bound, bound, size=(n_in, n_out)), f"{name}/w")
        self.b = param(np.zeros(n_out), f"{name}/b")

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return ad.linear(x, self.w, self.b)
        return ad.bias_add(matmul(x, self.w), self.b)

    def relu(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return ad.linear_relu(x, self.w, self.b)
        return relu(self(x))

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]


class AttentionPool:
    """Scaled-correlation attention: weights softmax(q' Wq' Wk k) over keys."""

    def __init__(self, rng: np.random.Generator, embed_dim: int, key_dim: int, name: str):
        bound = 1.0 / np.sqrt(embed_dim)
        self.w_query = param(rng.uniform(-bound, bound, size=(key_dim, embed_dim)), f"{name}/w_query")
        self.w_key = param(rng.uniform(-bound, bound, size=(key_dim, embed_dim)), f"{name}/w_key")
        self._dim = embed_dim

    def pool(
        self,
        query: Tensor,
        keys: Tensor,
        add_mask: Tensor | None = None,
        keep_mask: Tensor | None = None,
    ) -> Tensor:
        """Pool ``keys`` (B, M, d) against ``query`` (B, d) into (B, d).

        ``add_mask`` (B, M) holds 0 for valid slots and a large negative value
        for padding; ``keep_mask`` (B, d) zeroes rows whose key set is empty.

        Scores are computed as query @ (Wq' Wk) @ key: projecting the query
        once through the combined correlation matrix instead of projecting
        every key costs M times less.
        """
        correlation = matmul(transpose(self.w_query), self.w_key)  # (d, d)
        scores = ad.bdot(keys, matmul(query, correlation))
        if add_mask is not None:
            scores = scores + add_mask
        alpha = softmax_lastdim(scores)
        pooled = ad.bmix(alpha, keys)
        if keep_mask is not None:
            pooled = mul(pooled, keep_mask)
        return pooled

    def parameters(self) -> list[Tensor]:
        return [self.w_query, self.w_key]


def attention_pool(pool: AttentionPool, query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Single-sample pooling of an (M, d) key list against a d-vector query."""
    keys = np.asarray(keys, dtype=np.float32)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ContractError(f"attention_pool: need a nonempty (M, d) key list, got shape {keys.shape}")
    q = const(np.asarray(query, dtype=np.float32)[None, :])
    k = const(keys[None, :, :])
    return pool.pool(q, k).data[0]


@dataclass
class ObsBatch:
    """Network-ready constants for a batch of observations of one agent."""

    self_feats: Tensor
    ents: dict[str, Tensor | None]
    add_mask: dict[str, Tensor | None]
    keep_mask: dict[str, Tensor | None]
    size: int


def obs_batch_from_flat(layout: ObsLayout, flat: np.ndarray, embed_dim: int) -> ObsBatch:
    """Build attention inputs (padding masks included) from packed rows."""
    flat = np.asarray(flat, dtype=np.float32)
    self_feats, typed = split_flat_batch(layout, flat)
    ents: dict[str, Tensor | None] = {}
    add_mask: dict[str, Tensor | None] = {}
    keep_mask: dict[str, Tensor | None] = {}
    for name, feats, mask in typed:
        if feats.shape[1] == 0:
            ents[name] = add_mask[name] = keep_mask[name] = None
            continue
        ents[name] = const(feats)
        add_mask[name] = const((1.0 - mask) * _MASK_OFF)
        any_row = (mask.max(axis=1) > 0).astype(np.float32)
        keep_mask[name] = const(np.repeat(any_row[:, None], embed_dim, axis=1))
    return ObsBatch(const(self_feats), ents, add_mask, keep_mask, flat.shape[0])


def stack_obs_batches(batches: Sequence[ObsBatch]) -> ObsBatch | None:
    """Concatenate structurally identical per-agent batches along the batch
    axis, so one encoder pass covers every agent. Returns None when the
    batches do not share one layout (different roles or entity capacities)."""
    first = batches[0]
    names = list(first.ents)
    for ob in batches[1:]:
        if ob.size != first.size or list(ob.ents) != names:
            return None
        for k in names:
            a, b = first.ents[k], ob.ents[k]
            if (a is None) != (b is None):
                return None
            if a is not None and a.shape != b.shape:
                return None
            if (first.add_mask[k] is None) != (ob.add_mask[k] is None):
                return None

    def cat(values):
        if values[0] is None:
            return None
        return const(np.concatenate([v.data for v in values], axis=0))

    return ObsBatch(
        self_feats=cat([ob.self_feats for ob in batches]),
        ents={k: cat([ob.ents[k] for ob in batches]) for k in names},
        add_mask={k: cat([ob.add_mask[k] for ob in batches]) for k in names},
        keep_mask={k: cat([ob.keep_mask[k] for ob in batches]) for k in names},
        size=first.size * len(batches),
    )


def obs_batch_single(obs: Observation, embed_dim: int) -> ObsBatch:
    """Attention inputs for one unpadded observation (batch of one)."""
    ents: dict[str, Tensor | None] = {}
    add_mask: dict[str, Tensor | None] = {}
    keep_mask: dict[str, Tensor | None] = {}
    for name, arr in obs.entities.items():
        m = len(arr)
        if m == 0:
            ents[name] = add_mask[name] = keep_mask[name] = None
            continue
        ents[name] = const(np.asarray(arr, dtype=np.float32)[None, :, :])
        add_mask[name] = None
        keep_mask[name] = None
    return ObsBatch(const(np.asarray(obs.self_feats, dtype=np.float32)[None, :]), ents, add_mask, keep_mask, 1)


class ObsActionEncoder:
    """Observation(-action) encoder: typed entity attention over the self
    embedding as query, concatenated and projected to a fixed-width vector."""

    def __init__(self, rng: np.random.Generator, spec: NetSpec, with_action: bool, name: str):
        d = spec.embed_dim
        self.spec = spec
        self.with_action = with_action
        self.self_enc = Linear(rng, spec.self_dim, d, f"{name}/self")
        self.type_encs = {t: Linear(rng, f, d, f"{name}/ent-{t}") for t, f in spec.entity_types}
        self.type_pools = {
            t: AttentionPool(rng, d, spec.key_dim, f"{name}/pool-{t}") for t, _ in spec.entity_types
        }
        self.action_enc = Linear(rng, spec.action_dim, d, f"{name}/action") if with_action else None
        n_parts = 1 + len(spec.entity_types) + (1 if with_action else 0)
        self.out = Linear(rng, n_parts * d, d, f"{name}/out")

    def encode_single(self, obs: Observation, action: np.ndarray | None = None) -> np.ndarray:
        """Plain-numpy single-observation forward; used on the hot rollout
        path where tape and tensor wrappers would dominate the arithmetic."""
        d = self.spec.embed_dim
        zero = np.float32(0)
        lin = self.self_enc
        q = np.maximum(obs.self_feats[None, :] @ lin.w.data + lin.b.data, zero)
        parts = [q]
        for name, _ in self.spec.entity_types:
            arr = obs.entities[name]
            if len(arr) == 0:
                parts.append(np.zeros((1, d), dtype=np.float32))
                continue
            enc = self.type_encs[name]
            emb = np.maximum(arr @ enc.w.data + enc.b.data, zero)
            pool = self.type_pools[name]
            correlation = pool.w_query.data.T @ pool.w_key.data
            scores = emb @ (q @ correlation).T  # (M, 1)
            e = np.exp(scores - scores.max())
            alpha = (e / e.sum(dtype=np.float64)).astype(np.float32)
            parts.append(alpha.T @ emb)
        if self.with_action:
            if action is None:
                raise ContractError("encoder was built with an action input")
            lin = self.action_enc
            parts.append(np.maximum(action[None, :] @ lin.w.data + lin.b.data, zero))
        h = np.concatenate(parts, axis=1)
        return np.maximum(h @ self.out.w.data + self.out.b.data, zero)

    def encode(self, batch: ObsBatch, action: Tensor | None = None) -> Tensor:
        d = self.spec.embed_dim
        self_emb = self.self_enc.relu(batch.self_feats)
        parts = [self_emb]
        for name, feat_dim in self.spec.entity_types:
            ents = batch.ents[name]
            if ents is None:
                parts.append(const(np.zeros((batch.size, d), dtype=np.float32)))
                continue
            b, m, f = ents.shape
            emb = reshape(self.type_encs[name].relu(reshape(ents, (b * m, f))), (b, m, d))
            parts.append(
                self.type_pools[name].pool(self_emb, emb, batch.add_mask[name], batch.keep_mask[name])
            )
        if self.with_action:
            if action is None:
                raise ContractError("encoder was built with an action input")
            parts.append(self.action_enc.relu(action))
        return self.out.relu(concat(parts, axis=-1))

    def parameters(self) -> list[Tensor]:
        out = self.self_enc.parameters()
        for name, _ in self.spec.entity_types:
            out += self.type_encs[name].parameters()
            out += self.type_pools[name].parameters()
        if self.action_enc is not None:
            out += self.action_enc.parameters()
        return out + self.out.parameters()


class CriticNet:
    """Centralized Q network: shared observation-action encoder applied to
    every agent, attention over the other agents' embeddings, scalar head."""

    def __init__(self, rng: np.random.Generator, spec: NetSpec, name: str = "critic"):
        d, hidden = spec.embed_dim, spec.hidden_dim
        self.spec = spec
        self.encoder = ObsActionEncoder(rng, spec, with_action=True, name=f"{name}/f")
        self.own = Linear(rng, d, hidden, f"{name}/g")
        if spec.n_roles == 1:
            self.agent_pools = [AttentionPool(rng, d, spec.key_dim, f"{name}/others")]
        else:
            self.agent_pools = [
                AttentionPool(rng, d, spec.key_dim, f"{name}/others-team"),
                AttentionPool(rng, d, spec.key_dim, f"{name}/others-opp"),
            ]
        self.head1 = Linear(rng, hidden + d * len(self.agent_pools), hidden, f"{name}/h1")
        self.head2 = Linear(rng, hidden, 1, f"{name}/h2")

    def forward(
        self,
        obs_batches: Sequence[ObsBatch],
        actions: Sequence[Tensor],
        index: int,
        roles: Sequence[int],
        stacked: ObsBatch | None = None,
    ) -> Tensor:
        n = len(obs_batches)
        if n < 2:
            raise ContractError("centralized critic needs at least 2 agents")
        if len(actions) != n or len(roles) != n:
            raise ContractError("observation, action, and role arities must match")
        d = self.spec.embed_dim
        if self.spec.n_roles == 1:
            big = stacked if stacked is not None else stack_obs_batches(obs_batches)
            if big is not None:
                return self._forward_stacked(big, actions, index, n, obs_batches[index].size)
        embs = [self.encoder.encode(ob, act) for ob, act in zip(obs_batches, actions)]
        own = embs[index]
        parts = [self.own.relu(own)]
        if self.spec.n_roles == 1:
            groups = [[j for j in range(n) if j != index]]
        else:
            groups = [
                [j for j in range(n) if j != index and roles[j] == roles[index]],
                [j for j in range(n) if roles[j] != roles[index]],
            ]
        b = obs_batches[index].size
        for pool, members in zip(self.agent_pools, groups):
            if not members:
                parts.append(const(np.zeros((b, d), dtype=np.float32)))
                continue
            keys = concat([reshape(embs[j], (b, 1, d)) for j in members], axis=1)
            parts.append(pool.pool(own, keys))
        return self.head2(self.head1.relu(concat(parts, axis=-1)))

    def _forward_stacked(self, big: ObsBatch, actions: Sequence[Tensor], index: int, n: int, b: int) -> Tensor:
        """Single-role path: one encoder pass over all agents stacked along
        the batch axis; the observer is excluded from its own attention pool
        through the additive mask rather than by list surgery."""
        d = self.spec.embed_dim
        big_act = concat(list(actions), axis=0)
        big_emb = self.encoder.encode(big, big_act)  # (n*b, d)
        own = ad.slice_rows(big_emb, index * b, (index + 1) * b)
        keys = ad.swap01(reshape(big_emb, (n, b, d)))  # (b, n, d)
        exclude_self = np.zeros((b, n), dtype=np.float32)
        exclude_self[:, index] = np.float32(-1e9)
        pooled = self.agent_pools[0].pool(own, keys, const(exclude_self))
        parts = [self.own.relu(own), pooled]
        return self.head2(self.head1.relu(concat(parts, axis=-1)))

    def parameters(self) -> list[Tensor]:
        out = self.encoder.parameters() + self.own.parameters()
        for pool in self.agent_pools:
            out += pool.parameters()
        return out + self.head1.parameters() + self.head2.parameters()


class PolicyNet:
    """Decentralized policy: the encoder skeleton without the action input,
    with a tanh-bounded 2-vector head started near zero."""

    def __init__(self, rng: np.random.Generator, spec: NetSpec, name: str = "policy"):
        self.spec = spec
        self.encoder = ObsActionEncoder(rng, spec, with_action=False, name=f"{name}/f")
        self.head = Linear(rng, spec.embed_dim, ACTION_DIM, f"{name}/head", init_scale=0.1)

    def forward(self, batch: ObsBatch) -> Tensor:
        return ad.tanh(self.head(self.encoder.encode(batch)))

    def act(self, obs: Observation) -> np.ndarray:
        h = self.encoder.encode_single(obs)
        return np.tanh(h @ self.head.w.data + self.head.b.data)[0]

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.head.parameters()


def encode_obs_action(encoder: ObsActionEncoder, obs: Observation, action: np.ndarray) -> np.ndarray:
    """Single-sample observation-action embedding."""
    batch = obs_batch_single(obs, encoder.spec.embed_dim)
    act = const(np.asarray(action, dtype=np.float32)[None, :])
    return encoder.encode(batch, act).data[0]


def critic_forward(
    critic: CriticNet,
    observations: Sequence[Observation],
    actions: Sequence[np.ndarray],
    index: int,
    roles: Sequence[int],
) -> float:
    """Single-sample centralized Q value for agent ``index``."""
    obs_batches = [obs_batch_single(o, critic.spec.embed_dim) for o in observations]
    acts = [const(np.asarray(a, dtype=np.float32)[None, :]) for a in actions]
    return float(critic.forward(obs_batches, acts, index, roles).data[0, 0])


def policy_forward(policy: PolicyNet, obs: Observation) -> np.ndarray:
    """Deterministic action for one observation (reads only local state)."""
    return policy.act(obs)


def parameter_count(net) -> int:
    return int(sum(p.data.size for p in net.parameters()))


def named_parameters(net) -> list[tuple[str, Tensor]]:
    names = [p.name for p in net.parameters()]
    if len(set(names)) != len(names):
        raise ContractError("parameter names must be unique")
    return [(p.name, p) for p in net.parameters()]
