"""Off-policy decentralized-actor / centralized-critic training.

One joint transition is stored per environment step; every ``update_every``
steps each agent takes one critic step against delayed-target bootstrap values
and one policy step ascending its own centralized Q, followed by a soft update
of all target networks. Training rewards are raw event rewards plus shaping;
the recorded per-episode series keeps raw rewards only.

Dead agents keep a frozen zero action, bootstrap targets are cut at death,
and their samples are masked out of both losses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import seeding
from .autodiff import Adam, Tape, Tensor, backward, const, freeze_params, mul, reduce_sum, scale, square, sub
from .envs import FOOD, GameConfig, World, pack_observation
from .errors import ContractError
from .nets import CriticNet, NetSpec, ObsBatch, PolicyNet, obs_batch_from_flat, stack_obs_batches
from .seeding import child_seed


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 0.01
    gamma: float = 0.95
    tau: float = 0.01
    batch_size: int = 1024
    update_every: int = 100
    noise_sigma: float = 0.1
    buffer_capacity: int = 1_000_000
    episodes: int = 1000

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ContractError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0 < self.tau <= 1:
            raise ContractError(f"tau must be in (0, 1], got {self.tau}")
        if min(self.batch_size, self.update_every, self.buffer_capacity) <= 0:
            raise ContractError("batch size, update cadence, and capacity must be positive")
        if self.lr < 0 or self.noise_sigma < 0 or self.episodes < 0:
            raise ContractError("lr, noise, and episodes must be non-negative")


class AgentLearner:
    """One agent's policy, critic, their delayed targets, and optimizers."""

    def __init__(self, spec: NetSpec, rng: np.random.Generator, lr: float = 0.01):
        self.spec = spec
        self.lr = lr
        self.policy = PolicyNet(rng, spec)
        self.critic = CriticNet(rng, spec)
        self.target_policy = PolicyNet(np.random.default_rng(0), spec)
        self.target_critic = CriticNet(np.random.default_rng(0), spec)
        _copy_params(self.policy, self.target_policy)
        _copy_params(self.critic, self.target_critic)
        self.reset_optimizers()

    def reset_optimizers(self, lr: float | None = None) -> None:
        if lr is not None:
            self.lr = lr
        self.opt_policy = Adam(self.policy.parameters(), lr=self.lr)
        self.opt_critic = Adam(self.critic.parameters(), lr=self.lr)

    def set_lr(self, lr: float) -> None:
        """Change the step size without touching accumulated moments."""
        self.lr = lr
        self.opt_policy.lr = lr
        self.opt_critic.lr = lr

    def clone(self) -> "AgentLearner":
        dup = AgentLearner(self.spec, np.random.default_rng(0), lr=self.lr)
        dup.load_state_dict(self.state_dict())
        return dup

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, net in self._nets():
            for p in net.parameters():
                out[f"{prefix}/{p.name}"] = p.data.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set()
        for prefix, net in self._nets():
            for p in net.parameters():
                key = f"{prefix}/{p.name}"
                expected.add(key)
                if key not in state:
                    raise ContractError(f"missing parameter {key}")
                arr = np.asarray(state[key], dtype=np.float32)
                if arr.shape != p.data.shape:
                    raise ContractError(f"shape mismatch for {key}: {arr.shape} != {p.data.shape}")
                p.data = arr.copy()
        extra = set(state) - expected
        if extra:
            raise ContractError(f"unexpected parameters: {sorted(extra)[:3]}")

    def _nets(self):
        return [
            ("policy", self.policy),
            ("critic", self.critic),
            ("target_policy", self.target_policy),
            ("target_critic", self.target_critic),
        ]


def _copy_params(src, dst) -> None:
    for ps, pd in zip(src.parameters(), dst.parameters()):
        pd.data = ps.data.copy()


def make_learners(config: GameConfig, spec: NetSpec, seed: int, lr: float = 0.01) -> list[AgentLearner]:
    return [AgentLearner(spec, seeding.rng(seed, "agent", i), lr=lr) for i in range(config.n_agents)]


def act_with_noise(
    policy: PolicyNet, obs, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """Deterministic action plus clipped additive Gaussian exploration."""
    if sigma < 0:
        raise ContractError("noise sigma must be >= 0")
    action = policy.act(obs)
    if sigma > 0:
        action = action + rng.normal(0.0, sigma, size=action.shape)
    return np.clip(action, -1.0, 1.0)


def soft_update(online, target, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, elementwise."""
    online_params = online.parameters() if hasattr(online, "parameters") else list(online)
    target_params = target.parameters() if hasattr(target, "parameters") else list(target)
    if len(online_params) != len(target_params):
        raise ContractError("parameter lists differ in length")
    t = np.float32(tau)
    for po, pt in zip(online_params, target_params):
        if po.data.shape != pt.data.shape:
            raise ContractError(f"shape mismatch in soft update: {po.data.shape} != {pt.data.shape}")
        # delta form: exact at the online==target fixed point
        pt.data += t * (po.data - pt.data)


def td_target(reward, gamma: float, next_q, done) -> np.ndarray:
    """Bootstrap target y = r + gamma * (1 - done) * Q'."""
    return np.asarray(reward) + gamma * (1.0 - np.asarray(done, dtype=float)) * np.asarray(next_q)


class ReplayBuffer:
    """Uniform ring buffer over joint transitions.

    Arrays grow geometrically toward ``capacity`` so desk-scale runs never
    allocate the full million-row store; once full, the oldest rows are
    overwritten first.
    """

    def __init__(self, capacity: int, obs_dims: Sequence[int]):
        if capacity <= 0:
            raise ContractError("capacity must be positive")
        self.capacity = capacity
        self.obs_dims = list(obs_dims)
        self.n_agents = len(obs_dims)
        self._size = 0
        self._next = 0
        self._alloc = 0
        self.obs: list[np.ndarray] = []
        self.next_obs: list[np.ndarray] = []
        self.actions = self.rewards = self.done = self.alive = self.alive_next = None

    def __len__(self) -> int:
        return self._size

    def _grow(self, minimum: int) -> None:
        new_alloc = min(self.capacity, max(minimum, 1024, 2 * self._alloc))
        if new_alloc <= self._alloc:
            return
        n = self.n_agents

        def up(old, shape):
            arr = np.zeros(shape, dtype=np.float32)
            if old is not None:
                arr[: len(old)] = old
            return arr

        self.obs = [up(self.obs[j] if self.obs else None, (new_alloc, d)) for j, d in enumerate(self.obs_dims)]
        self.next_obs = [
            up(self.next_obs[j] if self.next_obs else None, (new_alloc, d)) for j, d in enumerate(self.obs_dims)
        ]
        self.actions = up(self.actions, (new_alloc, n, 2))
        self.rewards = up(self.rewards, (new_alloc, n))
        self.done = up(self.done, (new_alloc,))
        self.alive = up(self.alive, (new_alloc, n))
        self.alive_next = up(self.alive_next, (new_alloc, n))
        self._alloc = new_alloc

    def push(self, obs, actions, rewards, next_obs, done, alive, alive_next) -> None:
        if self._next >= self._alloc and self._alloc < self.capacity:
            self._grow(self._next + 1)
        i = self._next
        for j in range(self.n_agents):
            self.obs[j][i] = obs[j]
            self.next_obs[j][i] = next_obs[j]
        self.actions[i] = actions
        self.rewards[i] = rewards
        self.done[i] = float(done)
        self.alive[i] = alive
        self.alive_next[i] = alive_next
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> "Batch":
        if self._size == 0:
            raise ContractError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=batch_size)
        return Batch(
            obs=[o[idx] for o in self.obs],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            next_obs=[o[idx] for o in self.next_obs],
            done=self.done[idx],
            alive=self.alive[idx],
            alive_next=self.alive_next[idx],
        )


@dataclass
class Batch:
    """A sampled minibatch plus lazily prepared network inputs."""

    obs: list[np.ndarray]
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: list[np.ndarray]
    done: np.ndarray
    alive: np.ndarray
    alive_next: np.ndarray
    obs_inputs: list[ObsBatch] | None = None
    next_inputs: list[ObsBatch] | None = None
    obs_stacked: ObsBatch | None = None
    next_stacked: ObsBatch | None = None
    target_actions: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.done)

    def prepare(self, layouts, embed_dim: int) -> "Batch":
        if self.obs_inputs is None:
            self.obs_inputs = [obs_batch_from_flat(l, o, embed_dim) for l, o in zip(layouts, self.obs)]
            self.next_inputs = [obs_batch_from_flat(l, o, embed_dim) for l, o in zip(layouts, self.next_obs)]
            if len(set(layouts)) == 1 and len(layouts) > 1:
                self.obs_stacked = stack_obs_batches(self.obs_inputs)
                self.next_stacked = stack_obs_batches(self.next_inputs)
        return self

    def _require_prepared(self) -> None:
        if self.size == 0:
            raise ContractError("empty batch")
        if self.obs_inputs is None:
            raise ContractError("batch.prepare(layouts, embed_dim) must run before updates")


def _ensure_target_actions(learners: Sequence[AgentLearner], batch: Batch) -> np.ndarray:
    if batch.target_actions is None:
        acts = []
        for j, learner in enumerate(learners):
            a = learner.target_policy.forward(batch.next_inputs[j]).data
            acts.append(a * batch.alive_next[:, j : j + 1])
        batch.target_actions = np.stack(acts, axis=1)
    return batch.target_actions


def critic_update(
    learners: Sequence[AgentLearner], index: int, batch: Batch, gamma: float, roles: Sequence[int]
) -> float:
    """One Adam step on agent ``index``'s critic toward the bootstrap target.

    Targets are held constant (computed off-tape with the delayed networks);
    a death next step cuts the bootstrap the same way episode end does.
    """
    batch._require_prepared()
    learner = learners[index]
    target_actions = _ensure_target_actions(learners, batch)
    t_acts = [const(target_actions[:, j]) for j in range(len(learners))]
    next_q = learner.target_critic.forward(
        batch.next_inputs, t_acts, index, roles, stacked=batch.next_stacked
    ).data[:, 0]
    cut = (1.0 - batch.done) * batch.alive_next[:, index]
    y = (batch.rewards[:, index] + gamma * cut * next_q).astype(np.float32)

    b = batch.size
    acts = [const(batch.actions[:, j]) for j in range(len(learners))]
    weight = const(batch.alive[:, index : index + 1])
    with Tape() as tape:
        q = learner.critic.forward(batch.obs_inputs, acts, index, roles, stacked=batch.obs_stacked)
        err = sub(q, const(y[:, None]))
        loss = scale(reduce_sum(mul(square(err), weight)), 1.0 / b)
        grads = backward(tape, loss)
    learner.opt_critic.step(grads)
    return loss.item()


def policy_update(learners: Sequence[AgentLearner], index: int, batch: Batch, roles: Sequence[int]) -> float:
    """One Adam step ascending E[Q_i] through agent ``index``'s own action;
    the other agents' actions come from the batch. Only this agent's policy
    parameters move, so the critic is frozen during recording and backward
    never visits its constant branches."""
    batch._require_prepared()
    learner = learners[index]
    b = batch.size
    weight = const(batch.alive[:, index : index + 1])
    with Tape() as tape:
        own_action = learner.policy.forward(batch.obs_inputs[index])
        acts: list[Tensor] = [
            own_action if j == index else const(batch.actions[:, j]) for j in range(len(learners))
        ]
        with freeze_params(learner.critic.parameters()):
            q = learner.critic.forward(batch.obs_inputs, acts, index, roles, stacked=batch.obs_stacked)
        objective = scale(reduce_sum(mul(q, weight)), 1.0 / b)
        grads = backward(tape, scale(objective, -1.0))
    learner.opt_policy.step(grads)
    return objective.item()


@dataclass
class TrainResult:
    role_rewards: np.ndarray  # (episodes, n_roles) mean raw reward per role
    coverage: np.ndarray | None = None  # food collection only
    critic_losses: np.ndarray | None = None
    policy_objectives: np.ndarray | None = None


class MetricsWriter:
    """JSON-lines metrics sink, flushed every ``flush_every`` records."""

    def __init__(self, path, flush_every: int = 100, mode: str = "w"):
        self._fh = open(path, mode, encoding="utf-8")
        self._flush_every = flush_every
        self._count = 0

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._count += 1
        if self._count % self._flush_every == 0:
            self._fh.flush()

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


class Trainer:
    """Runs episodes on one game instance and steps all learners in place."""

    def __init__(
        self,
        game: GameConfig,
        learners: Sequence[AgentLearner],
        config: TrainerConfig,
        seed: int,
        metrics: MetricsWriter | None = None,
        context: dict | None = None,
    ):
        if len(learners) != game.n_agents:
            raise ContractError(
                f"need {game.n_agents} learners for {game.kind} {game.scale}, got {len(learners)}"
            )
        self.game = game
        self.learners = list(learners)
        for learner in self.learners:
            learner.set_lr(config.lr)
        self.config = config
        self.metrics = metrics
        self.context = dict(context or {})
        self.context.setdefault("seed", seed)
        self.world = World(game, seed=child_seed(seed, "env"))
        self._noise_rng = seeding.rng(seed, "noise")
        self._sample_rng = seeding.rng(seed, "sample")
        self.roles = [int(r) for r in game.role_of()]
        self.layouts = [game.obs_layout(r) for r in self.roles]
        self.buffer = ReplayBuffer(config.buffer_capacity, [l.flat_dim for l in self.layouts])
        self.samples = 0
        self._last_critic_loss = np.zeros(game.n_agents)
        self._last_policy_obj = np.zeros(game.n_agents)

    def run(self, episodes: int | None = None) -> TrainResult:
        cfg = self.config
        game = self.game
        n = game.n_agents
        episodes = cfg.episodes if episodes is None else episodes
        role_idx = [game.role_indices(r) for r in range(game.n_roles)]
        role_rewards = np.zeros((episodes, game.n_roles))
        coverage = np.zeros(episodes) if game.kind == FOOD else None
        critic_losses = np.zeros(episodes)
        policy_objs = np.zeros(episodes)

        for ep in range(episodes):
            self.world.reset()
            obs = self.world.observe()
            packed = [pack_observation(l, o) for l, o in zip(self.layouts, obs)]
            ep_raw = np.zeros(n)
            occupied = 0
            for _ in range(game.horizon):
                state = self.world.state
                actions = np.zeros((n, 2))
                for i in range(n):
                    if state.alive[i]:
                        actions[i] = act_with_noise(
                            self.learners[i].policy, obs[i], cfg.noise_sigma, self._noise_rng
                        )
                alive_before = state.alive.copy()
                state, result = self.world.step(actions)
                next_obs = self.world.observe()
                next_packed = [pack_observation(l, o) for l, o in zip(self.layouts, next_obs)]
                self.buffer.push(
                    obs=packed,
                    actions=actions,
                    rewards=result.raw + result.shaped,
                    next_obs=next_packed,
                    done=result.done,
                    alive=alive_before.astype(np.float32),
                    alive_next=state.alive.astype(np.float32),
                )
                ep_raw += result.raw
                occupied += sum(1 for e in result.events if e.kind == "occupy-food")
                obs, packed = next_obs, next_packed
                self.samples += 1
                if self.samples % cfg.update_every == 0 and len(self.buffer) >= cfg.batch_size:
                    self._update_tick()
            role_rewards[ep] = [ep_raw[idx].mean() for idx in role_idx]
            if coverage is not None:
                coverage[ep] = occupied / (n * game.horizon)
            critic_losses[ep] = self._last_critic_loss.mean()
            policy_objs[ep] = self._last_policy_obj.mean()
            if self.metrics is not None:
                record = {
                    **self.context,
                    "episode": ep,
                    "scale": list(game.scale),
                    "role_mean_raw": [float(x) for x in role_rewards[ep]],
                    "critic_loss": float(critic_losses[ep]),
                    "policy_objective": float(policy_objs[ep]),
                }
                if coverage is not None:
                    record["coverage"] = float(coverage[ep])
                self.metrics.write(record)
        return TrainResult(role_rewards, coverage, critic_losses, policy_objs)

    def _update_tick(self) -> None:
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, self._sample_rng)
        batch.prepare(self.layouts, self.learners[0].spec.embed_dim)
        for i in range(len(self.learners)):
            self._last_critic_loss[i] = critic_update(self.learners, i, batch, cfg.gamma, self.roles)
            self._last_policy_obj[i] = policy_update(self.learners, i, batch, self.roles)
        for learner in self.learners:
            soft_update(learner.policy, learner.target_policy, cfg.tau)
            soft_update(learner.critic, learner.target_critic, cfg.tau)


def train(
    game: GameConfig,
    learners: Sequence[AgentLearner],
    config: TrainerConfig,
    seed: int,
    metrics: MetricsWriter | None = None,
    context: dict | None = None,
) -> TrainResult:
    """Train the learners in place and return the per-episode reward series."""
    return Trainer(game, learners, config, seed, metrics=metrics, context=context).run()
