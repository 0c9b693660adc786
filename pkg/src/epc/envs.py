"""2-D particle-world games: Grassland, Adversarial Battle, Food Collection.

Dynamics are semi-implicit Euler with per-role speed limits on a clamped
square world. Contacts are circle overlaps resolved once per step, in the
order eats/collections -> kills -> collisions. Event (raw) rewards and shaped
distance penalties are returned separately so evaluation can drop shaping.

Dead agents stay in the state vector (frozen, zero velocity) so array shapes
are stable within an episode, but they are excluded from every observation
entity list, from contact resolution, and from rewards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, ContractError

GRASSLAND = "grassland"
BATTLE = "adversarial-battle"
FOOD = "food-collection"
GAME_KINDS = (GRASSLAND, BATTLE, FOOD)

SELF_DIM = 4  # own position + velocity
AGENT_FEAT = 4  # relative position + relative velocity
LANDMARK_FEAT = 2  # relative position
ACTION_DIM = 2  # continuous 2-D acceleration in [-1, 1]^2

_ENTITY_TYPES = {
    GRASSLAND: (("other-sheep", AGENT_FEAT), ("other-wolves", AGENT_FEAT), ("grass", LANDMARK_FEAT)),
    BATTLE: (("teammates", AGENT_FEAT), ("enemies", AGENT_FEAT), ("food", LANDMARK_FEAT)),
    FOOD: (("teammates", AGENT_FEAT), ("food", LANDMARK_FEAT)),
}


@dataclass(frozen=True)
class GameConfig:
    """Static description of one game instance."""

    kind: str
    role_counts: tuple[int, ...]
    n_landmarks: int
    horizon: int = 25
    dt: float = 0.1
    damping: float = 0.25
    accel_gain: float = 5.0
    world_half_extent: float = 1.0
    max_speeds: tuple[float, ...] = ()
    agent_radii: tuple[float, ...] = ()
    landmark_radius: float = 0.03
    shaping_coef: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in GAME_KINDS:
            raise ConfigError(f"unknown game kind {self.kind!r}; expected one of {GAME_KINDS}")
        if len(self.role_counts) != (1 if self.kind == FOOD else 2):
            raise ConfigError(f"{self.kind}: wrong number of roles in {self.role_counts}")
        if any(c < 1 for c in self.role_counts):
            raise ConfigError(f"role counts must be >= 1, got {self.role_counts}")
        if self.kind == BATTLE and self.role_counts[0] != self.role_counts[1]:
            raise ConfigError(f"{BATTLE}: team sizes must be equal, got {self.role_counts}")
        if self.n_landmarks < 1:
            raise ConfigError("need at least one landmark")
        if self.horizon < 1 or self.dt <= 0 or not 0 <= self.damping < 1:
            raise ConfigError("invalid horizon/dt/damping")
        if len(self.max_speeds) != len(self.role_counts) or len(self.agent_radii) != len(self.role_counts):
            raise ConfigError("max_speeds and agent_radii must have one entry per role")
        if any(s <= 0 for s in self.max_speeds) or any(r <= 0 for r in self.agent_radii):
            raise ConfigError("speeds and radii must be positive")
        if self.landmark_radius <= 0 or self.world_half_extent <= 0:
            raise ConfigError("landmark radius and world extent must be positive")
        if self.kind == GRASSLAND and not np.isclose(self.max_speeds[0], 2.0 * self.max_speeds[1]):
            raise ConfigError(
                f"{GRASSLAND}: sheep max speed must be twice the wolf max speed, "
                f"got {self.max_speeds}"
            )

    @property
    def n_agents(self) -> int:
        return sum(self.role_counts)

    @property
    def n_roles(self) -> int:
        return len(self.role_counts)

    @property
    def scale(self) -> tuple[int, ...]:
        return self.role_counts

    def role_of(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_roles), self.role_counts)

    def role_indices(self, role: int) -> np.ndarray:
        start = sum(self.role_counts[:role])
        return np.arange(start, start + self.role_counts[role])

    def entity_types(self) -> tuple[tuple[str, int], ...]:
        return _ENTITY_TYPES[self.kind]

    def obs_layout(self, role: int) -> "ObsLayout":
        counts = {}
        if self.kind == GRASSLAND:
            ns, nw = self.role_counts
            counts["other-sheep"] = ns - 1 if role == 0 else ns
            counts["other-wolves"] = nw if role == 0 else nw - 1
            counts["grass"] = self.n_landmarks
        elif self.kind == BATTLE:
            counts["teammates"] = self.role_counts[role] - 1
            counts["enemies"] = self.role_counts[1 - role]
            counts["food"] = self.n_landmarks
        else:
            counts["teammates"] = self.role_counts[0] - 1
            counts["food"] = self.n_landmarks
        slots = tuple(TypeSlot(name, counts[name], feat) for name, feat in self.entity_types())
        return ObsLayout(self_dim=SELF_DIM, slots=slots)


def make_game(kind: str, scale, **overrides) -> GameConfig:
    """Build a :class:`GameConfig` with the per-kind conventions applied.

    ``scale`` is an int for food collection and a ``(a, b)`` pair otherwise.
    The landmark count defaults to the sheep count (grassland), the team size
    (battle), or the agent count (food collection).
    """
    if kind == FOOD:
        counts = (int(scale),) if np.isscalar(scale) else (int(scale[0]),)
        defaults = dict(max_speeds=(1.0,), agent_radii=(0.045,), n_landmarks=counts[0])
    elif kind == GRASSLAND:
        counts = tuple(int(c) for c in scale)
        defaults = dict(max_speeds=(1.3, 0.65), agent_radii=(0.045, 0.05), n_landmarks=counts[0])
    elif kind == BATTLE:
        counts = tuple(int(c) for c in scale)
        defaults = dict(max_speeds=(1.0, 1.0), agent_radii=(0.05, 0.05), n_landmarks=counts[0])
    else:
        raise ConfigError(f"unknown game kind {kind!r}; expected one of {GAME_KINDS}")
    defaults.update(overrides)
    return GameConfig(kind=kind, role_counts=counts, **defaults)


def scale_config(config: GameConfig, factor: int) -> GameConfig:
    """Same game at ``factor`` times the population (landmark rule reapplied)."""
    new_scale = tuple(c * factor for c in config.role_counts)
    keep = dict(
        horizon=config.horizon,
        dt=config.dt,
        damping=config.damping,
        accel_gain=config.accel_gain,
        world_half_extent=config.world_half_extent,
        max_speeds=config.max_speeds,
        agent_radii=config.agent_radii,
        landmark_radius=config.landmark_radius,
        shaping_coef=config.shaping_coef,
        seed=config.seed,
    )
    return make_game(config.kind, new_scale if config.kind != FOOD else new_scale[0], **keep)


@dataclass(frozen=True)
class TypeSlot:
    name: str
    count: int
    feat_dim: int


@dataclass(frozen=True)
class ObsLayout:
    """Fixed packing layout for one observer role: per entity type a block of
    ``count * feat_dim`` features followed by ``count`` mask entries."""

    self_dim: int
    slots: tuple[TypeSlot, ...]

    @property
    def flat_dim(self) -> int:
        return self.self_dim + sum(s.count * (s.feat_dim + 1) for s in self.slots)


@dataclass
class Observation:
    """Typed entity lists relative to one observer; live entities only."""

    self_feats: np.ndarray
    entities: dict[str, np.ndarray]


@dataclass(frozen=True)
class Event:
    """One scoring event. ``actors`` are the reward recipients on the positive
    side (wolves, killers, collectors' team, occupants, colliding pair);
    ``target`` is the affected entity (victim agent or landmark index)."""

    kind: str
    actors: tuple[int, ...]
    target: int = -1


@dataclass
class StepResult:
    raw: np.ndarray
    shaped: np.ndarray
    events: list[Event]
    done: bool


@dataclass
class WorldState:
    pos: np.ndarray
    vel: np.ndarray
    alive: np.ndarray
    roles: np.ndarray
    landmark_pos: np.ndarray
    landmark_active: np.ndarray
    t: int = 0

    def copy(self) -> "WorldState":
        return WorldState(
            pos=self.pos.copy(),
            vel=self.vel.copy(),
            alive=self.alive.copy(),
            roles=self.roles.copy(),
            landmark_pos=self.landmark_pos.copy(),
            landmark_active=self.landmark_active.copy(),
            t=self.t,
        )


class World:
    """One game instance owning its RNG stream (reset placement + respawns)."""

    def __init__(self, config: GameConfig, seed: int | None = None):
        self.config = config
        self._rng = np.random.default_rng(config.seed if seed is None else seed)
        self.state: WorldState | None = None
        self._roles = config.role_of()
        self._radii = np.array([config.agent_radii[r] for r in self._roles])

    def reset(self, seed: int | None = None) -> WorldState:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        cfg = self.config
        he = cfg.world_half_extent
        n = cfg.n_agents
        self.state = WorldState(
            pos=self._rng.uniform(-he, he, size=(n, 2)),
            vel=np.zeros((n, 2)),
            alive=np.ones(n, dtype=bool),
            roles=self._roles.copy(),
            landmark_pos=self._rng.uniform(-he, he, size=(cfg.n_landmarks, 2)),
            landmark_active=np.ones(cfg.n_landmarks, dtype=bool),
            t=0,
        )
        return self.state

    def step(self, actions: np.ndarray) -> tuple[WorldState, StepResult]:
        cfg = self.config
        s = self.state
        if s is None:
            raise ContractError("step before reset")
        n = cfg.n_agents
        actions = np.asarray(actions, dtype=float)
        if actions.shape != (n, 2):
            raise ContractError(f"expected one action per agent: shape {(n, 2)}, got {actions.shape}")

        a = np.clip(actions, -1.0, 1.0)
        a[~s.alive] = 0.0
        vel = (1.0 - cfg.damping) * s.vel + a * cfg.accel_gain * cfg.dt
        speed = np.linalg.norm(vel, axis=1)
        caps = np.array([cfg.max_speeds[r] for r in s.roles])
        over = speed > caps
        if over.any():
            vel[over] *= (caps[over] / speed[over])[:, None]
        vel[~s.alive] = 0.0
        s.vel = vel
        he = cfg.world_half_extent
        s.pos = np.clip(s.pos + vel * cfg.dt, -he, he)
        s.t += 1

        agent_contacts, landmark_contacts = contact_matrices(cfg, s)
        if cfg.kind == GRASSLAND:
            raw, events = reward_grassland(cfg, s, agent_contacts, landmark_contacts, self._rng)
        elif cfg.kind == BATTLE:
            raw, events = reward_battle(cfg, s, agent_contacts, landmark_contacts, self._rng)
        else:
            occupancy = landmark_contacts.any(axis=0)
            raw, events = reward_food_collection(cfg, s, occupancy, agent_contacts, landmark_contacts)
        shaped = shaped_rewards(cfg, s)
        return s, StepResult(raw=raw, shaped=shaped, events=events, done=s.t >= cfg.horizon)

    def observe(self) -> list[Observation]:
        cfg = self.config
        s = self.state
        if s is None:
            raise ContractError("observe before reset")
        out = []
        for i in range(cfg.n_agents):
            entities: dict[str, np.ndarray] = {}
            for name, feat in cfg.entity_types():
                idx = _entity_indices(cfg, s, i, name)
                if feat == AGENT_FEAT:
                    rel = np.concatenate([s.pos[idx] - s.pos[i], s.vel[idx] - s.vel[i]], axis=1)
                else:
                    rel = s.landmark_pos[idx] - s.pos[i]
                entities[name] = rel.astype(np.float32)
            self_feats = np.concatenate([s.pos[i], s.vel[i]]).astype(np.float32)
            out.append(Observation(self_feats=self_feats, entities=entities))
        return out


def _entity_indices(cfg: GameConfig, s: WorldState, i: int, type_name: str) -> np.ndarray:
    n = cfg.n_agents
    others = np.arange(n)
    if type_name in ("grass", "food"):
        return np.flatnonzero(s.landmark_active)
    live_others = s.alive & (others != i)
    if type_name == "other-sheep":
        return np.flatnonzero(live_others & (s.roles == 0))
    if type_name == "other-wolves":
        return np.flatnonzero(live_others & (s.roles == 1))
    if type_name == "teammates":
        return np.flatnonzero(live_others & (s.roles == s.roles[i]))
    if type_name == "enemies":
        return np.flatnonzero(live_others & (s.roles != s.roles[i]))
    raise ConfigError(f"unknown entity type {type_name!r}")


def contact_matrices(cfg: GameConfig, s: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Circle-overlap contacts among live agents and agent/landmark pairs."""
    radii = np.array([cfg.agent_radii[r] for r in s.roles])
    delta = s.pos[:, None, :] - s.pos[None, :, :]
    dist = np.linalg.norm(delta, axis=-1)
    agent_contacts = dist < (radii[:, None] + radii[None, :])
    np.fill_diagonal(agent_contacts, False)
    live = s.alive
    agent_contacts &= live[:, None] & live[None, :]

    ldelta = s.pos[:, None, :] - s.landmark_pos[None, :, :]
    ldist = np.linalg.norm(ldelta, axis=-1)
    landmark_contacts = (ldist < (radii[:, None] + cfg.landmark_radius)) & live[:, None]
    landmark_contacts &= s.landmark_active[None, :]
    return agent_contacts, landmark_contacts


def _respawn(cfg: GameConfig, s: WorldState, landmark: int, rng: np.random.Generator) -> None:
    he = cfg.world_half_extent
    s.landmark_pos[landmark] = rng.uniform(-he, he, size=2)


def reward_grassland(cfg, s, agent_contacts, landmark_contacts, rng):
    """Sheep +2 per grass eaten (grass respawns); every wolf touching a live
    sheep gets +5 while the sheep takes -5 once and dies."""
    raw = np.zeros(cfg.n_agents)
    events: list[Event] = []
    sheep = np.flatnonzero(s.roles == 0)
    wolves = np.flatnonzero(s.roles == 1)
    for g in range(cfg.n_landmarks):
        eaters = sheep[landmark_contacts[sheep, g]]
        if eaters.size:
            eater = int(eaters.min())
            raw[eater] += 2.0
            events.append(Event("eat-grass", (eater,), g))
            _respawn(cfg, s, g, rng)
    killed = []
    for sh in sheep:
        if not s.alive[sh]:
            continue
        hunters = wolves[agent_contacts[wolves, sh]]
        if hunters.size:
            raw[hunters] += 5.0
            raw[sh] -= 5.0
            killed.append(sh)
            events.append(Event("eat-sheep", tuple(int(w) for w in hunters), int(sh)))
    for sh in killed:
        s.alive[sh] = False
        s.vel[sh] = 0.0
    return raw, events


def reward_battle(cfg, s, agent_contacts, landmark_contacts, rng):
    """Resource pickup pays +1 to every live member of the collector's team
    (resource respawns); two or more opponents trapping one agent kill it for
    -6 and split +6 among themselves."""
    raw = np.zeros(cfg.n_agents)
    events: list[Event] = []
    for l in range(cfg.n_landmarks):
        takers = np.flatnonzero(landmark_contacts[:, l])
        if takers.size:
            collector = int(takers.min())
            team = np.flatnonzero((s.roles == s.roles[collector]) & s.alive)
            raw[team] += 1.0
            events.append(Event("collect-resource", tuple(int(a) for a in team), l))
            _respawn(cfg, s, l, rng)
    killed = []
    for victim in range(cfg.n_agents):
        if not s.alive[victim]:
            continue
        opponents = np.flatnonzero(agent_contacts[:, victim] & (s.roles != s.roles[victim]))
        if opponents.size >= 2:
            raw[opponents] += 6.0 / opponents.size
            raw[victim] -= 6.0
            killed.append(victim)
            events.append(Event("kill", tuple(int(k) for k in opponents), victim))
    for victim in killed:
        s.alive[victim] = False
        s.vel[victim] = 0.0
    return raw, events


def reward_food_collection(cfg, s, occupancy, agent_contacts, landmark_contacts):
    """Every agent earns 6/N per occupied food this step; each colliding pair
    costs every agent 6/N."""
    n = cfg.n_agents
    raw = np.zeros(n)
    events: list[Event] = []
    unit = 6.0 / n
    for l in range(cfg.n_landmarks):
        if occupancy[l]:
            occupants = np.flatnonzero(landmark_contacts[:, l])
            raw += unit
            events.append(Event("occupy-food", tuple(int(a) for a in occupants), l))
    pairs = np.argwhere(np.triu(agent_contacts, k=1))
    for i, j in pairs:
        raw -= unit
        events.append(Event("collision", (int(i), int(j))))
    return raw, events


def _min_dist(pos: np.ndarray, targets: np.ndarray) -> float:
    if targets.size == 0:
        return 0.0
    return float(np.linalg.norm(targets - pos, axis=1).min())


def shaped_rewards(cfg: GameConfig, s: WorldState) -> np.ndarray:
    """Per-step distance shaping, one negative term per relevant target kind.

    Sheep are pulled toward grass, wolves toward live sheep, battle agents
    toward both the nearest resource and the nearest live enemy, and food
    collectors toward the nearest food. Dead agents get zero.
    """
    coef = cfg.shaping_coef
    out = np.zeros(cfg.n_agents)
    if coef == 0.0:
        return out
    active_landmarks = s.landmark_pos[s.landmark_active]
    for i in range(cfg.n_agents):
        if not s.alive[i]:
            continue
        if cfg.kind == GRASSLAND:
            if s.roles[i] == 0:
                dist = _min_dist(s.pos[i], active_landmarks)
            else:
                prey = s.pos[(s.roles == 0) & s.alive]
                dist = _min_dist(s.pos[i], prey)
        elif cfg.kind == BATTLE:
            enemies = s.pos[(s.roles != s.roles[i]) & s.alive]
            dist = _min_dist(s.pos[i], active_landmarks) + _min_dist(s.pos[i], enemies)
        else:
            dist = _min_dist(s.pos[i], active_landmarks)
        out[i] = -coef * dist
    return out


def shaped_reward(cfg: GameConfig, s: WorldState, agent: int) -> float:
    if not s.alive[agent]:
        raise ContractError(f"agent {agent} is dead")
    return float(shaped_rewards(cfg, s)[agent])


def pack_observation(layout: ObsLayout, obs: Observation) -> np.ndarray:
    """Flatten an observation into the fixed layout: per type, feature rows
    for live entities padded with zeros, then a 1/0 presence mask."""
    parts = [np.asarray(obs.self_feats, dtype=np.float32)]
    for slot in layout.slots:
        ents = obs.entities[slot.name]
        m = len(ents)
        if m > slot.count:
            raise ContractError(f"{slot.name}: {m} entities exceed layout capacity {slot.count}")
        feats = np.zeros((slot.count, slot.feat_dim), dtype=np.float32)
        mask = np.zeros(slot.count, dtype=np.float32)
        if m:
            feats[:m] = ents
            mask[:m] = 1.0
        parts.append(feats.reshape(-1))
        parts.append(mask)
    return np.concatenate(parts)


def split_flat_batch(layout: ObsLayout, flat: np.ndarray):
    """Inverse of :func:`pack_observation` over a batch: returns the self
    block and, per type, (features (B, M, f), mask (B, M)) views."""
    if flat.ndim != 2 or flat.shape[1] != layout.flat_dim:
        raise ContractError(f"expected batch shape (B, {layout.flat_dim}), got {flat.shape}")
    b = flat.shape[0]
    self_feats = flat[:, : layout.self_dim]
    offset = layout.self_dim
    typed = []
    for slot in layout.slots:
        span = slot.count * slot.feat_dim
        feats = flat[:, offset : offset + span].reshape(b, slot.count, slot.feat_dim)
        offset += span
        mask = flat[:, offset : offset + slot.count]
        offset += slot.count
        typed.append((slot.name, feats, mask))
    return self_feats, typed


def trace_record(state: WorldState, actions: np.ndarray, result: StepResult) -> dict:
    return {
        "t": int(state.t),
        "positions": state.pos.round(6).tolist(),
        "velocities": state.vel.round(6).tolist(),
        "alive": state.alive.astype(int).tolist(),
        "actions": np.asarray(actions, dtype=float).round(6).tolist(),
        "raw_rewards": result.raw.round(6).tolist(),
        "events": [
            {"kind": e.kind, "actors": list(e.actors), "target": e.target} for e in result.events
        ],
    }


def write_trace_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
