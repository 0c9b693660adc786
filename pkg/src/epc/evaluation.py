"""Cross-play tournaments, normalized scores, and behavioral statistics.

Evaluation always plays deterministic policies (no exploration noise) and
scores raw event rewards only; shaping never enters a reported number. Match
episodes are reseeded individually from the match seed so that two evaluations
with the same seed see identical episode setups regardless of how much
randomness each policy's behavior consumes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .envs import BATTLE, FOOD, GRASSLAND, GameConfig, World, scale_config, trace_record
from .errors import ContractError
from .seeding import child_seed


class RandomPolicy:
    """Uniform random actions; the reference baseline for learning checks."""

    def __init__(self, rng: np.random.Generator):
        self._rng = rng

    def act(self, obs) -> np.ndarray:
        return self._rng.uniform(-1.0, 1.0, size=2)


def _policies(role_set) -> list:
    """Accept an agent set, a list of learners, or a list of policies."""
    members = getattr(role_set, "learners", role_set)
    return [getattr(m, "policy", m) for m in members]


@dataclass
class MatchResult:
    role_rewards: list[float]
    episodes: int
    stats: dict[str, float] = field(default_factory=dict)
    traces: list[list[dict]] | None = None


_GAME_STATS = {
    GRASSLAND: ("grass_eaten", "survival_rate", "kills"),
    BATTLE: ("kills", "resources"),
    FOOD: ("coverage",),
}


def play_match(
    config: GameConfig,
    sets_by_role: Sequence,
    episodes: int,
    seed: int,
    collect_traces: bool = False,
) -> MatchResult:
    """Run deterministic policies for ``episodes`` and average raw rewards
    per role (dead agents keep the rewards they earned)."""
    if episodes <= 0:
        raise ContractError(f"episodes must be positive, got {episodes}")
    if len(sets_by_role) != config.n_roles:
        raise ContractError(f"expected {config.n_roles} role sets, got {len(sets_by_role)}")
    policies = []
    for r, role_set in enumerate(sets_by_role):
        ps = _policies(role_set)
        if len(ps) != config.role_counts[r]:
            raise ContractError(
                f"role {r} set size {len(ps)} does not match game scale {config.role_counts}"
            )
        policies.extend(ps)

    n = config.n_agents
    roles = config.role_of()
    role_idx = [config.role_indices(r) for r in range(config.n_roles)]
    world = World(config)
    role_totals = np.zeros(config.n_roles)
    grass_eaten = kills = resources = occupied = survivors = 0
    traces: list[list[dict]] | None = [] if collect_traces else None

    for ep in range(episodes):
        world.reset(seed=child_seed(seed, "episode", ep))
        obs = world.observe()
        ep_raw = np.zeros(n)
        records: list[dict] = []
        for _ in range(config.horizon):
            state = world.state
            actions = np.zeros((n, 2))
            for i in range(n):
                if state.alive[i]:
                    actions[i] = policies[i].act(obs[i])
            state, result = world.step(actions)
            obs = world.observe()
            ep_raw += result.raw
            for e in result.events:
                if e.kind == "eat-grass":
                    grass_eaten += 1
                elif e.kind in ("eat-sheep", "kill"):
                    kills += 1
                elif e.kind == "collect-resource":
                    resources += 1
                elif e.kind == "occupy-food":
                    occupied += 1
            if collect_traces:
                records.append(trace_record(state, actions, result))
        if config.kind == GRASSLAND:
            survivors += int(state.alive[roles == 0].sum())
        role_totals += [ep_raw[idx].mean() for idx in role_idx]
        if collect_traces:
            traces.append(records)

    stats: dict[str, float] = {}
    if config.kind == GRASSLAND:
        stats["grass_eaten"] = grass_eaten / episodes
        stats["survival_rate"] = survivors / (episodes * config.role_counts[0])
        stats["kills"] = kills / episodes
    elif config.kind == BATTLE:
        stats["kills"] = kills / episodes
        stats["resources"] = resources / episodes
    else:
        stats["coverage"] = occupied / (episodes * config.horizon * n)
    return MatchResult(
        role_rewards=[float(x / episodes) for x in role_totals],
        episodes=episodes,
        stats=stats,
        traces=traces,
    )


def cross_play(
    sets_role1,
    sets_role2,
    config: GameConfig,
    episodes: int,
    seed: int,
    collect_traces: bool = False,
) -> MatchResult:
    """Match two methods' sets (or one cooperative set) on one game.

    For the symmetric battle game both side assignments are played and each
    method's score is the average of its two sides.
    """
    if config.n_roles == 1:
        if sets_role2 is not None:
            raise ContractError(f"{config.kind} has a single role; pass sets_role2=None")
        return play_match(config, [sets_role1], episodes, seed, collect_traces)
    if sets_role2 is None:
        raise ContractError(f"{config.kind} needs sets for both roles")
    if config.kind == BATTLE:
        first = play_match(config, [sets_role1, sets_role2], episodes, seed, collect_traces)
        second = play_match(config, [sets_role2, sets_role1], episodes, seed, collect_traces)
        stats = {
            k: (first.stats[k] + second.stats[k]) / 2.0 for k in first.stats
        }
        merged_traces = None
        if collect_traces:
            merged_traces = first.traces + second.traces
        return MatchResult(
            role_rewards=[
                (first.role_rewards[0] + second.role_rewards[1]) / 2.0,
                (first.role_rewards[1] + second.role_rewards[0]) / 2.0,
            ],
            episodes=episodes,
            stats=stats,
            traces=merged_traces,
        )
    return play_match(config, [sets_role1, sets_role2], episodes, seed, collect_traces)


@dataclass
class ScoreTable:
    """Raw and min-max normalized scores per method and scale."""

    game: str
    raw: dict[str, dict[str, float]]
    normalized: dict[str, dict[str, float]]

    def rows(self) -> list[dict]:
        out = []
        for method in sorted(self.raw):
            for scl in sorted(self.raw[method]):
                out.append(
                    {
                        "method": method,
                        "game": self.game,
                        "scale": scl,
                        "raw": self.raw[method][scl],
                        "normalized": self.normalized[method][scl],
                    }
                )
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["method", "game", "scale", "raw", "normalized"])
            writer.writeheader()
            writer.writerows(self.rows())

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"game": self.game, "scores": self.rows()}, fh, indent=2)


def normalize_scores(raw: Mapping[str, Mapping[str, float]], game: str = "") -> ScoreTable:
    """Min-max rescale raw rewards per scale column; the lowest method maps to
    0 and the highest to 1. A degenerate all-equal column maps to all zeros."""
    methods = sorted(raw)
    if len(methods) < 2:
        raise ContractError("normalization needs at least 2 methods per column")
    scales = sorted({s for m in methods for s in raw[m]})
    normalized: dict[str, dict[str, float]] = {m: {} for m in methods}
    for scl in scales:
        column = {m: raw[m][scl] for m in methods if scl in raw[m]}
        if len(column) < 2:
            raise ContractError(f"scale {scl!r} has fewer than 2 methods")
        lo, hi = min(column.values()), max(column.values())
        for m, value in column.items():
            normalized[m][scl] = 0.0 if hi == lo else (value - lo) / (hi - lo)
    return ScoreTable(
        game=game,
        raw={m: dict(raw[m]) for m in methods},
        normalized=normalized,
    )


def behavior_stats(traces: Sequence[Sequence[dict]], config: GameConfig, stats: Sequence[str] | None = None) -> dict[str, float]:
    """Recompute behavior statistics from exported step traces."""
    allowed = _GAME_STATS[config.kind]
    wanted = tuple(stats) if stats is not None else allowed
    for name in wanted:
        if name not in allowed:
            raise ContractError(f"statistic {name!r} is not defined for {config.kind}")
    if not traces:
        raise ContractError("no traces given")

    def count_events(kind: str) -> float:
        return sum(
            sum(1 for e in rec["events"] if e["kind"] == kind) for ep in traces for rec in ep
        )

    out: dict[str, float] = {}
    episodes = len(traces)
    if "grass_eaten" in wanted:
        out["grass_eaten"] = count_events("eat-grass") / episodes
    if "kills" in wanted:
        kind = "eat-sheep" if config.kind == GRASSLAND else "kill"
        out["kills"] = count_events(kind) / episodes
    if "resources" in wanted:
        out["resources"] = count_events("collect-resource") / episodes
    if "survival_rate" in wanted:
        sheep = config.role_indices(0)
        alive_frac = [
            sum(ep[-1]["alive"][i] for i in sheep) / len(sheep) for ep in traces if ep
        ]
        out["survival_rate"] = float(np.mean(alive_frac))
    if "coverage" in wanted:
        steps = sum(len(ep) for ep in traces)
        out["coverage"] = count_events("occupy-food") / (steps * config.n_agents)
    return out


def generalization_test(best_sets: Sequence, config: GameConfig, episodes: int, seed: int) -> MatchResult:
    """Clone-double each role's set (no retraining) and evaluate the method
    at twice the trained population."""
    from .evolution import clone_double

    doubled = [clone_double(s) for s in best_sets]
    doubled_config = scale_config(config, 2)
    if doubled_config.n_roles == 1:
        return cross_play(doubled[0], None, doubled_config, episodes, seed)
    return cross_play(doubled[0], doubled[1], doubled_config, episodes, seed)
