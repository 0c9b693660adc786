"""Evolutionary population curriculum: stage-wise doubling with selection.

Each stage keeps K parallel agent sets per role. Moving to the next (doubled)
scale, the sets of one role are crossed by mix-and-match (all unordered pairs
concatenated), the per-role crossings are combined into C scaled games,
every game is fine-tuned independently (the guided mutation), mutants are
scored by raw evaluation reward against other mutants, and the top K per role
survive. Stage one just trains K independent games from scratch.

All randomness derives from the master seed, and mutant training seeds depend
only on (master seed, stage, mutant id), so serial and parallel execution
produce identical results, and an interrupted run resumed from its persisted
stage records reproduces the uninterrupted one.
"""

from __future__ import annotations

import itertools
import json
import multiprocessing
import os
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import seeding
from .envs import GameConfig
from .errors import ContractError
from .evaluation import play_match
from .maddpg import AgentLearner, MetricsWriter, TrainerConfig, make_learners, train
from .nets import NetSpec, net_spec_for
from .seeding import child_seed


@dataclass(frozen=True)
class Provenance:
    stage: int
    mutant_id: int = -1
    parents: tuple[int, int] | None = None


@dataclass
class AgentSet:
    """An ordered collection of learners of one role: the unit of evolution."""

    role: int
    learners: list[AgentLearner]
    provenance: Provenance

    @property
    def size(self) -> int:
        return len(self.learners)

    def clone(self, provenance: Provenance | None = None) -> "AgentSet":
        return AgentSet(
            role=self.role,
            learners=[l.clone() for l in self.learners],
            provenance=provenance or self.provenance,
        )


@dataclass
class ScaledGame:
    mutant_id: int
    sets: list[AgentSet]
    combo: tuple[int, ...]

    @property
    def learners(self) -> list[AgentLearner]:
        return [l for s in self.sets for l in s.learners]


@dataclass(frozen=True)
class StageConfig:
    """Curriculum schedule: per-stage scales plus evolution sizes."""

    scales: tuple[tuple[int, ...], ...]
    episodes_first: int
    episodes_stage: int
    k: int
    c: int | None = None  # None means C_max (full enumeration)
    eval_episodes: int = 100
    opponent_samples: int | None = None  # None means min(C, 3)

    def __post_init__(self):
        if not self.scales:
            raise ContractError("need at least one stage scale")
        norm = tuple(tuple(int(x) for x in s) for s in self.scales)
        object.__setattr__(self, "scales", norm)
        for prev, cur in zip(norm, norm[1:]):
            if len(prev) != len(cur) or any(2 * a != b for a, b in zip(prev, cur)):
                raise ContractError(f"populations must double between stages, got {prev} -> {cur}")
        if self.k < 1:
            raise ContractError("k must be >= 1")
        if self.episodes_first < 0 or self.episodes_stage < 0 or self.eval_episodes < 1:
            raise ContractError("invalid episode counts")

    def c_max(self, n_roles: int) -> int:
        return (self.k * (self.k + 1) // 2) ** n_roles

    def resolved_c(self, n_roles: int) -> int:
        cmax = self.c_max(n_roles)
        c = cmax if self.c is None else self.c
        if not 1 <= c <= cmax:
            raise ContractError(f"C must be in [1, {cmax}], got {c}")
        if c < self.k:
            raise ContractError(f"need at least K={self.k} mutants to select from, got C={c}")
        return c

    def resolved_opponent_samples(self, c: int) -> int:
        return min(c, 3) if self.opponent_samples is None else self.opponent_samples


@dataclass
class StageRecord:
    stage: int
    scale: list[int]
    games: list[dict]
    fitness: dict[int, list[float]]
    selected: dict[int, list[int]]
    episodes: int

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "scale": self.scale,
            "games": self.games,
            "fitness": {str(r): v for r, v in self.fitness.items()},
            "selected": {str(r): v for r, v in self.selected.items()},
            "episodes": self.episodes,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "StageRecord":
        return cls(
            stage=payload["stage"],
            scale=list(payload["scale"]),
            games=payload["games"],
            fitness={int(r): list(v) for r, v in payload["fitness"].items()},
            selected={int(r): list(v) for r, v in payload["selected"].items()},
            episodes=payload["episodes"],
        )


def clone_double(agent_set: AgentSet) -> AgentSet:
    """Double a set by cloning each member (targets copied, fresh Adam)."""
    if agent_set.size == 0:
        raise ContractError("cannot double an empty set")
    learners = [l.clone() for l in agent_set.learners] + [l.clone() for l in agent_set.learners]
    prov = replace(agent_set.provenance, parents=None)
    return AgentSet(role=agent_set.role, learners=learners, provenance=prov)


def mix_and_match(sets: Sequence[AgentSet]) -> list[AgentSet]:
    """Cross K parallel sets of one role into K(K+1)/2 doubled sets, one per
    unordered pair (self-pairing included)."""
    if not sets:
        raise ContractError("mix_and_match needs at least one set")
    sizes = {s.size for s in sets}
    roles = {s.role for s in sets}
    if len(sizes) != 1 or len(roles) != 1:
        raise ContractError("sets must share one role and one size")
    out = []
    for j1 in range(len(sets)):
        for j2 in range(j1, len(sets)):
            learners = [l.clone() for l in sets[j1].learners] + [l.clone() for l in sets[j2].learners]
            prov = Provenance(stage=sets[j1].provenance.stage, parents=(j1, j2))
            out.append(AgentSet(role=sets[j1].role, learners=learners, provenance=prov))
    return out


def compose_games(
    scaled_by_role: Sequence[Sequence[AgentSet]], c: int, rng: np.random.Generator
) -> list[ScaledGame]:
    """Combine one scaled set per role into C distinct games. With c equal to
    the number of combinations, enumerate them all; otherwise sample without
    replacement."""
    sizes = [len(sets) for sets in scaled_by_role]
    if any(n == 0 for n in sizes):
        raise ContractError("every role needs at least one scaled set")
    c_max = int(np.prod(sizes))
    if not 1 <= c <= c_max:
        raise ContractError(f"C must be in [1, {c_max}], got {c}")
    combos = list(itertools.product(*[range(n) for n in sizes]))
    if c < c_max:
        chosen = sorted(rng.choice(c_max, size=c, replace=False).tolist())
        combos = [combos[i] for i in chosen]
    games = []
    for g, combo in enumerate(combos):
        sets = []
        for r, pick in enumerate(combo):
            src = scaled_by_role[r][pick]
            prov = replace(src.provenance, mutant_id=g)
            sets.append(src.clone(provenance=prov))
        games.append(ScaledGame(mutant_id=g, sets=sets, combo=tuple(combo)))
    return games


def _mutation_task(payload):
    config, spec, lr, states, trainer_cfg, seed = payload
    learners = []
    for state in states:
        learner = AgentLearner(spec, np.random.default_rng(0), lr=lr)
        learner.load_state_dict(state)
        learners.append(learner)
    train(config, learners, trainer_cfg, seed)
    return [l.state_dict() for l in learners]


def mutate(
    games: Sequence[ScaledGame],
    config: GameConfig,
    trainer: TrainerConfig,
    episodes: int,
    master_seed: int,
    stage: int,
    workers: int = 1,
    metrics: MetricsWriter | None = None,
) -> None:
    """Fine-tune each composed game independently (the guided mutation).

    Games are disjoint, so they fan out perfectly to worker processes; with
    ``workers > 1`` training runs without metrics in subprocesses and the
    resulting parameters are loaded back. Zero episodes leaves every mutant
    exactly equal to its mix-and-match input.
    """
    if episodes == 0:
        return
    cfg = replace(trainer, episodes=episodes)
    seeds = {g.mutant_id: child_seed(master_seed, "stage", stage, "mutant", g.mutant_id) for g in games}
    if workers <= 1 or len(games) == 1:
        for game in games:
            train(
                config,
                game.learners,
                cfg,
                seeds[game.mutant_id],
                metrics=metrics,
                context={"stage": stage, "set_id": game.mutant_id, "seed": master_seed},
            )
        return
    spec = games[0].learners[0].spec
    lr = games[0].learners[0].lr
    payloads = [
        (config, spec, lr, [l.state_dict() for l in game.learners], cfg, seeds[game.mutant_id])
        for game in games
    ]
    ctx = multiprocessing.get_context("spawn")
    with ctx.Pool(min(workers, len(games))) as pool:
        results = pool.map(_mutation_task, payloads)
    for game, states in zip(games, results):
        for learner, state in zip(game.learners, states):
            learner.load_state_dict(state)


def fitness(
    role: int,
    mutant_index: int,
    sets_by_role: Sequence[Sequence[AgentSet]],
    config: GameConfig,
    eval_episodes: int,
    opponent_samples: int,
    eval_seed: int,
    rng: np.random.Generator | None = None,
) -> float:
    """Mean per-agent raw evaluation reward of one mutant set.

    With one role this is simply the set's own evaluation score. With several,
    opponents are drawn from the other roles' mutants; if ``opponent_samples``
    covers every combination the draw is replaced by full enumeration. Match
    seeds depend only on (eval_seed, draw index) so scores are paired across
    mutants.
    """
    n_roles = config.n_roles
    for r in range(n_roles):
        if r != role and len(sets_by_role[r]) == 0:
            raise ContractError(f"no opponent sets available for role {r}")
    if n_roles == 1:
        match = play_match(
            config, [sets_by_role[0][mutant_index]], eval_episodes, child_seed(eval_seed, "match", 0)
        )
        return match.role_rewards[0]

    other_roles = [r for r in range(n_roles) if r != role]
    all_combos = list(itertools.product(*[range(len(sets_by_role[r])) for r in other_roles]))
    if opponent_samples >= len(all_combos):
        combos = all_combos
    else:
        if rng is None:
            raise ContractError("opponent sampling needs an rng")
        picks = rng.integers(0, len(all_combos), size=opponent_samples)
        combos = [all_combos[i] for i in picks]
    scores = []
    for d, combo in enumerate(combos):
        lineup: list[AgentSet | None] = [None] * n_roles
        lineup[role] = sets_by_role[role][mutant_index]
        for r, pick in zip(other_roles, combo):
            lineup[r] = sets_by_role[r][pick]
        match = play_match(config, lineup, eval_episodes, child_seed(eval_seed, "match", d))
        scores.append(match.role_rewards[role])
    return float(np.mean(scores))


def select_top_k(scores: Sequence[float], k: int) -> list[int]:
    """Ids of the K largest fitness values, ties broken by lower id."""
    if k > len(scores):
        raise ContractError(f"cannot select top {k} from {len(scores)} scores")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


@dataclass
class CurriculumResult:
    best_sets: list[AgentSet]
    records: list[StageRecord]


def _record_path(out_dir: str, stage: int) -> str:
    return os.path.join(out_dir, f"stage_{stage:02d}.json")


def _set_path(out_dir: str, stage: int, role: int, rank: int) -> str:
    return os.path.join(out_dir, f"stage_{stage:02d}_role{role}_rank{rank}.ckpt")


def _persist_stage(out_dir, record: StageRecord, sets_by_role, master_seed, metadata_extra):
    from .checkpoint import save_agent_set

    os.makedirs(out_dir, exist_ok=True)
    for r, sets in enumerate(sets_by_role):
        for rank, agent_set in enumerate(sets):
            meta = {
                **metadata_extra,
                "stage": record.stage,
                "scale": record.scale,
                "role": r,
                "set_id": rank,
                "seed": master_seed,
            }
            save_agent_set(_set_path(out_dir, record.stage, r, rank), agent_set, meta)
    with open(_record_path(out_dir, record.stage), "w", encoding="utf-8") as fh:
        json.dump(record.to_json(), fh, indent=2)


def _load_stage(out_dir, stage: int, n_roles: int, k: int):
    from .checkpoint import load_agent_set

    path = _record_path(out_dir, stage)
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        record = StageRecord.from_json(json.load(fh))
    sets_by_role = []
    for r in range(n_roles):
        sets = []
        for rank in range(k):
            ckpt = _set_path(out_dir, stage, r, rank)
            if not os.path.exists(ckpt):
                return None
            agent_set, _ = load_agent_set(ckpt)
            sets.append(agent_set)
        sets_by_role.append(sets)
    return record, sets_by_role


def run_curriculum(
    game_factory: Callable[[tuple[int, ...]], GameConfig],
    stages: StageConfig,
    trainer: TrainerConfig,
    master_seed: int,
    spec: NetSpec | None = None,
    out_dir: str | None = None,
    workers: int = 1,
    metrics: MetricsWriter | None = None,
    max_stages: int | None = None,
) -> CurriculumResult:
    """Run the full curriculum and return the best set per role.

    With ``out_dir`` given, every completed stage persists its record and the
    selected sets' checkpoints; a rerun resumes after the last completed stage
    and reproduces the uninterrupted run exactly. ``max_stages`` stops early
    after that many stages (used to exercise interruption).
    """
    config0 = game_factory(stages.scales[0])
    n_roles = config0.n_roles
    if spec is None:
        spec = net_spec_for(config0)
    k = stages.k
    records: list[StageRecord] = []
    sets_by_role: list[list[AgentSet]] | None = None
    start_stage = 1

    if out_dir is not None:
        for stage in range(1, len(stages.scales) + 1):
            loaded = _load_stage(out_dir, stage, n_roles, k)
            if loaded is None:
                break
            record, sets = loaded
            records.append(record)
            sets_by_role = sets
            start_stage = stage + 1

    meta_extra = {
        "game": config0.kind,
        "embed_dim": spec.embed_dim,
        "key_dim": spec.key_dim,
        "hidden_dim": spec.hidden_dim,
        "lr": trainer.lr,
    }

    for stage in range(start_stage, len(stages.scales) + 1):
        if max_stages is not None and stage > max_stages:
            break
        config = game_factory(stages.scales[stage - 1])
        if stage == 1:
            sets_by_role = [[] for _ in range(n_roles)]
            games_info = []
            trained: list[list[AgentSet]] = []
            for j in range(k):
                learners = make_learners(config, spec, child_seed(master_seed, "stage", 1, "init", j), lr=trainer.lr)
                if stages.episodes_first > 0:
                    train(
                        config,
                        learners,
                        replace(trainer, episodes=stages.episodes_first),
                        child_seed(master_seed, "stage", 1, "mutant", j),
                        metrics=metrics,
                        context={"stage": 1, "set_id": j, "seed": master_seed},
                    )
                game_sets = []
                for r in range(n_roles):
                    idx = config.role_indices(r)
                    game_sets.append(
                        AgentSet(r, [learners[i] for i in idx], Provenance(stage=1, mutant_id=j))
                    )
                trained.append(game_sets)
                games_info.append({"mutant": j, "parents": None})
            mutants_by_role = [[trained[j][r] for j in range(k)] for r in range(n_roles)]
            episodes_used = stages.episodes_first
            n_candidates = k
        else:
            scaled = [mix_and_match(sets_by_role[r]) for r in range(n_roles)]
            c = stages.resolved_c(n_roles)
            games = compose_games(scaled, c, seeding.rng(master_seed, "stage", stage, "compose"))
            mutate(games, config, trainer, stages.episodes_stage, master_seed, stage, workers, metrics)
            mutants_by_role = [[g.sets[r] for g in games] for r in range(n_roles)]
            games_info = [
                {"mutant": g.mutant_id, "parents": {str(r): list(g.sets[r].provenance.parents) for r in range(n_roles)}}
                for g in games
            ]
            episodes_used = stages.episodes_stage
            n_candidates = len(games)

        eval_seed = child_seed(master_seed, "stage", stage, "eval")
        opp_samples = stages.resolved_opponent_samples(n_candidates)
        scores: dict[int, list[float]] = {}
        for r in range(n_roles):
            scores[r] = [
                fitness(
                    r,
                    c_idx,
                    mutants_by_role,
                    config,
                    stages.eval_episodes,
                    opp_samples,
                    eval_seed,
                    rng=seeding.rng(master_seed, "stage", stage, "opponents", r, c_idx),
                )
                for c_idx in range(n_candidates)
            ]
        selected = {r: select_top_k(scores[r], k) for r in range(n_roles)}
        sets_by_role = [[mutants_by_role[r][c_idx] for c_idx in selected[r]] for r in range(n_roles)]
        record = StageRecord(
            stage=stage,
            scale=list(stages.scales[stage - 1]),
            games=games_info,
            fitness=scores,
            selected=selected,
            episodes=episodes_used,
        )
        records.append(record)
        if out_dir is not None:
            _persist_stage(out_dir, record, sets_by_role, master_seed, meta_extra)

    if sets_by_role is None:
        raise ContractError("curriculum produced no stages")
    best = [sets_by_role[r][0] for r in range(n_roles)]
    return CurriculumResult(best_sets=best, records=records)
