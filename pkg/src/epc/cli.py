"""Command-line entry point.

Subcommands:

* ``train``      one fixed-scale game from scratch (the plain attention
                 MADDPG path); writes per-role checkpoints and JSONL metrics.
* ``evolve``     the full population curriculum; persists a record and the
                 selected sets' checkpoints per stage, and resumes after the
                 last completed stage on rerun.
* ``tournament`` full pairwise cross-play between checkpointed methods with
                 CSV/JSON score tables.

Exit codes: 0 success, 2 configuration or contract error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_agent_set, save_agent_set
from .config import ExperimentConfig, load_experiment_config
from .envs import BATTLE, FOOD, GRASSLAND, make_game
from .errors import ConfigError, ContractError
from .evaluation import cross_play, normalize_scores, play_match
from .evolution import AgentSet, Provenance, run_curriculum
from .maddpg import MetricsWriter, make_learners, train
from .seeding import child_seed


def _parse_scale_flag(token: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in token.split("-"))
    except ValueError:
        raise ConfigError(f"bad --scale {token!r}; expected N or A-B") from None


def _workers_from(args) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("EPC_WORKERS")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"EPC_WORKERS must be an integer, got {env!r}") from None
    return 0


def _apply_common_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    workers = _workers_from(args)
    if workers:
        cfg.workers = workers
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="master seed (all randomness derives from it)")
        p.add_argument("--workers", type=int, default=None, help="worker processes (or EPC_WORKERS)")
        p.add_argument("--out", type=str, default=None, help="output directory")

    p_train = sub.add_parser("train", help="train one fixed-scale game from scratch")
    p_train.add_argument("--config", required=True, help="experiment config path")
    p_train.add_argument("--scale", type=str, default=None, help='game scale, "N" or "A-B"')
    p_train.add_argument("--episodes", type=int, default=None, help="episode count override")
    common(p_train)

    p_evolve = sub.add_parser("evolve", help="run the evolutionary population curriculum")
    p_evolve.add_argument("--config", required=True)
    p_evolve.add_argument(
        "--vanilla-pc", action="store_true", help="clone-double only (no evolutionary selection)"
    )
    common(p_evolve)

    p_tour = sub.add_parser("tournament", help="pairwise cross-play between checkpointed methods")
    p_tour.add_argument("--game", required=True, help="game kind")
    p_tour.add_argument("--scale", required=True, type=str, help='game scale, "N" or "A-B"')
    p_tour.add_argument(
        "--method",
        action="append",
        required=True,
        metavar="NAME=CKPT[,CKPT]",
        help="method name and its checkpoint(s), role order; repeatable",
    )
    p_tour.add_argument("--episodes", type=int, default=10_000)
    common(p_tour)
    return parser


def _cmd_train(args) -> int:
    cfg = _apply_common_overrides(load_experiment_config(args.config), args)
    if args.episodes is not None:
        cfg.episodes = args.episodes
    scale = _parse_scale_flag(args.scale) if args.scale else None
    game = cfg.game_config(scale)
    spec = cfg.net_spec(game)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    learners = make_learners(game, spec, child_seed(cfg.seed, "init"), lr=cfg.lr)
    with MetricsWriter(os.path.join(out, "metrics.jsonl")) as metrics:
        result = train(
            game,
            learners,
            cfg.trainer_config(),
            child_seed(cfg.seed, "train"),
            metrics=metrics,
            context={"stage": 0, "set_id": 0, "seed": cfg.seed},
        )
    meta_common = {
        "game": game.kind,
        "scale": list(game.scale),
        "stage": 0,
        "seed": cfg.seed,
        "embed_dim": spec.embed_dim,
        "key_dim": spec.key_dim,
        "hidden_dim": spec.hidden_dim,
        "lr": cfg.lr,
    }
    for r in range(game.n_roles):
        idx = game.role_indices(r)
        role_set = AgentSet(r, [learners[i] for i in idx], Provenance(stage=0, mutant_id=0))
        save_agent_set(os.path.join(out, f"role{r}.ckpt"), role_set, {**meta_common, "set_id": 0})
    tail = result.role_rewards[-min(100, len(result.role_rewards)) :]
    print(f"trained {game.kind} {game.scale} for {len(result.role_rewards)} episodes")
    print(f"final-100 mean raw reward per role: {[round(float(x), 4) for x in tail.mean(axis=0)]}")
    return 0


def _cmd_evolve(args) -> int:
    cfg = _apply_common_overrides(load_experiment_config(args.config), args)
    cfg.require_game_kind()
    stages = cfg.stage_config(vanilla=args.vanilla_pc)
    factory = cfg.game_factory()
    spec = cfg.net_spec(factory(stages.scales[0]))
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    with MetricsWriter(os.path.join(out, "metrics.jsonl"), mode="a") as metrics:
        result = run_curriculum(
            factory,
            stages,
            cfg.trainer_config(),
            cfg.seed,
            spec=spec,
            out_dir=out,
            workers=cfg.workers,
            metrics=metrics,
        )
    final_config = factory(stages.scales[-1])
    best_paths = []
    for r, best in enumerate(result.best_sets):
        path = os.path.join(out, f"final_role{r}.ckpt")
        save_agent_set(
            path,
            best,
            {
                "game": final_config.kind,
                "scale": list(final_config.scale),
                "stage": len(result.records),
                "role": r,
                "set_id": 0,
                "seed": cfg.seed,
                "embed_dim": spec.embed_dim,
                "key_dim": spec.key_dim,
                "hidden_dim": spec.hidden_dim,
                "lr": cfg.lr,
            },
        )
        best_paths.append(path)
    summary = {
        "stages": [rec.to_json() for rec in result.records],
        "best_checkpoints": best_paths,
        "seed": cfg.seed,
    }
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(f"completed {len(result.records)} stage(s); best checkpoints: {best_paths}")
    return 0


def _parse_methods(tokens, n_roles: int) -> dict[str, list[str]]:
    methods: dict[str, list[str]] = {}
    for token in tokens:
        if "=" not in token:
            raise ConfigError(f"bad --method {token!r}; expected NAME=CKPT[,CKPT]")
        name, paths = token.split("=", 1)
        name = name.strip()
        parts = [p.strip() for p in paths.split(",") if p.strip()]
        if name in methods:
            raise ConfigError(f"duplicate method name {name!r}")
        if len(parts) != n_roles:
            raise ConfigError(f"method {name!r}: expected {n_roles} checkpoint(s), got {len(parts)}")
        methods[name] = parts
    return methods


def _load_method_sets(methods: dict[str, list[str]], game) -> dict[str, list]:
    loaded: dict[str, list] = {}
    for name, paths in methods.items():
        sets = []
        for r, path in enumerate(paths):
            agent_set, meta = load_agent_set(path)
            if meta["game"] != game.kind:
                raise ConfigError(f"{path}: checkpoint is for {meta['game']}, not {game.kind}")
            if agent_set.role != r:
                raise ConfigError(f"{path}: checkpoint holds role {agent_set.role}, expected {r}")
            if agent_set.size != game.role_counts[r]:
                raise ConfigError(
                    f"{path}: set size {agent_set.size} does not match scale {game.scale}"
                )
            sets.append(agent_set)
        loaded[name] = sets
    return loaded


def _cmd_tournament(args) -> int:
    seed = args.seed if args.seed is not None else 0
    scale = _parse_scale_flag(args.scale)
    game = make_game(args.game, scale if len(scale) > 1 else scale[0])
    methods = _parse_methods(args.method, game.n_roles)
    sets = _load_method_sets(methods, game)
    names = sorted(sets)
    scale_key = "-".join(str(c) for c in game.scale)
    episodes = args.episodes
    if episodes <= 0:
        raise ContractError("--episodes must be positive")

    if game.kind == FOOD:
        raw = {
            name: {scale_key: cross_play(sets[name][0], None, game, episodes, seed).role_rewards[0]}
            for name in names
        }
        tables = [normalize_scores(raw, game=game.kind)]
    elif game.kind == GRASSLAND:
        sheep_raw = {f"{n}/sheep": {} for n in names}
        wolf_raw = {f"{n}/wolves": {} for n in names}
        sheep_acc = {n: [] for n in names}
        wolf_acc = {n: [] for n in names}
        match_seed = child_seed(seed, "match")  # shared: scores are paired
        for a in names:
            for b in names:
                match = cross_play(sets[a][0], sets[b][1], game, episodes, match_seed)
                sheep_acc[a].append(match.role_rewards[0])
                wolf_acc[b].append(match.role_rewards[1])
        for n in names:
            sheep_raw[f"{n}/sheep"][scale_key] = float(np.mean(sheep_acc[n]))
            wolf_raw[f"{n}/wolves"][scale_key] = float(np.mean(wolf_acc[n]))
        tables = [
            normalize_scores(sheep_raw, game=game.kind),
            normalize_scores(wolf_raw, game=game.kind),
        ]
    else:  # battle: side 1 of A against side 2 of B, all ordered pairs
        side1_acc = {n: [] for n in names}
        side2_acc = {n: [] for n in names}
        match_seed = child_seed(seed, "match")
        for a in names:
            for b in names:
                match = play_match(game, [sets[a][0], sets[b][1]], episodes, match_seed)
                side1_acc[a].append(match.role_rewards[0])
                side2_acc[b].append(match.role_rewards[1])
        raw = {
            n: {scale_key: float((np.mean(side1_acc[n]) + np.mean(side2_acc[n])) / 2.0)}
            for n in names
        }
        tables = [normalize_scores(raw, game=game.kind)]

    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    rows = [row for table in tables for row in table.rows()]
    csv_path = os.path.join(out, "scores.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("method,game,scale,raw,normalized\n")
        for row in rows:
            fh.write(
                f"{row['method']},{row['game']},{row['scale']},{row['raw']},{row['normalized']}\n"
            )
    with open(os.path.join(out, "scores.json"), "w", encoding="utf-8") as fh:
        json.dump({"game": game.kind, "scores": rows}, fh, indent=2)
    for row in rows:
        print(
            f"{row['method']:30s} scale {row['scale']:>6s} raw {row['raw']:10.4f} "
            f"normalized {row['normalized']:.4f}"
        )
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "evolve":
            return _cmd_evolve(args)
        return _cmd_tournament(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
