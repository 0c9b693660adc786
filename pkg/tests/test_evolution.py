"""Clone-doubling, mix-and-match, game composition, fitness, selection."""

from __future__ import annotations

import json

import numpy as np
import pytest

from epc.envs import FOOD, GRASSLAND, World, make_game
from epc.errors import ContractError
from epc.evaluation import play_match
from epc.evolution import (
    AgentSet,
    Provenance,
    StageConfig,
    StageRecord,
    clone_double,
    compose_games,
    fitness,
    mix_and_match,
    mutate,
    run_curriculum,
    select_top_k,
)
from epc.maddpg import TrainerConfig, make_learners, train
from epc.nets import net_spec_for
from epc.seeding import child_seed, rng


def make_set(kind=FOOD, scale=2, seed=0, role=0):
    cfg = make_game(kind, scale)
    spec = net_spec_for(cfg, embed_dim=8, key_dim=4, hidden_dim=8)
    learners = make_learners(cfg, spec, seed=seed)
    idx = cfg.role_indices(role)
    return cfg, spec, AgentSet(role, [learners[i] for i in idx], Provenance(stage=1, mutant_id=seed))


def probe_actions(agent_set, world):
    obs = world.observe()
    return np.stack([l.policy.act(obs[i % len(obs)]) for i, l in enumerate(agent_set.learners)])


TINY_TRAINER = dict(batch_size=8, update_every=20, buffer_capacity=512)


# ---------------------------------------------------------------------------
# clone_double


def test_clone_double_doubles_and_matches_source_actions():
    cfg, spec, src = make_set(FOOD, 3)
    doubled = clone_double(src)
    assert doubled.size == 6
    world = World(make_game(FOOD, 3), seed=5)
    world.reset()
    obs = world.observe()[0]
    for k in range(3):
        a = doubled.learners[k].policy.act(obs)
        b = doubled.learners[k + 3].policy.act(obs)
        c = src.learners[k].policy.act(obs)
        assert (a == b).all() and (a == c).all()


def test_clone_double_twice_quadruples():
    _, _, src = make_set(FOOD, 2)
    assert clone_double(clone_double(src)).size == 8


def test_clone_identity_is_bitwise_on_random_observations():
    cfg, spec, src = make_set(FOOD, 2, seed=9)
    doubled = clone_double(src)
    world = World(cfg, seed=31)
    for _ in range(20):
        world.reset()
        obs = world.observe()[0]
        source = np.stack([l.policy.act(obs) for l in src.learners])
        tiled = np.stack([l.policy.act(obs) for l in doubled.learners])
        assert (tiled == np.concatenate([source, source])).all()


def test_clones_diverge_after_independent_noisy_training():
    cfg, spec, src = make_set(FOOD, 2, seed=3)
    a, b = clone_double(src), clone_double(src)
    game2 = make_game(FOOD, 4, horizon=10)
    cfg_t = TrainerConfig(episodes=8, **TINY_TRAINER)
    train(game2, a.learners, cfg_t, seed=111)
    train(game2, b.learners, cfg_t, seed=222)
    world = World(game2, seed=7)
    world.reset()
    assert not np.allclose(probe_actions(a, world), probe_actions(b, world), atol=1e-6)


# ---------------------------------------------------------------------------
# mix_and_match / compose_games


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_mix_and_match_size_is_k_choose_pairs(k):
    sets = [make_set(FOOD, 2, seed=i)[2] for i in range(k)]
    mixed = mix_and_match(sets)
    assert len(mixed) == k * (k + 1) // 2
    assert all(m.size == 4 for m in mixed)


def test_mix_and_match_k2_pairs():
    sets = [make_set(FOOD, 2, seed=i)[2] for i in range(2)]
    mixed = mix_and_match(sets)
    assert [m.provenance.parents for m in mixed] == [(0, 0), (0, 1), (1, 1)]


def test_mix_and_match_self_pair_equals_clone_double():
    cfg, spec, src = make_set(FOOD, 2, seed=4)
    mixed = mix_and_match([src])
    assert len(mixed) == 1
    doubled = clone_double(src)
    world = World(make_game(FOOD, 4), seed=3)
    world.reset()
    assert (probe_actions(mixed[0], world) == probe_actions(doubled, world)).all()


def test_mix_and_match_rejects_mismatched_sets():
    a = make_set(FOOD, 2, seed=0)[2]
    b = make_set(FOOD, 3, seed=1)[2]
    with pytest.raises(ContractError):
        mix_and_match([a, b])


def test_compose_games_enumerates_c_max():
    per_role = [
        [make_set(GRASSLAND, (1, 1), seed=i, role=0)[2] for i in range(3)],
        [make_set(GRASSLAND, (1, 1), seed=10 + i, role=1)[2] for i in range(3)],
    ]
    games = compose_games(per_role, 9, rng(0, "compose"))
    assert len(games) == 9
    assert sorted(g.combo for g in games) == [(i, j) for i in range(3) for j in range(3)]


def test_compose_games_samples_distinct_combos():
    per_role = [
        [make_set(GRASSLAND, (1, 1), seed=i, role=0)[2] for i in range(3)],
        [make_set(GRASSLAND, (1, 1), seed=10 + i, role=1)[2] for i in range(3)],
    ]
    games = compose_games(per_role, 4, rng(0, "compose"))
    combos = [g.combo for g in games]
    assert len(combos) == 4 and len(set(combos)) == 4


def test_compose_games_rejects_too_many():
    per_role = [[make_set(FOOD, 2, seed=i)[2] for i in range(3)]]
    with pytest.raises(ContractError):
        compose_games(per_role, 7, rng(0))


def test_c_max_formula():
    assert StageConfig(((2,), (4,)), 1, 1, k=2).c_max(2) == 9
    assert StageConfig(((2,), (4,)), 1, 1, k=3).c_max(1) == 6
    assert StageConfig(((2,), (4,)), 1, 1, k=2).c_max(1) == 3


def test_stage_config_requires_doubling():
    with pytest.raises(ContractError, match="double"):
        StageConfig(((3,), (5,)), 1, 1, k=2)
    StageConfig(((3, 2), (6, 4), (12, 8)), 1, 1, k=2)  # fine


# ---------------------------------------------------------------------------
# mutate


def _compose_tiny(k=2, n=2, seed0=0):
    sets = [make_set(FOOD, n, seed=seed0 + i)[2] for i in range(k)]
    mixed = mix_and_match(sets)
    games = compose_games([mixed], len(mixed), rng(0, "compose"))
    return games


def test_mutate_zero_episodes_is_identity():
    games = _compose_tiny()
    before = [[l.state_dict() for l in g.learners] for g in games]
    mutate(games, make_game(FOOD, 4, horizon=10), TrainerConfig(episodes=0, **TINY_TRAINER), 0, 99, 2)
    for g, snaps in zip(games, before):
        for l, snap in zip(g.learners, snaps):
            for name, arr in l.state_dict().items():
                assert (arr == snap[name]).all()


def test_mutants_with_distinct_seeds_diverge():
    games = _compose_tiny()
    game4 = make_game(FOOD, 4, horizon=10)
    mutate(games, game4, TrainerConfig(**TINY_TRAINER), episodes=6, master_seed=5, stage=2)
    world = World(game4, seed=11)
    world.reset()
    probes = [probe_actions(g.sets[0], world) for g in games]
    assert not np.allclose(probes[0], probes[1], atol=1e-6)
    assert not np.allclose(probes[1], probes[2], atol=1e-6)


def test_parallel_mutation_matches_serial():
    game4 = make_game(FOOD, 4, horizon=10)
    results = []
    for workers in (1, 2):
        games = _compose_tiny()
        mutate(games, game4, TrainerConfig(**TINY_TRAINER), episodes=4, master_seed=7, stage=2, workers=workers)
        world = World(game4, seed=13)
        world.reset()
        results.append([probe_actions(g.sets[0], world) for g in games])
    for serial, parallel in zip(*results):
        assert (serial == parallel).all()


# ---------------------------------------------------------------------------
# fitness and selection


def test_fitness_single_role_is_mean_match_reward():
    cfg = make_game(FOOD, 2, horizon=10)
    sets = [make_set(FOOD, 2, seed=i)[2] for i in range(3)]
    eval_seed = 123
    got = fitness(0, 1, [sets], cfg, eval_episodes=4, opponent_samples=1, eval_seed=eval_seed)
    want = play_match(cfg, [sets[1]], 4, child_seed(eval_seed, "match", 0)).role_rewards[0]
    assert got == pytest.approx(want, abs=1e-12)


def test_identical_mutants_score_identically_under_shared_seeds():
    cfg = make_game(FOOD, 2, horizon=10)
    base = make_set(FOOD, 2, seed=5)[2]
    twins = [base.clone(), base.clone()]
    scores = [
        fitness(0, j, [twins], cfg, eval_episodes=3, opponent_samples=1, eval_seed=7)
        for j in range(2)
    ]
    assert scores[0] == scores[1]


def test_two_role_fitness_with_enumeration_matches_brute_force():
    cfg = make_game(GRASSLAND, (2, 2), horizon=10)
    sheep = [make_set(GRASSLAND, (2, 2), seed=i, role=0)[2] for i in range(3)]
    wolves = [make_set(GRASSLAND, (2, 2), seed=20 + i, role=1)[2] for i in range(3)]
    eval_seed = 77
    got = fitness(
        0, 1, [sheep, wolves], cfg, eval_episodes=2, opponent_samples=3, eval_seed=eval_seed
    )
    brute = [
        play_match(cfg, [sheep[1], wolves[k]], 2, child_seed(eval_seed, "match", k)).role_rewards[0]
        for k in range(3)
    ]
    assert got == pytest.approx(float(np.mean(brute)), abs=1e-12)


def test_fitness_requires_opponents():
    cfg = make_game(GRASSLAND, (2, 2), horizon=10)
    sheep = [make_set(GRASSLAND, (2, 2), seed=0, role=0)[2]]
    with pytest.raises(ContractError, match="opponent"):
        fitness(0, 0, [sheep, []], cfg, eval_episodes=2, opponent_samples=1, eval_seed=0)


def test_select_top_k_examples():
    assert select_top_k([5, 3, 8, 1], 2) == [2, 0]
    assert select_top_k([4.0, 4.0, 4.0], 2) == [0, 1]
    with pytest.raises(ContractError):
        select_top_k([1.0], 2)


def test_select_top_k_matches_sorting_oracle():
    rng_ = np.random.default_rng(0)
    for _ in range(100):
        c = int(rng_.integers(1, 12))
        k = int(rng_.integers(1, c + 1))
        scores = rng_.choice([0.0, 1.0, 2.5, -3.0, 7.0], size=c).tolist()
        got = select_top_k(scores, k)
        want = sorted(range(c), key=lambda i: (-scores[i], i))[:k]
        assert got == want
        # survivor dominance
        if k < c:
            assert min(scores[i] for i in got) >= max(
                scores[i] for i in range(c) if i not in got
            )


def test_selection_invariant_to_affine_fitness_rescaling():
    rng_ = np.random.default_rng(1)
    for _ in range(50):
        scores = rng_.standard_normal(6).tolist()
        base = select_top_k(scores, 3)
        scaled = [4.2 * s for s in scores]
        shifted = [s + 17.0 for s in scores]
        assert select_top_k(scaled, 3) == base
        assert select_top_k(shifted, 3) == base


# ---------------------------------------------------------------------------
# run_curriculum


def tiny_stage_config(scales, k=2, c=None):
    return StageConfig(
        scales=scales,
        episodes_first=4,
        episodes_stage=3,
        k=k,
        c=c,
        eval_episodes=2,
    )


def tiny_factory(kind=FOOD):
    def factory(scale):
        return make_game(kind, scale if len(scale) > 1 else scale[0], horizon=10)

    return factory


def run_tiny(master_seed=5, out_dir=None, scales=((2,), (4,)), k=2, max_stages=None, kind=FOOD):
    factory = tiny_factory(kind)
    spec = net_spec_for(factory(scales[0]), embed_dim=8, key_dim=4, hidden_dim=8)
    return run_curriculum(
        factory,
        tiny_stage_config(scales, k=k),
        TrainerConfig(**TINY_TRAINER),
        master_seed,
        spec=spec,
        out_dir=out_dir,
        max_stages=max_stages,
    )


def test_degenerate_curriculum_returns_best_initial_set():
    result = run_tiny(scales=((2,),))
    assert len(result.records) == 1
    rec = result.records[0]
    assert rec.stage == 1
    assert rec.selected[0][0] == int(np.argmax(rec.fitness[0]))
    assert result.best_sets[0].size == 2


def test_two_stage_curriculum_completes_with_records():
    result = run_tiny(scales=((2,), (4,)))
    assert [r.stage for r in result.records] == [1, 2]
    assert result.records[1].scale == [4]
    assert len(result.records[1].fitness[0]) == 3  # C_max for K=2, one role
    assert result.best_sets[0].size == 4
    # selected are exactly the top-K of the fitness table
    for rec in result.records:
        scores = rec.fitness[0]
        assert rec.selected[0] == select_top_k(scores, 2)


def test_curriculum_is_reproducible_from_master_seed():
    a = run_tiny(master_seed=9)
    b = run_tiny(master_seed=9)
    assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]
    world = World(make_game(FOOD, 4, horizon=10), seed=3)
    world.reset()
    assert (probe_actions(a.best_sets[0], world) == probe_actions(b.best_sets[0], world)).all()


def test_curriculum_two_role_game():
    result = run_tiny(scales=(((1, 1)), (2, 2)), kind=GRASSLAND)
    assert len(result.best_sets) == 2
    assert result.best_sets[0].role == 0 and result.best_sets[1].role == 1
    assert result.best_sets[0].size == 2


def test_resume_matches_uninterrupted_run(tmp_path):
    full_dir = tmp_path / "full"
    part_dir = tmp_path / "part"
    full = run_tiny(master_seed=13, out_dir=str(full_dir))
    run_tiny(master_seed=13, out_dir=str(part_dir), max_stages=1)
    assert (part_dir / "stage_01.json").exists()
    assert not (part_dir / "stage_02.json").exists()
    resumed = run_tiny(master_seed=13, out_dir=str(part_dir))
    assert [r.to_json() for r in resumed.records] == [r.to_json() for r in full.records]
    world = World(make_game(FOOD, 4, horizon=10), seed=3)
    world.reset()
    assert (probe_actions(resumed.best_sets[0], world) == probe_actions(full.best_sets[0], world)).all()
    a = json.loads((full_dir / "stage_02.json").read_text())
    b = json.loads((part_dir / "stage_02.json").read_text())
    assert a == b


def test_stage_record_json_round_trip():
    rec = StageRecord(
        stage=2,
        scale=[4],
        games=[{"mutant": 0, "parents": {"0": [0, 1]}}],
        fitness={0: [1.5, 2.5, 0.5]},
        selected={0: [1, 0]},
        episodes=3,
    )
    assert StageRecord.from_json(rec.to_json()) == rec
