"""Whole-system gates.

Each test here pins one end-to-end promise of the package: language
round-trips at volume, the shipped example tree behaving as written in a
live arena, compiled-tick equivalence with a reference interpreter,
gradient correctness, trained-skill quality bars, search convergence and
reproducibility, scheduler dominance, lossless policy export, and prompt
template fidelity. Budgets and thresholds are fixed numbers on purpose;
loosening them is a behavior change, not a test fix.
"""

import hashlib
import json
import random
import time

import numpy as np

from btarena import btree, cli, dsl, fps, genkit, neural, scheduler, search
from btarena.arena import make_world, observe, parse_map, run_episode, save_replay, step
from btarena.btree import compile_tree

from treegen import TEST_CATALOG, random_bytes_text, random_tree
from test_btree import const_table, reference_tick
from test_neural import _crossing_episodes, _scattered_map, finite_difference_grad, random_params
from test_search import ORACLE_TREE, TOY_MAP, WAIT_TREE, mutate_gen, toy_config
from test_scheduler import suite

S, F, R = btree.TickStatus.SUCCESS, btree.TickStatus.FAILURE, btree.TickStatus.RUNNING


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# language round-trips at volume


def test_dsl_survives_ten_thousand_round_trips_and_heavy_fuzzing():
    started = time.monotonic()
    rng = random.Random(108)
    for _ in range(10_000):
        tree = random_tree(rng)
        assert dsl.parse(dsl.to_canonical_dsl(tree)) == tree
        assert dsl.from_json(json.loads(json.dumps(dsl.to_json(tree)))) == tree
    fuzz = random.Random(109)
    for _ in range(100_000):
        try:
            dsl.parse(random_bytes_text(fuzz))
        except dsl.DslError:
            pass  # rejection is fine; crashing is not
    assert time.monotonic() - started < 60.0


# ---------------------------------------------------------------------------
# the shipped example tree, verbatim and in combat


CLOSE_MAP = (
    "12 8 close\n"
    "............\n"
    "............\n"
    "............\n"
    "A.....B.....\n"
    "............\n"
    "............\n"
    "............\n"
    "............\n"
)

FAR_MAP = (
    "24 8 far\n"
    "........................\n"
    "........................\n"
    "........................\n"
    "A......................B\n"
    "........................\n"
    "........................\n"
    "........................\n"
    "........................\n"
)


def test_example_tree_parses_exactly_and_fights_as_written():
    expected = dsl.selector(
        dsl.sequence(
            dsl.condition("has_enemy_in_view"),
            dsl.task("shoot", "random_enemy_in_view"),
        ),
        dsl.sequence(
            dsl.condition("has_enemy_in_view", negated=True),
            dsl.task("move_to", "random_enemy_location"),
        ),
    )
    tree = dsl.parse(fps.HUNT_TREE)
    assert tree == expected
    assert len(list(tree.walk())) == 7
    assert dsl.validate(tree, fps.CATALOG) == []

    def fresh_policy():
        p = compile_tree(tree, fps.CATALOG, fps.rule_bindings(), deterministic=True, seed=0)
        bb = btree.Blackboard()
        p.reset(bb)
        return p, bb

    # enemy 6 cells away, inside weapon range: engage (aim, then fire)
    world = make_world(parse_map(CLOSE_MAP), seed=0)
    policy, bb = fresh_policy()
    _, action = policy.tick(observe(world, "A0"), bb)
    assert action.kind == "aim"
    step(world, {"A0": action})
    _, action = policy.tick(observe(world, "A0"), bb)
    assert action.kind == "fire"

    # enemy 23 cells away, far out of range: close the distance instead
    world = make_world(parse_map(FAR_MAP), seed=0)
    policy, bb = fresh_policy()
    for _ in range(5):
        _, action = policy.tick(observe(world, "A0"), bb)
        assert action.kind == "move"
        step(world, {"A0": action})


# ---------------------------------------------------------------------------
# compiled tick equals the reference interpreter


def test_compiled_tick_matches_reference_interpreter_on_thousand_cases():
    rng = random.Random(26081501)
    statuses = (S, F, R)
    for case in range(1000):
        tree = random_tree(rng, max_depth=4)
        conds = {k: rng.random() < 0.5 for k in TEST_CATALOG.conditions}
        tasks = {
            a: (rng.choice(statuses), rng.choice((f"act_{a}", None)))
            for a in TEST_CATALOG.actions
        }
        policy = compile_tree(tree, TEST_CATALOG, const_table(tasks))
        got = policy.tick({"conds": conds}, btree.Blackboard())
        want = reference_tick(tree, conds, tasks)
        assert got == want, f"case {case}: {dsl.to_canonical_dsl(tree)}"


# ---------------------------------------------------------------------------
# gradients


def test_policy_gradient_matches_finite_differences_everywhere():
    rng = np.random.default_rng(26081502)
    for _ in range(100):
        params = random_params(rng)
        x = rng.normal(size=5)
        action = int(rng.integers(3))
        _, analytic = neural.log_prob_and_grad(params, x, action)
        fd = finite_difference_grad(params, x, action)
        for name in ("w1", "b1", "w2", "b2"):
            np.testing.assert_allclose(
                getattr(analytic, name), getattr(fd, name), rtol=1e-4, atol=1e-7
            )


# ---------------------------------------------------------------------------
# trained navigation quality


def test_trained_navigation_is_near_optimal_and_trains_fast(trained_nav):
    params, train_seconds = trained_nav
    assert train_seconds < 300.0, f"training took {train_seconds:.0f}s"
    ok = 0
    for grid, start, goal, opt in _crossing_episodes(_scattered_map):
        steps = neural.greedy_nav_rollout(params, grid, start, goal, max_steps=100)
        if steps is not None and steps <= 1.5 * opt:
            ok += 1
    assert ok >= 90, f"only {ok}/100 episodes within 1.5x optimal"


# ---------------------------------------------------------------------------
# search convergence on the kill range


def test_mutation_search_converges_to_oracle_on_kill_range():
    config = toy_config()  # 8 candidates, keep 2, 10 iterations
    started = time.monotonic()
    best, history = search.bfs_search(config, mutate_gen())
    assert time.monotonic() - started < 60.0
    curve = history.best_per_iteration
    assert len(curve) == 10
    assert all(v is not None for v in curve)
    assert all(b >= a for a, b in zip(curve, curve[1:])), f"curve decreased: {curve}"
    assert best.reward == curve[-1]
    oracle = search.evaluate(dsl.parse(ORACLE_TREE), config).reward
    assert oracle > 0
    assert best.reward >= 0.95 * oracle, f"best {best.reward} vs oracle {oracle}"


# ---------------------------------------------------------------------------
# tactical objective search lifts the tactical profile


TEAM_MAP = (
    "16 12 team\n"
    "................\n"
    "................\n"
    ".A......O......B\n"
    "................\n"
    "......####......\n"
    "................\n"
    "................\n"
    ".A.............B\n"
    "................\n"
    "................\n"
    "................\n"
    "................"
)


def test_tactical_objective_search_improves_tactical_profile():
    majority = 0
    for seed in (0, 1, 2):
        config = search.SearchConfig(
            maps=(TEAM_MAP,),
            n=6,
            k=2,
            iterations=5,
            episodes=3,
            max_ticks=150,
            objective="tactical",
            seed=seed,
        )
        best, history = search.bfs_search(config, mutate_gen(seed))
        first = min(
            (
                c
                for c in history.candidates
                if c.iteration == 0 and c.valid and c.reward is not None
            ),
            key=lambda c: c.sort_key(),
        )
        assert first.tactical is not None and best.tactical is not None
        first_scores = first.tactical.scores()
        best_scores = best.tactical.scores()
        held = sum(
            1 for dim in search.TACTICAL_DIMS if best_scores[dim] >= first_scores[dim]
        )
        if held >= 4:
            majority += 1
    assert majority >= 2, f"profile improved on only {majority}/3 seeds"


# ---------------------------------------------------------------------------
# bit-reproducible search pipeline


PIPELINE_TOML = """\
[search]
maps = ["toy.map"]
n = 8
k = 2
iterations = 10
episodes = 3
seed = 0

[arena]
max_ticks = 120

[generator]
mode = "mutate"
seed = 0
"""


def test_search_pipeline_is_bit_reproducible(tmp_path, capsys):
    (tmp_path / "toy.map").write_text(TOY_MAP)
    config = tmp_path / "toy.toml"
    config.write_text(PIPELINE_TOML)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["search", str(config), "--out", str(a)]) == 0
    assert cli.main(["search", str(config), "--out", str(b)]) == 0
    capsys.readouterr()
    for name in ("trajectories.jsonl", "scores.csv", "best.json"):
        assert sha(a / name) == sha(b / name), f"{name} differs between runs"


# ---------------------------------------------------------------------------
# scheduler beats every fixed tree


def test_trained_scheduler_beats_every_fixed_tree():
    library, scenarios, config = suite()
    labelset = scheduler.label_scenarios(library, scenarios, config)
    params = scheduler.train_scheduler(library, scenarios, config, labelset=labelset)
    assert scheduler.selection_accuracy(params, labelset) >= 0.95
    report = scheduler.evaluate_suite(
        params, library, scheduler.SwitchPolicy(), scenarios, config, labelset=labelset
    )
    for li in range(len(library)):
        assert report.scheduled_mean > report.fixed_means[li], (
            f"scheduler {report.scheduled_mean} does not beat "
            f"{library.entries[li].description} {report.fixed_means[li]}"
        )
    assert report.dominates()


# ---------------------------------------------------------------------------
# exporting and reimporting a policy changes nothing


def test_exported_tree_redeploys_with_identical_replay(tmp_path):
    source = dsl.parse(fps.HUNT_TREE)
    wire = json.dumps(dsl.to_json(source), sort_keys=True)
    reloaded = dsl.from_json(json.loads(wire))
    assert reloaded == source

    spec = parse_map(TOY_MAP)
    waiter = dsl.parse(WAIT_TREE)

    def replay_digest(tree, path):
        policies = {
            "A0": compile_tree(tree, fps.CATALOG, fps.rule_bindings(), deterministic=True, seed=11),
            "B0": compile_tree(waiter, fps.CATALOG, fps.rule_bindings(), deterministic=True, seed=12),
        }
        _, trace = run_episode(policies, spec, seed=5, max_ticks=150)
        save_replay(trace, path)
        return sha(path)

    original = replay_digest(source, tmp_path / "source.replay")
    redeployed = replay_digest(reloaded, tmp_path / "reloaded.replay")
    assert original == redeployed


# ---------------------------------------------------------------------------
# prompt template renders complete and clean


def test_prompt_template_renders_complete_and_clean():
    full = genkit.render(
        genkit.DEFAULT_TEMPLATE,
        genkit.build_context(
            fps.CATALOG,
            scenario="2v2 on a walled arena",
            tactics="hold the objective and trade aggressively",
            history_dsl="task: zap\n",
            history_message="unknown action 'zap'",
        ),
    )
    for header in (
        "# Task",
        "## Game Scenario",
        "## Available Nodes",
        "## Tactics",
        "## DSL Format",
        "## Response",
        "### History Format Errors",
    ):
        assert header in full, header
    assert full.index("# Task") < full.index("## Game Scenario")

    bare = genkit.render(
        genkit.DEFAULT_TEMPLATE,
        genkit.build_context(fps.CATALOG, scenario="1v1", tactics="win"),
    )
    assert "### History Format Errors" not in bare

    for rendered in (full, bare):
        for token in ("{{", "}}", "{%", "%}"):
            assert token not in rendered, f"residual template token {token}"
