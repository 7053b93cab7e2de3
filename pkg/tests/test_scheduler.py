"""Scheduler coverage: library plumbing, selection, switching, training.

The two-scenario suite is built so each tree wins exactly one scenario: the
hunter collects kills on the open brawl map, the camper racks up objective
ticks on the hold map. A correct selector therefore beats both fixed trees
on the mixed suite.
"""

import json
import warnings

import numpy as np
import pytest

from btarena import dsl, fps, scheduler
from btarena.arena import Observation, parse_map, run_episode
from btarena.btree import HandlerTable, TaskHandler, TickStatus, compile_tree
from btarena.neural import NetParams, init_params, save_params

HUNTER = (
    "selector:\n"
    "  sequence:\n"
    "    condition: has_enemy_in_view\n"
    "    task: shoot nearest_enemy_in_view\n"
    "  task: move_to nearest_enemy_location\n"
)

CAMPER = (
    "selector:\n"
    "  sequence:\n"
    "    condition: has_enemy_in_view\n"
    "    task: shoot nearest_enemy_in_view\n"
    "  sequence:\n"
    "    condition: no\n"
    "    condition: at_objective\n"
    "    task: move_to objective_location\n"
    "  task: wait\n"
)

WAIT = "task: wait\n"

BRAWL = ("16 10 brawl\n" + "................\n" * 3 + "A..............B\n" + "................\n" * 6).rstrip("\n")
HOLD = ("16 10 hold\n" + "................\n" * 3 + "A.O............B\n" + "................\n" * 6).rstrip("\n")


def suite():
    library = scheduler.make_library(
        [("hunt the enemy down", HUNTER), ("hold the objective", CAMPER)]
    )
    scenarios = [
        scheduler.Scenario("brawl", BRAWL, objective="kills"),
        scheduler.Scenario("hold", HOLD, objective="objective_ticks"),
    ]
    return library, scenarios, scheduler.SchedulerConfig(episodes=3, max_ticks=150, seed=0)


def make_obs(**kw) -> Observation:
    base = dict(
        tick=0,
        agent_id="A0",
        team="A",
        position=(2.5, 2.5),
        facing=(1.0, 0.0),
        health=100,
        ammo=100,
        alive=True,
        width=16,
        height=10,
        obstacles=frozenset(),
        visible_enemies=(),
        known_enemies={},
        allies=(),
        objectives=(),
    )
    base.update(kw)
    return Observation(**base)


# ---------------------------------------------------------------------------
# library


def test_library_rejects_duplicate_descriptions():
    with pytest.raises(scheduler.SchedulerError, match="duplicate-description"):
        scheduler.make_library([("same", HUNTER), ("same", CAMPER)])


def test_library_rejects_invalid_trees_and_emptiness():
    with pytest.raises(scheduler.SchedulerError, match="invalid-tree"):
        scheduler.make_library([("broken", "task: teleport\n")])
    with pytest.raises(scheduler.SchedulerError, match="empty-library"):
        scheduler.make_library([])


def test_manifest_round_trip(tmp_path):
    nav = init_params(37, 8, 9, np.random.default_rng(0))
    save_params(nav, tmp_path / "nav.pnet")
    manifest = [
        {"description": "rule hunter", "tree": dsl.to_json(dsl.parse(HUNTER))},
        {
            "description": "neural hunter",
            "tree": dsl.to_json(dsl.parse(HUNTER)),
            "weights": "nav.pnet",
        },
    ]
    path = tmp_path / "library.json"
    path.write_text(json.dumps(manifest))
    library = scheduler.load_library(path)
    assert len(library) == 2
    assert library.entries[0].description == "rule hunter"
    policy = library.entries[1].build(0)
    assert policy.node_count == 5


@pytest.mark.parametrize(
    "doc",
    ["{}", "[]", '[{"description": "x"}]', '[{"tree": {}}]'],
)
def test_bad_manifests_are_rejected(tmp_path, doc):
    path = tmp_path / "library.json"
    path.write_text(doc)
    with pytest.raises(scheduler.SchedulerError, match="bad-manifest"):
        scheduler.load_library(path)


# ---------------------------------------------------------------------------
# features and selection


def test_features_are_bounded_and_fixed_length():
    obs = make_obs(
        visible_enemies=(("B0", (9.5, 2.5)),),
        known_enemies={"B0": (9, 2), "B1": (14, 8)},
        allies=(("A1", (4.5, 2.5)),),
        objectives=((2, 2), (12, 7)),
        health=40,
        ammo=250,
    )
    feats = scheduler.scenario_features(obs)
    assert feats.shape == (scheduler.SCENARIO_FEATURE_DIM,)
    assert np.all(feats >= -1.0) and np.all(feats <= 1.0)


def test_objective_possession_flag():
    on = make_obs(position=(2.5, 2.5), objectives=((2, 2),))
    off = make_obs(position=(5.5, 5.5), objectives=((2, 2),))
    assert scheduler.scenario_features(on)[10] == 1.0
    assert scheduler.scenario_features(off)[10] == 0.0


def zero_params(library_size: int) -> scheduler.SchedulerParams:
    dim = scheduler.SCENARIO_FEATURE_DIM
    net = NetParams(
        w1=np.zeros((4, dim), dtype=np.float32),
        b1=np.zeros(4, dtype=np.float32),
        w2=np.zeros((library_size, 4), dtype=np.float32),
        b2=np.zeros(library_size, dtype=np.float32),
    )
    return scheduler.SchedulerParams(net=net)


def test_single_entry_library_always_selects_zero():
    library = scheduler.make_library([("only", WAIT)])
    bogus = zero_params(7)  # wrong dims on purpose
    assert scheduler.select(bogus, library, make_obs()) == 0


def test_zero_params_tie_break_to_lowest_index():
    library = scheduler.make_library([("a", HUNTER), ("b", CAMPER)])
    assert scheduler.select(zero_params(2), library, make_obs()) == 0


def test_dimension_mismatch_is_reported():
    library = scheduler.make_library([("a", HUNTER), ("b", CAMPER), ("c", WAIT)])
    with pytest.raises(scheduler.SchedulerError, match="dim-mismatch"):
        scheduler.select(zero_params(2), library, make_obs())


def test_positive_logit_scaling_never_changes_selection():
    library, scenarios, config = suite()
    params = scheduler.train_scheduler(library, scenarios, config)
    net = params.net
    scaled = scheduler.SchedulerParams(
        net=NetParams(w1=net.w1, b1=net.b1, w2=net.w2 * 3.7, b2=net.b2 * 3.7)
    )
    rng = np.random.default_rng(1)
    for _ in range(50):
        feats = rng.uniform(-1, 1, scheduler.SCENARIO_FEATURE_DIM)
        assert scheduler.select_from_features(
            params, library, feats
        ) == scheduler.select_from_features(scaled, library, feats)


def test_review_period_must_be_positive():
    with pytest.raises(scheduler.SchedulerError, match="bad-arg"):
        scheduler.SwitchPolicy(review_period=0)


# ---------------------------------------------------------------------------
# scheduled execution


def test_single_entry_schedule_matches_plain_episode():
    library = scheduler.make_library([("hunter", HUNTER)])
    spec = parse_map(BRAWL)
    seed = 3
    metrics, log = scheduler.run_scheduled_episode(
        zero_params(1), library, scheduler.SwitchPolicy(), spec, seed, max_ticks=120
    )
    table = fps.rule_bindings()
    plain = {
        "A0": compile_tree(dsl.parse(HUNTER), fps.CATALOG, table, deterministic=True, seed=seed * 31),
        "B0": compile_tree(dsl.parse(WAIT), fps.CATALOG, table, deterministic=True, seed=seed * 31 + 17),
    }
    plain_metrics, _ = run_episode(plain, spec, seed=seed, max_ticks=120)
    assert log == []
    assert metrics.to_dict() == plain_metrics.to_dict()


def test_long_review_period_never_switches():
    library = scheduler.make_library([("a", WAIT), ("b", "selector:\n  task: wait\n")])
    metrics, log = scheduler.run_scheduled_episode(
        zero_params(2),
        library,
        scheduler.SwitchPolicy(review_period=10_000),
        BRAWL,
        seed=0,
        max_ticks=60,
    )
    assert log == []


def test_alternating_stub_switches_exactly_at_review_boundaries():
    library = scheduler.make_library([("a", WAIT), ("b", "selector:\n  task: wait\n")])
    calls = []

    def stub(params, lib, obs):
        calls.append(obs.tick)
        return len(calls) % 2  # 1, 0, 1, 0, ... so every review flips

    _, log = scheduler.run_scheduled_episode(
        zero_params(2),
        library,
        scheduler.SwitchPolicy(review_period=10),
        BRAWL,
        seed=0,
        max_ticks=45,
        select_fn=stub,
    )
    assert [event.tick for event in log] == [10, 20, 30, 40]
    assert [(event.from_index, event.to_index) for event in log] == [
        (1, 0),
        (0, 1),
        (1, 0),
        (0, 1),
    ]


def test_root_completion_triggers_immediate_reselection():
    # bare-condition roots finish every tick, so an alternating stub switches
    # every tick regardless of the huge review period
    library = scheduler.make_library(
        [("a", "condition: has_enemy_in_view\n"), ("b", "condition: at_objective\n")]
    )
    flips = [0]

    def stub(params, lib, obs):
        flips[0] += 1
        return flips[0] % 2

    _, log = scheduler.run_scheduled_episode(
        zero_params(2),
        library,
        scheduler.SwitchPolicy(review_period=10_000),
        BRAWL,
        seed=0,
        max_ticks=6,
        select_fn=stub,
    )
    assert [event.tick for event in log] == [1, 2, 3, 4, 5]


def test_switch_resets_the_outgoing_instance():
    resets = []

    class Probe(TaskHandler):
        def __init__(self, tag):
            self.tag = tag

        def tick(self, obs, bb, rt):
            return TickStatus.RUNNING, None

        def reset(self):
            resets.append(self.tag)

    catalog = dsl.NodeCatalog(
        conditions={}, actions={"probe": dsl.ActionSpec((), "records resets")}
    )
    table = HandlerTable(rule_tasks={"probe": lambda param: Probe("x")})
    library = scheduler.make_library(
        [("first", "task: probe\n"), ("second", "task: probe\n")],
        catalog=catalog,
        table=table,
    )
    baseline = len(resets)

    def stub(params, lib, obs):
        return 1 if obs.tick >= 5 else 0

    scheduler.run_scheduled_episode(
        zero_params(2),
        library,
        scheduler.SwitchPolicy(review_period=5),
        BRAWL,
        seed=0,
        max_ticks=12,
        select_fn=stub,
    )
    assert len(resets) > baseline  # the outgoing tree's handler was reset


# ---------------------------------------------------------------------------
# training and dominance


def test_labels_pick_the_right_winner_per_scenario():
    library, scenarios, config = suite()
    labelset = scheduler.label_scenarios(library, scenarios, config)
    assert labelset.rewards.shape == (2, 2)
    assert np.argmax(labelset.rewards[0]) == 0  # hunter wins the brawl
    assert np.argmax(labelset.rewards[1]) == 1  # camper wins the hold
    assert labelset.rewards[0, 0] > labelset.rewards[0, 1]
    assert labelset.rewards[1, 1] > labelset.rewards[1, 0]
    assert set(np.unique(labelset.labels)) == {0, 1}
    assert len(labelset.features) == len(labelset.labels) > 0


def test_training_is_reproducible_and_accurate():
    library, scenarios, config = suite()
    labelset = scheduler.label_scenarios(library, scenarios, config)
    p1 = scheduler.train_scheduler(library, scenarios, config, labelset=labelset)
    p2 = scheduler.train_scheduler(library, scenarios, config, labelset=labelset)
    assert all(
        np.array_equal(getattr(p1.net, f), getattr(p2.net, f)) for f in ("w1", "b1", "w2", "b2")
    )
    assert scheduler.selection_accuracy(p1, labelset) >= 0.99


def test_trained_scheduler_dominates_both_fixed_trees():
    library, scenarios, config = suite()
    labelset = scheduler.label_scenarios(library, scenarios, config)
    params = scheduler.train_scheduler(library, scenarios, config, labelset=labelset)
    report = scheduler.evaluate_suite(
        params, library, scheduler.SwitchPolicy(), scenarios, config, labelset=labelset
    )
    assert report.dominates()
    for li in range(len(library)):
        assert report.scheduled_mean > report.fixed_means[li]


def test_scheduled_choices_match_labels_on_nearly_all_episodes():
    library, scenarios, config = suite()
    labelset = scheduler.label_scenarios(library, scenarios, config)
    params = scheduler.train_scheduler(library, scenarios, config, labelset=labelset)
    expected = np.argmax(labelset.rewards, axis=1)
    hits = total = 0
    for si, scenario in enumerate(scenarios):
        for e in range(config.episodes):
            first_choice = []

            def recorder(p, lib, obs, _sink=first_choice):
                idx = scheduler.select(p, lib, obs)
                if not _sink:
                    _sink.append(idx)
                return idx

            scheduler.run_scheduled_episode(
                params,
                library,
                scheduler.SwitchPolicy(),
                scenario.map_text,
                config.seed + 101 * si + e,
                opponent=scenario.opponent,
                max_ticks=config.max_ticks,
                select_fn=recorder,
            )
            hits += first_choice[0] == expected[si]
            total += 1
    assert hits / total >= 0.95


def test_one_sided_labels_warn_but_train():
    library, scenarios, config = suite()
    with pytest.warns(RuntimeWarning, match="no-selection-signal"):
        params = scheduler.train_scheduler(library, scenarios[:1], config)
    assert isinstance(params, scheduler.SchedulerParams)


def test_single_scenario_single_tree_is_trivially_exact():
    library = scheduler.make_library([("only", HUNTER)])
    scenarios = [scheduler.Scenario("brawl", BRAWL, objective="kills")]
    config = scheduler.SchedulerConfig(episodes=3, max_ticks=60, seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        labelset = scheduler.label_scenarios(library, scenarios, config)
        params = scheduler.train_scheduler(library, scenarios, config, labelset=labelset)
    assert scheduler.selection_accuracy(params, labelset) == 1.0


def test_bad_scenarios_and_configs_are_rejected():
    with pytest.raises(scheduler.SchedulerError, match="bad-objective"):
        scheduler.Scenario("x", BRAWL, objective="style_points")
    with pytest.raises(scheduler.SchedulerError, match="bad-config"):
        scheduler.SchedulerConfig(lr=0.0)
    library, scenarios, config = suite()
    with pytest.raises(scheduler.SchedulerError, match="bad-config"):
        scheduler.label_scenarios(library, [], config)
