"""Compiled-policy semantics, checked against a memoryless reference interpreter.

The reference interpreter below re-derives selector/sequence/negation/action
propagation by plain recursion over the tree with constant handler tables. A
tick of a freshly reset compiled policy must agree with it exactly; the
memory/reactive behaviors that only show up across ticks are pinned by the
targeted multi-tick tests further down.
"""

import random

import pytest

from btarena import btree, dsl
from btarena.btree import TickStatus
from treegen import TEST_CATALOG, random_tree
from test_dsl import HUNT_TREE

S, F, R = TickStatus.SUCCESS, TickStatus.FAILURE, TickStatus.RUNNING


# -- scripted handlers ------------------------------------------------------


class ConstTask(btree.TaskHandler):
    """Always returns the same (status, action)."""

    def __init__(self, status, action):
        self.status = status
        self.action = action

    def tick(self, obs, bb, rt):
        return self.status, self.action


class ScriptTask(btree.TaskHandler):
    """Plays a fixed status script, then repeats the last entry. Counts resets."""

    def __init__(self, steps, action="act"):
        self.steps = steps
        self.action = action
        self.i = 0
        self.resets = 0

    def tick(self, obs, bb, rt):
        status = self.steps[min(self.i, len(self.steps) - 1)]
        self.i += 1
        return status, f"{self.action}#{self.i}"

    def reset(self):
        self.i = 0
        self.resets += 1


def make_table(cond_lookup, task_factories):
    """Bindings over the whole test catalog; conditions read obs['conds']."""
    return btree.HandlerTable(
        conditions={k: (lambda obs, _k=k: cond_lookup(obs, _k)) for k in TEST_CATALOG.conditions},
        rule_tasks={a: task_factories[a] for a in TEST_CATALOG.actions},
        neural_tasks={},
    )


def obs_conds(obs, key):
    return obs["conds"][key]


def const_table(task_values):
    return make_table(obs_conds, {a: (lambda param, _a=a: ConstTask(*task_values[_a])) for a in TEST_CATALOG.actions})


# -- reference interpreter (oracle) -----------------------------------------


def reference_tick(node, conds, tasks):
    """Exhaustive recursion, no memory: the semantics oracle for one tick."""
    if node.kind == dsl.CONDITION:
        ok = conds[node.key] != node.negated
        return (S if ok else F), None
    if node.kind == dsl.TASK:
        return tasks[node.action]
    action = None
    if node.kind == dsl.SEQUENCE:
        for child in node.children:
            status, act = reference_tick(child, conds, tasks)
            if act is not None:
                action = act
            if status is not S:
                return status, action
        return S, action
    for child in node.children:
        status, act = reference_tick(child, conds, tasks)
        if act is not None:
            action = act
        if status is not F:
            return status, action
    return F, action


def test_compiled_first_tick_matches_reference_on_random_cases():
    rng = random.Random(20260815)
    statuses = (S, F, R)
    for case in range(1000):
        tree = random_tree(rng, max_depth=4)
        conds = {k: rng.random() < 0.5 for k in TEST_CATALOG.conditions}
        tasks = {
            a: (rng.choice(statuses), rng.choice((f"act_{a}", None)))
            for a in TEST_CATALOG.actions
        }
        policy = btree.compile_tree(tree, TEST_CATALOG, const_table(tasks))
        got = policy.tick({"conds": conds}, btree.Blackboard())
        want = reference_tick(tree, conds, tasks)
        assert got == want, f"case {case}: {dsl.to_canonical_dsl(tree)} conds={conds} tasks={tasks}"


# -- compilation -------------------------------------------------------------


def test_hunt_tree_compiles_to_seven_preorder_nodes():
    policy = btree.compile_tree(HUNT_TREE, TEST_CATALOG, const_table({a: (S, None) for a in TEST_CATALOG.actions}))
    assert policy.node_count == 7
    kinds = [n.kind for n in policy.nodes]
    assert kinds == ["selector", "sequence", "condition", "task", "sequence", "condition", "task"]


def test_single_task_tree_compiles_to_two_nodes():
    tree = dsl.parse("selector:\n  task: idle\n")
    policy = btree.compile_tree(tree, TEST_CATALOG, const_table({a: (S, None) for a in TEST_CATALOG.actions}))
    assert policy.node_count == 2


def test_compile_rejects_missing_bindings():
    table = btree.HandlerTable(conditions={}, rule_tasks={}, neural_tasks={})
    with pytest.raises(btree.CompileError) as exc:
        btree.compile_tree(HUNT_TREE, TEST_CATALOG, table)
    assert exc.value.code == "unbound-handler"


def test_compile_rejects_action_bound_both_ways():
    factories = {a: (lambda param: ConstTask(S, None)) for a in TEST_CATALOG.actions}
    table = btree.HandlerTable(
        conditions={k: (lambda obs: True) for k in TEST_CATALOG.conditions},
        rule_tasks=factories,
        neural_tasks={"shoot": factories["shoot"]},
    )
    with pytest.raises(btree.CompileError) as exc:
        btree.compile_tree(HUNT_TREE, TEST_CATALOG, table)
    assert exc.value.code == "ambiguous-handler"


def test_compile_rejects_invalid_tree():
    bad = dsl.selector(dsl.condition("not_in_catalog"))
    with pytest.raises(dsl.DslError):
        btree.compile_tree(bad, TEST_CATALOG, const_table({a: (S, None) for a in TEST_CATALOG.actions}))


def test_compile_handles_aliased_subtrees():
    shared = dsl.task("idle")
    tree = dsl.selector(shared, shared)  # same object twice
    policy = btree.compile_tree(tree, TEST_CATALOG, const_table({a: (S, None) for a in TEST_CATALOG.actions}))
    assert policy.node_count == 3


# -- multi-tick semantics -----------------------------------------------------


def test_sequence_memory_skips_satisfied_guard():
    work = ScriptTask([R, R, S])
    tree = dsl.sequence(dsl.condition("low_health"), dsl.task("idle"))
    table = make_table(obs_conds, {
        **{a: (lambda param: ConstTask(S, None)) for a in TEST_CATALOG.actions},
        "idle": (lambda param: work),
    })
    policy = btree.compile_tree(tree, TEST_CATALOG, table)
    bb = btree.Blackboard()
    obs = {"conds": {k: False for k in TEST_CATALOG.conditions}}
    obs["conds"]["low_health"] = True
    assert policy.tick(obs, bb)[0] is R
    obs["conds"]["low_health"] = False  # guard flips after tick 1
    assert policy.tick(obs, bb)[0] is R  # resumed directly, guard not re-checked
    status, action = policy.tick(obs, bb)
    assert status is S and action == "act#3"  # task still completes


def test_selector_reactivity_preempts_running_branch():
    low = ScriptTask([R] * 10, action="low")
    high = ScriptTask([R, S], action="high")
    tree = dsl.selector(
        dsl.sequence(dsl.condition("has_enemy_in_view"), dsl.task("shoot")),
        dsl.sequence(dsl.condition("has_known_enemy_location"), dsl.task("move_to")),
    )
    table = make_table(obs_conds, {
        **{a: (lambda param: ConstTask(S, None)) for a in TEST_CATALOG.actions},
        "shoot": (lambda param: high),
        "move_to": (lambda param: low),
    })
    policy = btree.compile_tree(tree, TEST_CATALOG, table)
    bb = btree.Blackboard()
    obs = {"conds": {"has_enemy_in_view": False, "has_known_enemy_location": True,
                     "at_objective": False, "low_health": False}}
    status, action = policy.tick(obs, bb)
    assert (status, action) == (R, "low#1")
    obs["conds"]["has_enemy_in_view"] = True  # higher-priority guard becomes true
    status, action = policy.tick(obs, bb)
    assert (status, action) == (R, "high#1")  # next tick executes the higher branch
    assert low.resets >= 1  # preempted branch was reset
    obs["conds"]["has_enemy_in_view"] = False
    status, action = policy.tick(obs, bb)
    assert (status, action) == (S, "high#2")  # running sequence keeps memory, task completes
    status, action = policy.tick(obs, bb)
    assert (status, action) == (R, "low#1")  # then the low branch restarts from scratch


def test_completed_task_restarts_fresh_on_next_activation():
    work = ScriptTask([R, S])
    tree = dsl.selector(dsl.task("idle"))
    table = make_table(obs_conds, {
        **{a: (lambda param: ConstTask(S, None)) for a in TEST_CATALOG.actions},
        "idle": (lambda param: work),
    })
    policy = btree.compile_tree(tree, TEST_CATALOG, table)
    bb = btree.Blackboard()
    obs = {"conds": {k: False for k in TEST_CATALOG.conditions}}
    assert policy.tick(obs, bb)[0] is R
    assert policy.tick(obs, bb)[0] is S
    assert policy.tick(obs, bb) == (R, "act#1")  # progress did not leak across runs


def test_last_action_wins_within_one_tick():
    tree = dsl.sequence(dsl.task("wait"), dsl.task("idle"))
    table = make_table(obs_conds, {
        **{a: (lambda param: ConstTask(S, None)) for a in TEST_CATALOG.actions},
        "wait": (lambda param: ConstTask(S, "first")),
        "idle": (lambda param: ConstTask(R, "second")),
    })
    policy = btree.compile_tree(tree, TEST_CATALOG, table)
    assert policy.tick({"conds": {}}, btree.Blackboard()) == (R, "second")


def test_action_emitted_even_when_overall_status_is_failure():
    tree = dsl.sequence(dsl.task("wait"), dsl.condition("low_health"))
    table = make_table(obs_conds, {
        **{a: (lambda param: ConstTask(S, None)) for a in TEST_CATALOG.actions},
        "wait": (lambda param: ConstTask(S, "acted")),
    })
    policy = btree.compile_tree(tree, TEST_CATALOG, table)
    obs = {"conds": {k: False for k in TEST_CATALOG.conditions}}
    assert policy.tick(obs, btree.Blackboard()) == (F, "acted")


def test_condition_evaluation_does_not_touch_blackboard():
    tree = dsl.selector(dsl.condition("low_health"), dsl.task("idle"))
    table = const_table({a: (S, None) for a in TEST_CATALOG.actions})
    policy = btree.compile_tree(tree, TEST_CATALOG, table)
    bb = btree.Blackboard()
    bb.set("marker", 41)
    before = bb.snapshot()
    policy.tick({"conds": {k: True for k in TEST_CATALOG.conditions}}, bb)
    assert bb.snapshot() == before


def test_raising_task_degrades_to_failure_with_fault():
    class Boom(btree.TaskHandler):
        def tick(self, obs, bb, rt):
            raise RuntimeError("handler exploded")

    tree = dsl.selector(dsl.task("shoot"), dsl.task("wait"))
    table = make_table(obs_conds, {
        **{a: (lambda param: ConstTask(S, None)) for a in TEST_CATALOG.actions},
        "shoot": (lambda param: Boom()),
        "wait": (lambda param: ConstTask(R, "fallback")),
    })
    policy = btree.compile_tree(tree, TEST_CATALOG, table)
    status, action = policy.tick({"conds": {}}, btree.Blackboard())
    assert (status, action) == (R, "fallback")  # selector fell through
    assert len(policy.faults) == 1
    assert policy.faults[0].node_id == 1 and "exploded" in policy.faults[0].message


def test_raising_condition_degrades_to_failure_with_fault():
    table = btree.HandlerTable(
        conditions={**{k: (lambda obs: True) for k in TEST_CATALOG.conditions},
                    "low_health": (lambda obs: obs["missing"])},
        rule_tasks={a: (lambda param: ConstTask(S, "ok")) for a in TEST_CATALOG.actions},
        neural_tasks={},
    )
    tree = dsl.selector(dsl.sequence(dsl.condition("low_health"), dsl.task("wait")), dsl.task("idle"))
    policy = btree.compile_tree(tree, TEST_CATALOG, table)
    status, action = policy.tick({}, btree.Blackboard())
    assert (status, action) == (S, "ok")
    assert policy.faults and policy.faults[0].where == "condition low_health"


def test_blackboard_contract():
    bb = btree.Blackboard()
    with pytest.raises(btree.BlackboardKeyError):
        bb.get("never_set")
    bb.set("ticks", 1)
    bb.set("ticks", bb.get("ticks") + 1)
    assert bb.get("ticks") == 2 and "ticks" in bb
    bb.clear()
    assert "ticks" not in bb


def test_blackboard_persists_across_ticks_and_clears_on_reset():
    class Counter(btree.TaskHandler):
        def tick(self, obs, bb, rt):
            count = bb.get("n") if "n" in bb else 0
            bb.set("n", count + 1)
            return R, None

    tree = dsl.selector(dsl.task("idle"))
    table = make_table(obs_conds, {
        **{a: (lambda param: ConstTask(S, None)) for a in TEST_CATALOG.actions},
        "idle": (lambda param: Counter()),
    })
    policy = btree.compile_tree(tree, TEST_CATALOG, table)
    bb = btree.Blackboard()
    for _ in range(3):
        policy.tick({"conds": {}}, bb)
    assert bb.get("n") == 3
    policy.reset(bb)
    assert "n" not in bb


def test_run_reset_rerun_traces_identical():
    rng = random.Random(77)
    for _ in range(100):
        tree = random_tree(rng, max_depth=4)
        scripts = {a: [rng.choice((S, F, R)) for _ in range(6)] for a in TEST_CATALOG.actions}
        table = make_table(obs_conds, {a: (lambda param, _a=a: ScriptTask(list(scripts[_a]), _a)) for a in TEST_CATALOG.actions})
        policy = btree.compile_tree(tree, TEST_CATALOG, table)
        obs_seq = [{"conds": {k: rng.random() < 0.5 for k in TEST_CATALOG.conditions}} for _ in range(8)]

        def run():
            bb = btree.Blackboard()
            return [policy.tick(o, bb) for o in obs_seq]

        first = run()
        policy.reset()
        assert run() == first
