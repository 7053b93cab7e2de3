"""Command-line front door for the whole pipeline.

Subcommands: ``tree`` (check/fmt/to-json/from-json), ``run`` (episodes and
replays), ``search`` (the improvement loop), ``train`` (task nodes and the
scheduler). stdout carries machine-readable output only; prose and progress
go to stderr. Exit codes: 0 ok, 1 validation failure, 2 usage or IO error,
3 numeric divergence.

Config files are TOML with sections [search], [generator], [arena],
[scheduler], [train]; keys mirror the dataclass fields. Values that name
trees or maps may be inline text (anything containing a newline) or a path
relative to the config file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib  # 3.11+
except ModuleNotFoundError:  # pragma: no cover - version dependent
    import tomli as tomllib

from . import __version__, dsl, fps, genkit, scheduler, search
from .arena import (
    frame_to_svg,
    load_replay,
    minimap_frames,
    parse_map,
    resimulate,
    run_episode,
    save_replay,
    ArenaError,
)
from .btree import compile_tree
from .neural import (
    TrainSpec,
    TrainingDiverged,
    load_params,
    save_params,
    train_task_node,
)

OK, VALIDATION, USAGE, DIVERGED = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def _say(text: str) -> None:
    print(text, file=sys.stderr)


def _emit(doc: Any) -> None:
    print(json.dumps(doc, sort_keys=True))


# ---------------------------------------------------------------------------
# config plumbing


def _read_text(path: str | Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(USAGE, f"cannot read {path}: {exc}") from exc


def _resolve(value: str, base: Path) -> str:
    """Inline text when it contains a newline, otherwise a file path."""
    if "\n" in value:
        return value
    return _read_text(base / value)


def _load_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise CliError(USAGE, f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise CliError(USAGE, f"bad TOML in {path}: {exc}") from exc


def _section(doc: Mapping, name: str, cls) -> dict:
    """Pull a section and reject keys the target config does not have."""
    raw = doc.get(name, {})
    if not isinstance(raw, Mapping):
        raise CliError(USAGE, f"section [{name}] must be a table")
    allowed = {f.name for f in dataclasses.fields(cls)}
    out = {}
    for key, value in raw.items():
        if key not in allowed:
            raise CliError(USAGE, f"unknown key '{key}' in [{name}]")
        out[key] = value
    return out


def _search_config(doc: Mapping, base: Path) -> search.SearchConfig:
    kw = _section(doc, "search", search.SearchConfig)
    arena_extra = {
        k: v for k, v in doc.get("arena", {}).items() if k in ("max_ticks", "respawns")
    }
    unknown = set(doc.get("arena", {})) - {"max_ticks", "respawns"}
    if unknown:
        raise CliError(USAGE, f"unknown key '{sorted(unknown)[0]}' in [arena]")
    kw = {**arena_extra, **kw}
    if "maps" not in kw:
        raise CliError(USAGE, "missing key 'maps' in [search]")
    kw["maps"] = tuple(_resolve(m, base) for m in kw["maps"])
    for key in ("opponent", "seed_tree"):
        if key in kw:
            kw[key] = _resolve(kw[key], base)
    try:
        return search.SearchConfig(**kw)
    except (search.SearchError, dsl.DslError, ArenaError) as exc:
        raise CliError(VALIDATION, str(exc)) from exc


def _generator_config(doc: Mapping) -> genkit.GeneratorConfig:
    kw = _section(doc, "generator", genkit.GeneratorConfig)
    try:
        return genkit.GeneratorConfig(**kw)
    except genkit.GenKitError as exc:
        raise CliError(VALIDATION, str(exc)) from exc


def _manifest(command: str, args: argparse.Namespace, resolved: Mapping, out_dir: Path) -> None:
    doc = {
        "command": command,
        "config": getattr(args, "config", None),
        "resolved": resolved,
        "out_dir": str(out_dir),
        "seed": getattr(args, "seed", None),
        "version": __version__,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _config_dict(config) -> dict:
    doc = dataclasses.asdict(config)
    for key, value in doc.items():
        if isinstance(value, tuple):
            doc[key] = list(value)
    return doc


# ---------------------------------------------------------------------------
# tree


def _load_catalog(path: str | None) -> dsl.NodeCatalog:
    if path is None:
        return fps.CATALOG
    try:
        doc = json.loads(_read_text(path))
        conditions = dict(doc["conditions"])
        actions = {
            name: dsl.ActionSpec(tuple(spec["params"]), spec.get("doc", ""))
            for name, spec in doc["actions"].items()
        }
        return dsl.NodeCatalog(conditions=conditions, actions=actions)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(USAGE, f"bad catalog {path}: {exc}") from exc


def cmd_tree(args: argparse.Namespace) -> int:
    text = _read_text(args.file)
    if args.sub == "from-json":
        try:
            tree = dsl.from_json(json.loads(text))
        except (json.JSONDecodeError, dsl.SchemaError) as exc:
            _say(str(exc))
            return VALIDATION
        print(dsl.to_canonical_dsl(tree), end="")
        return OK
    try:
        tree = dsl.parse(text)
    except dsl.DslError as exc:
        for diag in exc.diagnostics:
            print(f"{args.file}:{diag}")
        return VALIDATION
    if args.sub == "check":
        diagnostics = dsl.validate(tree, _load_catalog(args.catalog))
        for diag in diagnostics:
            print(f"{args.file}:{diag}")
        return VALIDATION if any(d.severity == "error" for d in diagnostics) else OK
    if args.sub == "fmt":
        canonical = dsl.to_canonical_dsl(tree)
        if args.write:
            Path(args.file).write_text(canonical, encoding="utf-8")
        else:
            print(canonical, end="")
        return OK
    if args.sub == "to-json":
        _emit(dsl.to_json(tree))
        return OK
    raise CliError(USAGE, f"unknown tree subcommand {args.sub!r}")


# ---------------------------------------------------------------------------
# run


def _bindings(args: argparse.Namespace):
    if getattr(args, "nav_weights", None):
        shoot = load_params(args.shoot_weights) if args.shoot_weights else None
        return fps.neural_bindings(load_params(args.nav_weights), shoot)
    return fps.rule_bindings()


def _render(trace, args: argparse.Namespace) -> None:
    if not args.render:
        return
    frames = minimap_frames(trace, args.stride)
    if args.render == "ascii":
        for frame in frames:
            _say(f"tick {frame.tick}")
            _say(frame.to_text())
    else:
        out = Path(args.render_dir or "frames")
        out.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(frames):
            (out / f"frame_{i:04d}.svg").write_text(frame_to_svg(frame))
        _say(f"wrote {len(frames)} frames to {out}")


def cmd_run(args: argparse.Namespace) -> int:
    if args.replay:
        trace = load_replay(args.replay)
        metrics = _replay_metrics(trace, args)
        _render(trace, args)
        _emit(metrics.to_dict())
        return OK
    if not args.map:
        raise CliError(USAGE, "run needs --map (or --replay)")
    spec = parse_map(_read_text(args.map))
    if args.library:
        if not args.scheduler_weights:
            raise CliError(USAGE, "--library needs --scheduler-weights")
        library = scheduler.load_library(args.library)
        params = scheduler.SchedulerParams(net=load_params(args.scheduler_weights))
        opponent = _read_text(args.opponent) if args.opponent else "task: wait\n"
        metrics, log = scheduler.run_scheduled_episode(
            params,
            library,
            scheduler.SwitchPolicy(review_period=args.review_period),
            spec,
            args.seed,
            opponent=opponent,
            max_ticks=args.ticks,
            respawns=not args.no_respawns,
        )
        _emit(
            {
                "metrics": metrics.to_dict(),
                "switches": [dataclasses.asdict(e) for e in log],
            }
        )
        return OK
    if not args.tree:
        raise CliError(USAGE, "run needs --tree or --library")
    table = _bindings(args)
    tree = dsl.parse(_read_text(args.tree))
    opponent = dsl.parse(_read_text(args.opponent)) if args.opponent else dsl.parse("task: wait\n")
    policies = {}
    for i in range(len(spec.spawns["A"])):
        policies[f"A{i}"] = compile_tree(
            tree, fps.CATALOG, table, deterministic=True, seed=args.seed * 31 + i
        )
    for i in range(len(spec.spawns["B"])):
        policies[f"B{i}"] = compile_tree(
            opponent, fps.CATALOG, fps.rule_bindings(), deterministic=True, seed=args.seed * 31 + 17 + i
        )
    metrics, trace = run_episode(
        policies,
        spec,
        seed=args.seed,
        max_ticks=args.ticks,
        respawns=not args.no_respawns,
        aim_noise=args.aim_noise,
    )
    if args.replay_out:
        save_replay(trace, args.replay_out)
    _render(trace, args)
    if args.out:
        _manifest("run", args, {"map": args.map, "tree": args.tree}, Path(args.out))
    _emit(metrics.to_dict())
    return OK


def _replay_metrics(trace, args):
    """Re-drive the recorded actions to rebuild metrics, checking fidelity."""
    replayed = resimulate(trace, respawns=not args.no_respawns, aim_noise=args.aim_noise)
    if tuple(replayed.ticks) != tuple(trace.ticks):
        raise CliError(VALIDATION, "replay does not resimulate to itself")
    from .arena import Action, make_world, step

    world = make_world(trace.map, trace.seed, respawns=not args.no_respawns, aim_noise=args.aim_noise)
    for record in trace.ticks:
        step(world, {aid: Action.from_dict(a) for aid, a in record.actions.items()})
        world.metrics.episode_length = world.tick
    return world.metrics


# ---------------------------------------------------------------------------
# search


def _write_scores_csv(history: search.SearchHistory, path: Path) -> None:
    best = float("-inf")
    best_at: dict[int, float] = {}
    for candidate in history.candidates:
        if candidate.valid and candidate.reward is not None:
            best = max(best, candidate.reward)
        best_at[candidate.gen_index] = best
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "gen_index", "parent", "reward", "valid", "best_so_far"])
        for c in history.candidates:
            writer.writerow(
                [
                    c.iteration,
                    c.gen_index,
                    "" if c.parent is None else c.parent,
                    "" if c.reward is None else repr(c.reward),
                    int(c.valid),
                    "" if best_at[c.gen_index] == float("-inf") else repr(best_at[c.gen_index]),
                ]
            )


def cmd_search(args: argparse.Namespace) -> int:
    doc = _load_toml(args.config)
    base = Path(args.config).resolve().parent
    config = _search_config(doc, base)
    generator = _generator_config(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = out / "checkpoint.json"
    resume = checkpoint if args.resume else None
    if args.resume and not checkpoint.exists():
        raise CliError(USAGE, f"no checkpoint at {checkpoint}")
    _manifest(
        "search",
        args,
        {
            "search": _config_dict(config),
            "generator": _config_dict(generator),
            "config_hash": search.config_hash(config),
        },
        out,
    )
    try:
        best, history = search.bfs_search(
            config,
            generator,
            jobs=args.jobs,
            checkpoint=checkpoint,
            resume=resume,
        )
    except genkit.GeneratorError as exc:
        _say(f"{exc}; state checkpointed to {checkpoint}")
        return VALIDATION
    except search.SearchError as exc:
        _say(str(exc))
        return VALIDATION
    (out / "best.bt").write_text(best.dsl, encoding="utf-8")
    (out / "best.json").write_text(
        json.dumps(dsl.to_json(dsl.parse(best.dsl)), sort_keys=True, indent=2) + "\n"
    )
    search.export_trajectories(history, out / "trajectories.jsonl")
    _write_scores_csv(history, out / "scores.csv")
    if best.tactical is not None:
        (out / "tactical.json").write_text(
            json.dumps(
                {
                    "scores": best.tactical.scores(),
                    "justifications": dict(best.tactical.justifications),
                },
                sort_keys=True,
                indent=2,
            )
            + "\n"
        )
    _emit(
        {
            "best_reward": best.reward,
            "best_tree": str(out / "best.bt"),
            "iterations": len(history.best_per_iteration),
            "config_hash": history.config_hash,
            "candidates": len(history.candidates),
        }
    )
    return OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    doc = _load_toml(args.config)
    out = Path(args.out)
    if args.sub == "task-node":
        kw = _section(doc, "train", TrainSpec)
        try:
            spec = TrainSpec(**kw)
            result = train_task_node(spec)
        except TrainingDiverged as exc:
            _say(str(exc))
            return DIVERGED
        except (TypeError, ValueError) as exc:
            raise CliError(VALIDATION, str(exc)) from exc
        out.mkdir(parents=True, exist_ok=True)
        weights = out / f"{spec.task}.pnet"
        save_params(result.params, weights)
        with (out / "curve.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "mean_return"])
            for i, value in enumerate(result.mean_returns):
                writer.writerow([i, repr(value)])
        _manifest("train task-node", args, {"train": _config_dict(spec)}, out)
        _emit(
            {
                "task": spec.task,
                "iterations_run": result.iterations_run,
                "final_return": result.mean_returns[-1] if result.mean_returns else None,
                "weights": str(weights),
            }
        )
        return OK
    if args.sub == "scheduler":
        raw = dict(doc.get("scheduler", {}))
        review = raw.pop("review_period", scheduler.DEFAULT_REVIEW_PERIOD)
        kw = _section({"scheduler": raw}, "scheduler", scheduler.SchedulerConfig)
        base = Path(args.config).resolve().parent
        try:
            config = scheduler.SchedulerConfig(**kw)
            library = scheduler.make_library(
                [
                    (entry["description"], _resolve(entry["tree"], base))
                    for entry in doc.get("library", [])
                ]
            )
            scenarios = [
                scheduler.Scenario(
                    name=entry.get("name", f"scenario-{i}"),
                    map_text=_resolve(entry["map"], base),
                    opponent=_resolve(entry.get("opponent", "task: wait\n"), base),
                    objective=entry.get("objective", "kills"),
                )
                for i, entry in enumerate(doc.get("scenario", []))
            ]
        except (KeyError, TypeError) as exc:
            raise CliError(USAGE, f"bad scheduler config: {exc}") from exc
        except scheduler.SchedulerError as exc:
            raise CliError(VALIDATION, str(exc)) from exc
        if not scenarios:
            raise CliError(USAGE, "no [[scenario]] tables in config")
        labelset = scheduler.label_scenarios(library, scenarios, config)
        params = scheduler.train_scheduler(library, scenarios, config, labelset=labelset)
        report = scheduler.evaluate_suite(
            params, library, scheduler.SwitchPolicy(review_period=review), scenarios, config,
            labelset=labelset,
        )
        out.mkdir(parents=True, exist_ok=True)
        weights = out / "scheduler.pnet"
        save_params(params.net, weights)
        _manifest("train scheduler", args, {"scheduler": _config_dict(config)}, out)
        for si, scenario in enumerate(scenarios):
            fixed = ", ".join(
                f"{library.entries[li].description}={report.fixed[si, li]:g}"
                for li in range(len(library))
            )
            _say(f"{scenario.name}: scheduled={report.scheduled[si]:g} fixed: {fixed}")
        _emit(
            {
                "scheduled_mean": report.scheduled_mean,
                "fixed_means": {
                    library.entries[li].description: float(report.fixed_means[li])
                    for li in range(len(library))
                },
                "accuracy": scheduler.selection_accuracy(params, labelset),
                "dominates": report.dominates(),
                "weights": str(weights),
            }
        )
        return OK
    raise CliError(USAGE, f"unknown train subcommand {args.sub!r}")


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btarena", description=__doc__)
    parser.add_argument("--version", action="version", version=f"btarena {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    tree = subs.add_parser("tree", help="check, format, and convert trees")
    tree.add_argument("sub", choices=["check", "fmt", "to-json", "from-json"])
    tree.add_argument("file")
    tree.add_argument("--catalog", help="catalog JSON (default: the stock shooter nodes)")
    tree.add_argument("--write", action="store_true", help="fmt: rewrite the file in place")
    tree.set_defaults(func=cmd_tree)

    run = subs.add_parser("run", help="run or replay one episode")
    run.add_argument("--map", help="map text file")
    run.add_argument("--tree", help="team A tree file")
    run.add_argument("--opponent", help="team B tree file (default: wait)")
    run.add_argument("--library", help="scheduler library manifest (JSON)")
    run.add_argument("--scheduler-weights", help="trained scheduler .pnet")
    run.add_argument("--review-period", type=int, default=scheduler.DEFAULT_REVIEW_PERIOD)
    run.add_argument("--nav-weights", help="neural move_to weights")
    run.add_argument("--shoot-weights", help="neural shoot weights")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--ticks", type=int, default=600)
    run.add_argument("--no-respawns", action="store_true")
    run.add_argument("--aim-noise", action="store_true")
    run.add_argument("--render", choices=["ascii", "svg"])
    run.add_argument("--render-dir")
    run.add_argument("--stride", type=int, default=10)
    run.add_argument("--replay-out", help="write the binary replay here")
    run.add_argument("--replay", help="load and verify a saved replay instead of running")
    run.add_argument("--out", help="write a run manifest into this directory")
    run.set_defaults(func=cmd_run)

    sea = subs.add_parser("search", help="run the improvement loop from a TOML config")
    sea.add_argument("config")
    sea.add_argument("--out", default="search-out")
    sea.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    sea.add_argument("--jobs", type=int, default=1)
    sea.set_defaults(func=cmd_search)

    train = subs.add_parser("train", help="train a task node or the scheduler")
    train.add_argument("sub", choices=["task-node", "scheduler"])
    train.add_argument("config")
    train.add_argument("--out", default="train-out")
    train.set_defaults(func=cmd_train)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        _say(exc.message)
        return exc.code
    except TrainingDiverged as exc:
        _say(str(exc))
        return DIVERGED
    except (
        dsl.DslError,
        dsl.SchemaError,
        ArenaError,
        scheduler.SchedulerError,
        search.SearchError,
        genkit.GenKitError,
        genkit.GeneratorError,
    ) as exc:
        _say(str(exc))
        return VALIDATION


if __name__ == "__main__":
    sys.exit(main())
