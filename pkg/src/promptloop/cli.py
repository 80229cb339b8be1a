"""Operator entry points.

Commands: optimize, eval, protocol validate, protocol render, inspect,
resume. One JSON config file drives a run; flags only override scalars.
Exit codes are stable for automation: 0 success, 1 runtime or content
failure, 2 configuration failure. Human-readable output goes to stdout,
diagnostics to stderr, machine artifacts to the run directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .agents import load_default_template, load_template_file
from .backend import HttpBackend, ScriptedBackend
from .core import EvalSummary, PromptArtifact
from .environment import (
    Corpus,
    DeskContestantBackend,
    Environment,
    desk_registry,
    desk_world,
    load_tasks,
)
from .loop import (
    LoopConfig,
    LoopError,
    OptimizationRun,
    RoleRuntime,
    RunNotFoundError,
    RunStore,
    resume_run,
    run_optimization,
)
from .protocol import ProtocolError, parse_protocol, render_protocol, validate_protocol

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

ROLES = ("contestant", "analyzer", "optimizer", "coach")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class CliConfig:
    """Validated run configuration with all paths resolved."""

    run_id: str
    output_dir: Path
    initial_prompt_path: Path
    task_paths: list[Path]
    corpus_path: Path | None
    backends: dict[str, dict]
    template_paths: dict[str, Path]
    loop: LoopConfig
    max_turns: int
    retrieval_k: int
    raw: dict = field(default_factory=dict)
    config_dir: Path = Path(".")

    @classmethod
    def load(cls, path: str | Path, output_dir: str | None = None,
             run_id: str | None = None) -> "CliConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"config file not found: {path}"])
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config is not valid JSON: {exc}"])
        return cls.from_dict(raw, config_dir=path.parent, output_dir=output_dir,
                             run_id=run_id)

    @classmethod
    def from_dict(cls, raw: dict, *, config_dir: Path, output_dir: str | None = None,
                  run_id: str | None = None) -> "CliConfig":
        problems: list[str] = []

        def resolve(field_name: str, value: str) -> Path:
            candidate = Path(value)
            if not candidate.is_absolute():
                candidate = config_dir / candidate
            if not candidate.exists():
                problems.append(f"{field_name}: path does not exist: {candidate}")
            return candidate

        prompt_path = resolve("initial_prompt", raw.get("initial_prompt", ""))
        dataset = raw.get("dataset", {})
        task_paths = [
            resolve(f"dataset.tasks[{i}]", p)
            for i, p in enumerate(dataset.get("tasks", ()))
        ]
        if not task_paths:
            problems.append("dataset.tasks: at least one task file is required")
        corpus_path = None
        if dataset.get("corpus"):
            corpus_path = resolve("dataset.corpus", dataset["corpus"])

        backends = raw.get("backends", {})
        for role in ROLES:
            entry = backends.get(role)
            if entry is None:
                problems.append(f"backends.{role}: missing")
                continue
            kind = entry.get("kind")
            if kind not in ("scripted", "http", "desk"):
                problems.append(f"backends.{role}.kind: unknown kind {kind!r}")
            elif kind == "scripted":
                if "script" not in entry:
                    problems.append(f"backends.{role}.script: missing")
                else:
                    entry = dict(entry)
                    entry["script"] = str(resolve(f"backends.{role}.script", entry["script"]))
                    backends = {**backends, role: entry}
            elif kind == "http" and not entry.get("base_url"):
                problems.append(f"backends.{role}.base_url: missing")

        template_paths: dict[str, Path] = {}
        for role, tpl in raw.get("templates", {}).items():
            template_paths[role] = resolve(f"templates.{role}", tpl)

        try:
            loop = LoopConfig.from_json_dict(raw.get("loop", {}))
        except (KeyError, TypeError) as exc:
            problems.append(f"loop: missing field {exc}")
            loop = None
        except ValueError as exc:
            problems.append(f"loop: {exc}")
            loop = None

        if problems:
            raise ConfigError(problems)

        env_cfg = raw.get("environment", {})
        out = Path(output_dir) if output_dir else Path(raw.get("output_dir", "runs"))
        return cls(
            run_id=run_id or raw.get("run_id", "run"),
            output_dir=out,
            initial_prompt_path=prompt_path,
            task_paths=task_paths,
            corpus_path=corpus_path,
            backends=backends,
            template_paths=template_paths,
            loop=loop,
            max_turns=env_cfg.get("max_turns", 12),
            retrieval_k=env_cfg.get("retrieval_k", 5),
            raw=raw,
            config_dir=config_dir,
        )

    def build_tasks(self):
        tasks = []
        for path in self.task_paths:
            tasks.extend(load_tasks(path))
        return tasks

    def build_environment(self) -> Environment:
        corpus = Corpus.from_file(self.corpus_path) if self.corpus_path else None
        return Environment(
            registry=desk_registry(),
            corpus=corpus,
            world=desk_world(),
            max_turns=self.max_turns,
            retrieval_k=self.retrieval_k,
        )

    def build_backends(self) -> dict[str, RoleRuntime]:
        runtimes: dict[str, RoleRuntime] = {}
        for role in ROLES:
            entry = self.backends[role]
            kind = entry["kind"]
            if kind == "desk":
                backend = DeskContestantBackend()
            elif kind == "scripted":
                backend = ScriptedBackend.from_file(entry["script"], name=role)
            else:
                backend = HttpBackend(
                    base_url=entry["base_url"],
                    api_key_env=entry.get("api_key_env", "PROMPTLOOP_API_KEY"),
                )
            template = None
            if role != "contestant":
                if role in self.template_paths:
                    template = load_template_file(role, self.template_paths[role])
                else:
                    template = load_default_template(role)
            runtimes[role] = RoleRuntime(
                backend=backend,
                model_name=entry.get("model", "desk-sim" if kind == "desk" else "scripted"),
                template=template,
            )
        return runtimes

    def load_initial_prompt(self) -> PromptArtifact:
        text = self.initial_prompt_path.read_text(encoding="utf-8")
        if not text.strip():
            raise ConfigError(["initial_prompt: prompt file is empty"])
        return PromptArtifact(text=text)

    def persisted_extras(self) -> dict:
        # output_dir is deliberately excluded so identical configs produce
        # byte-identical run directories wherever they are written
        cli = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return {"cli": cli, "config_dir": str(self.config_dir)}


def _print_run_table(run: OptimizationRun) -> None:
    print(f"{'t':>3}  {'success_in':>10}  {'n_fail':>6}  {'accepted':>8}  {'patience':>8}")
    for record in run.iterations:
        accepted = "yes" if record.accepted else ("-" if record.n_failures == 0 else "no")
        print(
            f"{record.t:>3}  {float(record.eval_in.success_rate):>10.3f}  "
            f"{record.n_failures:>6}  {accepted:>8}  {record.patience_after:>8}"
        )
    final_rate = run.iterations[0].eval_in if run.iterations else None
    for record in run.iterations:
        if record.accepted:
            final_rate = record.eval_candidate
    rate_text = (
        f"{float(final_rate.success_rate):.3f}" if final_rate is not None else "n/a"
    )
    print(
        f"stop_reason: {run.stop_reason}   final_prompt_version: "
        f"{run.final_prompt_version}   final_success_rate: {rate_text}"
    )


def cmd_optimize(args: argparse.Namespace) -> int:
    config = CliConfig.load(args.config, output_dir=args.output_dir, run_id=args.run_id)
    tasks = config.build_tasks()
    if args.dry_run:
        print(f"run_id: {config.run_id}")
        print(f"tasks: {len(tasks)} from {len(config.task_paths)} files")
        print(f"corpus: {config.corpus_path or '-'}")
        for role in ROLES:
            print(f"backend.{role}: {config.backends[role]['kind']}")
        print(f"loop: {config.loop.to_json_dict()}")
        print("dry run: no backend calls made")
        return EXIT_OK
    env = config.build_environment()
    backends = config.build_backends()
    store = RunStore(config.output_dir, config.run_id)
    run = run_optimization(
        config.load_initial_prompt(),
        tasks,
        env,
        backends,
        config.loop,
        store=store,
        extra_config=config.persisted_extras(),
    )
    _print_run_table(run)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = CliConfig.load(args.config, output_dir=args.output_dir)
    prompt_path = Path(args.prompt)
    if not prompt_path.is_file():
        raise ConfigError([f"prompt: file not found: {prompt_path}"])
    text = prompt_path.read_text(encoding="utf-8")
    if not text.strip():
        raise ConfigError(["prompt: file is empty"])
    tasks = config.build_tasks()
    if not tasks:
        raise ConfigError(["dataset.tasks: no tasks loaded"])
    env = config.build_environment()
    backends = config.build_backends()
    outcomes = env.run_dataset(
        PromptArtifact(text=text), tasks, backends["contestant"].backend,
        config.loop.parallelism,
    )
    summary = EvalSummary.from_outcomes(outcomes)
    hit = (
        "n/a" if summary.search_hit_rate is None
        else f"{float(summary.search_hit_rate):.3f}"
    )
    print(f"success_rate: {float(summary.success_rate):.3f}")
    print(f"search_hit_rate: {hit}")
    print(f"n_tasks: {summary.n_tasks}")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(
        json.dumps(summary.to_json_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    print(f"wrote {out_path}", file=sys.stderr)
    return EXIT_OK


def cmd_protocol(args: argparse.Namespace) -> int:
    path = Path(args.file)
    if not path.is_file():
        raise ConfigError([f"protocol file not found: {path}"])
    try:
        tree = parse_protocol(path.read_text(encoding="utf-8"))
    except ProtocolError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.action == "validate":
        violations = validate_protocol(tree)
        if violations:
            for violation in violations:
                print(str(violation))
            return EXIT_RUNTIME
        print("OK")
        return EXIT_OK
    try:
        sys.stdout.write(render_protocol(tree))
    except ProtocolError as exc:
        print(f"render error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    store = RunStore(args.runs_dir, args.run_id)
    if not store.exists():
        print(f"run not found: {args.run_id}", file=sys.stderr)
        return EXIT_RUNTIME
    config_payload = store.read_config()
    loop = LoopConfig.from_json_dict(config_payload["loop"])
    records = [store.read_iteration(t) for t in store.completed_iterations()]
    result = store.read_result()
    print(f"run_id: {store.run_id}")
    print(f"created_at: {config_payload.get('created_at', '-')}")
    print(f"loop: {loop.to_json_dict()}")
    print(f"{'t':>3}  {'success_in':>10}  {'n_fail':>6}  {'accepted':>8}  {'patience':>8}")
    for record in records:
        accepted = "yes" if record.accepted else ("-" if record.n_failures == 0 else "no")
        print(
            f"{record.t:>3}  {float(record.eval_in.success_rate):>10.3f}  "
            f"{record.n_failures:>6}  {accepted:>8}  {record.patience_after:>8}"
        )
    if result:
        print(
            f"stop_reason: {result['stop_reason']}   final_prompt_version: "
            f"{result['final_prompt_version']}"
        )
    else:
        print("run incomplete (no run.json)")
    return EXIT_OK


def cmd_resume(args: argparse.Namespace) -> int:
    store = RunStore(args.runs_dir, args.run_id)
    if not store.exists():
        print(f"run not found: {args.run_id}", file=sys.stderr)
        return EXIT_RUNTIME
    payload = store.read_config()
    cli_raw = payload.get("cli")
    if cli_raw is None:
        raise ConfigError(["persisted run has no cli config; cannot rebuild backends"])
    config = CliConfig.from_dict(
        cli_raw,
        config_dir=Path(payload.get("config_dir", ".")),
        output_dir=str(args.runs_dir),
        run_id=args.run_id,
    )
    run = resume_run(
        args.run_id,
        config.build_tasks(),
        config.build_environment(),
        config.build_backends(),
        store_root=args.runs_dir,
    )
    _print_run_table(run)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptloop",
        description="Failure-driven prompt optimization over scripted or live backends.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_opt = sub.add_parser("optimize", help="run the optimization loop from a config file")
    p_opt.add_argument("--config", required=True)
    p_opt.add_argument("--output-dir", default=None)
    p_opt.add_argument("--run-id", default=None)
    p_opt.add_argument("--dry-run", action="store_true")
    p_opt.set_defaults(func=cmd_optimize)

    p_eval = sub.add_parser("eval", help="evaluate one prompt file on the dataset")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--prompt", required=True)
    p_eval.add_argument("--out", default="eval_summary.json")
    p_eval.add_argument("--output-dir", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_proto = sub.add_parser("protocol", help="validate or canonically render a protocol file")
    p_proto.add_argument("action", choices=("validate", "render"))
    p_proto.add_argument("file")
    p_proto.set_defaults(func=cmd_protocol)

    p_inspect = sub.add_parser("inspect", help="summarize a persisted run")
    p_inspect.add_argument("run_id")
    p_inspect.add_argument("--runs-dir", default="runs")
    p_inspect.set_defaults(func=cmd_inspect)

    p_resume = sub.add_parser("resume", help="continue a persisted run")
    p_resume.add_argument("run_id")
    p_resume.add_argument("--runs-dir", default="runs")
    p_resume.set_defaults(func=cmd_resume)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (LoopError, RunNotFoundError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
