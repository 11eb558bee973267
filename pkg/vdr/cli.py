"""
Command line entry point.

    vdr synth-vqa    build a VQA dataset (curated + fuzzy multi-hop + text-only)
    vdr synth-traj   synthesize SFT trajectories and keep the consistent ones
    vdr rollout      roll out a policy over a dataset
    vdr rl-prep      score rollout groups and export a training batch
    vdr bench        async scheduler against the synchronous baseline
    vdr validate     schema, invariant and budget audit of a trajectory file
    vdr ablate       answer rate of every rollout mode on one dataset

Exit codes: 0 ok, 1 pipeline error, 2 configuration error.
"""
import asyncio
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import typer
from rich.console import Console

from vdr.backends.base import ToolBackend
from vdr.budget import Budgets, context_tokens, turn_tokens
from vdr.codec import decode_trajectory, iter_jsonl, read_trajectories, write_trajectories
from vdr.config import EngineConfig, Mode, load_config
from vdr.dataset import Split, allocate_splits, read_instances, select_sft_pool, write_instances
from vdr.errors import ConfigError, DecodeError, VdrError
from vdr.forge import VqaForge
from vdr.gateway import ModelRoles
from vdr.log import configure_logging
from vdr.pipelines import (
    TrajectorySynthesizer,
    build_backend,
    build_roles,
    build_toolbox,
    build_world,
    discard_counts,
    kept_trajectories,
    load_images,
    run_bench,
)
from vdr.prompts import PromptLibrary
from vdr.reports import (
    ablation_table,
    batch_summary,
    bench_report,
    dataset_summary,
    discard_table,
    print_table,
    rollout_summary,
)
from vdr.rlprep import MaskRule, export_batch, score_groups
from vdr.rollout import RolloutEngine, make_tasks, write_metrics
from vdr.sim import SimWorld, text_only_questions
from vdr.store import AuditLog, TrajectoryStore
from vdr.tools import ToolBox
from vdr.trajectory import Trajectory

logger = logging.getLogger(__name__)
console = Console()

app = typer.Typer(help="Visual deep-research data and rollout engine.", no_args_is_help=True,
                  add_completion=False)

CONFIG_OPTION = typer.Option(None, "--config", "-c", help="Engine config YAML; defaults apply without one.")


@dataclass
class Runtime:
    """Everything a pipeline command talks to, built from one config."""
    config: EngineConfig
    world: Optional[SimWorld]
    backend: ToolBackend
    roles: ModelRoles
    prompts: PromptLibrary
    toolbox: ToolBox

    @classmethod
    def build(cls, config: EngineConfig, sleep: bool = True) -> "Runtime":
        world = build_world(config)
        backend = build_backend(config, world, sleep=sleep)
        roles = build_roles(config, world)
        prompts = PromptLibrary(config.prompts_dir)
        return cls(config, world, backend, roles, prompts, build_toolbox(config, backend, roles, prompts))

    @property
    def budgets(self) -> Budgets:
        return self.config.budgets.build()

    def run(self, coroutine):
        """Drive a pipeline coroutine to completion, then release clients and tool threads."""
        async def main():
            try:
                return await coroutine
            finally:
                await self.roles.aclose()

        try:
            return asyncio.run(main())
        finally:
            self.toolbox.pool.close()


@contextmanager
def exit_codes():
    try:
        yield
    except ConfigError as e:
        for message in e.messages:
            console.print(f"[red]config error:[/red] {message}")
        raise typer.Exit(2)
    except (VdrError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        raise typer.Exit(1)


def load(ctx: typer.Context, path: Optional[Path]) -> EngineConfig:
    config = load_config(path)
    seed = (ctx.obj or {}).get("seed")
    if seed is not None:
        config = config.model_copy(update={"world": config.world.model_copy(update={"seed": seed})})
    return config


def fresh_audit(path: Optional[Path]) -> AuditLog:
    """An audit log that starts empty, so reruns produce the same file."""
    if path is not None and path.exists():
        path.unlink()
    return AuditLog(path)


@app.callback()
def main(ctx: typer.Context,
         verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging."),
         seed: Optional[int] = typer.Option(None, "--seed", help="Override world.seed from the config.")):
    configure_logging(verbose)
    ctx.obj = {"seed": seed}


@app.command("synth-vqa")
def synth_vqa(ctx: typer.Context,
              out: Path = typer.Option(..., "--out", help="Dataset JSONL to write."),
              config: Optional[Path] = CONFIG_OPTION,
              depth: int = typer.Option(2, "--depth", min=1, help="Obfuscation rounds per fuzzy instance."),
              images_dir: Optional[Path] = typer.Option(None, "--images-dir", help="Image folder (live backend)."),
              n_images: Optional[int] = typer.Option(None, "--n-images", min=1),
              text_only: int = typer.Option(0, "--text-only", min=0, help="Text-only seeds from the page graph."),
              concurrency: int = typer.Option(8, "--concurrency", min=1),
              audit: Optional[Path] = typer.Option(None, "--audit", help="Discard audit JSONL.")):
    """Curate images, verify entities and grow fuzzy multi-hop questions."""
    with exit_codes():
        cfg = load(ctx, config)
        runtime = Runtime.build(cfg, sleep=False)
        if images_dir is not None:
            images = load_images(images_dir)
        elif runtime.world is not None:
            images = list(runtime.world.images)
        else:
            raise ConfigError(["--images-dir is required with the live backend"])
        if n_images is not None:
            images = images[:n_images]
        seeds = []
        if text_only:
            if runtime.world is None:
                logger.warning("Text-only seeds come from the sim page graph; skipping them on the live backend")
            else:
                seeds = text_only_questions(runtime.world, text_only)

        forge = VqaForge(runtime.backend, runtime.toolbox.pool, runtime.roles, runtime.prompts,
                         seed=cfg.world.seed, scales=cfg.vision.scales, max_regions=cfg.vision.max_regions,
                         perfect_match_fraction=cfg.world.perfect_match_fraction, audit=fresh_audit(audit))
        instances = runtime.run(forge.build_dataset(images, depth, seeds, concurrency))
        tagged = allocate_splits(instances, cfg.mix)
        count = write_instances(out, tagged)
        logger.info(f"Wrote {count} instances to {out}")
        print_table(dataset_summary(tagged), "VQA dataset", console)


@app.command("synth-traj")
def synth_traj(ctx: typer.Context,
               tasks: Path = typer.Option(..., "--tasks", help="Dataset JSONL from synth-vqa."),
               out: Path = typer.Option(..., "--out", help="Trajectory JSONL; existing ids are kept."),
               config: Optional[Path] = CONFIG_OPTION,
               limit: Optional[int] = typer.Option(None, "--limit", min=1,
                                                   help="Pool size, drawn in the configured mix."),
               concurrency: int = typer.Option(8, "--concurrency", min=1),
               audit: Optional[Path] = typer.Option(None, "--audit", help="Discard audit JSONL.")):
    """Vision phase, bridge, text phase, merge and rejection sampling."""
    with exit_codes():
        cfg = load(ctx, config)
        runtime = Runtime.build(cfg, sleep=False)
        pool = select_sft_pool(read_instances(tasks), cfg.mix, limit)
        synthesizer = TrajectorySynthesizer(runtime.roles, runtime.toolbox, runtime.prompts, runtime.budgets,
                                            cfg.vision, cfg.safeguards, fresh_audit(audit))
        outcomes = runtime.run(synthesizer.run(pool, concurrency))
        new_count, total = TrajectoryStore(out).add(kept_trajectories(outcomes))
        console.print(f"{new_count} new trajectories, {total} in {out}")
        print_table(discard_table(discard_counts(outcomes)), "Rejection sampling", console)


@app.command()
def rollout(ctx: typer.Context,
            tasks: Path = typer.Option(..., "--tasks", help="Dataset JSONL."),
            out: Path = typer.Option(..., "--out", help="Trajectory JSONL to write."),
            config: Optional[Path] = CONFIG_OPTION,
            concurrency: Optional[int] = typer.Option(None, "--concurrency", min=1),
            mode: Optional[Mode] = typer.Option(None, "--mode", case_sensitive=False),
            samples: Optional[int] = typer.Option(None, "--samples", min=1, help="Trajectories per instance."),
            split: Optional[Split] = typer.Option(None, "--split", help="Only instances of this split."),
            metrics: Optional[Path] = typer.Option(None, "--metrics", help="Per-trajectory metrics JSONL."),
            progress: bool = typer.Option(True, "--progress/--no-progress")):
    """Roll out the policy over a dataset with the asynchronous scheduler."""
    with exit_codes():
        cfg = load(ctx, config)
        runtime = Runtime.build(cfg)
        instances = read_instances(tasks)
        if split is not None:
            instances = [i for i in instances if i.split is split]
        batch = make_tasks(instances, runtime.budgets, mode or cfg.rollout.mode, samples or cfg.rollout.samples)
        engine = RolloutEngine(runtime.roles.policy, runtime.toolbox, runtime.prompts, cfg.safeguards)
        result = runtime.run(engine.run_batch(batch, concurrency or cfg.rollout.concurrency,
                                              show_progress=progress))
        write_trajectories(out, result.ordered())
        if metrics is not None:
            write_metrics(metrics, result.metrics)
        print_table(rollout_summary(result.metrics), f"Rollout ({len(batch)} tasks, {result.wall_s:.1f}s)", console)


@app.command("rl-prep")
def rl_prep(ctx: typer.Context,
            trajectories: Path = typer.Option(..., "--trajectories", help="Rollout trajectories JSONL."),
            out: Path = typer.Option(..., "--out", help="Batch JSONL for the trainer."),
            config: Optional[Path] = CONFIG_OPTION,
            group_size: Optional[int] = typer.Option(None, "--group-size", min=2),
            audit: Optional[Path] = typer.Option(None, "--audit", help="Judge failure audit JSONL.")):
    """Judge rewards, leave-one-out advantages and gradient masks."""
    with exit_codes():
        cfg = load(ctx, config)
        runtime = Runtime.build(cfg, sleep=False)
        rule = MaskRule(cfg.rl.error_step_fraction)
        loaded = read_trajectories(trajectories)
        groups = runtime.run(score_groups(loaded, runtime.roles.judge, runtime.prompts,
                                          group_size or cfg.rl.group_size, rule, cfg.rl.format_penalty,
                                          fresh_audit(audit)))
        export_batch(groups, out, rule)
        print_table(batch_summary(groups), "RL batch", console)


@app.command()
def bench(ctx: typer.Context,
          config: Optional[Path] = CONFIG_OPTION,
          tasks: int = typer.Option(64, "--tasks", min=1),
          concurrency: int = typer.Option(64, "--concurrency", min=1),
          pool: int = typer.Option(32, "--pool", min=1, help="Tool pool size for the async run."),
          min_speedup: float = typer.Option(0.0, "--min-speedup", help="Exit 1 below this speedup.")):
    """Throughput of the async scheduler against the synchronous baseline (sim world)."""
    with exit_codes():
        cfg = load(ctx, config)
        async_result, sync_result = asyncio.run(run_bench(cfg, tasks, concurrency, pool))
        report = bench_report(async_result, sync_result, concurrency, pool)
        print_table(report, "Rollout throughput", console)
        speedup = float(report.loc[0, 'Speedup'])
        if speedup < min_speedup:
            logger.error(f"Speedup {speedup:.2f}x is below the required {min_speedup:.2f}x")
            raise typer.Exit(1)


@app.command()
def validate(ctx: typer.Context,
             trajectories: Path = typer.Argument(..., help="Trajectory JSONL to audit."),
             config: Optional[Path] = CONFIG_OPTION):
    """Decode every record, check step invariants, T_v and the configured budgets."""
    with exit_codes():
        budgets = load(ctx, config).budgets.build()
        problems: List[str] = []
        valid = 0
        for line_no, line in enumerate(iter_jsonl(trajectories), start=1):
            try:
                trajectory = decode_trajectory(line)
            except DecodeError as e:
                problems.append(f"line {line_no}: {e}")
                continue
            over = budget_problems(trajectory, budgets)
            problems.extend(f"line {line_no} ({trajectory.id}): {p}" for p in over)
            valid += not over
        for problem in problems[:20]:
            console.print(f"[red]{problem}[/red]")
        if len(problems) > 20:
            console.print(f"... and {len(problems) - 20} more")
        console.print(f"{valid} valid, {len(problems)} problems in {trajectories}")
        if problems:
            raise typer.Exit(1)


def budget_problems(trajectory: Trajectory, budgets: Budgets) -> List[str]:
    problems = []
    if len(trajectory.steps) > budgets.max_turns:
        problems.append(f"{len(trajectory.steps)} turns > {budgets.max_turns}")
    longest = max((turn_tokens(step) for step in trajectory.steps), default=0)
    if longest > budgets.max_turn_tokens:
        problems.append(f"turn of {longest} tokens > {budgets.max_turn_tokens}")
    total = context_tokens(trajectory)
    if total > budgets.max_context_tokens:
        problems.append(f"context of {total} tokens > {budgets.max_context_tokens}")
    return problems


@app.command()
def ablate(ctx: typer.Context,
           tasks: Path = typer.Option(..., "--tasks", help="Dataset JSONL."),
           config: Optional[Path] = CONFIG_OPTION,
           concurrency: Optional[int] = typer.Option(None, "--concurrency", min=1),
           limit: Optional[int] = typer.Option(None, "--limit", min=1),
           modes: Optional[List[Mode]] = typer.Option(None, "--mode", case_sensitive=False,
                                                      help="Repeat to pick modes; all five by default.")):
    """Answer rate per rollout mode over the same dataset."""
    with exit_codes():
        cfg = load(ctx, config)
        runtime = Runtime.build(cfg)
        instances = read_instances(tasks)[:limit]
        engine = RolloutEngine(runtime.roles.policy, runtime.toolbox, runtime.prompts, cfg.safeguards)

        async def run_modes():
            results = {}
            for mode in modes or list(Mode):
                batch = make_tasks(instances, runtime.budgets, mode)
                results[mode.value] = await engine.run_batch(batch, concurrency or cfg.rollout.concurrency)
            return results

        print_table(ablation_table(runtime.run(run_modes())), "Rollout mode ablation", console)
