"""
Asynchronous rollout scheduler.

Tasks go through a queue to a fixed number of workers. Each worker owns one
trajectory at a time and advances it turn by turn; tool work from every
trajectory shares the ToolBox's bounded pool. Results are keyed by task id
and come back in task order regardless of completion order.
"""
import asyncio
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn

from vdr.agent import ReactAgent
from vdr.budget import Budgets, TokenCounter, context_tokens, count_tokens
from vdr.codec import dumps, write_jsonl
from vdr.config import Mode, SafeguardSettings
from vdr.dataset import VqaInstance
from vdr.gateway import ChatClient
from vdr.prompts import PromptLibrary
from vdr.tools import ToolBox
from vdr.trajectory import Termination, Trajectory

logger = logging.getLogger(__name__)
console = Console(stderr=True)


@dataclass(frozen=True)
class RolloutTask:
    task_id: str
    instance: VqaInstance
    budgets: Budgets
    mode: Mode = Mode.CIS_TS


def make_tasks(instances: Sequence[VqaInstance], budgets: Budgets, mode: Mode,
               samples: int = 1) -> List[RolloutTask]:
    """One task per instance, or `samples` tasks per instance named <instance>-s<k>."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    tasks = []
    for instance in instances:
        if samples == 1:
            tasks.append(RolloutTask(instance.instance_id, instance, budgets, mode))
        else:
            tasks.extend(RolloutTask(f"{instance.instance_id}-s{k}", instance, budgets, mode)
                         for k in range(samples))
    return tasks


@dataclass(frozen=True)
class RolloutMetrics:
    task_id: str
    turns: int
    vision_turns: int
    tokens: int
    tool_calls: int
    wall_ms: int
    termination: str
    answered: bool

    def to_json(self) -> Dict[str, Any]:
        return dict(vars(self))


def metrics_for(trajectory: Trajectory, wall_ms: int, counter: TokenCounter = count_tokens) -> RolloutMetrics:
    return RolloutMetrics(
        task_id=trajectory.id,
        turns=len(trajectory.steps),
        vision_turns=trajectory.T_v,
        tokens=context_tokens(trajectory, counter),
        tool_calls=sum(len(step.calls) for step in trajectory.steps),
        wall_ms=wall_ms,
        termination=trajectory.termination.value if trajectory.termination else "unfinished",
        answered=trajectory.answer is not None,
    )


def write_metrics(path: Union[str, Path], metrics: Sequence[RolloutMetrics]) -> int:
    return write_jsonl(path, (dumps(m.to_json()) for m in metrics))


@dataclass
class BatchResult:
    trajectories: Dict[str, Trajectory]
    metrics: List[RolloutMetrics] = field(default_factory=list)
    wall_s: float = 0.0
    peak_tool_workers: int = 0

    def ordered(self) -> List[Trajectory]:
        return list(self.trajectories.values())


class RolloutEngine:
    def __init__(self, policy: ChatClient, toolbox: ToolBox, prompts: PromptLibrary,
                 safeguards: SafeguardSettings = SafeguardSettings(), counter: TokenCounter = count_tokens):
        self.policy = policy
        self.toolbox = toolbox
        self.prompts = prompts
        self.safeguards = safeguards
        self.counter = counter

    def agent_for(self, task: RolloutTask) -> ReactAgent:
        return ReactAgent.for_mode(task.mode, self.policy, self.toolbox, self.prompts, task.budgets,
                                   repetition=self.safeguards.repetition(),
                                   max_consecutive_errors=self.safeguards.max_consecutive_errors,
                                   counter=self.counter)

    async def run_task(self, task: RolloutTask) -> Trajectory:
        """
        Roll out one task. Any failure ends the trajectory with error_cascade,
        keeping the steps taken so far.
        """
        instance = task.instance
        start = Trajectory(id=task.task_id, question=instance.question, image=instance.image,
                           ground_truth=instance.answer)
        agent = self.agent_for(task)
        episode = agent.new_episode(start)
        try:
            while not episode.done:
                await agent.step(episode)
        except Exception as e:
            logger.error(f"Rollout crashed for {task.task_id}: {e}", exc_info=logger.isEnabledFor(logging.DEBUG))
            episode.finish(Termination.ERROR_CASCADE)
        return episode.trajectory

    async def _timed(self, task: RolloutTask) -> Dict[str, Any]:
        started = time.perf_counter()
        trajectory = await self.run_task(task)
        wall_ms = int((time.perf_counter() - started) * 1000)
        return {"trajectory": trajectory, "metrics": metrics_for(trajectory, wall_ms, self.counter)}

    async def run_batch(self, tasks: Sequence[RolloutTask], concurrency: int,
                        show_progress: bool = False) -> BatchResult:
        """
        Run every task with up to `concurrency` trajectories in flight.

        Returns:
            BatchResult keyed by task id in task order.
        """
        if concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        ids = [task.task_id for task in tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique within a batch")

        queue: asyncio.Queue = asyncio.Queue()
        for task in tasks:
            queue.put_nowait(task)
        done: Dict[str, Dict[str, Any]] = {}
        started = time.perf_counter()

        with _progress(len(tasks), show_progress) as (progress, bar):
            async def worker():
                while True:
                    try:
                        task = queue.get_nowait()
                    except asyncio.QueueEmpty:
                        return
                    done[task.task_id] = await self._timed(task)
                    if progress is not None:
                        progress.advance(bar)

            workers = min(concurrency, len(tasks))
            await asyncio.gather(*(worker() for _ in range(workers)))

        wall_s = time.perf_counter() - started
        result = BatchResult(
            trajectories={task_id: done[task_id]["trajectory"] for task_id in ids},
            metrics=[done[task_id]["metrics"] for task_id in ids],
            wall_s=wall_s,
            peak_tool_workers=self.toolbox.pool.peak_active,
        )
        logger.info(f"Rolled out {len(tasks)} tasks in {wall_s:.2f}s (concurrency {concurrency}, "
                    f"peak tool workers {result.peak_tool_workers})")
        return result

    async def run_sequential(self, tasks: Sequence[RolloutTask]) -> BatchResult:
        """The synchronous baseline: one task after another, nothing overlapped."""
        started = time.perf_counter()
        trajectories: Dict[str, Trajectory] = {}
        metrics = []
        for task in tasks:
            outcome = await self._timed(task)
            trajectories[task.task_id] = outcome["trajectory"]
            metrics.append(outcome["metrics"])
        return BatchResult(trajectories, metrics, time.perf_counter() - started, self.toolbox.pool.peak_active)


class _progress:
    """`with _progress(n, enabled) as (progress, task)`; yields (None, None) when disabled."""

    def __init__(self, total: int, enabled: bool):
        self.progress: Optional[Progress] = None
        self.task = None
        if enabled:
            self.progress = Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"),
                                     BarColumn(), MofNCompleteColumn(), TimeElapsedColumn(), console=console)
            self.task = self.progress.add_task("Rolling out...", total=total)

    def __enter__(self):
        if self.progress is not None:
            self.progress.__enter__()
        return self.progress, self.task

    def __exit__(self, *args):
        if self.progress is not None:
            return self.progress.__exit__(*args)
        return False
