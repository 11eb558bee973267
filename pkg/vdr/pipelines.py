"""
Wiring: turn an EngineConfig into backends, model clients and tool boxes,
and run the trajectory synthesis pipeline (vision phase, bridge, text phase,
merge, rejection sampling) over a dataset.
"""
import asyncio
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

from vdr.backends.base import ToolBackend
from vdr.backends.live import LiveBackend
from vdr.bridge import Verdict, bridge_context, describe_image, merge, rejection_sample, run_text_phase
from vdr.budget import Budgets
from vdr.config import EngineConfig, LatencySpec, Mode, SafeguardSettings, VisionSettings
from vdr.dataset import VqaInstance
from vdr.errors import DescriptionError
from vdr.gateway import HttpChatClient, ModelRoles, ScriptedChatClient
from vdr.imaging import image_from_file
from vdr.prompts import PromptLibrary
from vdr.react import ParsedTurn, render_react
from vdr.rollout import BatchResult, RolloutEngine, make_tasks
from vdr.sim import SimBackend, SimModels, SimPolicy, SimWorld, text_only_questions
from vdr.sim import build_world as sim_build_world
from vdr.sim.world import world_from_settings
from vdr.store import AuditLog
from vdr.tools import ToolBox, ToolPool
from vdr.trajectory import ImageRef, Termination, ToolCall, ToolName, Trajectory, WebSearchArgs
from vdr.vision import run_vision_phase

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".webp")


def build_world(config: EngineConfig) -> Optional[SimWorld]:
    return world_from_settings(config.world) if config.backend == "sim" else None


def build_backend(config: EngineConfig, world: Optional[SimWorld], sleep: bool = True) -> ToolBackend:
    if config.backend == "sim":
        return SimBackend(world, sleep=sleep)
    return LiveBackend(config.live, code_timeout_s=config.code_timeout_s)


def build_roles(config: EngineConfig, world: Optional[SimWorld]) -> ModelRoles:
    """Simulated models for the sim backend, one HTTP client per endpoint otherwise."""
    if config.backend == "sim":
        return ModelRoles.single(SimModels(world, policy=SimPolicy(config.vision.scales)))
    endpoints = config.endpoints

    def client(name: str) -> HttpChatClient:
        endpoint = getattr(endpoints, name)
        return HttpChatClient(endpoint, api_key=os.environ.get(endpoint.api_key_env))

    return ModelRoles(client("policy"), client("foundation"), client("mllm"), client("judge"),
                      client("selector"), client("summarizer"), client("verifier"))


def build_toolbox(config: EngineConfig, backend: ToolBackend, roles: ModelRoles, prompts: PromptLibrary,
                  pool_size: Optional[int] = None) -> ToolBox:
    pool = ToolPool(pool_size or config.rollout.tool_pool_size)
    return ToolBox(backend, pool, roles.summarizer, prompts, seed=config.world.seed,
                   tool_timeout_ms=config.rollout.tool_timeout_ms, max_page_chars=config.rollout.max_page_chars)


def load_images(directory: Union[str, Path]) -> List[ImageRef]:
    """Every image file in a directory, sorted by name."""
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return [image_from_file(path, path.stem) for path in paths]


@dataclass(frozen=True)
class SynthesisOutcome:
    trajectory: Optional[Trajectory]
    verdict: Verdict


class TrajectorySynthesizer:
    """Builds C_multimodal for VQA instances and keeps the consistent ones."""

    def __init__(self, roles: ModelRoles, toolbox: ToolBox, prompts: PromptLibrary, budgets: Budgets,
                 vision: VisionSettings = VisionSettings(), safeguards: SafeguardSettings = SafeguardSettings(),
                 audit: Optional[AuditLog] = None):
        self.roles = roles
        self.toolbox = toolbox
        self.prompts = prompts
        self.budgets = budgets
        self.vision = vision
        self.safeguards = safeguards
        self.audit = audit or AuditLog()

    async def synthesize(self, instance: VqaInstance) -> SynthesisOutcome:
        task_id = f"traj-{instance.instance_id}"
        image = instance.image
        if image is None:
            c_vision = Trajectory(id=task_id, question=instance.question, ground_truth=instance.answer)
            description = None
        else:
            c_vision = await run_vision_phase(task_id, image, instance.question, instance.answer, self.budgets,
                                              self.vision, self.roles.mllm, self.roles.judge, self.toolbox,
                                              self.prompts)
            try:
                description = await describe_image(image, self.roles.mllm, self.prompts)
            except DescriptionError as e:
                self.audit.record("describe_image", task_id, "description failed", detail=str(e))
                return SynthesisOutcome(None, Verdict(False, "description failed"))

        if c_vision.termination is Termination.CONTEXT_EXCEEDED:
            merged = c_vision
        else:
            bridged = bridge_context(c_vision, description, self.prompts)
            c_text = await run_text_phase(bridged, self.roles.foundation, self.toolbox, self.prompts, self.budgets,
                                          self.safeguards.repetition(), self.safeguards.max_consecutive_errors)
            merged = merge(c_vision, c_text)
        verdict = await rejection_sample(merged, self.roles.verifier, self.prompts, self.audit)
        logger.debug(f"{task_id}: T_v={merged.T_v}, {len(merged.steps)} steps, {verdict.reason}")
        return SynthesisOutcome(merged, verdict)

    async def run(self, instances: Sequence[VqaInstance], concurrency: int = 8) -> List[SynthesisOutcome]:
        """Outcomes in instance order."""
        gate = asyncio.Semaphore(concurrency)

        async def one(instance: VqaInstance) -> SynthesisOutcome:
            async with gate:
                return await self.synthesize(instance)

        outcomes = await asyncio.gather(*(one(i) for i in instances))
        kept = sum(1 for o in outcomes if o.verdict.keep)
        logger.info(f"Kept {kept} of {len(outcomes)} synthesized trajectories")
        return list(outcomes)


def kept_trajectories(outcomes: Sequence[SynthesisOutcome]) -> List[Trajectory]:
    return [o.trajectory for o in outcomes if o.verdict.keep and o.trajectory is not None]


def discard_counts(outcomes: Sequence[SynthesisOutcome]) -> List[Tuple[str, int]]:
    counts = {}
    for outcome in outcomes:
        counts[outcome.verdict.reason] = counts.get(outcome.verdict.reason, 0) + 1
    return sorted(counts.items())


BENCH_TOOLS = ("visual_search", "web_search", "visit_page", "code_exec")


def bench_policy() -> ScriptedChatClient:
    """One web search per task, then an answer: a single tool turn per task."""

    def reply(turns, purpose, context):
        context = context or {}
        if not context.get("steps"):
            call = ToolCall("call_0", ToolName.WEB_SEARCH, WebSearchArgs(context.get("question", "")))
            return render_react(ParsedTurn("Search once.", calls=(call,)))
        return render_react(ParsedTurn("Done.", answer="unknown"))

    return ScriptedChatClient(reply)


def bench_world(config: EngineConfig) -> SimWorld:
    """The configured world, with uniform 200-800 ms tool latency unless latency is configured."""
    settings = config.world
    latency = settings.latency or {tool: LatencySpec() for tool in BENCH_TOOLS}
    return sim_build_world(settings.seed, settings.n_entities, settings.n_pages, settings.n_images,
                           settings.hit_fraction, settings.perfect_match_fraction, latency, settings.latency_scale)


async def run_bench(config: EngineConfig, n_tasks: int, concurrency: int,
                    tool_pool_size: int) -> Tuple[BatchResult, BatchResult]:
    """Same tasks through the async scheduler and the synchronous baseline."""
    world = bench_world(config)
    prompts = PromptLibrary(config.prompts_dir)
    roles = ModelRoles.single(SimModels(world))
    instances = text_only_questions(world, n_tasks)
    tasks = make_tasks(instances, config.budgets.build(), Mode.CIS_TS)
    results = []
    for pool_size, parallel in ((tool_pool_size, True), (1, False)):
        toolbox = build_toolbox(config, SimBackend(world), roles, prompts, pool_size)
        engine = RolloutEngine(bench_policy(), toolbox, prompts, config.safeguards)
        try:
            if parallel:
                results.append(await engine.run_batch(tasks, concurrency))
            else:
                results.append(await engine.run_sequential(tasks))
        finally:
            toolbox.pool.close()
    return results[0], results[1]
