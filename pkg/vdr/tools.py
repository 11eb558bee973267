"""
Tool dispatch.

All blocking backend work goes through one bounded ToolPool shared by every
trajectory in a batch, so the event loop that coordinates rollouts never
blocks. Observations always come back in call order (crop order for
visual_search), whatever order the work finishes in.
"""
import asyncio
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Any, Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

from vdr.backends.base import CallKey, ToolBackend
from vdr.errors import GatewayError, ToolError
from vdr.gateway import ChatClient, ChatTurn, Role
from vdr.imaging import crop_image, expand_crop
from vdr.prompts import PromptLibrary
from vdr.trajectory import CropSpec, ImageRef, Observation, Status, ToolCall, ToolName

logger = logging.getLogger(__name__)

TOOLS: Dict[ToolName, str] = {
    ToolName.VISUAL_SEARCH: (
        "Image search over crops of the input image. arguments: "
        '{"crops": [{"box": [x0, y0, x1, y1], "scale": 1.0}]}; each crop is expanded about its center by scale.'),
    ToolName.WEB_SEARCH: 'Web search. arguments: {"query": "..."}',
    ToolName.VISIT_PAGE: 'Fetch a web page as markdown. arguments: {"url": "..."}',
    ToolName.SUMMARIZE_PAGE: 'Fetch a page and summarize it for a goal. arguments: {"url": "...", "goal": "..."}',
    ToolName.CODE_EXEC: 'Run Python and return stdout. arguments: {"code": "..."}',
}

VISION_TOOLS = frozenset({ToolName.VISUAL_SEARCH})
TEXT_TOOLS = frozenset({ToolName.WEB_SEARCH, ToolName.VISIT_PAGE, ToolName.SUMMARIZE_PAGE, ToolName.CODE_EXEC})
ALL_TOOLS = VISION_TOOLS | TEXT_TOOLS
NO_MATCH = "no match"


def tool_specs(allowed: FrozenSet[ToolName]) -> List[Dict[str, str]]:
    return [{"name": name.value, "description": TOOLS[name]} for name in ToolName if name in allowed]


class ToolPool:
    """Bounded thread pool for blocking tool work."""

    def __init__(self, size: int):
        if size < 1:
            raise ValueError("tool pool size must be >= 1")
        self.size = size
        self.executor = ThreadPoolExecutor(max_workers=size, thread_name_prefix="vdr-tool")
        self.active = 0
        self.peak_active = 0
        self._lock = threading.Lock()

    def _tracked(self, fn: Callable, *args):
        with self._lock:
            self.active += 1
            self.peak_active = max(self.peak_active, self.active)
        try:
            return fn(*args)
        finally:
            with self._lock:
                self.active -= 1

    async def run(self, fn: Callable, *args) -> Any:
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(self.executor, partial(self._tracked, fn, *args))

    def close(self):
        self.executor.shutdown(wait=False, cancel_futures=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass(frozen=True)
class Job:
    call: ToolCall
    crop: Optional[CropSpec]
    call_index: int


def fan_out(calls: Sequence[ToolCall]) -> List[Job]:
    """One job per observation slot: a job per crop, a job per text call."""
    jobs = []
    for call in calls:
        if call.tool is ToolName.VISUAL_SEARCH:
            jobs.extend(Job(call, crop, len(jobs) + i) for i, crop in enumerate(call.args.crops))
        else:
            jobs.append(Job(call, None, len(jobs)))
    return jobs


def _error(call: ToolCall, message: str, latency_ms: int = 0, status: Status = Status.TOOL_ERROR) -> Observation:
    return Observation(call.call_id, status, message, latency_ms=latency_ms)


class ToolBox:
    """Runs tool calls against a backend through the shared pool."""

    def __init__(self, backend: ToolBackend, pool: ToolPool, summarizer: ChatClient,
                 prompts: PromptLibrary, seed: int = 0, tool_timeout_ms: int = 30000,
                 max_page_chars: int = 4000):
        self.backend = backend
        self.pool = pool
        self.summarizer = summarizer
        self.prompts = prompts
        self.seed = seed
        self.tool_timeout_ms = tool_timeout_ms
        self.max_page_chars = max_page_chars

    async def execute(self, calls: Sequence[ToolCall], image: Optional[ImageRef], task_id: str, turn: int,
                      allowed: FrozenSet[ToolName] = ALL_TOOLS, question: str = "") -> Tuple[Observation, ...]:
        jobs = fan_out(calls)
        results = await asyncio.gather(*(
            self._guarded(job, image, CallKey(self.seed, task_id, turn, job.call_index), allowed, question)
            for job in jobs
        ))
        return tuple(results)

    async def _guarded(self, job: Job, image: Optional[ImageRef], key: CallKey,
                       allowed: FrozenSet[ToolName], question: str) -> Observation:
        if job.call.tool not in allowed:
            return _error(job.call, f"tool not available: {job.call.tool.value}")
        try:
            return await asyncio.wait_for(self._run(job, image, key, question), self.tool_timeout_ms / 1000)
        except asyncio.TimeoutError:
            logger.debug(f"{key.task_id} turn {key.turn}: {job.call.tool.value} timed out")
            return _error(job.call, "tool call timed out", self.tool_timeout_ms, Status.TIMEOUT)
        except ToolError as e:
            return _error(job.call, str(e))
        except Exception as e:
            logger.warning(f"{key.task_id} turn {key.turn}: {job.call.tool.value} failed: {e!r}")
            return _error(job.call, f"tool failed: {e}")

    async def _run(self, job: Job, image: Optional[ImageRef], key: CallKey, question: str) -> Observation:
        call, args = job.call, job.call.args
        if call.tool is ToolName.VISUAL_SEARCH:
            return await self.search_crop(call, job.crop, image, key, question)
        if call.tool is ToolName.WEB_SEARCH:
            reply = await self.pool.run(self.backend.web_search, args.query, key)
            if not reply.value:
                return _error(call, "no results", reply.latency_ms)
            lines = [f"{i}. {r.title} ({r.url})\n{r.snippet}" for i, r in enumerate(reply.value, 1)]
            return Observation(call.call_id, Status.OK, "\n".join(lines),
                               tuple(r.url for r in reply.value), reply.latency_ms)
        if call.tool is ToolName.VISIT_PAGE:
            reply = await self.pool.run(self.backend.visit, args.url, key)
            page = reply.value[:self.max_page_chars] or "(empty page)"
            return Observation(call.call_id, Status.OK, page, (args.url,), reply.latency_ms)
        if call.tool is ToolName.SUMMARIZE_PAGE:
            reply = await self.pool.run(self.backend.visit, args.url, key)
            summary = await self.summarize(args.url, reply.value, args.goal)
            if summary is None:
                return _error(call, "summarizer unavailable", reply.latency_ms)
            return Observation(call.call_id, Status.OK, summary, (args.url,), reply.latency_ms)
        reply = await self.pool.run(self.backend.run_code, args.source, key)
        return Observation(call.call_id, Status.OK, reply.value, (), reply.latency_ms)

    async def summarize(self, url: str, page: str, goal: str, crop: Optional[ImageRef] = None) -> Optional[str]:
        """Summary text, NO_MATCH when the page is not about the crop, None if the model failed."""
        page = page[:self.max_page_chars]
        text = self.prompts.render("summarize_page", goal=goal, url=url, page=page, crop=crop is not None)
        turn = ChatTurn(Role.USER, text, images=(crop,) if crop is not None else ())
        try:
            reply = await self.summarizer.chat([turn], purpose="summarize_page",
                                               context={"url": url, "page": page, "goal": goal, "crop": crop})
        except GatewayError as e:
            logger.warning(f"Summarizer failed for {url}: {e}")
            return None
        summary = reply.text.strip()
        if not summary or summary.upper().startswith("NO MATCH"):
            return NO_MATCH
        return summary

    async def search_crop(self, call: ToolCall, crop: CropSpec, image: Optional[ImageRef], key: CallKey,
                          question: str = "") -> Observation:
        """Crop, image search, visit, summarize: one crop of one visual_search call."""
        if image is None:
            return _error(call, "no image in context")
        if call.args.image_id and call.args.image_id != image.id:
            return _error(call, f"unknown image {call.args.image_id}")
        try:
            box = expand_crop(crop, image)
        except ValueError as e:
            return _error(call, str(e))
        cropped = await self.pool.run(crop_image, image, box)
        search = await self.pool.run(self.backend.visual_search, cropped, key)
        if search.value is None:
            return _error(call, NO_MATCH, search.latency_ms)
        url = search.value.url
        visit = await self.pool.run(self.backend.visit, url, key)
        latency = search.latency_ms + visit.latency_ms
        goal = question or "identify the entity shown in the crop"
        summary = await self.summarize(url, visit.value, goal, crop=cropped)
        if summary is None:
            return _error(call, "summarizer unavailable", latency)
        if summary == NO_MATCH:
            return _error(call, NO_MATCH, latency)
        return Observation(call.call_id, Status.OK, summary, (url,), latency)
