import asyncio
import time

from vdr.backends.base import Timed
from vdr.gateway import FailingChatClient
from vdr.sim import SimBackend
from vdr.tools import NO_MATCH, TEXT_TOOLS, ToolBox, ToolPool, fan_out, tool_specs
from vdr.trajectory import (
    BoundingBox,
    CodeExecArgs,
    CropSpec,
    Status,
    SummarizePageArgs,
    ToolCall,
    ToolName,
    VisitPageArgs,
    VisualSearchArgs,
    WebSearchArgs,
)


def crowded(world):
    return next(image for image in world.images if image.regions and len(image.regions) >= 2)


def execute(toolbox, calls, image=None, **kwargs):
    return asyncio.run(toolbox.execute(calls, image, "task", 1, **kwargs))


class SlowBackend(SimBackend):
    def run_code(self, source, key):
        time.sleep(0.2)
        return Timed("late", 200)


class FlakyBackend(SimBackend):
    def visual_search(self, crop, key):
        if key.call_index == 0:
            raise RuntimeError("index shard offline")
        return super().visual_search(crop, key)


class TestFanOut:
    def test_one_job_per_crop(self):
        crops = tuple(CropSpec(BoundingBox(0, 0, 10, 10), s) for s in (1.0, 1.5, 2.5))
        calls = (ToolCall("a", ToolName.VISUAL_SEARCH, VisualSearchArgs(crops)),
                 ToolCall("b", ToolName.CODE_EXEC, CodeExecArgs("1")))
        jobs = fan_out(calls)
        assert [(job.call.call_id, job.call_index) for job in jobs] == [("a", 0), ("a", 1), ("a", 2), ("b", 3)]

    def test_specs_follow_the_allowed_set(self):
        assert {spec["name"] for spec in tool_specs(TEXT_TOOLS)} == {t.value for t in TEXT_TOOLS}


class TestToolBox:
    def test_observations_come_back_in_crop_order(self, toolbox, world):
        image = crowded(world)
        region = image.regions[0]
        crops = (CropSpec(image.full_box, 1.0), CropSpec(region.box, 1.0), CropSpec(region.box, 1.5))
        call = ToolCall("vs", ToolName.VISUAL_SEARCH, VisualSearchArgs(crops, image.id))
        observations = execute(toolbox, (call,), image, question="What is the name of it?")
        assert len(observations) == 3
        assert observations[0].status is Status.TOOL_ERROR
        assert observations[0].content == NO_MATCH
        assert observations[1].status is Status.OK
        assert observations[1].sources == (world.entity(region.name).url,)
        assert region.name in observations[1].content

    def test_text_tools(self, toolbox, world):
        entity = world.entities[2]
        calls = (
            ToolCall("s", ToolName.WEB_SEARCH, WebSearchArgs(entity.name)),
            ToolCall("v", ToolName.VISIT_PAGE, VisitPageArgs(entity.url)),
            ToolCall("p", ToolName.SUMMARIZE_PAGE, SummarizePageArgs(entity.url, f"who is {entity.name}")),
            ToolCall("c", ToolName.CODE_EXEC, CodeExecArgs("2**10")),
        )
        search, visit, summary, code = execute(toolbox, calls)
        assert search.status is Status.OK and search.sources[0] == entity.url
        assert search.content.startswith(f"1. {world.page(entity.url).title} ({entity.url})")
        assert visit.content.startswith("# ")
        assert summary.content.startswith(f"## {entity.name}")
        assert code.content == "1024"

    def test_disallowed_tool(self, toolbox):
        call = ToolCall("c", ToolName.CODE_EXEC, CodeExecArgs("1+1"))
        (observation,) = execute(toolbox, (call,), allowed=frozenset())
        assert observation.status is Status.TOOL_ERROR
        assert observation.content == "tool not available: code_exec"

    def test_backend_errors_become_observations(self, toolbox):
        calls = (ToolCall("v", ToolName.VISIT_PAGE, VisitPageArgs("https://nowhere.invalid/x")),
                 ToolCall("c", ToolName.CODE_EXEC, CodeExecArgs("1/0")),
                 ToolCall("s", ToolName.WEB_SEARCH, WebSearchArgs("the of")))
        visit, code, search = execute(toolbox, calls)
        assert visit.status is Status.TOOL_ERROR and "404" in visit.content
        assert code.status is Status.TOOL_ERROR
        assert search.content == "no results"

    def test_visual_search_without_an_image(self, toolbox):
        call = ToolCall("vs", ToolName.VISUAL_SEARCH, VisualSearchArgs((CropSpec(BoundingBox(0, 0, 5, 5)),)))
        (observation,) = execute(toolbox, (call,))
        assert observation.content == "no image in context"

    def test_wrong_image_id(self, toolbox, world):
        image = crowded(world)
        call = ToolCall("vs", ToolName.VISUAL_SEARCH, VisualSearchArgs((CropSpec(image.full_box),), "img-9999"))
        (observation,) = execute(toolbox, (call,), image)
        assert "unknown image" in observation.content

    def test_timeout(self, world, pool, prompts, roles):
        toolbox = ToolBox(SlowBackend(world, sleep=False), pool, roles.summarizer, prompts, tool_timeout_ms=20)
        (observation,) = execute(toolbox, (ToolCall("c", ToolName.CODE_EXEC, CodeExecArgs("1")),))
        assert observation.status is Status.TIMEOUT

    def test_summarizer_outage(self, world, pool, prompts):
        toolbox = ToolBox(SimBackend(world, sleep=False), pool, FailingChatClient(), prompts)
        entity = world.entities[0]
        call = ToolCall("p", ToolName.SUMMARIZE_PAGE, SummarizePageArgs(entity.url, "anything"))
        (observation,) = execute(toolbox, (call,))
        assert observation.content == "summarizer unavailable"

    def test_unexpected_backend_failure_stays_with_its_crop(self, world, pool, prompts, roles):
        toolbox = ToolBox(FlakyBackend(world, sleep=False), pool, roles.summarizer, prompts)
        image = crowded(world)
        region = image.regions[0]
        crops = (CropSpec(region.box, 1.0), CropSpec(region.box, 1.0))
        call = ToolCall("vs", ToolName.VISUAL_SEARCH, VisualSearchArgs(crops, image.id))
        failed, found = execute(toolbox, (call,), image, question="What is the name of it?")
        assert failed.status is Status.TOOL_ERROR
        assert failed.content == "tool failed: index shard offline"
        assert found.status is Status.OK
        assert region.name in found.content


class TestToolPool:
    def test_bounded_concurrency(self):
        with ToolPool(2) as pool:
            async def burst():
                await asyncio.gather(*(pool.run(time.sleep, 0.02) for _ in range(8)))

            asyncio.run(burst())
            assert pool.peak_active == 2
