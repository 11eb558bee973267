"""
Trajectory data model shared by every pipeline.

A trajectory is the ordered record of one agent episode: the question, the
image (or its textual stand-in), and one Step per turn. Vision-phase steps
always come first, text-phase steps after them, and turn numbers run 1..n
without gaps. All types are frozen; building a longer trajectory means
creating a new value.
"""
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Tuple, Union

from vdr.errors import TrajectoryError

FORMAT_ERROR_MESSAGE = "format error, please try again"


class ToolName(str, Enum):
    VISUAL_SEARCH = "visual_search"
    WEB_SEARCH = "web_search"
    VISIT_PAGE = "visit_page"
    SUMMARIZE_PAGE = "summarize_page"
    CODE_EXEC = "code_exec"


class Status(str, Enum):
    OK = "ok"
    TOOL_ERROR = "tool_error"
    FORMAT_ERROR = "format_error"
    TIMEOUT = "timeout"


class Phase(str, Enum):
    VISION = "vision"
    TEXT = "text"


class Termination(str, Enum):
    ANSWERED = "answered"
    JUDGE_HIT_THEN_ANSWERED = "judge_hit_then_answered"
    MAX_TURNS = "max_turns"
    CONTEXT_EXCEEDED = "context_exceeded"
    REPETITION = "repetition"
    ERROR_CASCADE = "error_cascade"


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return max(0, self.width) * max(0, self.height)

    def is_valid_for(self, width: int, height: int) -> bool:
        return 0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height

    def intersect(self, other: "BoundingBox") -> Optional["BoundingBox"]:
        """Overlap of two boxes, or None when they do not overlap."""
        x0, y0 = max(self.x0, other.x0), max(self.y0, other.y0)
        x1, y1 = min(self.x1, other.x1), min(self.y1, other.y1)
        if x0 >= x1 or y0 >= y1:
            return None
        return BoundingBox(x0, y0, x1, y1)

    def contains(self, other: "BoundingBox") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def as_list(self) -> List[int]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class EntityRegion:
    """One entity drawn in a simulated image: what it looks like and where."""
    name: str
    kind: str
    descriptor: str
    box: BoundingBox


@dataclass(frozen=True)
class ImageRef:
    """
    An image as the engine sees it.

    Exactly one payload kind is set: `payload` holds encoded image bytes for
    real images, `regions` holds the entity layout of a simulated image.
    """
    id: str
    width: int
    height: int
    payload: Optional[bytes] = None
    regions: Optional[Tuple[EntityRegion, ...]] = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image {self.id} has invalid size {self.width}x{self.height}")
        if (self.payload is None) == (self.regions is None):
            raise ValueError(f"image {self.id} must carry exactly one payload kind")

    @property
    def is_sim(self) -> bool:
        return self.regions is not None

    @property
    def full_box(self) -> BoundingBox:
        return BoundingBox(0, 0, self.width, self.height)


@dataclass(frozen=True)
class CropSpec:
    box: BoundingBox
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"crop scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class VisualSearchArgs:
    crops: Tuple[CropSpec, ...]
    image_id: str = ""


@dataclass(frozen=True)
class WebSearchArgs:
    query: str


@dataclass(frozen=True)
class VisitPageArgs:
    url: str


@dataclass(frozen=True)
class SummarizePageArgs:
    url: str
    goal: str


@dataclass(frozen=True)
class CodeExecArgs:
    source: str


ToolArgs = Union[VisualSearchArgs, WebSearchArgs, VisitPageArgs, SummarizePageArgs, CodeExecArgs]

ARGS_BY_TOOL = {
    ToolName.VISUAL_SEARCH: VisualSearchArgs,
    ToolName.WEB_SEARCH: WebSearchArgs,
    ToolName.VISIT_PAGE: VisitPageArgs,
    ToolName.SUMMARIZE_PAGE: SummarizePageArgs,
    ToolName.CODE_EXEC: CodeExecArgs,
}


@dataclass(frozen=True)
class ToolCall:
    call_id: str
    tool: ToolName
    args: ToolArgs

    def __post_init__(self):
        expected = ARGS_BY_TOOL[self.tool]
        if not isinstance(self.args, expected):
            raise ValueError(f"{self.tool.value} call expects {expected.__name__}, got {type(self.args).__name__}")
        if self.tool is ToolName.VISUAL_SEARCH and not self.args.crops:
            raise ValueError("visual_search needs at least one crop")

    @property
    def fanout(self) -> int:
        """Number of observations this call produces."""
        if self.tool is ToolName.VISUAL_SEARCH:
            return len(self.args.crops)
        return 1


@dataclass(frozen=True)
class Observation:
    for_call: str
    status: Status
    content: str
    sources: Tuple[str, ...] = ()
    latency_ms: int = 0

    def __post_init__(self):
        if self.status is Status.OK and not self.content:
            raise ValueError("ok observation needs content")
        if self.status is Status.FORMAT_ERROR and self.content != FORMAT_ERROR_MESSAGE:
            raise ValueError("format_error observation must carry the recovery message")

    @classmethod
    def format_error(cls) -> "Observation":
        return cls(for_call="", status=Status.FORMAT_ERROR, content=FORMAT_ERROR_MESSAGE)


@dataclass(frozen=True)
class Step:
    """
    One ReAct turn: reasoning, then either tool calls or a final answer.

    A malformed step (unparseable model output) has neither calls nor answer;
    its reasoning is the raw response and it carries the single recovery
    observation.
    """
    turn: int
    phase: Phase
    reasoning: str
    calls: Tuple[ToolCall, ...] = ()
    answer: Optional[str] = None
    observations: Tuple[Observation, ...] = ()

    def __post_init__(self):
        if self.turn < 1:
            raise TrajectoryError(f"turn index must be >= 1, got {self.turn}")
        if self.answer is not None:
            if self.calls or self.observations:
                raise TrajectoryError(f"turn {self.turn}: terminal answer cannot carry calls or observations")
        elif not self.calls:
            if len(self.observations) != 1 or self.observations[0].status is not Status.FORMAT_ERROR:
                raise TrajectoryError(f"turn {self.turn}: malformed step needs exactly one format_error observation")
        elif len(self.observations) != sum(call.fanout for call in self.calls):
            raise TrajectoryError(
                f"turn {self.turn}: {len(self.observations)} observations for "
                f"{sum(call.fanout for call in self.calls)} expected")

    @property
    def is_terminal(self) -> bool:
        return self.answer is not None

    @property
    def is_malformed(self) -> bool:
        return self.answer is None and not self.calls

    @property
    def is_error_step(self) -> bool:
        """Malformed, or no observation came back ok."""
        if self.is_terminal:
            return False
        return all(obs.status is not Status.OK for obs in self.observations)


@dataclass(frozen=True)
class Trajectory:
    id: str
    question: str
    image: Optional[ImageRef] = None
    description: Optional[str] = None
    steps: Tuple[Step, ...] = ()
    termination: Optional[Termination] = None
    ground_truth: Optional[str] = None

    def __post_init__(self):
        problem = first_violation(self.steps)
        if problem:
            raise TrajectoryError(problem)

    @property
    def T_v(self) -> int:
        return sum(1 for step in self.steps if step.phase is Phase.VISION)

    @property
    def answer(self) -> Optional[str]:
        """The final answer a_output, if the last step gave one."""
        if self.steps and self.steps[-1].is_terminal:
            return self.steps[-1].answer
        return None

    @property
    def last_turn(self) -> int:
        return self.steps[-1].turn if self.steps else 0

    def vision_steps(self) -> Tuple[Step, ...]:
        return tuple(step for step in self.steps if step.phase is Phase.VISION)

    def text_steps(self) -> Tuple[Step, ...]:
        return tuple(step for step in self.steps if step.phase is Phase.TEXT)

    def with_steps(self, steps, **changes) -> "Trajectory":
        return replace(self, steps=tuple(steps), **changes)

    def finished(self, termination: Termination) -> "Trajectory":
        return replace(self, termination=termination)


def first_violation(steps) -> Optional[str]:
    """Name the first broken ordering invariant in a step list, or None."""
    seen_text = False
    for expected, step in enumerate(steps, 1):
        if step.turn != expected:
            return f"turn contiguity: expected turn {expected}, found {step.turn}"
        if step.phase is Phase.TEXT:
            seen_text = True
        elif seen_text:
            return f"phase ordering: vision step at turn {step.turn} after a text step"
        if step.is_terminal and expected != len(steps):
            return f"step shape: terminal answer at turn {step.turn} is not the last step"
    return None

