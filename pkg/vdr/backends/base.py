from dataclasses import dataclass
from typing import Generic, List, Optional, Protocol, TypeVar

from vdr.trajectory import ImageRef

T = TypeVar("T")


@dataclass(frozen=True)
class CallKey:
    """Identifies one tool call; simulated randomness is derived from it."""
    seed: int
    task_id: str
    turn: int
    call_index: int

    def token(self) -> str:
        return f"{self.seed}|{self.task_id}|{self.turn}|{self.call_index}"


@dataclass(frozen=True)
class SearchHit:
    """Best image-search match for a crop."""
    url: str
    title: str
    score: float


@dataclass(frozen=True)
class SearchResult:
    url: str
    title: str
    snippet: str


@dataclass(frozen=True)
class Timed(Generic[T]):
    """A backend result plus the latency the backend reports for it."""
    value: T
    latency_ms: int


class ToolBackend(Protocol):
    """
    Blocking search, page and code services.

    Implementations may sleep or do network I/O; callers run them on the
    tool pool, never on the event loop.
    """

    def visual_search(self, crop: ImageRef, key: CallKey) -> Timed[Optional[SearchHit]]:
        ...

    def web_search(self, query: str, key: CallKey) -> Timed[List[SearchResult]]:
        ...

    def visit(self, url: str, key: CallKey) -> Timed[str]:
        ...

    def run_code(self, source: str, key: CallKey) -> Timed[str]:
        ...
