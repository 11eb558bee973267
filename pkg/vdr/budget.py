"""Turn and token budgets, and the only sanctioned way to grow a trajectory."""
from dataclasses import dataclass
from typing import Callable, Union

from vdr.errors import TrajectoryError
from vdr.react import response_text
from vdr.trajectory import Phase, Step, Termination, Trajectory

TokenCounter = Callable[[str], int]


def count_tokens(text: str) -> int:
    """Approximate token count: ceil(utf-8 bytes / 4)."""
    return (len(text.encode("utf-8")) + 3) // 4


@dataclass(frozen=True)
class Budgets:
    max_turns: int = 50
    max_context_tokens: int = 65536
    max_turn_tokens: int = 4096

    def __post_init__(self):
        for name in ("max_turns", "max_context_tokens", "max_turn_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class BudgetViolation:
    budget: str
    limit: int
    actual: int

    @property
    def termination(self) -> Termination:
        if self.budget == "max_turns":
            return Termination.MAX_TURNS
        return Termination.CONTEXT_EXCEEDED


def turn_tokens(step: Step, counter: TokenCounter = count_tokens) -> int:
    """Tokens of the reasoning plus the rendered action."""
    return counter(response_text(step))


def step_tokens(step: Step, counter: TokenCounter = count_tokens) -> int:
    return turn_tokens(step, counter) + sum(counter(obs.content) for obs in step.observations)


def context_tokens(trajectory: Trajectory, counter: TokenCounter = count_tokens) -> int:
    total = counter(trajectory.question) + counter(trajectory.description or "")
    return total + sum(step_tokens(step, counter) for step in trajectory.steps)


def append_step(
    trajectory: Trajectory,
    step: Step,
    budgets: Budgets,
    counter: TokenCounter = count_tokens,
) -> Union[Trajectory, BudgetViolation]:
    """
    Append `step` if every budget still holds.

    Ordering problems are programming errors and raise TrajectoryError;
    running out of budget is an expected outcome and comes back as a
    BudgetViolation value.
    """
    if step.turn != trajectory.last_turn + 1:
        raise TrajectoryError(
            f"non-contiguous turn index: expected {trajectory.last_turn + 1}, got {step.turn}")
    if trajectory.steps:
        last = trajectory.steps[-1]
        if last.phase is Phase.TEXT and step.phase is Phase.VISION:
            raise TrajectoryError(f"phase regression at turn {step.turn}")
        if last.is_terminal:
            raise TrajectoryError(f"turn {last.turn} already answered")

    if step.turn > budgets.max_turns:
        return BudgetViolation("max_turns", budgets.max_turns, step.turn)
    used = turn_tokens(step, counter)
    if used > budgets.max_turn_tokens:
        return BudgetViolation("max_turn_tokens", budgets.max_turn_tokens, used)

    extended = trajectory.with_steps(trajectory.steps + (step,))
    total = context_tokens(extended, counter)
    if total > budgets.max_context_tokens:
        return BudgetViolation("max_context_tokens", budgets.max_context_tokens, total)
    return extended
