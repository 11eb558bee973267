"""Rollout safeguards: degenerate repetition and consecutive error streaks."""
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

from vdr.trajectory import Step, Termination


class StepOutcome(str, Enum):
    OK = "ok"
    FORMAT_ERROR = "format_error"
    TOOL_ERROR = "tool_error"
    REPETITION = "repetition"


@dataclass(frozen=True)
class RepetitionParams:
    ngram: int = 32
    min_chars: int = 1024
    min_repeats: int = 4

    def __post_init__(self):
        if self.ngram < 2:
            raise ValueError("ngram must be >= 2")
        if self.min_repeats < 1:
            raise ValueError("min_repeats must be >= 1")


def detect_repetition(response_text: str, params: RepetitionParams = RepetitionParams()) -> bool:
    """True when some character n-gram occurs at least min_repeats times."""
    if len(response_text) < params.min_chars:
        return False
    n = params.ngram
    counts = Counter()
    for i in range(len(response_text) - n + 1):
        gram = response_text[i:i + n]
        counts[gram] += 1
        if counts[gram] >= params.min_repeats:
            return True
    return False


def outcome_of(step: Step) -> StepOutcome:
    if step.is_malformed:
        return StepOutcome.FORMAT_ERROR
    if step.is_error_step:
        return StepOutcome.TOOL_ERROR
    return StepOutcome.OK


@dataclass
class SafeguardState:
    """Per-trajectory safeguard counters. One writer: the task advancing the trajectory."""
    repetition_params: RepetitionParams = RepetitionParams()
    max_consecutive_errors: int = 3
    consecutive_errors: int = 0
    history: List[StepOutcome] = field(default_factory=list)

    def record(self, outcome: StepOutcome) -> Optional[Termination]:
        """Returns the termination reason, or None to keep going."""
        self.history.append(outcome)
        if outcome is StepOutcome.REPETITION:
            return Termination.REPETITION
        if outcome is StepOutcome.OK:
            self.consecutive_errors = 0
            return None
        self.consecutive_errors += 1
        if self.consecutive_errors >= self.max_consecutive_errors:
            return Termination.ERROR_CASCADE
        return None


def record_step_outcome(state: SafeguardState, outcome: StepOutcome) -> Optional[Termination]:
    """None to continue, or the termination reason."""
    return state.record(outcome)
