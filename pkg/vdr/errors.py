from typing import List, Optional


class VdrError(Exception):
    """Base error for the research engine."""
    pass


class TrajectoryError(VdrError):
    """Raised when a step would break trajectory ordering rules."""
    pass


class DecodeError(VdrError):
    """Raised when a serialized trajectory record is rejected."""

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        message = invariant if not detail else f"{invariant}: {detail}"
        super().__init__(message)


class ReactFormatError(VdrError):
    """The assistant response does not follow the think / tool_call / answer grammar."""
    pass


class GatewayError(VdrError):
    """A model endpoint call failed for good."""

    def __init__(self, message: str, attempts: int, kind: str = "exhausted"):
        self.attempts = attempts
        self.kind = kind
        super().__init__(f"{message} (kind={kind}, attempts={attempts})")


class ToolError(VdrError):
    """A tool backend could not serve a request."""
    pass


class ConfigError(VdrError):
    """Engine configuration is invalid."""

    def __init__(self, messages: List[str]):
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


class SynthesisError(VdrError):
    """VQA synthesis produced nothing releasable."""
    pass


class DescriptionError(VdrError):
    """Image description came back empty or unusable."""

    def __init__(self, message: str = "empty description", cause: Optional[Exception] = None):
        self.cause = cause
        super().__init__(message)
