"""
Chat-completion clients.

Every model role (policy, foundation model, judges, selector, summarizer)
is reached through the ChatClient protocol. HttpChatClient talks to an
OpenAI-compatible endpoint; ScriptedChatClient replays fixed replies for
tests and the benchmark harness.
"""
import asyncio
import base64
import logging
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import httpx
from tenacity import AsyncRetrying, retry_if_exception, stop_after_attempt, wait_random_exponential

from vdr.budget import count_tokens
from vdr.config import ModelEndpoint
from vdr.errors import GatewayError
from vdr.trajectory import ImageRef

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"
    TOOL = "tool"


@dataclass(frozen=True)
class ChatTurn:
    role: Role
    content: str
    images: Tuple[ImageRef, ...] = ()
    call_id: Optional[str] = None
    call_ids: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ChatReply:
    text: str
    attempts: int = 1


def validate_turns(turns: Sequence[ChatTurn]):
    """Tool turns must answer a call id issued by an earlier assistant turn."""
    issued = set()
    for index, turn in enumerate(turns):
        if turn.role is Role.ASSISTANT:
            issued.update(turn.call_ids)
        elif turn.role is Role.TOOL and turn.call_id not in issued:
            raise ValueError(f"turn {index}: tool turn references unknown call id {turn.call_id!r}")


class ChatClient(Protocol):
    async def chat(self, turns: Sequence[ChatTurn], *, purpose: str = "chat",
                   context: Optional[Dict[str, Any]] = None) -> ChatReply:
        ...


def _image_part(image: ImageRef) -> Dict[str, Any]:
    if image.payload is None:
        return {"type": "text", "text": f"[simulated image {image.id} {image.width}x{image.height}]"}
    encoded = base64.b64encode(image.payload).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{encoded}"}}


def to_wire(turns: Sequence[ChatTurn]) -> List[Dict[str, Any]]:
    """OpenAI-style message list. Tool results go back as user turns, the policy reads them as text."""
    messages = []
    for turn in turns:
        role = Role.USER if turn.role is Role.TOOL else turn.role
        if turn.images:
            content: Any = [{"type": "text", "text": turn.content}] + [_image_part(i) for i in turn.images]
        else:
            content = turn.content
        messages.append({"role": role.value, "content": content})
    return messages


class _RetryableStatus(Exception):
    def __init__(self, response: httpx.Response):
        self.response = response
        super().__init__(f"HTTP {response.status_code}")


def _should_retry(error: BaseException) -> bool:
    return isinstance(error, (_RetryableStatus, httpx.TransportError))


class HttpChatClient:
    """
    Chat client for one endpoint.

    At most `max_in_flight` requests are outstanding at once; transient
    failures (timeouts, connection errors, 429 and 5xx) are retried with
    full-jitter exponential backoff.
    """

    def __init__(self, endpoint: ModelEndpoint, api_key: Optional[str] = None,
                 transport: Optional[httpx.AsyncBaseTransport] = None):
        self.endpoint = endpoint
        self.api_key = api_key if api_key is not None else os.environ.get(endpoint.api_key_env, "")
        self.transport = transport
        self.in_flight = 0
        self.peak_in_flight = 0
        self._loop = None
        self._client: Optional[httpx.AsyncClient] = None
        self._semaphore: Optional[asyncio.Semaphore] = None

    async def _bind(self):
        """Clients and permits belong to the running event loop; a client left from an earlier loop is closed first."""
        loop = asyncio.get_running_loop()
        if self._loop is not loop:
            stale = self._client
            self._loop = loop
            self._client = httpx.AsyncClient(
                base_url=self.endpoint.base_url,
                timeout=self.endpoint.timeout_ms / 1000,
                transport=self.transport,
            )
            self._semaphore = asyncio.Semaphore(self.endpoint.max_in_flight)
            if stale is not None:
                await self._close_stale(stale)

    async def _close_stale(self, client: httpx.AsyncClient):
        try:
            await client.aclose()
        except (RuntimeError, httpx.HTTPError) as e:
            # pooled connections of a closed loop cannot be shut down from this one
            logger.debug(f"{self.endpoint.model_name}: stale client close failed: {e}")

    def _check_window(self, turns: Sequence[ChatTurn]):
        prompt = sum(count_tokens(turn.content) for turn in turns)
        window = self.endpoint.context_window
        if prompt + self.endpoint.max_tokens > window:
            raise GatewayError(
                f"{self.endpoint.model_name}: {prompt} prompt tokens + {self.endpoint.max_tokens} "
                f"completion tokens exceed the {window}-token context window", 0, kind="context")

    async def _post(self, payload: Dict[str, Any]) -> str:
        async with self._semaphore:
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            try:
                headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
                response = await self._client.post("/chat/completions", json=payload, headers=headers)
            finally:
                self.in_flight -= 1
        if response.status_code in RETRYABLE_STATUS:
            raise _RetryableStatus(response)
        response.raise_for_status()
        try:
            return response.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise GatewayError(f"{self.endpoint.model_name}: malformed response body", 1, kind="http") from e

    async def chat(self, turns: Sequence[ChatTurn], *, purpose: str = "chat",
                   context: Optional[Dict[str, Any]] = None) -> ChatReply:
        validate_turns(turns)
        self._check_window(turns)
        await self._bind()
        payload = {
            "model": self.endpoint.model_name,
            "messages": to_wire(turns),
            "temperature": self.endpoint.temperature,
            "max_tokens": self.endpoint.max_tokens,
        }
        retry = self.endpoint.retry
        attempts = 0
        logger.debug(f"{self.endpoint.model_name} <- {purpose} ({len(turns)} turns)")
        try:
            async for attempt in AsyncRetrying(
                stop=stop_after_attempt(retry.max_attempts),
                wait=wait_random_exponential(multiplier=retry.backoff_base_ms / 1000, max=30),
                retry=retry_if_exception(_should_retry),
                reraise=True,
            ):
                with attempt:
                    attempts = attempt.retry_state.attempt_number
                    text = await self._post(payload)
        except GatewayError as e:
            e.attempts = attempts
            raise
        except httpx.TimeoutException as e:
            raise GatewayError(f"{self.endpoint.model_name}: timed out", attempts, kind="timeout") from e
        except _RetryableStatus as e:
            raise GatewayError(f"{self.endpoint.model_name}: retries exhausted ({e})", attempts) from e
        except httpx.HTTPStatusError as e:
            raise GatewayError(f"{self.endpoint.model_name}: HTTP {e.response.status_code}", attempts,
                               kind="http") from e
        except httpx.TransportError as e:
            raise GatewayError(f"{self.endpoint.model_name}: {e}", attempts) from e
        return ChatReply(text=text, attempts=attempts)

    async def aclose(self):
        if self._client is not None:
            await self._client.aclose()
            self._client = None
            self._loop = None


ScriptFn = Callable[[Sequence[ChatTurn], str, Optional[Dict[str, Any]]], str]


@dataclass
class ScriptedChatClient:
    """
    Replays a script: either a list consumed in order or a function of
    (turns, purpose, context). Exceptions in a list are raised in turn.
    """
    script: Union[List[Union[str, Exception]], ScriptFn]
    calls: List[Tuple[str, Optional[Dict[str, Any]]]] = field(default_factory=list)
    _cursor: int = 0

    async def chat(self, turns: Sequence[ChatTurn], *, purpose: str = "chat",
                   context: Optional[Dict[str, Any]] = None) -> ChatReply:
        self.calls.append((purpose, context))
        if callable(self.script):
            return ChatReply(self.script(turns, purpose, context))
        if self._cursor >= len(self.script):
            raise GatewayError("script exhausted", 1)
        item = self.script[self._cursor]
        self._cursor += 1
        if isinstance(item, Exception):
            raise item
        return ChatReply(item)


@dataclass
class FailingChatClient:
    """An endpoint that is down."""
    kind: str = "exhausted"
    attempts: int = 3

    async def chat(self, turns: Sequence[ChatTurn], *, purpose: str = "chat",
                   context: Optional[Dict[str, Any]] = None) -> ChatReply:
        raise GatewayError("endpoint unavailable", self.attempts, kind=self.kind)


POSITIVE = {"yes", "true", "1", "consistent", "correct", "keep", "accept", "same", "match", "hit"}
NEGATIVE = {"no", "false", "0", "inconsistent", "incorrect", "reject", "different", "miss", "none"}
VERDICT_LINE = re.compile(r"\b(?:verdict|hit|decision|judgement|judgment)\s*[:=]\s*([a-z0-9]+)")


def parse_verdict(text: str) -> Optional[bool]:
    """Read a binary verdict from a judge-style reply; None when unclear."""
    lowered = text.strip().lower()
    match = VERDICT_LINE.search(lowered)
    if match:
        token = match.group(1)
    else:
        words = re.findall(r"[a-z0-9]+", lowered)
        if not words:
            return None
        token = words[0]
    if token in POSITIVE:
        return True
    if token in NEGATIVE:
        return False
    return None


@dataclass
class ModelRoles:
    """The chat clients a pipeline talks to, one per model role."""
    policy: ChatClient
    foundation: ChatClient
    mllm: ChatClient
    judge: ChatClient
    selector: ChatClient
    summarizer: ChatClient
    verifier: ChatClient

    @classmethod
    def single(cls, client: ChatClient) -> "ModelRoles":
        return cls(client, client, client, client, client, client, client)

    async def aclose(self):
        seen = set()
        for client in vars(self).values():
            if id(client) not in seen and hasattr(client, "aclose"):
                seen.add(id(client))
                await client.aclose()
