"""
ReAct response grammar.

An assistant turn is a <think> block followed by exactly one of a
<tool_call> block or an <answer> block. The tool_call body is a JSON list of
calls, each {"id": ..., "name": ..., "arguments": {...}}; a single object is
accepted too. Arguments per tool:

    visual_search   {"crops": [{"box": [x0, y0, x1, y1], "scale": 1.5}], "image_id": "..."}
    web_search      {"query": "..."}
    visit_page      {"url": "..."}
    summarize_page  {"url": "...", "goal": "..."}
    code_exec       {"code": "..."}
"""
import re
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import orjson

from vdr.errors import ReactFormatError
from vdr.trajectory import (
    BoundingBox,
    CodeExecArgs,
    CropSpec,
    Observation,
    Step,
    SummarizePageArgs,
    ToolCall,
    ToolName,
    VisitPageArgs,
    VisualSearchArgs,
    WebSearchArgs,
)

TAGS = ("think", "tool_call", "answer")


@dataclass(frozen=True)
class ParsedTurn:
    reasoning: str
    calls: Tuple[ToolCall, ...] = ()
    answer: Optional[str] = None

    @property
    def is_terminal(self) -> bool:
        return self.answer is not None


def _block(text: str, tag: str) -> Optional[str]:
    opens = text.count(f"<{tag}>")
    closes = text.count(f"</{tag}>")
    if opens != closes or opens > 1:
        raise ReactFormatError(f"unbalanced <{tag}> tags")
    if opens == 0:
        return None
    match = re.search(rf"<{tag}>(.*?)</{tag}>", text, re.DOTALL)
    if not match:
        raise ReactFormatError(f"<{tag}> closes before it opens")
    return match.group(1)


def _int(value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"expected a number, got {value!r}")
    if isinstance(value, float) and not value.is_integer():
        raise ValueError(f"box coordinates must be integers, got {value}")
    return int(value)


def _text(arguments: Dict[str, Any], key: str) -> str:
    value = arguments[key]
    if not isinstance(value, str):
        raise ValueError(f"{key} must be a string")
    return value


def call_from_wire(obj: Any, default_id: str) -> ToolCall:
    """Build a ToolCall from its JSON form; raises ValueError/KeyError/TypeError."""
    if not isinstance(obj, dict):
        raise ValueError("each tool call must be an object")
    tool = ToolName(obj["name"])
    arguments = obj.get("arguments", {})
    if not isinstance(arguments, dict):
        raise ValueError("arguments must be an object")
    call_id = obj.get("id", default_id)
    if not isinstance(call_id, str) or not call_id:
        raise ValueError("call id must be a non-empty string")

    if tool is ToolName.VISUAL_SEARCH:
        crops = []
        for crop in arguments["crops"]:
            box = [_int(v) for v in crop["box"]]
            if len(box) != 4:
                raise ValueError("box needs four coordinates")
            scale = crop.get("scale", 1.0)
            if isinstance(scale, bool) or not isinstance(scale, (int, float)):
                raise ValueError("scale must be a number")
            crops.append(CropSpec(BoundingBox(*box), float(scale)))
        image_id = arguments.get("image_id", "")
        if not isinstance(image_id, str):
            raise ValueError("image_id must be a string")
        args = VisualSearchArgs(tuple(crops), image_id)
    elif tool is ToolName.WEB_SEARCH:
        args = WebSearchArgs(_text(arguments, "query"))
    elif tool is ToolName.VISIT_PAGE:
        args = VisitPageArgs(_text(arguments, "url"))
    elif tool is ToolName.SUMMARIZE_PAGE:
        args = SummarizePageArgs(_text(arguments, "url"), _text(arguments, "goal"))
    else:
        args = CodeExecArgs(_text(arguments, "code"))
    return ToolCall(call_id, tool, args)


def call_to_wire(call: ToolCall) -> Dict[str, Any]:
    args = call.args
    if call.tool is ToolName.VISUAL_SEARCH:
        arguments = {"crops": [{"box": c.box.as_list(), "scale": c.scale} for c in args.crops]}
        if args.image_id:
            arguments["image_id"] = args.image_id
    elif call.tool is ToolName.WEB_SEARCH:
        arguments = {"query": args.query}
    elif call.tool is ToolName.VISIT_PAGE:
        arguments = {"url": args.url}
    elif call.tool is ToolName.SUMMARIZE_PAGE:
        arguments = {"url": args.url, "goal": args.goal}
    else:
        arguments = {"code": args.source}
    return {"id": call.call_id, "name": call.tool.value, "arguments": arguments}


def parse_react(assistant_text: Union[str, bytes]) -> ParsedTurn:
    """
    Parse one assistant response.

    Returns a ParsedTurn or raises ReactFormatError; no other exception
    escapes, whatever the input. Leading and trailing whitespace of the
    reasoning and the answer is dropped; inner whitespace is kept.
    """
    if isinstance(assistant_text, (bytes, bytearray)):
        assistant_text = bytes(assistant_text).decode("utf-8", errors="replace")
    if not isinstance(assistant_text, str):
        raise ReactFormatError("response is not text")

    think = _block(assistant_text, "think")
    tool_body = _block(assistant_text, "tool_call")
    answer = _block(assistant_text, "answer")
    reasoning = think.strip() if think is not None else ""

    if (tool_body is None) == (answer is None):
        raise ReactFormatError("exactly one of <tool_call> or <answer> is required")
    if answer is not None:
        return ParsedTurn(reasoning=reasoning, answer=answer.strip())

    try:
        payload = orjson.loads(tool_body.strip())
        if isinstance(payload, dict):
            payload = [payload]
        if not isinstance(payload, list) or not payload:
            raise ValueError("tool_call body must be a non-empty list")
        calls = tuple(call_from_wire(obj, f"call_{i}") for i, obj in enumerate(payload))
    except (ValueError, KeyError, TypeError, AttributeError) as e:
        raise ReactFormatError(f"bad tool_call body: {e}") from e
    if len({call.call_id for call in calls}) != len(calls):
        raise ReactFormatError("duplicate call ids")
    return ParsedTurn(reasoning=reasoning, calls=calls)


def render_react(parsed: ParsedTurn) -> str:
    """
    Canonical text for a parsed turn.

    Reasoning and answer are written stripped, the same normalization
    parse_react applies, so parse_react(render_react(t)) equals t with
    its reasoning and answer stripped.
    """
    parts = [f"<think>\n{parsed.reasoning.strip()}\n</think>"]
    if parsed.answer is not None:
        parts.append(f"<answer>\n{parsed.answer.strip()}\n</answer>")
    else:
        body = orjson.dumps([call_to_wire(c) for c in parsed.calls], option=orjson.OPT_SORT_KEYS)
        parts.append(f"<tool_call>\n{body.decode()}\n</tool_call>")
    return "\n".join(parts)


def response_text(step: Step) -> str:
    """The assistant text a step stands for."""
    if step.is_malformed:
        return step.reasoning
    return render_react(ParsedTurn(step.reasoning, step.calls, step.answer))


def render_observations(observations: Sequence[Observation]) -> str:
    blocks: List[str] = []
    for obs in observations:
        header = f"[{obs.for_call or 'response'}] {obs.status.value}"
        if obs.sources:
            header += " " + " ".join(obs.sources)
        blocks.append(f"<tool_response>\n{header}\n{obs.content}\n</tool_response>")
    return "\n".join(blocks)
