import numpy as np
import pytest

from vdr.errors import ReactFormatError
from vdr.react import ParsedTurn, parse_react, render_observations, render_react, response_text
from vdr.tests.helpers import search_step
from vdr.trajectory import (
    BoundingBox,
    CodeExecArgs,
    CropSpec,
    Observation,
    Phase,
    Status,
    Step,
    SummarizePageArgs,
    ToolCall,
    ToolName,
    VisitPageArgs,
    VisualSearchArgs,
    WebSearchArgs,
)


class TestParse:
    def test_tool_call(self):
        text = ('<think>look closer</think>\n<tool_call>[{"id": "a", "name": "visual_search", '
                '"arguments": {"crops": [{"box": [1, 2, 30, 40], "scale": 1.5}]}}]</tool_call>')
        parsed = parse_react(text)
        assert parsed.reasoning == "look closer"
        assert not parsed.is_terminal
        call = parsed.calls[0]
        assert call.tool is ToolName.VISUAL_SEARCH
        assert call.args.crops == (CropSpec(BoundingBox(1, 2, 30, 40), 1.5),)

    def test_single_object_and_default_id(self):
        parsed = parse_react('<think>x</think><tool_call>{"name": "web_search", "arguments": {"query": "q"}}'
                             '</tool_call>')
        assert parsed.calls == (ToolCall("call_0", ToolName.WEB_SEARCH, WebSearchArgs("q")),)

    def test_answer(self):
        parsed = parse_react("<think>sure</think><answer> Moraki </answer>")
        assert parsed.is_terminal
        assert parsed.answer == "Moraki"

    def test_missing_think_is_allowed(self):
        assert parse_react("<answer>x</answer>").reasoning == ""

    def test_bytes_are_decoded(self):
        assert parse_react("<answer>é</answer>".encode("utf-8")).answer == "é"

    @pytest.mark.parametrize("text", [
        "",
        "plain prose",
        "<think>a</think>",
        "<think>a</think><answer>x</answer><tool_call>[]</tool_call>",
        "<think>a</think><answer>x</answer><answer>y</answer>",
        "<think>a</think><answer>x",
        "</answer>x<answer>",
        "<tool_call>not json</tool_call>",
        "<tool_call>[]</tool_call>",
        '<tool_call>[{"name": "teleport", "arguments": {}}]</tool_call>',
        '<tool_call>[{"name": "web_search", "arguments": {"query": 3}}]</tool_call>',
        '<tool_call>[{"name": "visual_search", "arguments": {"crops": [{"box": [1, 2, 3]}]}}]</tool_call>',
        '<tool_call>[{"name": "visual_search", "arguments": {"crops": [{"box": [0, 0, 1.5, 2]}]}}]</tool_call>',
        '<tool_call>[{"name": "visual_search", "arguments": {"crops": []}}]</tool_call>',
        '<tool_call>[{"name": "visual_search", "arguments": {"crops": [{"box": [0, 0, 2, 2], "scale": 0}]}}]'
        '</tool_call>',
        '<tool_call>[{"id": "a", "name": "web_search", "arguments": {"query": "q"}},'
        ' {"id": "a", "name": "web_search", "arguments": {"query": "r"}}]</tool_call>',
    ])
    def test_malformed_responses(self, text):
        with pytest.raises(ReactFormatError):
            parse_react(text)

    def test_random_input_only_raises_format_errors(self):
        rng = np.random.default_rng(5)
        pieces = ["<think>", "</think>", "<answer>", "</answer>", "<tool_call>", "</tool_call>", "{", "}",
                  "[", "]", '"name"', ":", '"web_search"', "x", " ", '"arguments"', "\n", "\x00"]
        for _ in range(2000):
            text = "".join(rng.choice(pieces, size=int(rng.integers(0, 20))))
            try:
                parse_react(text)
            except ReactFormatError:
                pass

    def test_non_text_input(self):
        with pytest.raises(ReactFormatError):
            parse_react(42)


class TestRender:
    def test_render_parses_back(self):
        crops = (CropSpec(BoundingBox(0, 0, 10, 10), 2.0),)
        parsed = ParsedTurn("hmm", calls=(ToolCall("c1", ToolName.VISUAL_SEARCH, VisualSearchArgs(crops, "img")),))
        assert parse_react(render_react(parsed)) == parsed

    def test_edge_whitespace_is_normalized(self):
        padded = ParsedTurn("\n  let me think \n", answer="  Moraki\t")
        text = render_react(padded)
        assert "<answer>\nMoraki\n</answer>" in text
        assert parse_react(text) == ParsedTurn("let me think", answer="Moraki")
        inner = ParsedTurn("first line\n\n  second line", answer="two  words")
        assert parse_react(render_react(inner)) == inner

    def test_random_turns_survive_render_and_parse(self):
        rng = np.random.default_rng(23)
        alphabet = list("abcXYZ019 .,;:!?'\"\\/{}[]()-_=+\n\té漢ß→")
        tools = [ToolName.VISUAL_SEARCH, ToolName.WEB_SEARCH, ToolName.VISIT_PAGE,
                 ToolName.SUMMARIZE_PAGE, ToolName.CODE_EXEC]

        def text(min_size=0):
            return "".join(rng.choice(alphabet, size=int(rng.integers(min_size, 40))))

        def call(index):
            tool = tools[int(rng.integers(0, len(tools)))]
            if tool is ToolName.VISUAL_SEARCH:
                crops = []
                for _ in range(int(rng.integers(1, 4))):
                    x0, y0 = (int(v) for v in rng.integers(0, 500, size=2))
                    w, h = (int(v) for v in rng.integers(1, 300, size=2))
                    crops.append(CropSpec(BoundingBox(x0, y0, x0 + w, y0 + h), float(rng.uniform(0.5, 4.0))))
                args = VisualSearchArgs(tuple(crops), "img-" + str(int(rng.integers(0, 99))))
            elif tool is ToolName.WEB_SEARCH:
                args = WebSearchArgs(text(1))
            elif tool is ToolName.VISIT_PAGE:
                args = VisitPageArgs("https://example.org/" + text(1))
            elif tool is ToolName.SUMMARIZE_PAGE:
                args = SummarizePageArgs("https://example.org/p", text(1))
            else:
                args = CodeExecArgs(text(1))
            return ToolCall(f"call_{index}", tool, args)

        for _ in range(500):
            if rng.random() < 0.3:
                turn = ParsedTurn(text().strip(), answer=text(1).strip())
            else:
                turn = ParsedTurn(text().strip(), calls=tuple(call(i) for i in range(int(rng.integers(1, 4)))))
            assert parse_react(render_react(turn)) == turn

    def test_malformed_step_keeps_the_raw_text(self):
        step = Step(1, Phase.VISION, "<<garbage", observations=(Observation.format_error(),))
        assert response_text(step) == "<<garbage"

    def test_observation_blocks(self):
        step = search_step(1)
        text = render_observations(step.observations)
        assert text.startswith("<tool_response>\n[call_1] ok")
        failed = render_observations([Observation("c", Status.TOOL_ERROR, "404 not found")])
        assert "[c] tool_error" in failed
        assert "404 not found" in failed
