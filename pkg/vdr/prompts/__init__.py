"""
Prompt templates.

Every model-facing prompt is a Jinja2 file in this directory; a
`prompts_dir` in the engine config shadows any of them by file name.
"""
from pathlib import Path
from typing import Optional, Union

from jinja2 import ChoiceLoader, Environment, FileSystemLoader, StrictUndefined

TEMPLATE_DIR = Path(__file__).parent

TEMPLATES = (
    "policy_system",
    "vision_induction",
    "text_continuation",
    "judge_hit",
    "summarize_page",
    "describe_image",
    "verify_answer",
    "reward_judge",
    "select_image",
    "direct_answer",
    "match_entity",
    "entity_question",
    "extract_keywords",
    "propose_questions",
    "select_question",
)


class PromptLibrary:
    def __init__(self, prompts_dir: Optional[Union[str, Path]] = None):
        loaders = [FileSystemLoader(str(TEMPLATE_DIR))]
        if prompts_dir is not None:
            loaders.insert(0, FileSystemLoader(str(prompts_dir)))
        self.env = Environment(
            loader=ChoiceLoader(loaders),
            undefined=StrictUndefined,
            keep_trailing_newline=False,
            autoescape=False,
        )

    def render(self, name: str, /, **context) -> str:
        return self.env.get_template(f"{name}.j2").render(**context).strip()
