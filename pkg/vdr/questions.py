"""
Question phrasing shared by synthesis and the simulated policy.

    What is the name of the <rel> of ... the <kind> in the image?
    What is the name of the <rel> of ... the entity in the image whose <rel>['s <rel>]* is <Name>?
    What is the name of the <rel> of ... <Name>?
"""
import re
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

PREFIX = "What is the name of "
_QUESTION = re.compile(r"^What is the name of (.+)\?$", re.DOTALL)
_RELATION = re.compile(r"^the ([a-z]+) of (.+)$", re.DOTALL)
_VISUAL_ANCHOR = re.compile(r"^the ([a-z]+) in the image$")
_DESCRIBED_ANCHOR = re.compile(r"^the entity in the image whose ([a-z]+(?:'s [a-z]+)*) is (.+)$", re.DOTALL)


@dataclass(frozen=True)
class QuestionParts:
    relations: Tuple[str, ...]
    anchor_kind: Optional[str] = None
    anchor_name: Optional[str] = None
    anchor_path: Tuple[str, ...] = ()
    anchor_target: Optional[str] = None

    @property
    def is_visual(self) -> bool:
        return self.anchor_kind is not None or self.anchor_target is not None

    @property
    def is_described(self) -> bool:
        """The anchor is an entity in the image, known only by where its relations lead."""
        return self.anchor_target is not None


def entity_question(kind: str) -> str:
    return f"{PREFIX}the {kind} in the image?"


def text_question(relation: str, name: str) -> str:
    return f"{PREFIX}the {relation} of {name}?"


def chain_relation(question: str, relation: str) -> str:
    """One more hop: the answer becomes the `relation` of the old answer."""
    if not question.startswith(PREFIX):
        raise ValueError(f"cannot chain question {question!r}")
    return f"{PREFIX}the {relation} of {question[len(PREFIX):]}"


def describe_anchor(question: str, path: Sequence[str], target: str) -> str:
    """
    Swap the visual anchor of `question` for a description of the same
    entity: following the relations in `path` from it reaches `target`.
    An anchor that is already described is replaced.
    """
    parts = parse_question(question)
    if parts is None or not parts.is_visual:
        raise ValueError(f"question {question!r} has no visual anchor")
    if not path or not target.strip():
        raise ValueError("an anchor description needs a relation path and a target")
    chain = "".join(f"the {relation} of " for relation in parts.relations)
    whose = "'s ".join(path)
    return f"{PREFIX}{chain}the entity in the image whose {whose} is {target}?"


def parse_question(text: str) -> Optional[QuestionParts]:
    match = _QUESTION.match(text.strip())
    if not match:
        return None
    body = match.group(1)
    relations = []
    while True:
        step = _RELATION.match(body)
        if not step:
            break
        relations.append(step.group(1))
        body = step.group(2)
    described = _DESCRIBED_ANCHOR.match(body)
    if described:
        path = tuple(described.group(1).split("'s "))
        return QuestionParts(tuple(relations), anchor_path=path, anchor_target=described.group(2).strip())
    visual = _VISUAL_ANCHOR.match(body)
    if visual:
        return QuestionParts(tuple(relations), anchor_kind=visual.group(1))
    return QuestionParts(tuple(relations), anchor_name=body.strip())
