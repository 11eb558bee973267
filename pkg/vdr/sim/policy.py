"""
A rule-based research policy for the simulated world.

It reads what the trajectory has found so far, decides the next tool call the
way a competent agent would (crop the entity, identify it, then follow the
relation chain page by page) and writes the decision in ReAct form. What it
can do is limited by the tools the rollout mode allows, which is what makes
the ablation modes differ.
"""
import re
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Set, Tuple, Union

from vdr.gateway import ChatReply, ChatTurn
from vdr.questions import QuestionParts, parse_question
from vdr.react import ParsedTurn, render_react
from vdr.sim.world import IDENTITY, RELATION_LINE, entity_sections
from vdr.trajectory import (
    BoundingBox,
    CropSpec,
    ImageRef,
    Status,
    Step,
    ToolCall,
    ToolName,
    VisitPageArgs,
    VisualSearchArgs,
    WebSearchArgs,
)

UNKNOWN = "unknown"
RESULT_LINE = re.compile(r"^\d+\. (.+) \((\S+)\)$", re.MULTILINE)


@dataclass
class Knowledge:
    """Facts a policy can read off the observations of a trajectory."""
    identities: Dict[str, Tuple[str, str]] = field(default_factory=dict)
    facts: Dict[Tuple[str, str], str] = field(default_factory=dict)
    urls: Dict[str, str] = field(default_factory=dict)
    results: List[Tuple[str, str]] = field(default_factory=list)
    visited: Set[str] = field(default_factory=set)
    queries: Set[str] = field(default_factory=set)
    searched_image: bool = False
    searched_boxes: Set[BoundingBox] = field(default_factory=set)
    sighted: List[str] = field(default_factory=list)

    @classmethod
    def from_steps(cls, steps: Sequence[Step]) -> "Knowledge":
        k = cls()
        for step in steps:
            image_calls = set()
            for call in step.calls:
                if call.tool is ToolName.VISUAL_SEARCH:
                    k.searched_image = True
                    k.searched_boxes.update(crop.box for crop in call.args.crops)
                    image_calls.add(call.call_id)
                elif call.tool is ToolName.WEB_SEARCH:
                    k.queries.add(call.args.query)
                elif call.tool in (ToolName.VISIT_PAGE, ToolName.SUMMARIZE_PAGE):
                    k.visited.add(call.args.url)
            for obs in step.observations:
                if obs.status is Status.OK:
                    k.read(obs.content, obs.sources)
                    if obs.for_call in image_calls:
                        k.sight(obs.content)
        return k

    def sight(self, content: str):
        """Entities an image search showed to be in the picture."""
        for name, _kind, _descriptor in IDENTITY.findall(content):
            if name not in self.sighted:
                self.sighted.append(name)

    def read(self, content: str, sources: Sequence[str]):
        for name, kind, descriptor in IDENTITY.findall(content):
            self.identities[name] = (kind, descriptor)
            if len(sources) == 1:
                self.urls.setdefault(name, sources[0])
        for name, section in entity_sections(content).items():
            for relation, target, url in RELATION_LINE.findall(section):
                self.facts[(name, relation)] = target
                self.urls.setdefault(target, url)
        for title, url in RESULT_LINE.findall(content):
            if (title, url) not in self.results:
                self.results.append((title, url))

    def identify(self, kind: str, descriptor: Optional[str]) -> Optional[str]:
        for name, (known_kind, known_descriptor) in self.identities.items():
            if known_kind == kind and (descriptor is None or known_descriptor == descriptor):
                return name
        return None


def perceived_descriptors(image: Optional[ImageRef], description: Optional[str]) -> List[str]:
    """What the policy can see: region descriptors, or their textual stand-in."""
    if image is not None and image.regions is not None:
        return [r.descriptor for r in image.regions]
    if description and description.startswith("The image shows "):
        body = description[len("The image shows "):].rstrip(".")
        return [item[2:] if item.startswith("a ") else item for item in body.split("; ")]
    return []


def _descriptor_of(kind: str, descriptors: Sequence[str]) -> Optional[str]:
    for d in descriptors:
        if f" {kind} with a " in d or d.startswith(f"{kind} number"):
            return d
    return None


def _call(tool: ToolName, args) -> Tuple[ToolCall, ...]:
    return (ToolCall("call_0", tool, args),)


class SimPolicy:
    """ChatClient that plays the policy role from structured context."""

    def __init__(self, scales: Sequence[float] = (1.0, 1.5, 2.5)):
        self.scales = tuple(scales)

    async def chat(self, turns: Sequence[ChatTurn], *, purpose: str = "policy",
                   context: Optional[Dict[str, Any]] = None) -> ChatReply:
        return ChatReply(render_react(self.decide(context or {})))

    def decide(self, ctx: Dict[str, Any]) -> ParsedTurn:
        parts = parse_question(ctx.get("question", ""))
        if parts is None:
            return ParsedTurn("I cannot work out what the question asks for.", answer=UNKNOWN)
        allowed: FrozenSet[ToolName] = frozenset(ctx.get("allowed", ()))
        knowledge = Knowledge.from_steps(ctx.get("steps", ()))
        image = ctx.get("image")

        if parts.anchor_name:
            current = parts.anchor_name
        elif parts.is_described:
            located = self.locate(parts, image, ctx.get("description"), knowledge, allowed,
                                  ctx.get("multi_scale", True))
            if isinstance(located, ParsedTurn):
                return located
            current = located
        else:
            descriptor = _descriptor_of(parts.anchor_kind, perceived_descriptors(image, ctx.get("description")))
            current = knowledge.identify(parts.anchor_kind, descriptor)
            if current is None:
                return self.identify(parts, descriptor, image, knowledge, allowed, ctx.get("multi_scale", True))

        for relation in reversed(parts.relations):
            target = knowledge.facts.get((current, relation))
            if target is None:
                return self.research(current, relation, knowledge, allowed)
            current = target
        return ParsedTurn(f"The chain resolves to {current}.", answer=current)

    def identify(self, parts: QuestionParts, descriptor: Optional[str], image: Optional[ImageRef],
                 knowledge: Knowledge, allowed: FrozenSet[ToolName], multi_scale: bool) -> ParsedTurn:
        kind = parts.anchor_kind
        if ToolName.VISUAL_SEARCH in allowed and image is not None and not knowledge.searched_image:
            if multi_scale:
                regions = [r for r in image.regions or () if r.descriptor == descriptor] or list(image.regions or ())
                crops = tuple(CropSpec(r.box, s) for r in regions[:4] for s in self.scales)
            else:
                crops = ()
            if not crops:
                crops = (CropSpec(image.full_box, 1.0),)
            return ParsedTurn(f"I need to identify the {kind} in the image, so I search image crops.",
                              calls=_call(ToolName.VISUAL_SEARCH, VisualSearchArgs(crops, image.id)))
        if ToolName.WEB_SEARCH in allowed and descriptor and descriptor not in knowledge.queries:
            return ParsedTurn(f"Image search did not identify the {kind}; I search its appearance instead.",
                              calls=_call(ToolName.WEB_SEARCH, WebSearchArgs(descriptor)))
        if ToolName.VISIT_PAGE in allowed:
            for _title, url in knowledge.results[:2]:
                if url not in knowledge.visited:
                    return ParsedTurn("One of the results may describe it; I open it.",
                                      calls=_call(ToolName.VISIT_PAGE, VisitPageArgs(url)))
        return ParsedTurn(f"I could not identify the {kind}.", answer=UNKNOWN)

    def locate(self, parts: QuestionParts, image: Optional[ImageRef], description: Optional[str],
               knowledge: Knowledge, allowed: FrozenSet[ToolName], multi_scale: bool) -> Union[str, ParsedTurn]:
        """
        The entity in the image whose relation path reaches the target, or the
        next call towards finding it. Every entity in the image is searched
        before any path is researched.
        """
        perceived = perceived_descriptors(image, description)
        candidates = list(knowledge.sighted)
        candidates += [name for name, (_kind, descriptor) in knowledge.identities.items()
                       if descriptor in perceived and name not in candidates]
        open_ends: List[Tuple[str, str]] = []
        for name in candidates:
            current = name
            for relation in parts.anchor_path:
                target = knowledge.facts.get((current, relation))
                if target is None:
                    # a read page without the relation rules the candidate out
                    if knowledge.urls.get(current) not in knowledge.visited:
                        open_ends.append((current, relation))
                    break
                current = target
            else:
                if current == parts.anchor_target:
                    return name

        whose = "'s ".join(parts.anchor_path)
        if ToolName.VISUAL_SEARCH in allowed and image is not None:
            unsearched = [r for r in image.regions or () if r.box not in knowledge.searched_boxes]
            if multi_scale and unsearched:
                crops = tuple(CropSpec(r.box, s) for r in unsearched[:4] for s in self.scales)
                return ParsedTurn(f"I need the entity whose {whose} is {parts.anchor_target}; "
                                  f"I identify the entities in the image first.",
                                  calls=_call(ToolName.VISUAL_SEARCH, VisualSearchArgs(crops, image.id)))
            if not knowledge.searched_image:
                return ParsedTurn("I search the whole image first.",
                                  calls=_call(ToolName.VISUAL_SEARCH,
                                              VisualSearchArgs((CropSpec(image.full_box, 1.0),), image.id)))
        for current, relation in open_ends:
            turn = self.research(current, relation, knowledge, allowed)
            if not turn.is_terminal:
                return turn
        known = {descriptor for _kind, descriptor in knowledge.identities.values()}
        if ToolName.WEB_SEARCH in allowed:
            for descriptor in perceived:
                if descriptor not in known and descriptor not in knowledge.queries:
                    return ParsedTurn(f"Something in the image looks like a {descriptor}; I search for it.",
                                      calls=_call(ToolName.WEB_SEARCH, WebSearchArgs(descriptor)))
        if ToolName.VISIT_PAGE in allowed:
            for _title, url in knowledge.results:
                if url not in knowledge.visited:
                    return ParsedTurn("One of the results may describe an entity in the image; I open it.",
                                      calls=_call(ToolName.VISIT_PAGE, VisitPageArgs(url)))
        return ParsedTurn(f"No entity in the image has a {whose} called {parts.anchor_target}.", answer=UNKNOWN)

    def research(self, name: str, relation: str, knowledge: Knowledge, allowed: FrozenSet[ToolName]) -> ParsedTurn:
        url = knowledge.urls.get(name)
        if ToolName.VISIT_PAGE in allowed and url and url not in knowledge.visited:
            return ParsedTurn(f"I need the {relation} of {name}; I open the page about {name}.",
                              calls=_call(ToolName.VISIT_PAGE, VisitPageArgs(url)))
        if ToolName.WEB_SEARCH in allowed and name not in knowledge.queries:
            return ParsedTurn(f"I need the {relation} of {name}; I search for {name}.",
                              calls=_call(ToolName.WEB_SEARCH, WebSearchArgs(name)))
        if ToolName.VISIT_PAGE in allowed:
            for title, result_url in knowledge.results:
                if name in title and result_url not in knowledge.visited:
                    return ParsedTurn(f"The result titled {title} should cover {name}.",
                                      calls=_call(ToolName.VISIT_PAGE, VisitPageArgs(result_url)))
        return ParsedTurn(f"I could not find the {relation} of {name}.", answer=UNKNOWN)
