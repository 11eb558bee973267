"""
Simulated model roles.

SimModels answers every non-policy purpose (region proposal, judges,
summarizer, selector, question writer) by reading the structured context the
prompt was rendered from, so synthesis runs offline and deterministically.
"""
import logging
import re
from typing import Any, Dict, List, Optional, Sequence

from vdr.errors import GatewayError
from vdr.gateway import ChatReply, ChatTurn
from vdr.questions import chain_relation, describe_anchor, parse_question
from vdr.sim.world import IDENTITY, RELATION_LINE, SimWorld, entity_sections, region_fractions
from vdr.trajectory import ImageRef

logger = logging.getLogger(__name__)


def _words(text: str) -> set:
    return set(re.findall(r"[a-z0-9]+", text.lower()))


class SimModels:
    """ChatClient for every simulated model role; `policy` handles purpose="policy"."""

    def __init__(self, world: SimWorld, policy: Any = None):
        self.world = world
        self.policy = policy

    async def chat(self, turns: Sequence[ChatTurn], *, purpose: str = "chat",
                   context: Optional[Dict[str, Any]] = None) -> ChatReply:
        if purpose == "policy" and self.policy is not None:
            return await self.policy.chat(turns, purpose=purpose, context=context)
        handler = getattr(self, f"_{purpose}", None)
        if handler is None:
            raise GatewayError(f"simulated models cannot serve {purpose!r}", 1, kind="http")
        return ChatReply(handler(context or {}))

    def dominant(self, crop: ImageRef) -> List[str]:
        return [r.name for r, f in region_fractions(crop) if f >= self.world.hit_fraction]

    def _propose_regions(self, ctx: Dict[str, Any]) -> str:
        image: ImageRef = ctx["image"]
        regions = list(image.regions or ())
        if not regions:
            return "I cannot find any distinct entity."
        limit = ctx.get("max_regions", 4)
        offset = ((ctx.get("turn", 1) - 1) * limit) % len(regions)
        rotated = regions[offset:] + regions[:offset]
        return "\n".join(f"box: {r.box.x0}, {r.box.y0}, {r.box.x1}, {r.box.y1}" for r in rotated[:limit])

    def _judge_hit(self, ctx: Dict[str, Any]) -> str:
        evidence: List[str] = ctx.get("evidence", [])
        if not evidence:
            return "hit: 0\nNo evidence has been collected yet."
        truth = ctx.get("ground_truth") or ""
        parts = parse_question(ctx.get("question", ""))
        kind = parts.anchor_kind if parts else None
        for item in evidence:
            if truth and truth in item:
                return "hit: 1\nThe evidence names the answer."
            if kind and re.search(rf"^\S+ is a {kind}:", item, re.MULTILINE):
                return f"hit: 1\nThe {kind} in the image has been identified."
            if parts and parts.is_described:
                for name, _kind, _descriptor in IDENTITY.findall(item):
                    if self.world.follow(name, parts.anchor_path) == parts.anchor_target:
                        return f"hit: 1\nThe described entity in the image is {name}."
        return "hit: 0\nThe entity in question is still unidentified."

    def _summarize_page(self, ctx: Dict[str, Any]) -> str:
        page: str = ctx["page"]
        sections = entity_sections(page)
        crop: Optional[ImageRef] = ctx.get("crop")
        if crop is not None:
            visible = set(self.dominant(crop))
            matched = [text for name, text in sections.items() if name in visible]
            return "\n\n".join(matched) if matched else "NO MATCH"
        if not sections:
            return page.strip() or "NO MATCH"
        goal = _words(ctx.get("goal", ""))
        best = max(sections.values(), key=lambda text: len(goal & _words(text)))
        return best

    def _describe_image(self, ctx: Dict[str, Any]) -> str:
        image: ImageRef = ctx["image"]
        if not image.regions:
            return "The image shows an empty landscape with no distinct entities."
        return "The image shows " + "; ".join(f"a {r.descriptor}" for r in image.regions) + "."

    def agrees(self, answer: str, truth: str) -> bool:
        """The answer is the reference, or a sentence naming it and no other entity."""
        answer, truth = answer.strip(), truth.strip()
        if not truth:
            return False
        if answer == truth:
            return True
        if not re.search(rf"(?<!\w){re.escape(truth)}(?!\w)", answer):
            return False
        named = {word for word in re.findall(r"[A-Z][a-z]+", answer) if self.world.entity(word) is not None}
        return named <= {truth}

    def _verify_answer(self, ctx: Dict[str, Any]) -> str:
        same = self.agrees(ctx.get("answer") or "", ctx.get("ground_truth") or "")
        return "verdict: consistent" if same else "verdict: inconsistent"

    def _reward_judge(self, ctx: Dict[str, Any]) -> str:
        same = self.agrees(ctx.get("answer") or "", ctx.get("ground_truth") or "")
        return "verdict: correct" if same else "verdict: incorrect"

    def _select_image(self, ctx: Dict[str, Any]) -> str:
        image: ImageRef = ctx["image"]
        if image.regions:
            return "verdict: keep\nReal-world scene with identifiable entities."
        return "verdict: reject\nNo identifiable entity."

    def _direct_answer(self, ctx: Dict[str, Any]) -> str:
        parts = parse_question(ctx.get("question", ""))
        image: Optional[ImageRef] = ctx.get("image")
        if parts and parts.anchor_kind and not parts.relations and image is not None:
            for region in image.regions or ():
                entity = self.world.entity(region.name)
                if entity and entity.famous and entity.kind == parts.anchor_kind:
                    return entity.name
        return "I don't know."

    def _match_entity(self, ctx: Dict[str, Any]) -> str:
        on_page = entity_sections(ctx.get("page", ""))
        for name in self.dominant(ctx["crop"]):
            entity = self.world.entity(name)
            if name in on_page and entity is not None:
                return f"verdict: same\nentity: {name}\nkind: {entity.kind}\nappearance: {entity.descriptor}"
        return "verdict: different"

    def _entity_question(self, ctx: Dict[str, Any]) -> str:
        return f"question: What is the name of the {ctx['kind']} in the image?\nanswer: {ctx['name']}"

    def _extract_keywords(self, ctx: Dict[str, Any]) -> str:
        return ctx.get("entity", "")

    def _propose_questions(self, ctx: Dict[str, Any]) -> str:
        question, answer, n = ctx["question"], ctx["answer"], ctx.get("n", 3)
        candidates = []
        if ctx["kind"] == "answer_chain":
            section = entity_sections(ctx.get("facts", "")).get(answer, "")
            for relation, target, _url in RELATION_LINE.findall(section):
                candidates.append((chain_relation(question, relation), target))
        else:
            image: Optional[ImageRef] = ctx.get("image")
            others = [r.name for r in (image.regions or ()) if r.name != ctx["entity"]] if image is not None else []
            walk = ctx.get("walk", [])
            # longest description first, skipping any that names the answer or also fits another region
            for hops in range(len(walk), 0, -1):
                path = [relation for relation, _target in walk[:hops]]
                target = walk[hops - 1][1]
                if target == answer or any(self.world.follow(name, path) == target for name in others):
                    continue
                candidates.append((describe_anchor(question, path, target), answer))
        return "\n".join(f"question: {q} | answer: {a}" for q, a in candidates[:n])

    def _select_question(self, ctx: Dict[str, Any]) -> str:
        return "1"
