"""
VQA synthesis.

Images are curated by size and by a selector model, entities in them are
verified by multi-scale image search, and each verified entity seeds a simple
entity question. Fuzzy multi-hop questions are then grown from the seed by
alternating two rewrites, each run as a small editorial round (extract
keywords, retrieve, draft candidates, pick one):

    answer_chain   the answer moves one relation further away
    entity_walk    the entity is named only by where a walk along its relation
                   links leads, e.g. "the entity in the image whose owner's coach is X"

Every released instance is re-checked so it can be neither answered without
tools nor found by a whole-image search; whether a reply gives the answer is
decided by the verifier model.
"""
import asyncio
import hashlib
import logging
import re
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from vdr.backends.base import CallKey, ToolBackend
from vdr.bridge import Verdict, check_answer
from vdr.dataset import ObfuscationKind, ObfuscationStep, Source, VqaInstance
from vdr.errors import GatewayError, SynthesisError, ToolError
from vdr.gateway import ChatClient, ChatTurn, ModelRoles, Role, parse_verdict
from vdr.imaging import crop_image, expand_box
from vdr.prompts import PromptLibrary
from vdr.store import AuditLog
from vdr.tools import ToolPool
from vdr.trajectory import BoundingBox, ImageRef
from vdr.vision import propose_regions

logger = logging.getLogger(__name__)

MIN_IMAGE_SIDE = 224
MAX_WALK_HOPS = 3
CANDIDATES_PER_ROUND = 3
SEED_QUESTION = "Which entities in this image can be identified?"

FIELD_LINE = re.compile(r"^\s*([a-z_]+)\s*:\s*(.+?)\s*$", re.MULTILINE)
CANDIDATE_LINE = re.compile(r"^\s*question:\s*(.+?)\s*\|\s*answer:\s*(.+?)\s*$", re.MULTILINE)
HEADING = re.compile(r"^#{1,6} (.+?)\s*$", re.MULTILINE)
RELATION_LINK = re.compile(r"^- ([a-z][a-z ]*?): \[([^\]]+)\]\((https?://[^)\s]+)\)\s*$", re.MULTILINE)


def reply_fields(text: str) -> Dict[str, str]:
    """`key: value` lines of a model reply; the first occurrence of a key wins."""
    fields: Dict[str, str] = {}
    for key, value in FIELD_LINE.findall(text):
        fields.setdefault(key, value)
    return fields


def relation_links(markdown: str, name: str) -> List[Tuple[str, str, str]]:
    """(relation, target, url) links listed under the heading for `name`."""
    headings = list(HEADING.finditer(markdown))
    for index, heading in enumerate(headings):
        if heading.group(1) != name:
            continue
        end = headings[index + 1].start() if index + 1 < len(headings) else len(markdown)
        return RELATION_LINK.findall(markdown[heading.end():end])
    return []


def walk_relations(name: str, url: str, hops: int, fetch: Callable[[str], str],
                   rng: np.random.Generator) -> List[Tuple[str, str, str]]:
    """
    Random walk along the relation links of `name`, whose page is `url`.

    Returns the (relation, target, target_url) hops taken. No entity is
    visited twice; the walk stops early where every link leads back.
    """
    seen = {name}
    walk: List[Tuple[str, str, str]] = []
    for _ in range(hops):
        options = [link for link in relation_links(fetch(url), name) if link[1] not in seen]
        if not options:
            break
        relation, target, target_url = options[int(rng.integers(len(options)))]
        walk.append((relation, target, target_url))
        seen.add(target)
        name, url = target, target_url
    return walk


def mentions(text: str, name: str) -> bool:
    """`name` appears in `text` as a whole word, ignoring case."""
    name = name.strip()
    return bool(name) and re.search(rf"(?<!\w){re.escape(name)}(?!\w)", text, re.IGNORECASE) is not None


def _seed_of(*parts: object) -> int:
    token = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "big")


def _same_answer(a: str, b: str) -> bool:
    return a.strip().casefold() == b.strip().casefold()


@dataclass(frozen=True)
class EntityMatch:
    name: str
    url: str
    scale: float
    kind: str = "entity"
    descriptor: str = ""


@dataclass(frozen=True)
class Obfuscation:
    """Result of one rewrite round; `applied` is False for a no-op."""
    instance: VqaInstance
    applied: bool
    reason: str = ""


class VqaForge:
    def __init__(self, backend: ToolBackend, pool: ToolPool, roles: ModelRoles, prompts: PromptLibrary,
                 seed: int = 0, scales: Sequence[float] = (1.0, 1.5, 2.5), max_regions: int = 4,
                 perfect_match_fraction: float = 0.9, audit: Optional[AuditLog] = None):
        self.backend = backend
        self.pool = pool
        self.roles = roles
        self.prompts = prompts
        self.seed = seed
        self.scales = tuple(scales)
        self.max_regions = max_regions
        self.perfect_match_fraction = perfect_match_fraction
        self.audit = audit or AuditLog()

    def _key(self, subject: str, stage: int, index: int = 0) -> CallKey:
        return CallKey(self.seed, f"forge-{subject}", stage, index)

    async def _ask(self, client: ChatClient, purpose: str, template: str, context: Dict,
                   image: Optional[ImageRef] = None, render: Optional[Dict] = None) -> str:
        """Render `template` (from `render`, else from `context`) and send it with the context attached."""
        text = self.prompts.render(template, **(context if render is None else render))
        images = (image,) if image is not None else ()
        reply = await client.chat([ChatTurn(Role.USER, text, images=images)], purpose=purpose, context=context)
        return reply.text

    async def _agrees(self, question: str, reply: str, answer: str, subject: str) -> Verdict:
        """Does `reply` give `answer`? Exact matches skip the verifier."""
        if _same_answer(reply, answer):
            return Verdict(True, "consistent")
        return await check_answer(question, reply, answer, self.roles.verifier, self.prompts, subject)

    def _discard(self, event: str, subject: str, reason: str, **details) -> Verdict:
        self.audit.record(event, subject, reason, **details)
        return Verdict(False, reason)

    async def filter_image(self, image: ImageRef) -> Verdict:
        """Size rule first, then the selector model."""
        if min(image.width, image.height) < MIN_IMAGE_SIDE:
            return self._discard("filter_image", image.id, "size", width=image.width, height=image.height)
        try:
            reply = await self._ask(self.roles.selector, "select_image", "select_image", {"image": image},
                                    image=image)
        except GatewayError as e:
            logger.warning(f"Selector failed for {image.id}: {e}")
            return self._discard("filter_image", image.id, "selector unavailable")
        if not parse_verdict(reply):
            return self._discard("filter_image", image.id, "selector")
        return Verdict(True, "ok")

    async def filter_candidate(self, instance: VqaInstance) -> Verdict:
        """Reject questions a bare model answers and images a whole-image search already finds."""
        subject = instance.instance_id
        try:
            direct = await self._ask(self.roles.mllm, "direct_answer", "direct_answer",
                                     {"question": instance.question, "image": instance.image},
                                     image=instance.image)
        except GatewayError as e:
            logger.warning(f"Direct-answer check failed for {subject}: {e}")
            return self._discard("filter_candidate", subject, "unverifiable")
        agreement = await self._agrees(instance.question, direct, instance.answer, subject)
        if agreement.keep:
            return self._discard("filter_candidate", subject, "direct_answerable", reply=direct)
        if agreement.reason == "unverifiable":
            return self._discard("filter_candidate", subject, "unverifiable")
        if instance.image is not None:
            try:
                found = await self.pool.run(self.backend.visual_search, instance.image, self._key(subject, 0))
            except ToolError as e:
                logger.warning(f"Whole-image search failed for {subject}: {e}")
                return self._discard("filter_candidate", subject, "unverifiable")
            if found.value is not None and found.value.score >= self.perfect_match_fraction:
                return self._discard("filter_candidate", subject, "full_image_hit", url=found.value.url)
        return Verdict(True, "ok")

    async def verify_entity(self, image: ImageRef, box: BoundingBox,
                            scales: Optional[Sequence[float]] = None) -> Optional[EntityMatch]:
        """
        Search the box at each scale and keep the first hit the matcher
        confirms as the same entity.

        Returns:
            The matched entity, or None when every scale misses.
        """
        if not box.is_valid_for(image.width, image.height):
            raise ValueError(f"box {box.as_list()} does not fit image {image.id}")
        for index, scale in enumerate(scales or self.scales):
            key = self._key(image.id, 1, index)
            try:
                crop = crop_image(image, expand_box(box, scale, image.width, image.height))
                found = await self.pool.run(self.backend.visual_search, crop, key)
                if found.value is None:
                    continue
                page = await self.pool.run(self.backend.visit, found.value.url, key)
                reply = await self._ask(self.roles.mllm, "match_entity", "match_entity",
                                        {"url": found.value.url, "page": page.value, "crop": crop},
                                        image=crop)
            except (ToolError, GatewayError, ValueError) as e:
                logger.debug(f"{image.id} scale {scale:g}: {e}")
                continue
            if not parse_verdict(reply):
                continue
            fields = reply_fields(reply)
            name = fields.get("entity") or found.value.title
            return EntityMatch(name, found.value.url, scale, fields.get("kind", "entity"),
                               fields.get("appearance", ""))
        return None

    async def gen_entity_question(self, entity: EntityMatch) -> Tuple[str, str]:
        if not entity.name.strip():
            raise ValueError("entity name is empty")
        context = {"name": entity.name, "kind": entity.kind, "descriptor": entity.descriptor}
        try:
            reply = await self._ask(self.roles.mllm, "entity_question", "entity_question", context)
        except GatewayError as e:
            raise SynthesisError(f"question generation failed for {entity.name}: {e}") from e
        fields = reply_fields(reply)
        if "question" not in fields or "answer" not in fields:
            raise SynthesisError(f"question generation for {entity.name} gave no question/answer pair")
        return fields["question"], fields["answer"]

    async def seed_instance(self, image: ImageRef) -> Optional[VqaInstance]:
        """The entity question for the first verified entity in the image."""
        proposal = await propose_regions(image, SEED_QUESTION, self.roles.mllm, self.prompts, self.max_regions)
        for box in proposal.boxes:
            match = await self.verify_entity(image, box)
            if match is None:
                continue
            question, answer = await self.gen_entity_question(match)
            return VqaInstance(f"vqa-{image.id}", image, question, answer,
                               entity=match.name, entity_url=match.url)
        return None

    async def curate(self, image: ImageRef) -> Optional[VqaInstance]:
        """Curated factual VQA: image filter, entity seed, candidate filter."""
        verdict = await self.filter_image(image)
        if not verdict.keep:
            return None
        try:
            instance = await self.seed_instance(image)
        except SynthesisError as e:
            self._discard("curate", image.id, "no question", detail=str(e))
            return None
        if instance is None:
            self._discard("curate", image.id, "no verified entity")
            return None
        if not (await self.filter_candidate(instance)).keep:
            return None
        return instance

    async def _propose_and_select(self, instance: VqaInstance, kind: ObfuscationKind, entity: str,
                                  facts: str, **extra) -> Optional[Tuple[str, str]]:
        fact_lines = [line.strip() for line in facts.splitlines() if line.strip()]
        context = {"question": instance.question, "answer": instance.answer, "kind": kind.value,
                   "entity": entity, "facts": facts, "n": CANDIDATES_PER_ROUND, **extra}
        proposals = await self._ask(self.roles.mllm, "propose_questions", "propose_questions", context,
                                    render={**context, "facts": fact_lines})
        drafted = CANDIDATE_LINE.findall(proposals)[:CANDIDATES_PER_ROUND]
        # a question that names its own answer gives it away
        candidates = [(q, a) for q, a in drafted if not mentions(q, a)]
        if not candidates:
            return None
        if len(candidates) == 1:
            return candidates[0]
        listed = [f"{q} (answer: {a})" for q, a in candidates]
        choice = await self._ask(self.roles.selector, "select_question", "select_question",
                                 {"candidates": listed, "question": instance.question})
        number = re.search(r"\d+", choice)
        if number is None or not 1 <= int(number.group()) <= len(candidates):
            logger.debug(f"{instance.instance_id}: selector reply {choice!r} picks no candidate")
            return None
        return candidates[int(number.group()) - 1]

    async def obfuscate_answer(self, instance: VqaInstance) -> Obfuscation:
        """One more relation hop beyond the current answer."""
        subject = instance.instance_id
        stage = 10 + instance.depth
        try:
            keywords = await self._ask(self.roles.mllm, "extract_keywords", "extract_keywords",
                                       {"question": instance.question, "answer": instance.answer,
                                        "entity": instance.answer})
            query = " ".join(k.strip() for k in keywords.split(",") if k.strip()) or instance.answer
            results = await self.pool.run(self.backend.web_search, query, self._key(subject, stage))
            evidence = None
            for index, result in enumerate(results.value[:3], 1):
                page = await self.pool.run(self.backend.visit, result.url, self._key(subject, stage, index))
                if instance.answer in page.value:
                    evidence = (result.url, page.value)
                    break
            if evidence is None:
                return Obfuscation(instance, False, "no retrieval evidence")
            chosen = await self._propose_and_select(instance, ObfuscationKind.ANSWER_CHAIN, instance.answer,
                                                    evidence[1])
        except (GatewayError, ToolError) as e:
            logger.warning(f"{subject}: answer obfuscation failed: {e}")
            return Obfuscation(instance, False, str(e))
        if chosen is None:
            return Obfuscation(instance, False, "no chainable relation")
        question, answer = chosen
        step = ObfuscationStep(ObfuscationKind.ANSWER_CHAIN, instance.answer, answer, evidence[0],
                               instance.depth + 1, (evidence[0],))
        return Obfuscation(replace(instance, question=question, answer=answer,
                                   provenance=instance.provenance + (step,)), True)

    async def obfuscate_entity(self, instance: VqaInstance, hops: Optional[int] = None) -> Obfuscation:
        """
        Replace the anchor entity with a description built from a walk along
        its relation links ("the entity in the image whose owner's coach is
        X"); the answer never changes.
        """
        subject = instance.instance_id
        if hops is None:
            rng_hops = np.random.default_rng(_seed_of(self.seed, subject, instance.depth, "hops"))
            hops = int(rng_hops.integers(1, MAX_WALK_HOPS + 1))
        hops = min(hops, MAX_WALK_HOPS)
        if hops <= 0:
            return Obfuscation(instance, False, "zero hops")
        if not instance.entity_url or not instance.entity:
            return Obfuscation(instance, False, "no entity page")
        stage = 20 + instance.depth
        pages: Dict[str, str] = {}

        def fetch(url: str) -> str:
            if url not in pages:
                pages[url] = self.backend.visit(url, self._key(subject, stage, len(pages))).value
            return pages[url]

        rng = np.random.default_rng(_seed_of(self.seed, subject, instance.depth, "walk"))
        try:
            walk = await self.pool.run(walk_relations, instance.entity, instance.entity_url, hops, fetch, rng)
            if not walk:
                return Obfuscation(instance, False, "walk dead-ends")
            await self._ask(self.roles.mllm, "extract_keywords", "extract_keywords",
                            {"question": instance.question, "answer": instance.answer, "entity": instance.entity})
            sources = [instance.entity] + [target for _relation, target, _url in walk]
            facts = "\n".join(f"{source}'s {relation} is {target}"
                              for source, (relation, target, _url) in zip(sources, walk))
            chosen = await self._propose_and_select(
                instance, ObfuscationKind.ENTITY_WALK, instance.entity, facts,
                walk=[(relation, target) for relation, target, _url in walk], image=instance.image)
        except (GatewayError, ToolError) as e:
            logger.warning(f"{subject}: entity obfuscation failed: {e}")
            return Obfuscation(instance, False, str(e))
        if chosen is None:
            return Obfuscation(instance, False, "no answer-preserving rewrite")
        question, answer = chosen
        if mentions(question, instance.entity):
            return Obfuscation(instance, False, "rewrite still names the entity")
        if not (await self._agrees(question, answer, instance.answer, subject)).keep:
            return Obfuscation(instance, False, "no answer-preserving rewrite")
        # the rewrite may use only a prefix of the walk
        used = max((hop for hop, (_relation, target, _url) in enumerate(walk, 1) if mentions(question, target)),
                   default=len(walk))
        path = (instance.entity_url,) + tuple(url for _relation, _target, url in walk[:used])
        step = ObfuscationStep(ObfuscationKind.ENTITY_WALK, instance.entity, walk[used - 1][1], path[-1],
                               instance.depth + 1, path)
        return Obfuscation(replace(instance, question=question, provenance=instance.provenance + (step,)), True)

    async def synthesize_fuzzy(self, image: ImageRef, depth: int,
                               seed: Optional[VqaInstance] = None) -> VqaInstance:
        """
        Grow a fuzzy multi-hop question over `depth` rounds, answer chain
        first and then strictly alternating.

        Raises:
            SynthesisError: no seed entity, a round was a no-op, or the result
                fails the candidate filter.
        """
        if depth < 1:
            raise ValueError("depth must be >= 1")
        if seed is None:
            seed = await self.seed_instance(image)
        if seed is None:
            raise SynthesisError(f"{image.id}: no verified entity to start from")
        instance = replace(seed, instance_id=f"fuzzy-{image.id}")
        failures = []
        for round_index in range(depth):
            if round_index % 2 == 0:
                outcome = await self.obfuscate_answer(instance)
            else:
                outcome = await self.obfuscate_entity(instance)
            if not outcome.applied:
                failures.append(f"round {round_index + 1}: {outcome.reason}")
                continue
            instance = outcome.instance
        if len(failures) == depth:
            raise SynthesisError(f"{image.id}: all rounds no-op")
        if failures:
            raise SynthesisError(f"{image.id}: {'; '.join(failures)}")
        instance = replace(instance, source=Source.FUZZY_SYNTH)
        verdict = await self.filter_candidate(instance)
        if not verdict.keep:
            raise SynthesisError(f"{image.id}: fuzzy instance rejected ({verdict.reason})")
        return instance

    async def synthesize_image(self, image: ImageRef, depth: int) -> List[VqaInstance]:
        """Curated and, when depth > 0, fuzzy instances for one image."""
        verdict = await self.filter_image(image)
        if not verdict.keep:
            return []
        try:
            seed = await self.seed_instance(image)
        except SynthesisError as e:
            self._discard("curate", image.id, "no question", detail=str(e))
            return []
        if seed is None:
            self._discard("curate", image.id, "no verified entity")
            return []
        released = []
        if (await self.filter_candidate(seed)).keep:
            released.append(seed)
        if depth > 0:
            try:
                released.append(await self.synthesize_fuzzy(image, depth, seed))
            except SynthesisError as e:
                self._discard("synthesize_fuzzy", image.id, "synthesis failed", detail=str(e))
        return released

    async def build_dataset(self, images: Sequence[ImageRef], depth: int,
                            text_only: Sequence[VqaInstance] = (), concurrency: int = 8) -> List[VqaInstance]:
        """All instances in image order, then the text-only ones that pass the filter."""
        gate = asyncio.Semaphore(concurrency)

        async def one(image: ImageRef) -> List[VqaInstance]:
            async with gate:
                return await self.synthesize_image(image, depth)

        per_image = await asyncio.gather(*(one(image) for image in images))
        instances = [instance for batch in per_image for instance in batch]
        for instance in text_only:
            if (await self.filter_candidate(instance)).keep:
                instances.append(instance)
        logger.info(f"Synthesized {len(instances)} instances from {len(images)} images "
                    f"and {len(text_only)} text-only seeds")
        return instances
