"""
Seeded stand-in for image search, web search and the web itself.

Entities live on hyperlinked markdown pages and appear in simulated images as
rectangular regions. Image search only succeeds when a single entity
dominates the crop, which is what makes full-image queries fail and
multi-scale crops necessary.
"""
import hashlib
import logging
import re
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from vdr.backends.base import CallKey, SearchHit, SearchResult, Timed
from vdr.backends.code import evaluate_arithmetic
from vdr.config import LatencySpec, WorldSettings
from vdr.dataset import Source, VqaInstance
from vdr.errors import ToolError
from vdr.questions import text_question
from vdr.trajectory import BoundingBox, EntityRegion, ImageRef

logger = logging.getLogger(__name__)

KINDS = ("cat", "dog", "horse", "person", "building", "statue", "car", "bridge", "painting", "bird", "boat", "tree")
RELATIONS = ("owner", "coach", "daughter", "employer", "founder", "mentor", "sibling", "neighbor", "manager", "friend")
COLORS = ("red", "blue", "green", "golden", "black", "white", "grey", "orange", "purple", "silver", "brown", "teal")
FEATURES = ("striped pattern", "spotted coat", "tall frame", "round outline", "checkered trim", "long shadow",
            "bright collar", "carved base", "glass front", "iron railing", "painted stripes", "crooked top")
SYLLABLES = ("mo", "ra", "ki", "lu", "ta", "ne", "so", "vi", "da", "ri", "ko", "mi", "ba", "zu", "le", "fa",
             "po", "he", "gu", "na")
STOP_WORDS = {"the", "a", "an", "of", "in", "is", "what", "name", "image", "who", "which", "to", "and",
              "with", "on", "for", "by", "from", "at", "links", "away"}

BASE_URL = "https://sim.local/pages"
IMAGE_SIZE = (1024, 768)
THUMBNAIL_SIZE = (200, 150)


@dataclass(frozen=True)
class Entity:
    name: str
    kind: str
    descriptor: str
    url: str
    famous: bool
    relations: Tuple[Tuple[str, str], ...]

    def related(self, relation: str) -> Optional[str]:
        return dict(self.relations).get(relation)


@dataclass(frozen=True)
class Page:
    url: str
    title: str
    markdown: str
    image_descriptors: Tuple[str, ...]
    outlinks: Tuple[str, ...]
    entities: Tuple[str, ...]


@dataclass(frozen=True)
class SimWorld:
    seed: int
    entities: Tuple[Entity, ...]
    pages: Tuple[Page, ...]
    images: Tuple[ImageRef, ...]
    latency: Mapping[str, LatencySpec] = field(default_factory=dict)
    hit_fraction: float = 0.4
    perfect_match_fraction: float = 0.9
    latency_scale: float = 1.0
    _by_name: Dict[str, Entity] = field(default_factory=dict, compare=False, repr=False)
    _by_url: Dict[str, Page] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self._by_name.update({e.name: e for e in self.entities})
        self._by_url.update({p.url: p for p in self.pages})

    def entity(self, name: str) -> Optional[Entity]:
        return self._by_name.get(name)

    def page(self, url: str) -> Optional[Page]:
        return self._by_url.get(url)

    def image(self, image_id: str) -> Optional[ImageRef]:
        for image in self.images:
            if image.id == image_id:
                return image
        return None

    def follow(self, name: str, relations: Sequence[str]) -> Optional[str]:
        """Where the relation path leads from `name`, or None if it breaks off."""
        current: Optional[str] = name
        for relation in relations:
            entity = self.entity(current)
            current = entity.related(relation) if entity is not None else None
            if current is None:
                return None
        return current

    def entity_by_descriptor(self, descriptor: str) -> Optional[Entity]:
        for entity in self.entities:
            if entity.descriptor == descriptor:
                return entity
        return None


def _name(rng: np.random.Generator, taken: set) -> str:
    while True:
        n = int(rng.integers(2, 4))
        name = "".join(SYLLABLES[int(i)] for i in rng.integers(0, len(SYLLABLES), size=n)).capitalize()
        if name not in taken and name.lower() not in STOP_WORDS:
            taken.add(name)
            return name


def _descriptor(rng: np.random.Generator, kind: str, taken: set) -> str:
    for _ in range(64):
        color, feature = COLORS[int(rng.integers(len(COLORS)))], FEATURES[int(rng.integers(len(FEATURES)))]
        descriptor = f"{color} {kind} with a {feature}"
        if descriptor not in taken:
            taken.add(descriptor)
            return descriptor
    descriptor = f"{kind} number {len(taken) + 1}"
    taken.add(descriptor)
    return descriptor


def page_url(index: int) -> str:
    return f"{BASE_URL}/{index}"


def _entity_section(entity: Entity, world_urls: Dict[str, str], heading: str) -> str:
    lines = [f"{heading} {entity.name}", f"{entity.name} is a {entity.kind}: {entity.descriptor}."]
    for relation, target in entity.relations:
        lines.append(f"- {relation}: [{target}]({world_urls[target]})")
    return "\n".join(lines)


def build_world(seed: int, n_entities: int, n_pages: int, n_images: Optional[int] = None,
                hit_fraction: float = 0.4, perfect_match_fraction: float = 0.9,
                latency: Optional[Mapping[str, LatencySpec]] = None, latency_scale: float = 1.0) -> SimWorld:
    """Build a world; the same arguments always give the same world."""
    if n_entities < 1 or n_pages < 1:
        raise ValueError("a world needs at least one entity and one page")
    rng = np.random.default_rng(seed)

    names, descriptors = set(), set()
    drafts = []
    for i in range(n_entities):
        kind = KINDS[int(rng.integers(len(KINDS)))]
        drafts.append((_name(rng, names), kind, _descriptor(rng, kind, descriptors), bool(rng.random() < 0.1)))

    # entity i lives on page i % n_pages
    urls = {name: page_url(i % n_pages) for i, (name, *_rest) in enumerate(drafts)}
    entities = []
    for i, (name, kind, descriptor, famous) in enumerate(drafts):
        relations = []
        if n_entities > 1:
            count = int(rng.integers(1, 4))
            rel_names = rng.choice(len(RELATIONS), size=count, replace=False)
            for r in rel_names:
                target = int(rng.integers(n_entities - 1))
                target = target if target < i else target + 1
                relations.append((RELATIONS[int(r)], drafts[target][0]))
        entities.append(Entity(name, kind, descriptor, urls[name], famous, tuple(relations)))

    pages = []
    for j in range(n_pages):
        hosted = [e for i, e in enumerate(entities) if i % n_pages == j]
        links = set()
        if hosted:
            title = " / ".join(e.name for e in hosted)
            sections = [_entity_section(e, urls, "##") for e in hosted]
            for e in hosted:
                links.update(urls[target] for _, target in e.relations)
        else:
            title = f"Index {j}"
            picks = rng.choice(n_entities, size=min(3, n_entities), replace=False)
            listed = [entities[int(k)] for k in sorted(int(p) for p in picks)]
            sections = ["\n".join(f"- [{e.name}]({e.url})" for e in listed)]
            links.update(e.url for e in listed)
        if n_pages > 1:
            links.add(page_url((j + 1) % n_pages))
            links.add(page_url((j + n_pages // 2) % n_pages))
        links.discard(page_url(j))
        outlinks = tuple(sorted(links, key=lambda u: int(u.rsplit("/", 1)[1])))
        see_also = [f"See also: [{u}]({u})" for u in outlinks]
        markdown = "\n\n".join([f"# {title}"] + sections + see_also)
        pages.append(Page(page_url(j), title, markdown, tuple(e.descriptor for e in hosted), outlinks,
                          tuple(e.name for e in hosted)))

    images = tuple(_build_image(rng, i, entities) for i in range(n_images if n_images is not None else n_entities))
    world = SimWorld(seed, tuple(entities), tuple(pages), images, dict(latency or {}),
                     hit_fraction, perfect_match_fraction, latency_scale)
    logger.debug(f"Built world seed={seed}: {n_entities} entities, {n_pages} pages, {len(images)} images")
    return world


def world_from_settings(settings: WorldSettings) -> SimWorld:
    return build_world(settings.seed, settings.n_entities, settings.n_pages, settings.n_images,
                       settings.hit_fraction, settings.perfect_match_fraction,
                       settings.latency, settings.latency_scale)


def _region(entity: Entity, box: BoundingBox) -> EntityRegion:
    return EntityRegion(entity.name, entity.kind, entity.descriptor, box)


def _build_image(rng: np.random.Generator, index: int, entities: Sequence[Entity]) -> ImageRef:
    """
    Image layouts by index: ...9 is a thumbnail, ...8 a single entity filling
    the frame, ...7 an empty scene, everything else 2-5 separated entities.
    """
    image_id = f"img-{index:04d}"
    pick = entities[int(rng.integers(len(entities)))]
    slot = index % 10
    if slot == 9:
        w, h = THUMBNAIL_SIZE
        return ImageRef(image_id, w, h, regions=(_region(pick, BoundingBox(40, 30, 160, 120)),))
    w, h = IMAGE_SIZE
    if slot == 8:
        return ImageRef(image_id, w, h, regions=(_region(pick, BoundingBox(0, 0, w, h)),))
    if slot == 7:
        return ImageRef(image_id, w, h, regions=())

    wanted = int(rng.integers(2, 6))
    order = rng.permutation(len(entities))
    chosen, kinds = [], set()
    for k in order:
        entity = entities[int(k)]
        if entity.kind not in kinds:
            kinds.add(entity.kind)
            chosen.append(entity)
        if len(chosen) == wanted:
            break

    regions: List[EntityRegion] = []
    for entity in chosen:
        for _ in range(50):
            bw, bh = int(rng.integers(120, 381)), int(rng.integers(100, 301))
            x0, y0 = int(rng.integers(0, w - bw + 1)), int(rng.integers(0, h - bh + 1))
            box = BoundingBox(x0, y0, x0 + bw, y0 + bh)
            # keep a margin so tight crops never pick up a neighbour
            margin = BoundingBox(box.x0 - 10, box.y0 - 10, box.x1 + 10, box.y1 + 10)
            if all(margin.intersect(r.box) is None for r in regions):
                regions.append(_region(entity, box))
                break
    return ImageRef(image_id, w, h, regions=tuple(regions))


def region_fractions(crop: ImageRef) -> List[Tuple[EntityRegion, float]]:
    area = crop.width * crop.height
    return [(region, region.box.area / area) for region in crop.regions or ()]


def sim_visual_search(world: SimWorld, crop: ImageRef) -> Optional[SearchHit]:
    """Hit iff exactly one entity covers at least hit_fraction of the crop."""
    if not crop.is_sim:
        raise ToolError(f"simulated search cannot read pixel image {crop.id}")
    dominant = [(r, f) for r, f in region_fractions(crop) if f >= world.hit_fraction]
    if len(dominant) != 1:
        return None
    region, fraction = dominant[0]
    entity = world.entity(region.name)
    if entity is None:
        return None
    return SearchHit(entity.url, world.page(entity.url).title, round(fraction, 6))


def _tokens(text: str) -> set:
    return {t for t in re.findall(r"[a-z0-9]+", text.lower()) if t not in STOP_WORDS}


def sim_web_search(world: SimWorld, query: str, top_k: int = 5) -> List[SearchResult]:
    """Keyword-overlap ranking; title overlap counts double."""
    wanted = _tokens(query)
    if not wanted:
        return []
    scored = []
    for index, page in enumerate(world.pages):
        title_overlap = len(wanted & _tokens(page.title))
        score = len(wanted & _tokens(page.markdown)) + 2 * title_overlap
        if score > 0:
            scored.append((-score, -title_overlap, index, page))
    scored.sort(key=lambda item: item[:3])
    results = []
    for *_, page in scored[:top_k]:
        body = page.markdown.split("\n", 1)[-1].strip()
        results.append(SearchResult(page.url, page.title, body[:160]))
    return results


def sim_visit(world: SimWorld, url: str) -> str:
    page = world.page(url)
    if page is None:
        raise ToolError(f"404 not found: {url}")
    return page.markdown


def _hash_int(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


def inject_latency(world: SimWorld, tool: str, key: CallKey) -> int:
    """Deterministic delay in ms for one call, from the tool's distribution."""
    spec = world.latency.get(tool)
    if spec is None:
        return 0
    if spec.distribution == "constant":
        delay = spec.mean_ms
    else:
        rng = np.random.default_rng(_hash_int(f"{tool}|{key.token()}"))
        if spec.distribution == "uniform":
            delay = rng.uniform(spec.low_ms, spec.high_ms)
        else:
            delay = max(0.0, rng.normal(spec.mean_ms, spec.std_ms))
    return int(round(delay * world.latency_scale))


class SimBackend:
    """ToolBackend over a SimWorld. Sleeps the injected latency and reports it."""

    def __init__(self, world: SimWorld, sleep: bool = True):
        self.world = world
        self.sleep = sleep

    def _delay(self, tool: str, key: CallKey) -> int:
        delay = inject_latency(self.world, tool, key)
        if self.sleep and delay:
            time.sleep(delay / 1000)
        return delay

    def visual_search(self, crop: ImageRef, key: CallKey) -> Timed[Optional[SearchHit]]:
        delay = self._delay("visual_search", key)
        return Timed(sim_visual_search(self.world, crop), delay)

    def web_search(self, query: str, key: CallKey) -> Timed[List[SearchResult]]:
        delay = self._delay("web_search", key)
        return Timed(sim_web_search(self.world, query), delay)

    def visit(self, url: str, key: CallKey) -> Timed[str]:
        delay = self._delay("visit_page", key)
        return Timed(sim_visit(self.world, url), delay)

    def run_code(self, source: str, key: CallKey) -> Timed[str]:
        delay = self._delay("code_exec", key)
        return Timed(evaluate_arithmetic(source), delay)


SECTION_HEADER = re.compile(r"^## (\S+)$")
IDENTITY = re.compile(r"^(\S+) is a ([a-z]+): (.+)\.$", re.MULTILINE)
RELATION_LINE = re.compile(r"^- ([a-z]+): \[([^\]]+)\]\(([^)\s]+)\)$", re.MULTILINE)


def entity_sections(markdown: str) -> Dict[str, str]:
    """Entity name -> its '## Name' section, as written by build_world."""
    sections: Dict[str, List[str]] = {}
    current = None
    for line in markdown.splitlines():
        header = SECTION_HEADER.match(line)
        if header:
            current = header.group(1)
            sections[current] = [line]
        elif line.startswith("# ") or line.startswith("See also:"):
            current = None
        elif current is not None and line.strip():
            sections[current].append(line)
    return {name: "\n".join(lines) for name, lines in sections.items()}


def text_only_seeds(world: SimWorld) -> List[Tuple[str, str]]:
    """(question, answer) pairs answerable from the page graph alone."""
    seeds = []
    for entity in world.entities:
        for relation, target in entity.relations:
            seeds.append((text_question(relation, entity.name), target))
    return seeds


def text_only_questions(world: SimWorld, limit: Optional[int] = None) -> List[VqaInstance]:
    """Relation questions about named entities, answerable from pages alone."""
    instances = []
    for index, (question, answer) in enumerate(text_only_seeds(world)):
        if limit is not None and index >= limit:
            break
        instances.append(VqaInstance(f"text-{index:05d}", None, question, answer, source=Source.TEXT_ONLY))
    return instances
