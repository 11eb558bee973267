"""
VQA instances and their JSONL file format.
"""
import logging
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import orjson

from vdr.codec import dumps, image_from_json, image_to_json, iter_jsonl, write_jsonl
from vdr.config import MixSettings
from vdr.errors import DecodeError
from vdr.trajectory import ImageRef

logger = logging.getLogger(__name__)

DATASET_SCHEMA_VERSION = 1


class Source(str, Enum):
    CURATED = "curated"
    FUZZY_SYNTH = "fuzzy_synth"
    TEXT_ONLY = "text_only"


class ObfuscationKind(str, Enum):
    ANSWER_CHAIN = "answer_chain"
    ENTITY_WALK = "entity_walk"


class Split(str, Enum):
    SFT = "sft"
    RL = "rl"


@dataclass(frozen=True)
class ObfuscationStep:
    kind: ObfuscationKind
    from_entity: str
    to_entity: str
    evidence_url: str
    hop_index: int
    path: Tuple[str, ...] = ()


@dataclass(frozen=True)
class VqaInstance:
    instance_id: str
    image: Optional[ImageRef]
    question: str
    answer: str
    provenance: Tuple[ObfuscationStep, ...] = ()
    source: Source = Source.CURATED
    split: Optional[Split] = None
    entity: Optional[str] = None
    entity_url: Optional[str] = None

    def __post_init__(self):
        if not self.answer.strip():
            raise ValueError(f"{self.instance_id}: answer must be non-empty")
        if self.source is Source.FUZZY_SYNTH and not self.provenance:
            raise ValueError(f"{self.instance_id}: fuzzy instances need at least one obfuscation step")
        if (self.image is None) != (self.source is Source.TEXT_ONLY):
            raise ValueError(f"{self.instance_id}: only text_only instances come without an image")
        hops = [step.hop_index for step in self.provenance]
        if any(b <= a for a, b in zip(hops, hops[1:])):
            raise ValueError(f"{self.instance_id}: hop_index must strictly increase, got {hops}")

    @property
    def depth(self) -> int:
        return len(self.provenance)


def instance_to_json(instance: VqaInstance) -> Dict[str, Any]:
    return {
        "vdr_vqa_schema": DATASET_SCHEMA_VERSION,
        "instance_id": instance.instance_id,
        "image": image_to_json(instance.image),
        "question": instance.question,
        "answer": instance.answer,
        "provenance": [
            {"kind": s.kind.value, "from_entity": s.from_entity, "to_entity": s.to_entity,
             "evidence_url": s.evidence_url, "hop_index": s.hop_index, "path": list(s.path)}
            for s in instance.provenance
        ],
        "source": instance.source.value,
        "split": instance.split.value if instance.split else None,
        "entity": instance.entity,
        "entity_url": instance.entity_url,
    }


def instance_from_json(record: Dict[str, Any]) -> VqaInstance:
    if record.get("vdr_vqa_schema") != DATASET_SCHEMA_VERSION:
        raise DecodeError("schema version", f"expected vdr_vqa_schema {DATASET_SCHEMA_VERSION}")
    try:
        return VqaInstance(
            instance_id=record["instance_id"],
            image=image_from_json(record["image"]),
            question=record["question"],
            answer=record["answer"],
            provenance=tuple(
                ObfuscationStep(ObfuscationKind(s["kind"]), s["from_entity"], s["to_entity"],
                                s["evidence_url"], s["hop_index"], tuple(s.get("path", ())))
                for s in record["provenance"]
            ),
            source=Source(record["source"]),
            split=Split(record["split"]) if record.get("split") else None,
            entity=record.get("entity"),
            entity_url=record.get("entity_url"),
        )
    except (KeyError, TypeError) as e:
        raise DecodeError("malformed record", str(e)) from e
    except ValueError as e:
        raise DecodeError("field value", str(e)) from e


def read_instances(path: Union[str, Path]) -> List[VqaInstance]:
    instances = []
    for line in iter_jsonl(path):
        try:
            record = orjson.loads(line)
        except orjson.JSONDecodeError as e:
            raise DecodeError("malformed record", str(e)) from e
        instances.append(instance_from_json(record))
    logger.info(f"Loaded {len(instances)} VQA instances from {path}")
    return instances


def write_instances(path: Union[str, Path], instances: Iterable[VqaInstance]) -> int:
    return write_jsonl(path, (dumps(instance_to_json(i)) for i in instances))


def _sft_share(sft: int, rl: int) -> float:
    total = sft + rl
    return sft / total if total else 1.0


def allocate_splits(instances: Sequence[VqaInstance], mix: MixSettings) -> List[VqaInstance]:
    """
    Tag instances sft or rl in the configured proportions, per source and in
    order. Text-only instances only seed SFT trajectories.
    """
    shares = {
        Source.CURATED: _sft_share(mix.sft.curated, mix.rl.curated),
        Source.FUZZY_SYNTH: _sft_share(mix.sft.fuzzy, mix.rl.fuzzy),
        Source.TEXT_ONLY: 1.0,
    }
    totals = {source: sum(1 for i in instances if i.source is source) for source in Source}
    seen = {source: 0 for source in Source}
    tagged = []
    for instance in instances:
        quota = round(totals[instance.source] * shares[instance.source])
        split = Split.SFT if seen[instance.source] < quota else Split.RL
        seen[instance.source] += 1
        tagged.append(replace(instance, split=split))
    return tagged


def select_sft_pool(instances: Sequence[VqaInstance], mix: MixSettings,
                    limit: Optional[int] = None) -> List[VqaInstance]:
    """
    SFT-tagged instances, drawn per source in the configured curated /
    text-only / fuzzy proportions.

    The pool is `limit` instances, or as many as the sources allow when no
    limit is given; a short source scales the whole pool down so the
    proportions hold.
    """
    pool = [i for i in instances if i.split in (None, Split.SFT)]
    weights = {Source.CURATED: mix.sft.curated, Source.TEXT_ONLY: mix.sft.text_only,
               Source.FUZZY_SYNTH: mix.sft.fuzzy}
    total_weight = sum(weights.values())
    if total_weight == 0:
        return []
    available = Counter(i.source for i in pool)
    reachable = min(available[source] * total_weight // weight for source, weight in weights.items() if weight)
    size = reachable if limit is None else min(limit, reachable)
    if limit is not None and size < limit:
        short = [source.value for source, weight in weights.items()
                 if weight and available[source] * total_weight // weight == reachable]
        logger.warning(f"SFT pool scaled down to {size} of {limit}: not enough {', '.join(short)} instances")
    quotas = {source: min(available[source], round(size * weight / total_weight)) for source, weight in weights.items()}
    taken = {source: 0 for source in Source}
    selected = []
    for instance in pool:
        if taken[instance.source] < quotas[instance.source]:
            taken[instance.source] += 1
            selected.append(instance)
    return selected
