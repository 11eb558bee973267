"""
Canonical JSON encoding of trajectories.

One trajectory per line, keys sorted, schema tag "vdr_schema": 1. Decoding
rebuilds the frozen types, so every ordering rule is re-checked and a bad
record is reported by the rule it breaks.
"""
import base64
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Union

import orjson

from vdr.errors import DecodeError, TrajectoryError
from vdr.react import call_from_wire, call_to_wire
from vdr.trajectory import (
    BoundingBox,
    EntityRegion,
    ImageRef,
    Observation,
    Phase,
    Status,
    Step,
    Termination,
    Trajectory,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
INVARIANTS = ("turn contiguity", "phase ordering", "step shape")


def dumps(record: Dict[str, Any]) -> bytes:
    return orjson.dumps(record, option=orjson.OPT_SORT_KEYS)


def image_to_json(image: Optional[ImageRef]) -> Optional[Dict[str, Any]]:
    if image is None:
        return None
    record: Dict[str, Any] = {"id": image.id, "width": image.width, "height": image.height}
    if image.payload is not None:
        record["payload"] = base64.b64encode(image.payload).decode("ascii")
    else:
        record["regions"] = [
            {"name": r.name, "kind": r.kind, "descriptor": r.descriptor, "box": r.box.as_list()}
            for r in image.regions
        ]
    return record


def image_from_json(record: Optional[Dict[str, Any]]) -> Optional[ImageRef]:
    if record is None:
        return None
    payload = record.get("payload")
    regions = record.get("regions")
    return ImageRef(
        id=record["id"],
        width=record["width"],
        height=record["height"],
        payload=base64.b64decode(payload) if payload is not None else None,
        regions=tuple(
            EntityRegion(r["name"], r["kind"], r["descriptor"], BoundingBox(*r["box"]))
            for r in regions
        ) if regions is not None else None,
    )


def _step_to_json(step: Step) -> Dict[str, Any]:
    return {
        "turn": step.turn,
        "phase": step.phase.value,
        "reasoning": step.reasoning,
        "calls": [call_to_wire(call) for call in step.calls],
        "answer": step.answer,
        "observations": [
            {
                "for_call": obs.for_call,
                "status": obs.status.value,
                "content": obs.content,
                "sources": list(obs.sources),
                "latency_ms": obs.latency_ms,
            }
            for obs in step.observations
        ],
    }


def _step_from_json(record: Dict[str, Any]) -> Step:
    return Step(
        turn=record["turn"],
        phase=Phase(record["phase"]),
        reasoning=record["reasoning"],
        calls=tuple(call_from_wire(c, f"call_{i}") for i, c in enumerate(record["calls"])),
        answer=record["answer"],
        observations=tuple(
            Observation(
                for_call=o["for_call"],
                status=Status(o["status"]),
                content=o["content"],
                sources=tuple(o["sources"]),
                latency_ms=o["latency_ms"],
            )
            for o in record["observations"]
        ),
    )


def trajectory_to_json(trajectory: Trajectory) -> Dict[str, Any]:
    return {
        "vdr_schema": SCHEMA_VERSION,
        "id": trajectory.id,
        "question": trajectory.question,
        "image": image_to_json(trajectory.image),
        "description": trajectory.description,
        "steps": [_step_to_json(step) for step in trajectory.steps],
        "T_v": trajectory.T_v,
        "termination": trajectory.termination.value if trajectory.termination else None,
        "ground_truth": trajectory.ground_truth,
    }


def encode_trajectory(trajectory: Trajectory) -> bytes:
    return dumps(trajectory_to_json(trajectory))


def _invariant_of(error: TrajectoryError) -> str:
    message = str(error)
    for name in INVARIANTS:
        if message.startswith(name):
            return name
    return "step shape"


def trajectory_from_json(record: Any) -> Trajectory:
    if not isinstance(record, dict):
        raise DecodeError("malformed record", "top level is not an object")
    if record.get("vdr_schema") != SCHEMA_VERSION:
        raise DecodeError("schema version", f"expected {SCHEMA_VERSION}, got {record.get('vdr_schema')!r}")
    try:
        steps = tuple(_step_from_json(s) for s in record["steps"])
        termination = record["termination"]
        trajectory = Trajectory(
            id=record["id"],
            question=record["question"],
            image=image_from_json(record["image"]),
            description=record["description"],
            steps=steps,
            termination=Termination(termination) if termination is not None else None,
            ground_truth=record["ground_truth"],
        )
        declared_tv = record["T_v"]
    except TrajectoryError as e:
        raise DecodeError(_invariant_of(e), str(e)) from e
    except (KeyError, TypeError, AttributeError) as e:
        raise DecodeError("malformed record", f"{type(e).__name__}: {e}") from e
    except ValueError as e:
        raise DecodeError("field value", str(e)) from e
    if declared_tv != trajectory.T_v:
        raise DecodeError("T_v", f"record says {declared_tv}, steps give {trajectory.T_v}")
    return trajectory


def decode_trajectory(data: Union[bytes, str]) -> Trajectory:
    try:
        record = orjson.loads(data)
    except orjson.JSONDecodeError as e:
        raise DecodeError("malformed record", str(e)) from e
    return trajectory_from_json(record)


def iter_jsonl(path: Union[str, Path]) -> Iterator[bytes]:
    with open(path, "rb") as f:
        for line in f:
            line = line.strip()
            if line:
                yield line


def write_jsonl(path: Union[str, Path], lines: Iterable[bytes]) -> int:
    """Write pre-encoded records, one per line. Returns the record count."""
    count = 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        for line in lines:
            f.write(line + b"\n")
            count += 1
    return count


def read_trajectories(path: Union[str, Path]) -> List[Trajectory]:
    return [decode_trajectory(line) for line in iter_jsonl(path)]


def write_trajectories(path: Union[str, Path], trajectories: Iterable[Trajectory]) -> int:
    count = write_jsonl(path, (encode_trajectory(t) for t in trajectories))
    logger.info(f"Wrote {count} trajectories to {path}")
    return count
