import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Set, Tuple, Union

import orjson

from vdr.codec import dumps, encode_trajectory, read_trajectories, write_jsonl
from vdr.trajectory import Trajectory

logger = logging.getLogger(__name__)


class TrajectoryStore:
    """A trajectory JSONL file that only ever gains trajectories it has not seen."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.trajectories = self.load_existing()

    def load_existing(self) -> List[Trajectory]:
        if self.path.exists():
            return read_trajectories(self.path)
        return []

    def existing_ids(self) -> Set[str]:
        return {t.id for t in self.trajectories}

    def add(self, trajectories: Iterable[Trajectory]) -> Tuple[int, int]:
        """
        Add trajectories whose id is new and rewrite the file.
        Returns tuple of (new_count, total_count).
        """
        seen = self.existing_ids()
        new = []
        for trajectory in trajectories:
            if trajectory.id in seen:
                logger.debug(f"Skipping duplicate trajectory {trajectory.id}")
                continue
            seen.add(trajectory.id)
            new.append(trajectory)
        self.trajectories.extend(new)
        write_jsonl(self.path, (encode_trajectory(t) for t in self.trajectories))
        logger.info(f"Added {len(new)} trajectories to {self.path} ({len(self.trajectories)} total)")
        return len(new), len(self.trajectories)


class AuditLog:
    """
    Line-delimited JSON log of discard and flag events.

    Timestamps are optional so simulated runs stay byte-reproducible.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None, timestamps: bool = False):
        self.path = Path(path) if path else None
        self.timestamps = timestamps
        self.events: List[Dict[str, Any]] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, event: str, subject: str, reason: str, **details: Any):
        entry: Dict[str, Any] = {"event": event, "subject": subject, "reason": reason, **details}
        if self.timestamps:
            entry["timestamp"] = datetime.now().strftime('%Y-%m-%d %H:%M:%S')
        self.events.append(entry)
        logger.debug(f"{event} {subject}: {reason}")
        if self.path:
            with open(self.path, "ab") as log_file:
                log_file.write(dumps(entry) + b"\n")

    def reasons(self, event: Optional[str] = None) -> List[str]:
        return [e["reason"] for e in self.events if event is None or e["event"] == event]


def read_audit(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with open(path, "rb") as f:
        return [orjson.loads(line) for line in f if line.strip()]
