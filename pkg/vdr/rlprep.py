"""
Rewards, leave-one-out advantages and gradient masks for rollout groups,
exported as a line-delimited batch for an external trainer.
"""
import logging
import re
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from vdr.codec import dumps, trajectory_to_json, write_jsonl
from vdr.errors import GatewayError
from vdr.gateway import ChatClient, ChatTurn, Role, parse_verdict
from vdr.prompts import PromptLibrary
from vdr.store import AuditLog
from vdr.trajectory import Status, Termination, Trajectory

logger = logging.getLogger(__name__)

BATCH_SCHEMA_VERSION = 1
RECORD_FIELDS = ("prompt_id", "trajectory", "reward", "penalty", "advantage", "masked", "mask_reason",
                 "termination")
SAFEGUARD_STOPS = (Termination.REPETITION, Termination.ERROR_CASCADE)
BUDGET_STOPS = (Termination.MAX_TURNS, Termination.CONTEXT_EXCEEDED)
SAMPLE_SUFFIX = re.compile(r"-s\d+$")


async def judge_reward(trajectory: Trajectory, judge: ChatClient, prompts: PromptLibrary,
                       audit: Optional[AuditLog] = None) -> float:
    """1.0 when the judge calls the final answer correct, else 0.0."""
    if trajectory.ground_truth is None:
        raise ValueError(f"{trajectory.id} has no ground truth to reward against")
    answer = trajectory.answer
    if answer is None:
        return 0.0
    text = prompts.render("reward_judge", question=trajectory.question, ground_truth=trajectory.ground_truth,
                          answer=answer)
    try:
        reply = await judge.chat([ChatTurn(Role.USER, text)], purpose="reward_judge",
                                 context={"question": trajectory.question, "answer": answer,
                                          "ground_truth": trajectory.ground_truth})
    except GatewayError as e:
        logger.warning(f"Reward judge failed for {trajectory.id}: {e}")
        if audit is not None:
            audit.record("judge_reward", trajectory.id, "judge unavailable")
        return 0.0
    verdict = parse_verdict(reply.text)
    if verdict is None and audit is not None:
        audit.record("judge_reward", trajectory.id, "unparseable verdict", reply=reply.text[:200])
    return 1.0 if verdict else 0.0


def loo_advantage(rewards: Sequence[float]) -> np.ndarray:
    """reward_i minus the mean reward of the other G - 1 members."""
    r = np.asarray(rewards, dtype=np.float64)
    g = r.shape[0]
    if g < 2:
        raise ValueError(f"leave-one-out needs a group of at least 2, got {g}")
    baselines = (r.sum() - r) / (g - 1)
    return r - baselines


@dataclass(frozen=True)
class MaskRule:
    error_step_fraction: float = 0.5

    def __post_init__(self):
        if not 0 < self.error_step_fraction <= 1:
            raise ValueError("error_step_fraction must be in (0, 1]")


def mask_reason(trajectory: Trajectory, rule: MaskRule = MaskRule()) -> Optional[str]:
    """Why a trajectory is excluded from gradient updates, or None."""
    if trajectory.termination in SAFEGUARD_STOPS:
        return "safeguard"
    if trajectory.termination in BUDGET_STOPS:
        return "budget"
    errors = sum(1 for step in trajectory.steps if step.is_error_step)
    if trajectory.steps and errors > rule.error_step_fraction * len(trajectory.steps):
        return "error_steps"
    return None


def has_format_error(trajectory: Trajectory) -> bool:
    return any(obs.status is Status.FORMAT_ERROR for step in trajectory.steps for obs in step.observations)


@dataclass(frozen=True)
class RolloutGroup:
    prompt_id: str
    trajectories: Tuple[Trajectory, ...]
    rewards: Tuple[float, ...]
    advantages: Tuple[float, ...]
    masked: Tuple[bool, ...]
    penalties: Tuple[float, ...] = ()

    def __post_init__(self):
        g = len(self.trajectories)
        if g < 2:
            raise ValueError(f"group {self.prompt_id} has {g} trajectories, needs at least 2")
        sizes = {len(self.rewards), len(self.advantages), len(self.masked)}
        if self.penalties:
            sizes.add(len(self.penalties))
        if sizes != {g}:
            raise ValueError(f"group {self.prompt_id}: list lengths differ from G={g}")
        if any(r not in (0.0, 1.0) for r in self.rewards):
            raise ValueError(f"group {self.prompt_id}: rewards must be 0.0 or 1.0")

    @property
    def size(self) -> int:
        return len(self.trajectories)


def mask_flags(group: RolloutGroup, rule: MaskRule = MaskRule()) -> List[bool]:
    """Masked members stay in the group and keep their place in the baselines."""
    return [mask_reason(t, rule) is not None for t in group.trajectories]


def build_group(prompt_id: str, trajectories: Sequence[Trajectory], rewards: Sequence[float],
                rule: MaskRule = MaskRule(), format_penalty: float = 0.0) -> RolloutGroup:
    """
    Advantages use every member, masked or not. With a format penalty the
    advantage is computed from reward minus penalty; the stored reward stays
    the accuracy reward.
    """
    penalties = tuple(format_penalty if format_penalty and has_format_error(t) else 0.0 for t in trajectories)
    shaped = np.asarray(rewards, dtype=np.float64) - np.asarray(penalties, dtype=np.float64)
    masked = tuple(mask_reason(t, rule) is not None for t in trajectories)
    return RolloutGroup(prompt_id, tuple(trajectories), tuple(float(r) for r in rewards),
                        tuple(float(a) for a in loo_advantage(shaped)), masked, penalties)


def prompt_id_of(trajectory_id: str) -> str:
    return SAMPLE_SUFFIX.sub("", trajectory_id)


def group_by_prompt(trajectories: Sequence[Trajectory], group_size: int) -> List[Tuple[str, List[Trajectory]]]:
    """
    Collect samples of the same prompt (ids <prompt>-s<k>) into groups of at
    most group_size, in file order. Groups left with fewer than two members
    are dropped.
    """
    by_prompt: Dict[str, List[Trajectory]] = OrderedDict()
    for trajectory in trajectories:
        by_prompt.setdefault(prompt_id_of(trajectory.id), []).append(trajectory)
    groups = []
    for prompt_id, members in by_prompt.items():
        for start in range(0, len(members), group_size):
            chunk = members[start:start + group_size]
            if len(chunk) < 2:
                logger.warning(f"Dropping {prompt_id}: only {len(chunk)} trajectory left for a group")
                continue
            groups.append((prompt_id, chunk))
    return groups


async def score_groups(trajectories: Sequence[Trajectory], judge: ChatClient, prompts: PromptLibrary,
                       group_size: int = 8, rule: MaskRule = MaskRule(), format_penalty: float = 0.0,
                       audit: Optional[AuditLog] = None) -> List[RolloutGroup]:
    groups = []
    for prompt_id, members in group_by_prompt(trajectories, group_size):
        rewards = [await judge_reward(t, judge, prompts, audit) for t in members]
        groups.append(build_group(prompt_id, members, rewards, rule, format_penalty))
    return groups


def export_batch(groups: Sequence[RolloutGroup], path: Union[str, Path],
                 rule: MaskRule = MaskRule()) -> int:
    """
    Header record first, then one record per trajectory; masked trajectories
    are kept and tagged. Returns the trajectory record count.
    """
    header = {"vdr_batch_schema": BATCH_SCHEMA_VERSION, "groups": len(groups),
              "records": sum(g.size for g in groups), "fields": list(RECORD_FIELDS)}

    def lines():
        yield dumps(header)
        for group in groups:
            penalties = group.penalties or (0.0,) * group.size
            for trajectory, reward, penalty, advantage, masked in zip(
                    group.trajectories, group.rewards, penalties, group.advantages, group.masked):
                yield dumps({
                    "prompt_id": group.prompt_id,
                    "trajectory": trajectory_to_json(trajectory),
                    "reward": reward,
                    "penalty": penalty,
                    "advantage": advantage,
                    "masked": masked,
                    "mask_reason": mask_reason(trajectory, rule) if masked else None,
                    "termination": trajectory.termination.value if trajectory.termination else None,
                })

    count = write_jsonl(path, lines()) - 1
    logger.info(f"Exported {count} trajectories in {len(groups)} groups to {path}")
    return count
