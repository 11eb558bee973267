"""
Hand-over from the vision phase to text-only research.

The image is described once, the vision steps are carried over unchanged with
the image swapped for its description, a text-only model continues the
trajectory, and the two halves are merged back into one multimodal record.
Merged trajectories are then screened against the ground truth.
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

from vdr.agent import ReactAgent
from vdr.budget import Budgets
from vdr.errors import DescriptionError, GatewayError, TrajectoryError
from vdr.gateway import ChatClient, ChatTurn, Role, parse_verdict
from vdr.prompts import PromptLibrary
from vdr.safeguards import RepetitionParams
from vdr.store import AuditLog
from vdr.tools import TEXT_TOOLS, ToolBox
from vdr.trajectory import ImageRef, Phase, Step, Termination, Trajectory, first_violation

logger = logging.getLogger(__name__)

FINISHED = (Termination.ANSWERED, Termination.JUDGE_HIT_THEN_ANSWERED)


async def describe_image(image: ImageRef, mllm: ChatClient, prompts: PromptLibrary) -> str:
    """
    Get the textual stand-in D for an image.

    Raises:
        DescriptionError: the endpoint failed or returned nothing.
    """
    text = prompts.render("describe_image")
    try:
        reply = await mllm.chat([ChatTurn(Role.USER, text, images=(image,))], purpose="describe_image",
                                context={"image": image})
    except GatewayError as e:
        raise DescriptionError(f"description failed for {image.id}", cause=e) from e
    description = reply.text.strip()
    if not description:
        raise DescriptionError()
    return description


@dataclass(frozen=True)
class BridgedContext:
    """A vision trajectory as a text-only model sees it."""
    trajectory_id: str
    question: str
    description: Optional[str]
    steps: Tuple[Step, ...]
    continuation_prompt: Optional[str]
    ground_truth: Optional[str] = None

    @property
    def T_v(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class TextTrajectory:
    """
    The text phase on its own (C_text). Turns continue the vision phase, so
    they start at T_v + 1 rather than 1.
    """
    steps: Tuple[Step, ...]
    termination: Termination
    description: Optional[str] = None

    def __post_init__(self):
        for offset, step in enumerate(self.steps):
            if step.phase is not Phase.TEXT:
                raise TrajectoryError(f"phase ordering: vision step at turn {step.turn} in a text phase")
            if offset and step.turn != self.steps[offset - 1].turn + 1:
                raise TrajectoryError(f"turn contiguity: turn {step.turn} follows {self.steps[offset - 1].turn}")

    @property
    def first_turn(self) -> Optional[int]:
        return self.steps[0].turn if self.steps else None

    @property
    def answer(self) -> Optional[str]:
        if self.steps and self.steps[-1].is_terminal:
            return self.steps[-1].answer
        return None


def bridge_context(c_vision: Trajectory, description: Optional[str], prompts: PromptLibrary) -> BridgedContext:
    if c_vision.text_steps():
        raise TrajectoryError("bridge_context expects a vision-only trajectory")
    continuation = prompts.render("text_continuation", description=description) if description else None
    return BridgedContext(
        trajectory_id=c_vision.id,
        question=c_vision.question,
        description=description,
        steps=c_vision.steps,
        continuation_prompt=continuation,
        ground_truth=c_vision.ground_truth,
    )


async def run_text_phase(bridged: BridgedContext, foundation: ChatClient, toolbox: ToolBox, prompts: PromptLibrary,
                         budgets: Budgets, repetition: RepetitionParams = RepetitionParams(),
                         max_consecutive_errors: int = 3) -> TextTrajectory:
    """Continue a bridged trajectory with text tools until an answer or a budget stops it."""
    working = Trajectory(
        id=bridged.trajectory_id,
        question=bridged.question,
        image=None,
        description=bridged.description,
        steps=bridged.steps,
        ground_truth=bridged.ground_truth,
    )
    agent = ReactAgent(foundation, toolbox, prompts, budgets, TEXT_TOOLS, repetition=repetition,
                       max_consecutive_errors=max_consecutive_errors)
    episode = agent.new_episode(working, continuation=bridged.continuation_prompt, text_only=True)
    finished = await agent.run(episode)
    text_steps = finished.steps[bridged.T_v:]
    logger.debug(f"{bridged.trajectory_id}: text phase took {len(text_steps)} turns ({finished.termination.value})")
    return TextTrajectory(text_steps, finished.termination, bridged.description)


def merge(c_vision: Trajectory, c_text: TextTrajectory) -> Trajectory:
    """
    Join the two phases into C_multimodal with the original image restored.

    Raises:
        TrajectoryError: the text turns overlap or leave a gap after the vision turns.
    """
    if c_vision.text_steps():
        raise TrajectoryError("merge expects a vision-only first half")
    if c_text.first_turn is not None and c_text.first_turn != c_vision.last_turn + 1:
        kind = "overlap" if c_text.first_turn <= c_vision.last_turn else "gap"
        raise TrajectoryError(f"turn contiguity: index {kind}, text phase starts at {c_text.first_turn} "
                              f"after vision turn {c_vision.last_turn}")
    termination = c_text.termination
    if termination in FINISHED:
        hit = c_vision.termination is Termination.JUDGE_HIT_THEN_ANSWERED
        termination = Termination.JUDGE_HIT_THEN_ANSWERED if hit else Termination.ANSWERED
    return Trajectory(
        id=c_vision.id,
        question=c_vision.question,
        image=c_vision.image,
        description=c_text.description if c_vision.image is None else None,
        steps=c_vision.steps + c_text.steps,
        termination=termination,
        ground_truth=c_vision.ground_truth,
    )


def split(c_multimodal: Trajectory, description: Optional[str] = None) -> Tuple[Trajectory, TextTrajectory]:
    """
    Undo merge: cut at T_v and re-attach the image to the vision half and the
    description to the text half. The vision half only records a hit when the
    merged termination says so; otherwise it ran to its cap.
    """
    problem = first_violation(c_multimodal.steps)
    if problem:
        raise TrajectoryError(problem)
    t_v = c_multimodal.T_v
    if c_multimodal.termination is Termination.JUDGE_HIT_THEN_ANSWERED:
        vision_end = Termination.JUDGE_HIT_THEN_ANSWERED
    else:
        vision_end = Termination.MAX_TURNS
    c_vision = replace(c_multimodal, steps=c_multimodal.steps[:t_v], description=None, termination=vision_end)
    text_end = c_multimodal.termination or Termination.MAX_TURNS
    if text_end is Termination.JUDGE_HIT_THEN_ANSWERED:
        text_end = Termination.ANSWERED
    c_text = TextTrajectory(c_multimodal.steps[t_v:], text_end, description or c_multimodal.description)
    return c_vision, c_text


@dataclass(frozen=True)
class Verdict:
    keep: bool
    reason: str


async def rejection_sample(trajectory: Trajectory, verifier: ChatClient, prompts: PromptLibrary,
                           audit: Optional[AuditLog] = None) -> Verdict:
    """
    Keep a trajectory only when the verifier finds its answer consistent with
    the ground truth. Discards are written to the audit log.
    """
    if trajectory.ground_truth is None:
        raise ValueError(f"{trajectory.id} has no ground truth to verify against")
    verdict = await _verify(trajectory, verifier, prompts)
    if not verdict.keep and audit is not None:
        audit.record("rejection_sample", trajectory.id, verdict.reason,
                     answer=trajectory.answer, ground_truth=trajectory.ground_truth)
    return verdict


async def check_answer(question: str, answer: str, ground_truth: str, verifier: ChatClient,
                       prompts: PromptLibrary, subject: str = "") -> Verdict:
    """Ask the verifier whether `answer` agrees with `ground_truth`; outages and unreadable replies are unverifiable."""
    text = prompts.render("verify_answer", question=question, ground_truth=ground_truth, answer=answer)
    try:
        reply = await verifier.chat([ChatTurn(Role.USER, text)], purpose="verify_answer",
                                    context={"question": question, "answer": answer, "ground_truth": ground_truth})
    except GatewayError as e:
        logger.warning(f"Verifier failed for {subject or question}: {e}")
        return Verdict(False, "unverifiable")
    consistent = parse_verdict(reply.text)
    if consistent is None:
        return Verdict(False, "unverifiable")
    if not consistent:
        return Verdict(False, "inconsistent")
    return Verdict(True, "consistent")


async def _verify(trajectory: Trajectory, verifier: ChatClient, prompts: PromptLibrary) -> Verdict:
    if trajectory.answer is None:
        return Verdict(False, "no_answer")
    return await check_answer(trajectory.question, trajectory.answer, trajectory.ground_truth, verifier, prompts,
                              trajectory.id)
