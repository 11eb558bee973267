"""
Vision phase: propose regions, search them at several scales, and stop as
soon as a judge says the visual evidence is enough to hand over to text
research.
"""
import logging
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from vdr.budget import BudgetViolation, Budgets, append_step
from vdr.config import VisionSettings
from vdr.errors import GatewayError
from vdr.gateway import ChatClient, ChatTurn, Role, parse_verdict
from vdr.imaging import clamp_box, multi_scale_crops
from vdr.prompts import PromptLibrary
from vdr.tools import VISION_TOOLS, ToolBox
from vdr.trajectory import (
    BoundingBox,
    ImageRef,
    Observation,
    Phase,
    Status,
    Step,
    Termination,
    ToolCall,
    ToolName,
    Trajectory,
    VisualSearchArgs,
)

logger = logging.getLogger(__name__)

BOX_PATTERN = re.compile(r"(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)")


@dataclass(frozen=True)
class RegionProposal:
    boxes: Tuple[BoundingBox, ...]
    fallback: bool = False


@dataclass(frozen=True)
class EvidenceSet:
    """Observations accumulated over vision turns, in turn order."""
    observations: Tuple[Observation, ...] = ()

    def extend(self, observations: Sequence[Observation]) -> "EvidenceSet":
        return EvidenceSet(self.observations + tuple(observations))

    def texts(self) -> List[str]:
        return [obs.content for obs in self.observations if obs.status is Status.OK]


@dataclass(frozen=True)
class HitSignal:
    hit: int
    rationale: str

    def __post_init__(self):
        if self.hit not in (0, 1):
            raise ValueError(f"hit must be 0 or 1, got {self.hit}")


def parse_boxes(text: str, image: ImageRef, max_regions: int) -> List[BoundingBox]:
    """Every x0,y0,x1,y1 quadruple in the reply, clamped; unusable ones are dropped."""
    boxes: List[BoundingBox] = []
    for match in BOX_PATTERN.finditer(text):
        x0, y0, x1, y1 = (int(v) for v in match.groups())
        try:
            box = clamp_box(BoundingBox(x0, y0, x1, y1), image.width, image.height)
        except ValueError:
            continue
        if box not in boxes:
            boxes.append(box)
        if len(boxes) == max_regions:
            break
    return boxes


async def propose_regions(image: ImageRef, question: str, mllm: ChatClient, prompts: PromptLibrary,
                          max_regions: int = 4, turn: int = 1, evidence: Sequence[str] = (),
                          attempts: int = 2) -> RegionProposal:
    """Ask the MLLM for boxes; fall back to the whole image when nothing usable comes back."""
    text = prompts.render("vision_induction", question=question, width=image.width, height=image.height,
                          max_regions=max_regions, evidence=list(evidence))
    context = {"image": image, "question": question, "turn": turn, "max_regions": max_regions,
               "evidence": list(evidence)}
    for attempt in range(attempts):
        try:
            reply = await mllm.chat([ChatTurn(Role.USER, text, images=(image,))],
                                    purpose="propose_regions", context=context)
        except GatewayError as e:
            logger.warning(f"Region proposal failed for {image.id}: {e}")
            break
        boxes = parse_boxes(reply.text, image, max_regions)
        if boxes:
            return RegionProposal(tuple(boxes))
        logger.debug(f"No usable boxes for {image.id} (attempt {attempt + 1})")
    return RegionProposal((image.full_box,), fallback=True)


async def run_vision_pipeline(call: ToolCall, image: ImageRef, toolbox: ToolBox, task_id: str, turn: int,
                              question: str = "") -> List[Observation]:
    """One observation per crop, in crop order; crops run concurrently."""
    if call.tool is not ToolName.VISUAL_SEARCH:
        raise ValueError(f"expected a visual_search call, got {call.tool.value}")
    observations = await toolbox.execute([call], image, task_id, turn, allowed=VISION_TOOLS, question=question)
    return list(observations)


async def judge_hit(image: ImageRef, question: str, evidence: EvidenceSet, ground_truth: Optional[str],
                    judge: ChatClient, prompts: PromptLibrary, turn: int = 0) -> HitSignal:
    if ground_truth is None:
        raise ValueError("judge_hit needs the ground-truth answer")
    texts = evidence.texts()
    if not texts:
        return HitSignal(0, "no evidence")
    text = prompts.render("judge_hit", question=question, ground_truth=ground_truth, evidence=texts)
    try:
        reply = await judge.chat([ChatTurn(Role.USER, text, images=(image,))], purpose="judge_hit",
                                 context={"question": question, "ground_truth": ground_truth,
                                          "evidence": texts, "image": image, "turn": turn})
    except GatewayError as e:
        logger.warning(f"Hit judge failed: {e}")
        return HitSignal(0, "judge unavailable")
    verdict = parse_verdict(reply.text)
    if verdict is None:
        return HitSignal(0, "unparseable verdict")
    lines = reply.text.strip().splitlines()
    return HitSignal(int(verdict), lines[-1].strip() if len(lines) > 1 else "")


async def run_vision_phase(task_id: str, image: ImageRef, question: str, ground_truth: Optional[str],
                           budgets: Budgets, settings: VisionSettings, mllm: ChatClient, judge: ChatClient,
                           toolbox: ToolBox, prompts: PromptLibrary) -> Trajectory:
    """
    Build C_vision: turns of propose -> multi-scale crops -> search, each
    followed by the hit judge. Ends with judge_hit_then_answered on a hit
    (the answer comes from the text phase) or max_turns at the cap.
    """
    trajectory = Trajectory(id=task_id, question=question, image=image, ground_truth=ground_truth)
    evidence = EvidenceSet()
    cap = min(settings.vision_turn_cap, budgets.max_turns)
    for turn in range(1, cap + 1):
        proposal = await propose_regions(image, question, mllm, prompts, settings.max_regions, turn,
                                         evidence.texts())
        crops = multi_scale_crops(proposal.boxes, settings.scales)
        call = ToolCall("call_0", ToolName.VISUAL_SEARCH, VisualSearchArgs(tuple(crops), image.id))
        observations = await run_vision_pipeline(call, image, toolbox, task_id, turn, question)
        where = "the whole image" if proposal.fallback else f"{len(proposal.boxes)} proposed regions"
        reasoning = f"Searching {where} at scales {', '.join(f'{s:g}' for s in settings.scales)}."
        step = Step(turn, Phase.VISION, reasoning, calls=(call,), observations=tuple(observations))
        result = append_step(trajectory, step, budgets)
        if isinstance(result, BudgetViolation):
            logger.info(f"{task_id}: vision phase stopped by {result.budget}")
            return trajectory.finished(result.termination)
        trajectory = result
        evidence = evidence.extend(observations)
        signal = await judge_hit(image, question, evidence, ground_truth, judge, prompts, turn)
        logger.debug(f"{task_id} vision turn {turn}: hit={signal.hit} ({signal.rationale})")
        if signal.hit:
            return trajectory.finished(Termination.JUDGE_HIT_THEN_ANSWERED)
    return trajectory.finished(Termination.MAX_TURNS)
