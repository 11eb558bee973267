"""
The ReAct turn loop.

One call to ReactAgent.step advances a trajectory by exactly one turn:
query the policy, screen the response for repetition, parse it, run the
requested tools, append the step under the budgets and update the safeguard
counters. A malformed response is recorded with the recovery observation and
the model gets another turn.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, List, Optional

from vdr.budget import BudgetViolation, Budgets, TokenCounter, append_step, count_tokens
from vdr.config import Mode
from vdr.errors import GatewayError, ReactFormatError
from vdr.gateway import ChatClient, ChatTurn, Role
from vdr.prompts import PromptLibrary
from vdr.react import parse_react, render_observations, response_text
from vdr.safeguards import (
    RepetitionParams,
    SafeguardState,
    StepOutcome,
    detect_repetition,
    outcome_of,
    record_step_outcome,
)
from vdr.tools import TEXT_TOOLS, VISION_TOOLS, ToolBox, tool_specs
from vdr.trajectory import (
    FORMAT_ERROR_MESSAGE,
    CropSpec,
    Observation,
    Phase,
    Step,
    Termination,
    ToolCall,
    ToolName,
    Trajectory,
    VisualSearchArgs,
)

logger = logging.getLogger(__name__)


def tools_for_mode(mode: Mode) -> FrozenSet[ToolName]:
    tools = frozenset()
    if mode.visual_search:
        tools |= VISION_TOOLS
    if mode.text_search:
        tools |= TEXT_TOOLS
    return tools


@dataclass
class Episode:
    """A trajectory under construction and its safeguard counters; one owner at a time."""
    trajectory: Trajectory
    safeguards: SafeguardState = field(default_factory=SafeguardState)
    continuation: Optional[str] = None
    answered: Termination = Termination.ANSWERED
    text_only: bool = False

    @property
    def done(self) -> bool:
        return self.trajectory.termination is not None

    @property
    def phase(self) -> Phase:
        if self.text_only or self.trajectory.text_steps():
            return Phase.TEXT
        return Phase.VISION

    def finish(self, termination: Termination):
        self.trajectory = self.trajectory.finished(termination)


def build_turns(episode: Episode, allowed: FrozenSet[ToolName], prompts: PromptLibrary) -> List[ChatTurn]:
    """The chat transcript the policy sees for the next turn."""
    trajectory = episode.trajectory
    turns = [ChatTurn(Role.SYSTEM, prompts.render("policy_system", tools=tool_specs(allowed)))]
    question = trajectory.question
    if episode.continuation:
        question = f"{question}\n\n{episode.continuation}"
    images = (trajectory.image,) if trajectory.image is not None else ()
    turns.append(ChatTurn(Role.USER, question, images=images))
    for step in trajectory.steps:
        turns.append(ChatTurn(Role.ASSISTANT, response_text(step),
                              call_ids=tuple(call.call_id for call in step.calls)))
        if step.is_malformed:
            turns.append(ChatTurn(Role.USER, FORMAT_ERROR_MESSAGE))
            continue
        for obs in step.observations:
            turns.append(ChatTurn(Role.TOOL, render_observations([obs]), call_id=obs.for_call))
    return turns


class ReactAgent:
    def __init__(self, policy: ChatClient, toolbox: ToolBox, prompts: PromptLibrary, budgets: Budgets,
                 tools: FrozenSet[ToolName], multi_scale: bool = True,
                 repetition: RepetitionParams = RepetitionParams(), max_consecutive_errors: int = 3,
                 counter: TokenCounter = count_tokens):
        self.policy = policy
        self.toolbox = toolbox
        self.prompts = prompts
        self.budgets = budgets
        self.tools = tools
        self.multi_scale = multi_scale
        self.repetition = repetition
        self.max_consecutive_errors = max_consecutive_errors
        self.counter = counter

    @classmethod
    def for_mode(cls, mode: Mode, policy: ChatClient, toolbox: ToolBox, prompts: PromptLibrary,
                 budgets: Budgets, **kwargs) -> "ReactAgent":
        return cls(policy, toolbox, prompts, budgets, tools_for_mode(mode), multi_scale=mode.crops, **kwargs)

    def new_episode(self, trajectory: Trajectory, **kwargs) -> Episode:
        state = SafeguardState(self.repetition, self.max_consecutive_errors)
        return Episode(trajectory, state, **kwargs)

    def allowed(self, phase: Phase) -> FrozenSet[ToolName]:
        if phase is Phase.TEXT:
            return self.tools - VISION_TOOLS
        return self.tools

    def _effective(self, call: ToolCall, episode: Episode) -> ToolCall:
        """Without multi-scale cropping, visual search sees the whole image only."""
        image = episode.trajectory.image
        if call.tool is ToolName.VISUAL_SEARCH and not self.multi_scale and image is not None:
            return ToolCall(call.call_id, call.tool, VisualSearchArgs((CropSpec(image.full_box, 1.0),), image.id))
        return call

    async def step(self, episode: Episode) -> Optional[Termination]:
        """Advance one turn. Returns the termination reason once the episode is over."""
        trajectory = episode.trajectory
        turn = trajectory.last_turn + 1
        if turn > self.budgets.max_turns:
            episode.finish(Termination.MAX_TURNS)
            return Termination.MAX_TURNS

        phase = episode.phase
        allowed = self.allowed(phase)
        context: Dict[str, Any] = {
            "task_id": trajectory.id,
            "question": trajectory.question,
            "image": trajectory.image,
            "description": trajectory.description,
            "steps": trajectory.steps,
            "allowed": allowed,
            "turn": turn,
            "phase": phase,
            "multi_scale": self.multi_scale,
        }
        try:
            reply = await self.policy.chat(build_turns(episode, allowed, self.prompts), purpose="policy",
                                           context=context)
        except GatewayError as e:
            logger.warning(f"{trajectory.id} turn {turn}: policy endpoint failed: {e}")
            episode.finish(Termination.ERROR_CASCADE)
            return Termination.ERROR_CASCADE

        text = reply.text
        if detect_repetition(text, self.repetition):
            logger.info(f"{trajectory.id} turn {turn}: repetition detected")
            episode.finish(record_step_outcome(episode.safeguards, StepOutcome.REPETITION))
            return Termination.REPETITION

        try:
            parsed = parse_react(text)
        except ReactFormatError as e:
            logger.debug(f"{trajectory.id} turn {turn}: {e}")
            step = Step(turn, phase, text, observations=(Observation.format_error(),))
        else:
            if parsed.is_terminal:
                step = Step(turn, Phase.TEXT, parsed.reasoning, answer=parsed.answer)
            else:
                calls = tuple(self._effective(call, episode) for call in parsed.calls)
                if phase is Phase.VISION and any(call.tool in TEXT_TOOLS for call in calls):
                    phase = Phase.TEXT
                observations = await self.toolbox.execute(calls, trajectory.image, trajectory.id, turn,
                                                          allowed=self.allowed(phase),
                                                          question=trajectory.question)
                step = Step(turn, phase, parsed.reasoning, calls=calls, observations=observations)

        result = append_step(trajectory, step, self.budgets, self.counter)
        if isinstance(result, BudgetViolation):
            logger.info(f"{trajectory.id} turn {turn}: {result.budget} exceeded ({result.actual} > {result.limit})")
            episode.finish(result.termination)
            return result.termination
        episode.trajectory = result

        if step.is_terminal:
            episode.finish(episode.answered)
            return episode.answered
        stop = record_step_outcome(episode.safeguards, outcome_of(step))
        if stop is not None:
            logger.info(f"{trajectory.id} turn {turn}: terminated by {stop.value}")
            episode.finish(stop)
        return stop

    async def run(self, episode: Episode) -> Trajectory:
        while not episode.done:
            await self.step(episode)
        return episode.trajectory
