import asyncio
from collections import Counter

import numpy as np
import pytest

from vdr.bridge import (
    TextTrajectory,
    bridge_context,
    describe_image,
    merge,
    rejection_sample,
    run_text_phase,
    split,
)
from vdr.budget import Budgets
from vdr.config import VisionSettings
from vdr.errors import DescriptionError, TrajectoryError
from vdr.gateway import FailingChatClient, ScriptedChatClient
from vdr.questions import entity_question
from vdr.sim import SimModels, SimPolicy
from vdr.store import AuditLog, read_audit
from vdr.tests.helpers import answer_step, make_trajectory, search_step
from vdr.trajectory import Phase, Termination, Trajectory
from vdr.vision import run_vision_phase


def vision_half(world, n_vision: int = 2) -> Trajectory:
    steps = tuple(search_step(i, Phase.VISION) for i in range(1, n_vision + 1))
    return Trajectory("t-1", "What is the name of the cat in the image?", image=world.image("img-0008"),
                      steps=steps, termination=Termination.JUDGE_HIT_THEN_ANSWERED, ground_truth="Moraki")


def text_half(first_turn: int, n_text: int = 1) -> TextTrajectory:
    steps = tuple(search_step(first_turn + i) for i in range(n_text))
    steps += (answer_step(first_turn + n_text),)
    return TextTrajectory(steps, Termination.ANSWERED, "The image shows a red cat.")


class TestMerge:
    def test_bridge_keeps_the_vision_steps(self, world, prompts):
        c_vision = vision_half(world)
        bridged = bridge_context(c_vision, "The image shows a red cat.", prompts)
        assert bridged.steps == c_vision.steps
        assert bridged.T_v == 2
        assert "The image shows a red cat." in bridged.continuation_prompt

    def test_merge_is_contiguous(self, world):
        merged = merge(vision_half(world), text_half(3))
        assert [step.turn for step in merged.steps] == [1, 2, 3, 4]
        assert merged.T_v == 2
        assert merged.image == world.image("img-0008")
        assert merged.description is None
        assert merged.termination is Termination.JUDGE_HIT_THEN_ANSWERED

    def test_split_undoes_merge(self, world):
        c_vision, c_text = vision_half(world), text_half(3)
        assert split(merge(c_vision, c_text), c_text.description) == (c_vision, c_text)

    def test_overlap_and_gap(self, world):
        with pytest.raises(TrajectoryError, match="overlap"):
            merge(vision_half(world), text_half(2))
        with pytest.raises(TrajectoryError, match="gap"):
            merge(vision_half(world), text_half(4))

    def test_text_half_rejects_vision_steps(self):
        with pytest.raises(TrajectoryError):
            TextTrajectory((search_step(3, Phase.VISION),), Termination.ANSWERED)

    def test_unfinished_text_phase_keeps_its_reason(self, world):
        c_text = TextTrajectory((search_step(3),), Termination.ERROR_CASCADE)
        assert merge(vision_half(world), c_text).termination is Termination.ERROR_CASCADE


class TestTrajectoryAlgebra:
    def test_bridge_merge_split_on_random_trajectories(self, world, prompts):
        rng = np.random.default_rng(31)
        images = [image for image in world.images if image.regions]
        unfinished = [Termination.MAX_TURNS, Termination.ERROR_CASCADE, Termination.REPETITION,
                      Termination.CONTEXT_EXCEEDED]
        for index in range(500):
            n_vision, n_text = int(rng.integers(0, 7)), int(rng.integers(0, 6))
            answered = bool(rng.random() < 0.7)
            hit = answered and bool(rng.random() < 0.5)
            queries = [str(q) for q in rng.choice(["moraki", "tolsen", "red cat", "owner of x"],
                                                  size=n_vision + n_text)]
            vision_steps = tuple(search_step(turn, Phase.VISION, queries[turn - 1]) for turn in range(1, n_vision + 1))
            c_vision = Trajectory(f"t-{index}", "What is the name of the cat in the image?",
                                  image=images[int(rng.integers(len(images)))], steps=vision_steps,
                                  termination=Termination.JUDGE_HIT_THEN_ANSWERED if hit else Termination.MAX_TURNS,
                                  ground_truth="Moraki")
            text_steps = tuple(search_step(n_vision + k, query=queries[n_vision + k - 1]) for k in range(1, n_text + 1))
            if answered:
                text_steps += (answer_step(n_vision + n_text + 1),)
            termination = Termination.ANSWERED if answered else unfinished[int(rng.integers(len(unfinished)))]
            description = f"The image shows a {c_vision.image.regions[0].descriptor}."
            c_text = TextTrajectory(text_steps, termination, description)

            bridged = bridge_context(c_vision, description, prompts)
            assert bridged.steps == c_vision.steps
            assert bridged.T_v == n_vision

            merged = merge(c_vision, c_text)
            assert [step.turn for step in merged.steps] == list(range(1, len(merged.steps) + 1))
            assert merged.T_v == n_vision
            assert merged.steps[:n_vision] == c_vision.steps
            if answered:
                expected = Termination.JUDGE_HIT_THEN_ANSWERED if hit else Termination.ANSWERED
            else:
                expected = termination
            assert merged.termination is expected
            assert split(merged, description) == (c_vision, c_text)


class TestDescribe:
    def test_description(self, world, prompts):
        image = world.image("img-0008")
        description = asyncio.run(describe_image(image, SimModels(world), prompts))
        assert description == f"The image shows a {image.regions[0].descriptor}."

    def test_empty_or_failed(self, world, prompts):
        image = world.image("img-0008")
        with pytest.raises(DescriptionError):
            asyncio.run(describe_image(image, ScriptedChatClient(["   "]), prompts))
        with pytest.raises(DescriptionError) as info:
            asyncio.run(describe_image(image, FailingChatClient(), prompts))
        assert info.value.cause is not None


class TestFullHandover:
    def test_vision_then_text_answers_the_entity_question(self, world, toolbox, prompts):
        image = next(i for i in world.images if i.regions and len(i.regions) >= 2)
        target = image.regions[0]
        question = entity_question(target.kind)
        models = SimModels(world, policy=SimPolicy())

        async def pipeline():
            c_vision = await run_vision_phase("t-x", image, question, target.name, Budgets(), VisionSettings(),
                                              models, models, toolbox, prompts)
            description = await describe_image(image, models, prompts)
            bridged = bridge_context(c_vision, description, prompts)
            c_text = await run_text_phase(bridged, models, toolbox, prompts, Budgets())
            merged = merge(c_vision, c_text)
            return c_vision, c_text, merged, await rejection_sample(merged, models, prompts)

        c_vision, c_text, merged, verdict = asyncio.run(pipeline())
        assert c_vision.termination is Termination.JUDGE_HIT_THEN_ANSWERED
        assert c_text.first_turn == c_vision.T_v + 1
        assert merged.answer == target.name
        assert merged.termination is Termination.JUDGE_HIT_THEN_ANSWERED
        assert verdict.keep


class TestRejectionSampling:
    def test_keeps_exactly_the_consistent_answers(self, world, prompts, tmp_path):
        trajectories = []
        for i in range(200):
            answer = "Moraki" if i % 3 else ("Tolsen" if i % 2 else None)
            trajectories.append(make_trajectory(f"t-{i}", answer=answer, ground_truth="Moraki"))
        audit = AuditLog(tmp_path / "audit.jsonl")
        verifier = SimModels(world)

        async def screen():
            return await asyncio.gather(*(rejection_sample(t, verifier, prompts, audit) for t in trajectories))

        verdicts = asyncio.run(screen())
        kept = {t.id for t, v in zip(trajectories, verdicts) if v.keep}
        assert kept == {t.id for t in trajectories if t.answer == "Moraki"}
        assert Counter(audit.reasons()) == Counter(
            "no_answer" if t.answer is None else "inconsistent" for t in trajectories if t.answer != "Moraki")
        assert len(read_audit(tmp_path / "audit.jsonl")) == 200 - len(kept)

    def test_unparseable_verdict_discards(self, prompts):
        verifier = ScriptedChatClient(["hmm, hard to say"])
        verdict = asyncio.run(rejection_sample(make_trajectory(), verifier, prompts))
        assert (verdict.keep, verdict.reason) == (False, "unverifiable")

    def test_ground_truth_is_required(self, prompts):
        with pytest.raises(ValueError):
            asyncio.run(rejection_sample(make_trajectory(ground_truth=None), ScriptedChatClient([]), prompts))
