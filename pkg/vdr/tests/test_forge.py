import asyncio

import numpy as np
import pytest

from vdr.dataset import ObfuscationKind, Source, VqaInstance
from vdr.errors import SynthesisError
from vdr.forge import VqaForge, mentions, relation_links, reply_fields, walk_relations
from vdr.gateway import FailingChatClient, ModelRoles, ScriptedChatClient
from vdr.questions import parse_question
from vdr.sim import SimBackend, SimModels, build_world, text_only_questions
from vdr.store import AuditLog
from vdr.trajectory import BoundingBox, EntityRegion, ImageRef


@pytest.fixture
def forge(world, pool, prompts):
    roles = ModelRoles.single(SimModels(world))
    return VqaForge(SimBackend(world, sleep=False), pool, roles, prompts, seed=world.seed, audit=AuditLog())


def crowded(world) -> ImageRef:
    return next(image for image in world.images if image.regions and len(image.regions) >= 2)


def run(coroutine):
    return asyncio.run(coroutine)


class TestHelpers:
    def test_reply_fields_keep_the_first_value(self):
        assert reply_fields("verdict: same\nentity: Moraki\nentity: Tolsen") == {"verdict": "same",
                                                                                 "entity": "Moraki"}

    def test_relation_links_stay_under_their_heading(self):
        page = ("## Moraki\nMoraki is a cat: a grey cat with a collar.\n- owner: [Tolsen](http://w/1)\n"
                "- coach: [Irsa](http://w/2)\n\n## Tolsen\n- friend: [Moraki](http://w/0)\n")
        assert relation_links(page, "Moraki") == [("owner", "Tolsen", "http://w/1"), ("coach", "Irsa", "http://w/2")]
        assert relation_links(page, "Tolsen") == [("friend", "Moraki", "http://w/0")]
        assert relation_links(page, "Irsa") == []

    def test_walk_never_revisits(self):
        graph = {"http://a": "## A\n- friend: [B](http://b)\n", "http://b": "## B\n- friend: [A](http://a)\n"}
        walk = walk_relations("A", "http://a", 3, graph.__getitem__, np.random.default_rng(0))
        assert walk == [("friend", "B", "http://b")]

    def test_walk_is_seeded_and_follows_relations(self, world):
        start = next(e for e in world.entities if e.relations)

        def fetch(url):
            return world.page(url).markdown

        first = walk_relations(start.name, start.url, 3, fetch, np.random.default_rng(42))
        assert first == walk_relations(start.name, start.url, 3, fetch, np.random.default_rng(42))
        names = [start.name] + [target for _relation, target, _url in first]
        assert len(set(names)) == len(names)
        for source, (relation, target, url) in zip(names, first):
            assert world.entity(source).related(relation) == target
            assert world.entity(target).url == url

    def test_mentions_whole_words_only(self):
        assert mentions("Who owns MORAKI's cat?", "Moraki")
        assert not mentions("Who owns Morakis?", "Moraki")
        assert not mentions("anything", "  ")


class TestFilters:
    def test_small_images_are_dropped(self, forge, world):
        verdict = run(forge.filter_image(world.image("img-0009")))
        assert (verdict.keep, verdict.reason) == (False, "size")
        assert forge.audit.reasons("filter_image") == ["size"]

    def test_size_boundary(self, forge, world):
        region = EntityRegion(world.entities[0].name, "cat", "x", BoundingBox(0, 0, 10, 10))
        assert run(forge.filter_image(ImageRef("ok", 224, 224, regions=(region,)))).keep
        assert not run(forge.filter_image(ImageRef("thin", 223, 900, regions=(region,)))).keep

    def test_selector_rejects_empty_scenes(self, forge, world):
        verdict = run(forge.filter_image(world.image("img-0007")))
        assert verdict.reason == "selector"

    def test_whole_image_hit_is_rejected(self, forge, world):
        image = world.image("img-0008")
        region = image.regions[0]
        instance = VqaInstance("v", image, f"What is the name of the owner of the {region.kind} in the image?",
                               "Somebody")
        verdict = run(forge.filter_candidate(instance))
        assert verdict.reason == "full_image_hit"

    def test_direct_answer_is_rejected(self, forge, world):
        forge.roles.mllm = ScriptedChatClient(["  moraki "])
        instance = VqaInstance("v", crowded(world), "What is the name of the cat in the image?", "Moraki")
        assert run(forge.filter_candidate(instance)).reason == "direct_answerable"

    def test_direct_answer_sentence_is_rejected(self, forge, world):
        forge.roles.mllm = ScriptedChatClient(["It is Moraki."])
        instance = VqaInstance("v", crowded(world), "What is the name of the cat in the image?", "Moraki")
        assert run(forge.filter_candidate(instance)).reason == "direct_answerable"

    def test_wrong_direct_answer_passes_the_direct_check(self, forge, world):
        forge.roles.mllm = ScriptedChatClient(["It is Zzyzx."])
        image = crowded(world)
        instance = VqaInstance("v", image, "What is the name of the cat in the image?", image.regions[0].name)
        assert run(forge.filter_candidate(instance)).keep

    def test_verifier_outage_is_unverifiable(self, forge, world):
        forge.roles.mllm = ScriptedChatClient(["no idea"])
        forge.roles.verifier = FailingChatClient()
        instance = VqaInstance("v", crowded(world), "What is the name of the cat in the image?", "Moraki")
        assert run(forge.filter_candidate(instance)).reason == "unverifiable"

    def test_hard_question_passes(self, forge, world):
        image = crowded(world)
        instance = VqaInstance("v", image, f"What is the name of the owner of the {image.regions[0].kind} "
                                           f"in the image?", "Somebody")
        assert run(forge.filter_candidate(instance)).keep


class TestVerifyEntity:
    def test_only_the_widest_scale_isolates_the_entity(self, forge, world):
        big, small = world.entities[0], world.entities[1]
        image = ImageRef("nested", 100, 100, regions=(
            EntityRegion(big.name, big.kind, big.descriptor, BoundingBox(0, 0, 100, 100)),
            EntityRegion(small.name, small.kind, small.descriptor, BoundingBox(44, 44, 56, 56)),
        ))
        match = run(forge.verify_entity(image, BoundingBox(45, 45, 55, 55)))
        assert match.name == big.name
        assert match.url == big.url
        assert match.scale == 2.5
        assert match.kind == big.kind

    def test_nothing_to_find(self, forge, world):
        image = world.image("img-0007")
        assert run(forge.verify_entity(image, image.full_box)) is None

    def test_box_must_fit(self, forge, world):
        with pytest.raises(ValueError):
            run(forge.verify_entity(world.image("img-0009"), BoundingBox(0, 0, 500, 500)))


class TestSynthesis:
    def test_seed_is_an_entity_question(self, forge, world):
        seed = run(forge.seed_instance(crowded(world)))
        parts = parse_question(seed.question)
        assert parts.is_visual and not parts.relations
        assert world.entity(seed.answer).kind == parts.anchor_kind
        assert seed.entity_url == world.entity(seed.answer).url

    def test_depth_two_alternates(self, forge, world):
        image = crowded(world)
        seed = run(forge.seed_instance(image))
        fuzzy = run(forge.synthesize_fuzzy(image, 2, seed))
        assert fuzzy.source is Source.FUZZY_SYNTH
        assert [s.kind for s in fuzzy.provenance] == [ObfuscationKind.ANSWER_CHAIN, ObfuscationKind.ENTITY_WALK]
        assert [s.hop_index for s in fuzzy.provenance] == [1, 2]
        parts = parse_question(fuzzy.question)
        assert world.entity(seed.answer).related(parts.relations[0]) == fuzzy.answer
        assert parts.is_described
        assert not mentions(fuzzy.question, seed.entity)
        assert parts.anchor_kind is None and " in the image whose " in fuzzy.question
        walk = fuzzy.provenance[1]
        assert walk.path[0] == seed.entity_url
        assert walk.to_entity == parts.anchor_target
        assert world.follow(seed.entity, parts.anchor_path) == parts.anchor_target

    def test_depth_three_alternates(self, forge, world):
        fuzzy = run(forge.synthesize_fuzzy(crowded(world), 3))
        assert [s.kind for s in fuzzy.provenance] == [
            ObfuscationKind.ANSWER_CHAIN, ObfuscationKind.ENTITY_WALK, ObfuscationKind.ANSWER_CHAIN]
        assert len(parse_question(fuzzy.question).relations) == 2

    def test_no_entity_no_fuzzy(self, forge, world):
        with pytest.raises(SynthesisError):
            run(forge.synthesize_fuzzy(world.image("img-0007"), 2))

    def test_depth_must_be_positive(self, forge, world):
        with pytest.raises(ValueError):
            run(forge.synthesize_fuzzy(crowded(world), 0))

    def test_dataset_build(self, forge, world):
        images = list(world.images[:10])
        text_only = text_only_questions(world, limit=4)
        instances = run(forge.build_dataset(images, 2, text_only, concurrency=4))
        assert {i.source for i in instances} >= {Source.FUZZY_SYNTH, Source.TEXT_ONLY}
        assert not any(i.image is not None and i.image.id == "img-0009" for i in instances)
        assert "size" in forge.audit.reasons()
        assert [i.instance_id for i in instances if i.source is Source.TEXT_ONLY] == [t.instance_id for t in text_only]

    def test_text_only_questions(self, world):
        instances = text_only_questions(world, limit=3)
        assert [i.instance_id for i in instances] == ["text-00000", "text-00001", "text-00002"]
        assert all(i.image is None and i.source is Source.TEXT_ONLY for i in instances)


class TestFuzzySoundness:
    def test_released_fuzzy_questions_hold_up(self, pool, prompts):
        world = build_world(5, n_entities=60, n_pages=80, n_images=120)
        roles = ModelRoles.single(SimModels(world))
        forge = VqaForge(SimBackend(world, sleep=False), pool, roles, prompts, seed=world.seed)
        images = list(world.images)
        released = run(forge.build_dataset(images[:60], 2, concurrency=8))
        released += run(forge.build_dataset(images[60:], 3, concurrency=8))
        fuzzy = [i for i in released if i.source is Source.FUZZY_SYNTH]
        assert len(fuzzy) >= 5

        recheck = VqaForge(SimBackend(world, sleep=False), pool, ModelRoles.single(SimModels(world)), prompts,
                           seed=world.seed + 1)
        for instance in fuzzy:
            assert run(recheck.filter_candidate(instance)).keep, instance.question
            assert not mentions(instance.question, instance.answer)
            assert not mentions(instance.question, instance.entity)
            parts = parse_question(instance.question)
            assert world.follow(instance.entity, list(reversed(parts.relations))) == instance.answer
            # the description fits the entity and no other region in the image
            assert world.follow(instance.entity, parts.anchor_path) == parts.anchor_target
            others = [r.name for r in instance.image.regions if r.name != instance.entity]
            assert all(world.follow(name, parts.anchor_path) != parts.anchor_target for name in others)
