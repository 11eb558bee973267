from collections import Counter

import orjson
import pytest

from vdr.config import MixSettings
from vdr.dataset import (
    ObfuscationKind,
    ObfuscationStep,
    Source,
    Split,
    VqaInstance,
    allocate_splits,
    instance_to_json,
    read_instances,
    select_sft_pool,
    write_instances,
)
from vdr.errors import DecodeError
from vdr.trajectory import ImageRef

IMAGE = ImageRef("img", 10, 10, regions=())
STEP = ObfuscationStep(ObfuscationKind.ANSWER_CHAIN, "Moraki", "Tolsen", "https://sim.local/pages/1", 1)


def curated(i: int) -> VqaInstance:
    return VqaInstance(f"c-{i}", IMAGE, "What is the name of the cat in the image?", "Moraki")


def fuzzy(i: int) -> VqaInstance:
    return VqaInstance(f"f-{i}", IMAGE, "What is the name of the owner of the cat in the image?", "Tolsen",
                       provenance=(STEP,), source=Source.FUZZY_SYNTH)


def text_only(i: int) -> VqaInstance:
    return VqaInstance(f"t-{i}", None, "What is the name of the owner of Moraki?", "Tolsen",
                       source=Source.TEXT_ONLY)


class TestInstance:
    def test_answer_required(self):
        with pytest.raises(ValueError):
            VqaInstance("x", IMAGE, "q", "  ")

    def test_fuzzy_needs_provenance(self):
        with pytest.raises(ValueError):
            VqaInstance("x", IMAGE, "q", "a", source=Source.FUZZY_SYNTH)

    def test_only_text_only_lacks_an_image(self):
        with pytest.raises(ValueError):
            VqaInstance("x", None, "q", "a")
        with pytest.raises(ValueError):
            VqaInstance("x", IMAGE, "q", "a", source=Source.TEXT_ONLY)

    def test_hops_strictly_increase(self):
        with pytest.raises(ValueError):
            VqaInstance("x", IMAGE, "q", "a", provenance=(STEP, STEP), source=Source.FUZZY_SYNTH)

    def test_depth(self):
        assert fuzzy(0).depth == 1
        assert curated(0).depth == 0


class TestFile:
    def test_write_then_read(self, tmp_path):
        path = tmp_path / "vqa.jsonl"
        instances = [curated(0), fuzzy(0), text_only(0)]
        assert write_instances(path, instances) == 3
        assert read_instances(path) == instances

    def test_schema_version(self, tmp_path):
        record = instance_to_json(curated(0))
        record["vdr_vqa_schema"] = 2
        path = tmp_path / "bad.jsonl"
        path.write_bytes(orjson.dumps(record) + b"\n")
        with pytest.raises(DecodeError) as info:
            read_instances(path)
        assert info.value.invariant == "schema version"

    @pytest.mark.parametrize("change, invariant", [
        (lambda r: r.pop("question"), "malformed record"),
        (lambda r: r.update(source="scraped"), "field value"),
        (lambda r: r.update(answer=""), "field value"),
    ])
    def test_bad_records(self, tmp_path, change, invariant):
        record = instance_to_json(curated(0))
        change(record)
        path = tmp_path / "bad.jsonl"
        path.write_bytes(orjson.dumps(record) + b"\n")
        with pytest.raises(DecodeError) as info:
            read_instances(path)
        assert info.value.invariant == invariant

    def test_garbage_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_bytes(b"{nope\n")
        with pytest.raises(DecodeError):
            read_instances(path)


class TestSplits:
    def test_allocation_follows_the_mix(self):
        instances = [curated(i) for i in range(10)] + [fuzzy(i) for i in range(4)] + [text_only(i) for i in range(3)]
        tagged = allocate_splits(instances, MixSettings())
        by_source = Counter((i.source, i.split) for i in tagged)
        assert by_source[(Source.CURATED, Split.SFT)] == 6
        assert by_source[(Source.CURATED, Split.RL)] == 4
        assert by_source[(Source.FUZZY_SYNTH, Split.SFT)] == 2
        assert by_source[(Source.TEXT_ONLY, Split.SFT)] == 3
        assert [i.split for i in tagged[:10]] == [Split.SFT] * 6 + [Split.RL] * 4

    def test_sft_pool_mix(self):
        instances = [curated(i) for i in range(20)] + [text_only(i) for i in range(10)] + [fuzzy(i) for i in range(10)]
        pool = select_sft_pool(instances, MixSettings(), limit=30)
        assert Counter(i.source for i in pool) == {Source.CURATED: 16, Source.TEXT_ONLY: 8, Source.FUZZY_SYNTH: 6}

    def test_rl_instances_stay_out_of_the_sft_pool(self):
        instances = [curated(i) for i in range(10)] + [text_only(i) for i in range(10)] + [fuzzy(i) for i in range(10)]
        pool = select_sft_pool(allocate_splits(instances, MixSettings()), MixSettings())
        assert all(i.split is Split.SFT for i in pool)
        assert Counter(i.source for i in pool)[Source.CURATED] == 6

    def test_pool_without_a_limit_keeps_the_mix(self):
        instances = [curated(i) for i in range(40)] + [text_only(i) for i in range(10)] + [fuzzy(i) for i in range(30)]
        expected = {Source.CURATED: 20, Source.TEXT_ONLY: 10, Source.FUZZY_SYNTH: 7}
        assert Counter(i.source for i in select_sft_pool(instances, MixSettings())) == expected
        assert Counter(i.source for i in select_sft_pool(instances, MixSettings(), limit=300)) == expected

    def test_missing_source_empties_the_pool(self):
        assert select_sft_pool([curated(i) for i in range(10)], MixSettings()) == []
