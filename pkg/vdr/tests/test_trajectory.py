import orjson
import pytest

from vdr.codec import (
    decode_trajectory,
    encode_trajectory,
    read_trajectories,
    trajectory_to_json,
    write_trajectories,
)
from vdr.errors import DecodeError, TrajectoryError
from vdr.store import AuditLog, TrajectoryStore, read_audit
from vdr.tests.helpers import answer_step, make_trajectory, search_step
from vdr.trajectory import (
    FORMAT_ERROR_MESSAGE,
    BoundingBox,
    CropSpec,
    EntityRegion,
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


def sim_image(image_id="img-x"):
    region = EntityRegion("Moraki", "cat", "red cat with a striped pattern", BoundingBox(10, 10, 60, 60))
    return ImageRef(image_id, 100, 100, regions=(region,))


class TestStepShape:
    def test_answer_step_cannot_carry_calls(self):
        call = search_step(1).calls[0]
        with pytest.raises(TrajectoryError):
            Step(1, Phase.TEXT, "done", calls=(call,), answer="x")

    def test_malformed_step_needs_the_recovery_observation(self):
        step = Step(1, Phase.TEXT, "garbage", observations=(Observation.format_error(),))
        assert step.is_malformed
        assert step.is_error_step
        with pytest.raises(TrajectoryError):
            Step(1, Phase.TEXT, "garbage")

    def test_format_error_observation_has_fixed_text(self):
        assert Observation.format_error().content == FORMAT_ERROR_MESSAGE
        with pytest.raises(ValueError):
            Observation("", Status.FORMAT_ERROR, "try harder")

    def test_visual_search_fans_out_per_crop(self):
        crops = (CropSpec(BoundingBox(0, 0, 10, 10), 1.0), CropSpec(BoundingBox(0, 0, 10, 10), 2.0))
        call = ToolCall("c", ToolName.VISUAL_SEARCH, VisualSearchArgs(crops))
        assert call.fanout == 2
        one = Observation("c", Status.OK, "found")
        with pytest.raises(TrajectoryError):
            Step(1, Phase.VISION, "search", calls=(call,), observations=(one,))
        Step(1, Phase.VISION, "search", calls=(call,), observations=(one, one))

    def test_wrong_argument_type_is_rejected(self):
        with pytest.raises(ValueError):
            ToolCall("c", ToolName.VISIT_PAGE, VisualSearchArgs((CropSpec(BoundingBox(0, 0, 1, 1)),)))


class TestTrajectoryOrdering:
    def test_turns_must_be_contiguous(self):
        with pytest.raises(TrajectoryError, match="turn contiguity"):
            Trajectory("t", "q", steps=(search_step(1), search_step(3)))

    def test_vision_after_text_is_rejected(self):
        with pytest.raises(TrajectoryError, match="phase ordering"):
            Trajectory("t", "q", steps=(search_step(1, Phase.TEXT), search_step(2, Phase.VISION)))

    def test_answer_must_be_last(self):
        with pytest.raises(TrajectoryError, match="step shape"):
            Trajectory("t", "q", steps=(answer_step(1), search_step(2)))

    def test_t_v_counts_vision_steps(self):
        trajectory = make_trajectory(n_vision=3, n_text=2)
        assert trajectory.T_v == 3
        assert trajectory.answer == "Moraki"
        assert trajectory.last_turn == 6


class TestCodec:
    def test_round_trip_is_byte_stable(self):
        trajectory = make_trajectory(termination=Termination.ANSWERED)
        encoded = encode_trajectory(trajectory)
        decoded = decode_trajectory(encoded)
        assert decoded == trajectory
        assert encode_trajectory(decoded) == encoded

    def test_sim_image_survives_round_trip(self):
        trajectory = Trajectory("t", "q", image=sim_image(), ground_truth="Moraki")
        assert decode_trajectory(encode_trajectory(trajectory)).image == trajectory.image

    def test_pixel_payload_survives_round_trip(self):
        image = ImageRef("png", 2, 2, payload=b"\x89PNG fake bytes")
        trajectory = Trajectory("t", "q", image=image)
        assert decode_trajectory(encode_trajectory(trajectory)).image.payload == image.payload

    def test_wrong_schema_version(self):
        record = trajectory_to_json(make_trajectory())
        record["vdr_schema"] = 99
        with pytest.raises(DecodeError) as info:
            decode_trajectory(orjson.dumps(record))
        assert info.value.invariant == "schema version"

    def test_declared_t_v_must_match(self):
        record = trajectory_to_json(make_trajectory(n_vision=2))
        record["T_v"] = 1
        with pytest.raises(DecodeError) as info:
            decode_trajectory(orjson.dumps(record))
        assert info.value.invariant == "T_v"

    def test_broken_turns_name_the_invariant(self):
        record = trajectory_to_json(make_trajectory())
        record["steps"][1]["turn"] = 7
        with pytest.raises(DecodeError) as info:
            decode_trajectory(orjson.dumps(record))
        assert info.value.invariant == "turn contiguity"

    def test_garbage_is_a_malformed_record(self):
        with pytest.raises(DecodeError) as info:
            decode_trajectory(b"{not json")
        assert info.value.invariant == "malformed record"

    def test_missing_field(self):
        record = trajectory_to_json(make_trajectory())
        del record["question"]
        with pytest.raises(DecodeError) as info:
            decode_trajectory(orjson.dumps(record))
        assert info.value.invariant == "malformed record"

    def test_file_round_trip(self, tmp_path):
        trajectories = [make_trajectory(f"t-{i}") for i in range(3)]
        path = tmp_path / "trajectories.jsonl"
        assert write_trajectories(path, trajectories) == 3
        assert read_trajectories(path) == trajectories


class TestStore:
    def test_add_skips_known_ids(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        store = TrajectoryStore(path)
        assert store.add([make_trajectory("a"), make_trajectory("b")]) == (2, 2)
        reopened = TrajectoryStore(path)
        assert reopened.add([make_trajectory("b"), make_trajectory("c")]) == (1, 3)
        assert [t.id for t in read_trajectories(path)] == ["a", "b", "c"]

    def test_audit_log_writes_one_line_per_event(self, tmp_path):
        path = tmp_path / "audit" / "discards.jsonl"
        audit = AuditLog(path)
        audit.record("rejection_sample", "t-1", "inconsistent", answer="x")
        audit.record("filter_image", "img-1", "size")
        assert audit.reasons() == ["inconsistent", "size"]
        assert audit.reasons("filter_image") == ["size"]
        events = read_audit(path)
        assert events[0] == {"event": "rejection_sample", "subject": "t-1", "reason": "inconsistent",
                             "answer": "x"}
        assert "timestamp" not in events[1]
