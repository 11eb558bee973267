import orjson
from typer.testing import CliRunner

from vdr.cli import app
from vdr.codec import write_trajectories
from vdr.dataset import read_instances
from vdr.tests.helpers import make_trajectory

runner = CliRunner()

SMALL_WORLD = """\
world:
  seed: 11
  n_entities: 20
  n_pages: 24
rollout:
  concurrency: 8
"""


def small_config(tmp_path):
    path = tmp_path / "engine.yaml"
    path.write_text(SMALL_WORLD)
    return str(path)


class TestValidate:
    def test_clean_file(self, tmp_path):
        path = tmp_path / "traj.jsonl"
        write_trajectories(path, [make_trajectory(f"t-{i}") for i in range(3)])
        result = runner.invoke(app, ["validate", str(path)])
        assert result.exit_code == 0, result.output
        assert "3 valid, 0 problems" in result.output

    def test_bad_line(self, tmp_path):
        path = tmp_path / "traj.jsonl"
        write_trajectories(path, [make_trajectory()])
        with open(path, "ab") as f:
            f.write(b"{nope\n")
        result = runner.invoke(app, ["validate", str(path)])
        assert result.exit_code == 1
        assert "line 2" in result.output

    def test_budget_overrun(self, tmp_path):
        path = tmp_path / "traj.jsonl"
        write_trajectories(path, [make_trajectory()])
        config = tmp_path / "tight.yaml"
        config.write_text("budgets:\n  max_turns: 2\n")
        result = runner.invoke(app, ["validate", str(path), "-c", str(config)])
        assert result.exit_code == 1
        assert "4 turns > 2" in result.output

    def test_missing_config_is_a_config_error(self, tmp_path):
        path = tmp_path / "traj.jsonl"
        write_trajectories(path, [make_trajectory()])
        result = runner.invoke(app, ["validate", str(path), "-c", str(tmp_path / "nope.yaml")])
        assert result.exit_code == 2
        assert "config error" in result.output

    def test_invalid_config_value(self, tmp_path):
        config = tmp_path / "bad.yaml"
        config.write_text("budgets:\n  max_turns: 0\n")
        result = runner.invoke(app, ["validate", str(tmp_path / "x.jsonl"), "-c", str(config)])
        assert result.exit_code == 2


class TestPipelines:
    def test_synthesize_roll_out_and_export(self, tmp_path):
        config = small_config(tmp_path)
        dataset = tmp_path / "vqa.jsonl"
        result = runner.invoke(app, ["synth-vqa", "--out", str(dataset), "-c", config,
                                     "--n-images", "8", "--text-only", "3"])
        assert result.exit_code == 0, result.output
        instances = read_instances(dataset)
        assert sum(1 for i in instances if i.image is None) == 3

        rollouts = tmp_path / "rollouts.jsonl"
        result = runner.invoke(app, ["rollout", "--tasks", str(dataset), "--out", str(rollouts), "-c", config,
                                     "--samples", "2", "--no-progress"])
        assert result.exit_code == 0, result.output
        assert len(rollouts.read_bytes().splitlines()) == 2 * len(instances)

        result = runner.invoke(app, ["validate", str(rollouts), "-c", config])
        assert result.exit_code == 0, result.output

        batch = tmp_path / "batch.jsonl"
        result = runner.invoke(app, ["rl-prep", "--trajectories", str(rollouts), "--out", str(batch), "-c", config])
        assert result.exit_code == 0, result.output
        header = orjson.loads(batch.read_bytes().splitlines()[0])
        assert header["groups"] == len(instances)
        assert header["records"] == 2 * len(instances)

    def test_seed_override_is_deterministic(self, tmp_path):
        config = small_config(tmp_path)
        first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (first, second):
            result = runner.invoke(app, ["--seed", "5", "synth-vqa", "--out", str(out), "-c", config,
                                         "--n-images", "6", "--text-only", "2"])
            assert result.exit_code == 0, result.output
        assert first.read_bytes() == second.read_bytes()
