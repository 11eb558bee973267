"""Small trajectory builders shared by the tests."""
from vdr.trajectory import (
    Observation,
    Phase,
    Status,
    Step,
    ToolCall,
    ToolName,
    Trajectory,
    WebSearchArgs,
)


def search_step(turn: int, phase: Phase = Phase.TEXT, query: str = "moraki") -> Step:
    call = ToolCall(f"call_{turn}", ToolName.WEB_SEARCH, WebSearchArgs(query))
    obs = Observation(call.call_id, Status.OK, f"result for {query}", ("https://sim.local/pages/0",), 250)
    return Step(turn, phase, f"Searching for {query}.", calls=(call,), observations=(obs,))


def answer_step(turn: int, answer: str = "Moraki") -> Step:
    return Step(turn, Phase.TEXT, "I have the answer.", answer=answer)


def make_trajectory(trajectory_id: str = "t-1", n_vision: int = 2, n_text: int = 1, answer: str = "Moraki",
                    ground_truth: str = "Moraki", termination=None) -> Trajectory:
    steps = [search_step(i, Phase.VISION) for i in range(1, n_vision + 1)]
    steps += [search_step(n_vision + i) for i in range(1, n_text + 1)]
    if answer is not None:
        steps.append(answer_step(len(steps) + 1, answer))
    return Trajectory(trajectory_id, "What is the name of the owner of Moraki?", steps=tuple(steps),
                      termination=termination, ground_truth=ground_truth)
