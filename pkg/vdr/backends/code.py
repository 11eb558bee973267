"""Python tool: a sandboxed subprocess for live runs, an arithmetic evaluator for simulated ones."""
import ast
import operator
import subprocess
import sys
from typing import Union

from vdr.errors import ToolError

# no sockets inside the sandbox
NETWORK_OFF = (
    "import socket\n"
    "def _blocked(*a, **k):\n"
    "    raise OSError('network disabled')\n"
    "socket.socket = _blocked\n"
    "socket.create_connection = _blocked\n"
    "socket.getaddrinfo = _blocked\n"
)

MAX_OUTPUT_CHARS = 4000

_OPERATORS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.FloorDiv: operator.floordiv,
    ast.Mod: operator.mod,
    ast.Pow: operator.pow,
    ast.USub: operator.neg,
    ast.UAdd: operator.pos,
}


def run_sandboxed(source: str, timeout_s: float = 10.0) -> str:
    """Run `source` in an isolated interpreter with an empty environment; returns stdout."""
    try:
        completed = subprocess.run(
            [sys.executable, "-I", "-c", NETWORK_OFF + source],
            capture_output=True,
            text=True,
            timeout=timeout_s,
            env={},
        )
    except subprocess.TimeoutExpired as e:
        raise ToolError(f"code timed out after {timeout_s}s") from e
    if completed.returncode != 0:
        tail = completed.stderr.strip().splitlines()[-1:] or ["exit status " + str(completed.returncode)]
        raise ToolError(f"code failed: {tail[0]}")
    output = completed.stdout.strip()
    return output[:MAX_OUTPUT_CHARS] if output else "(no output)"


def _evaluate(node: ast.AST) -> Union[int, float]:
    if isinstance(node, ast.Expression):
        return _evaluate(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return node.value
    if isinstance(node, ast.BinOp) and type(node.op) in _OPERATORS:
        left, right = _evaluate(node.left), _evaluate(node.right)
        if isinstance(node.op, ast.Pow) and abs(right) > 64:
            raise ToolError("exponent too large")
        return _OPERATORS[type(node.op)](left, right)
    if isinstance(node, ast.UnaryOp) and type(node.op) in _OPERATORS:
        return _OPERATORS[type(node.op)](_evaluate(node.operand))
    raise ToolError(f"unsupported expression: {type(node).__name__}")


def evaluate_arithmetic(source: str) -> str:
    """Evaluate a single arithmetic expression, optionally wrapped in print(...)."""
    text = source.strip()
    if text.startswith("print(") and text.endswith(")"):
        text = text[len("print("):-1]
    try:
        tree = ast.parse(text, mode="eval")
        return str(_evaluate(tree))
    except SyntaxError as e:
        raise ToolError(f"code failed: {e.msg}") from e
    except (ZeroDivisionError, OverflowError) as e:
        raise ToolError(f"code failed: {e}") from e
