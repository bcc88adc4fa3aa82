"""Trajectory data model with line-oriented, bit-exact serialization.

A trajectory interleaves policy-emitted tokens with tool-output tokens.
Only policy tokens carry behavior log-probabilities and only they count
toward response length and loss normalization; tool outputs are
environment-generated conditioning context.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator

from . import vocab

ROLE_POLICY = "policy"
ROLE_TOOL = "tool_output"
_ROLE_CODES = {ROLE_POLICY: "p", ROLE_TOOL: "t"}
_ROLES_BY_CODE = {code: role for role, code in _ROLE_CODES.items()}

TRUNC_NONE = "none"
TRUNC_TOKEN_LIMIT = "token_limit"
TRUNC_TOOL_BUDGET = "tool_budget"
TRUNCATION_REASONS = (TRUNC_NONE, TRUNC_TOKEN_LIMIT, TRUNC_TOOL_BUDGET)

E_PARSE = "E_PARSE"
E_NO_LAST = "E_NO_LAST"
ERROR_CODES = (E_PARSE, E_NO_LAST)


class TrajectoryParseError(ValueError):
    """Raised when a serialized trajectory line cannot be decoded."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Step:
    token: int
    role: str
    logprob: float | None


@dataclass(frozen=True)
class ToolEvent:
    call_index: int
    expr_tokens: tuple[int, ...]
    result: int | str  # value in [0, 99] on success, error code otherwise
    sandbox_last_after: int | None

    @property
    def ok(self) -> bool:
        return not isinstance(self.result, str)


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    prompt_tokens: tuple[int, ...]
    steps: tuple[Step, ...]
    tool_events: tuple[ToolEvent, ...]
    final_answer: int | None
    truncated: str

    def policy_steps(self) -> tuple[Step, ...]:
        return tuple(s for s in self.steps if s.role == ROLE_POLICY)

    def policy_tokens(self) -> tuple[int, ...]:
        return tuple(s.token for s in self.steps if s.role == ROLE_POLICY)

    @property
    def response_length(self) -> int:
        """Number of policy-emitted tokens (the |o| used in loss normalization)."""
        return sum(1 for s in self.steps if s.role == ROLE_POLICY)

    @property
    def total_tokens(self) -> int:
        return len(self.prompt_tokens) + len(self.steps)


def tool_call_count(t: Trajectory) -> int:
    """Count of completed tool events; an unterminated call span does not count."""
    return len(t.tool_events)


def completed_call_spans(policy_tokens: Iterable[int]) -> int:
    """Independent scan counting <end_call> tokens whose opening <call> precedes them."""
    spans = 0
    open_call = False
    for tok in policy_tokens:
        if tok == vocab.CALL and not open_call:
            open_call = True
        elif tok == vocab.END_CALL and open_call:
            spans += 1
            open_call = False
    return spans


def _completed_answer(policy_tokens: tuple[int, ...]) -> int | None:
    """Return the answer value encoded by a completed <answer> d d <eos> span."""
    toks = policy_tokens
    if len(toks) >= 4 and toks[-1] == vocab.EOS and toks[-4] == vocab.ANSWER:
        d1, d0 = toks[-3], toks[-2]
        if vocab.is_digit(d1) and vocab.is_digit(d0):
            return 10 * d1 + d0
    return None


def validate(t: Trajectory) -> list[str]:
    """Check every trajectory invariant; returns all violations, never raises."""
    violations: list[str] = []

    for i, tok in enumerate(t.prompt_tokens):
        if not 0 <= tok < vocab.VOCAB_SIZE:
            violations.append(f"prompt token {i} out of vocabulary: {tok}")
    for i, step in enumerate(t.steps):
        if not 0 <= step.token < vocab.VOCAB_SIZE:
            violations.append(f"step {i} token out of vocabulary: {step.token}")
        if step.role == ROLE_POLICY:
            if step.logprob is None or not math.isfinite(step.logprob):
                violations.append(f"step {i} policy token lacks finite logprob")
        elif step.role == ROLE_TOOL:
            if step.logprob is not None:
                violations.append(f"step {i} tool output carries a logprob")
        else:
            violations.append(f"step {i} unknown role: {step.role!r}")

    policy_toks = t.policy_tokens()
    spans = completed_call_spans(policy_toks)
    if spans != len(t.tool_events):
        violations.append(
            f"tool_events length {len(t.tool_events)} != completed call spans {spans}"
        )

    prev_last: int | None = None
    for j, ev in enumerate(t.tool_events):
        if ev.call_index != j + 1:
            violations.append(f"tool event {j} call_index {ev.call_index} not contiguous")
        for tok in ev.expr_tokens:
            if not 0 <= tok < vocab.VOCAB_SIZE:
                violations.append(f"tool event {j} expr token out of vocabulary: {tok}")
        if ev.ok:
            if not (isinstance(ev.result, int) and 0 <= ev.result <= 99):
                violations.append(f"tool event {j} result out of range: {ev.result!r}")
            elif ev.sandbox_last_after != ev.result:
                violations.append(
                    f"tool event {j} sandbox last {ev.sandbox_last_after} != result {ev.result}"
                )
        else:
            if ev.result not in ERROR_CODES:
                violations.append(f"tool event {j} unknown error code: {ev.result!r}")
            if ev.sandbox_last_after != prev_last:
                violations.append(
                    f"tool event {j} errored but sandbox last changed to {ev.sandbox_last_after}"
                )
        prev_last = ev.sandbox_last_after

    answer = _completed_answer(policy_toks)
    if answer is None and t.final_answer is not None:
        violations.append("final_answer present without a completed answer span")
    elif answer is not None and t.final_answer is None:
        violations.append("completed answer span but final_answer absent")
    elif answer is not None and t.final_answer != answer:
        violations.append(f"final_answer {t.final_answer} != answer span value {answer}")

    if t.truncated not in TRUNCATION_REASONS:
        violations.append(f"unknown truncation reason: {t.truncated!r}")

    return violations


def serialize(t: Trajectory) -> str:
    """Encode one trajectory as a single JSON line with fixed field order."""
    obj = {
        "task_id": t.task_id,
        "prompt": list(t.prompt_tokens),
        "steps": [[s.token, _ROLE_CODES[s.role], s.logprob] for s in t.steps],
        "events": [
            [ev.call_index, list(ev.expr_tokens), ev.result, ev.sandbox_last_after]
            for ev in t.tool_events
        ],
        "answer": t.final_answer,
        "truncated": t.truncated,
    }
    return json.dumps(obj, separators=(",", ":"))


def deserialize(line: str) -> Trajectory:
    """Decode one trajectory line; malformed input raises TrajectoryParseError."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise TrajectoryParseError(f"invalid JSON: {e.msg}", e.pos) from e
    if not isinstance(obj, dict):
        raise TrajectoryParseError("expected a JSON object", 0)
    try:
        steps = tuple(
            Step(token=int(tok), role=_ROLES_BY_CODE[code], logprob=lp)
            for tok, code, lp in obj["steps"]
        )
        events = tuple(
            ToolEvent(
                call_index=int(ci),
                expr_tokens=tuple(int(x) for x in expr),
                result=res if isinstance(res, str) else int(res),
                sandbox_last_after=last,
            )
            for ci, expr, res, last in obj["events"]
        )
        return Trajectory(
            task_id=obj["task_id"],
            prompt_tokens=tuple(int(x) for x in obj["prompt"]),
            steps=steps,
            tool_events=events,
            final_answer=obj["answer"],
            truncated=obj["truncated"],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise TrajectoryParseError(f"malformed trajectory record: {e!r}", 0) from e


def write_jsonl(path, trajectories: Iterable[Trajectory], header: dict) -> None:
    """Write a trajectory log: one header line, then one record per line."""
    with open(path, "w", encoding="utf-8") as f:
        head = {"kind": "header", "vocab_size": vocab.VOCAB_SIZE}
        head.update(header)
        f.write(json.dumps(head, separators=(",", ":")) + "\n")
        for t in trajectories:
            f.write(serialize(t) + "\n")


def read_jsonl(path) -> tuple[dict, list[Trajectory]]:
    with open(path, "r", encoding="utf-8") as f:
        header_line = f.readline()
        header = json.loads(header_line)
        if header.get("kind") != "header":
            raise TrajectoryParseError("missing header line", 0)
        if header["vocab_size"] != vocab.VOCAB_SIZE:
            raise TrajectoryParseError(
                f"vocabulary size mismatch: {header['vocab_size']}", 0
            )
        records = [deserialize(line) for line in f if line.strip()]
    return header, records


def iter_jsonl(path) -> Iterator[Trajectory]:
    with open(path, "r", encoding="utf-8") as f:
        first = True
        for line in f:
            if not line.strip():
                continue
            if first:
                first = False
                if json.loads(line).get("kind") == "header":
                    continue
            yield deserialize(line)
