"""Synthetic arithmetic-chain tasks and a budgeted, stateful tool sandbox.

Each task is a chain of modular arithmetic operations over a hidden start
value. An episode interleaves policy tokens with sandbox executions: a
completed <call>...<end_call> span evaluates one expression against the
sandbox's single `last` register, and a completed <answer> d d <eos> span
terminates the episode with a two-digit answer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import vocab
from .seeding import generator
from .trajectory import (
    E_NO_LAST,
    E_PARSE,
    ROLE_POLICY,
    ROLE_TOOL,
    TRUNC_NONE,
    TRUNC_TOKEN_LIMIT,
    TRUNC_TOOL_BUDGET,
    Step,
    ToolEvent,
    Trajectory,
)

MODULUS = 100
M_MIN, M_MAX = 1, 16

OP_NAMES = ("add", "sub", "mul")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DifficultyProfile:
    ops: tuple[str, ...] = OP_NAMES
    operand_min: int = 2
    operand_max: int = 9

    def __post_init__(self):
        if not self.ops or any(op not in OP_NAMES for op in self.ops):
            raise ConfigError(f"unknown ops in profile: {self.ops}")
        if not 0 <= self.operand_min <= self.operand_max <= 9:
            raise ConfigError("operand range must lie within [0, 9]")


DEFAULT_PROFILE = DifficultyProfile()


def apply_op(acc: int, op: str, operand: int, modulus: int = MODULUS) -> int:
    if op == "add":
        return (acc + operand) % modulus
    if op == "sub":
        return (acc - operand) % modulus
    if op == "mul":
        return (acc * operand) % modulus
    raise ConfigError(f"unknown op: {op}")


def chain_answer(start_value: int, chain, modulus: int = MODULUS) -> int:
    acc = start_value % modulus
    for op, operand in chain:
        acc = apply_op(acc, op, operand, modulus)
    return acc


@dataclass(frozen=True)
class Task:
    task_id: str
    start_value: int
    chain: tuple[tuple[str, int], ...]
    answer: int
    modulus: int = MODULUS

    def __post_init__(self):
        expected = chain_answer(self.start_value, self.chain, self.modulus)
        if self.answer != expected:
            raise ConfigError(
                f"task {self.task_id}: answer {self.answer} != chain value {expected}"
            )
        if not M_MIN <= len(self.chain) <= M_MAX:
            raise ConfigError(f"task {self.task_id}: chain length {len(self.chain)}")

    @property
    def num_ops(self) -> int:
        return len(self.chain)


def generate_task(seed: int, num_ops: int, profile: DifficultyProfile = DEFAULT_PROFILE) -> Task:
    """Deterministically generate one task; identical (seed, num_ops, profile) give identical tasks."""
    if not M_MIN <= num_ops <= M_MAX:
        raise ConfigError(f"num_ops must lie in [{M_MIN}, {M_MAX}], got {num_ops}")
    rng = generator("task", seed, num_ops)
    start = int(rng.integers(profile.operand_min, profile.operand_max + 1))
    chain = tuple(
        (
            profile.ops[int(rng.integers(0, len(profile.ops)))],
            int(rng.integers(profile.operand_min, profile.operand_max + 1)),
        )
        for _ in range(num_ops)
    )
    answer = chain_answer(start, chain)
    return Task(task_id=f"t{seed}m{num_ops}", start_value=start, chain=chain, answer=answer)


def prompt_tokens(task: Task) -> tuple[int, ...]:
    toks = [vocab.PROMPT_START, task.start_value, vocab.PROMPT_SEP]
    for op, operand in task.chain:
        toks.extend([vocab.PROMPT_OP_BY_NAME[op], operand, vocab.PROMPT_SEP])
    return tuple(toks)


def decode_task(prompt: tuple[int, ...], task_id: str) -> Task:
    """Rebuild the task encoded in a prompt; the inverse of prompt_tokens."""
    if len(prompt) < 6 or len(prompt) % 3 != 0 or prompt[0] != vocab.PROMPT_START:
        raise ConfigError(f"malformed prompt for {task_id}")
    start = prompt[1]
    chain = []
    for i in range(3, len(prompt), 3):
        op_tok, operand, sep = prompt[i], prompt[i + 1], prompt[i + 2]
        if op_tok not in vocab.OP_NAME_BY_PROMPT_TOKEN or sep != vocab.PROMPT_SEP:
            raise ConfigError(f"malformed prompt segment at {i} for {task_id}")
        chain.append((vocab.OP_NAME_BY_PROMPT_TOKEN[op_tok], operand))
    chain_t = tuple(chain)
    return Task(
        task_id=task_id,
        start_value=start,
        chain=chain_t,
        answer=chain_answer(start, chain_t),
    )


# --- sandbox ---


@dataclass(frozen=True)
class SandboxState:
    last: int | None = None
    calls_used: int = 0
    budget: int = 50

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigError("budget must be positive")
        if self.calls_used > self.budget:
            raise ConfigError("calls_used exceeds budget")


def enforce_budget(s: SandboxState) -> bool:
    """True = allow another call, False = deny; pure function of state."""
    return s.calls_used < s.budget


def execute_tool(expr_tokens, s: SandboxState) -> tuple[int | str, SandboxState]:
    """Evaluate one expression against the sandbox.

    Grammar: expr := operand (op operand)* with operand := digit+ | <last>,
    evaluated left-associatively, everything mod 100. A failed parse or a
    <last> reference before any successful call yields an error code; the
    call still consumes budget and leaves `last` unchanged.
    """
    if not enforce_budget(s):
        raise ConfigError("execute_tool invoked with exhausted budget")
    spent = SandboxState(last=s.last, calls_used=s.calls_used + 1, budget=s.budget)

    value = _evaluate(tuple(expr_tokens), s.last)
    if isinstance(value, str):
        return value, spent
    return value, SandboxState(last=value, calls_used=s.calls_used + 1, budget=s.budget)


def _evaluate(tokens: tuple[int, ...], last: int | None) -> int | str:
    pos = 0
    n = len(tokens)

    def read_operand():
        nonlocal pos
        if pos >= n:
            return E_PARSE
        tok = tokens[pos]
        if tok == vocab.LAST:
            pos += 1
            return E_NO_LAST if last is None else last
        if not vocab.is_digit(tok):
            return E_PARSE
        digits = []
        while pos < n and vocab.is_digit(tokens[pos]):
            digits.append(tokens[pos])
            pos += 1
        return int("".join(str(d) for d in digits)) % MODULUS

    acc = read_operand()
    if isinstance(acc, str):
        return acc
    while pos < n:
        op_tok = tokens[pos]
        if not vocab.is_operator(op_tok):
            return E_PARSE
        pos += 1
        operand = read_operand()
        if isinstance(operand, str):
            return operand
        acc = apply_op(acc, vocab.OP_NAME_BY_TOKEN[op_tok], operand)
    return acc


# --- episode state machine ---

PH_REASONING = 0
PH_IN_CALL = 1
PH_IN_ANSWER = 2

_DIGSET = set(vocab.DIGITS)


def _mask(tokens) -> np.ndarray:
    m = np.zeros(vocab.VOCAB_SIZE, dtype=bool)
    m[list(tokens)] = True
    m.setflags(write=False)
    return m

MASK_REASONING = _mask([vocab.CALL, vocab.ANSWER, vocab.EOS])
MASK_CALL_OPEN = _mask(list(_DIGSET) + [vocab.LAST])
MASK_AFTER_DIGIT = _mask(list(_DIGSET) + list(vocab.OPERATOR_TOKENS) + [vocab.END_CALL])
MASK_AFTER_LAST = _mask(list(vocab.OPERATOR_TOKENS) + [vocab.END_CALL])
MASK_AFTER_OP = _mask(list(_DIGSET) + [vocab.LAST])
MASK_ANSWER_DIGIT = _mask(list(_DIGSET))
MASK_ANSWER_DONE = _mask([vocab.EOS])


@dataclass(frozen=True)
class EnvConfig:
    tool_budget: int = 50
    max_trajectory_tokens: int = 512

    def __post_init__(self):
        if self.tool_budget < 1 or self.max_trajectory_tokens < 8:
            raise ConfigError("invalid environment limits")


@dataclass(frozen=True)
class EnvOutcome:
    trajectory: Trajectory
    correct: bool
    used_tool: bool


class EpisodeState:
    """Mutable per-episode state: grammar phase, sandbox, and transcript.

    Both rollout (sampling fresh tokens) and replay (re-applying logged
    tokens) drive this same machine, so tool outputs and features are
    guaranteed to agree between the two paths.
    """

    def __init__(self, task: Task, cfg: EnvConfig):
        self.task = task
        self.cfg = cfg
        self.prompt = prompt_tokens(task)
        self.steps: list[Step] = []
        self.tool_events: list[ToolEvent] = []
        self.sandbox = SandboxState(budget=cfg.tool_budget)
        self.phase = PH_REASONING
        self.call_buffer: list[int] = []
        self.answer_digits: list[int] = []
        self.ops_applied = 0  # operator tokens inside successfully executed spans
        self.final_answer: int | None = None
        self.truncated = TRUNC_NONE
        self.terminated = False

    # -- observation helpers used by the featurizer --

    @property
    def total_tokens(self) -> int:
        return len(self.prompt) + len(self.steps)

    def window(self, k: int) -> list[int | None]:
        """Last k tokens of the interleaved stream, most recent first."""
        stream_len = self.total_tokens
        out: list[int | None] = []
        for j in range(1, k + 1):
            idx = stream_len - j
            if idx < 0:
                out.append(None)
            elif idx < len(self.prompt):
                out.append(self.prompt[idx])
            else:
                out.append(self.steps[idx - len(self.prompt)].token)
        return out

    @property
    def remaining_budget(self) -> int:
        return self.sandbox.budget - self.sandbox.calls_used

    @property
    def ops_pointer(self) -> int:
        """Chain progress: operators applied plus operators pending in the open span."""
        return self.ops_applied + sum(1 for t in self.call_buffer if vocab.is_operator(t))

    @property
    def chain_exhausted(self) -> bool:
        return self.ops_pointer >= self.task.num_ops

    @property
    def ops_in_current_call(self) -> int:
        return sum(1 for t in self.call_buffer if vocab.is_operator(t))

    def legal_mask(self) -> np.ndarray:
        if self.terminated:
            raise RuntimeError("episode already terminated")
        if self.phase == PH_REASONING:
            return MASK_REASONING
        if self.phase == PH_IN_CALL:
            if not self.call_buffer:
                return MASK_CALL_OPEN
            tail = self.call_buffer[-1]
            if tail == vocab.LAST:
                return MASK_AFTER_LAST
            if vocab.is_operator(tail):
                return MASK_AFTER_OP
            return MASK_AFTER_DIGIT
        if len(self.answer_digits) < 2:
            return MASK_ANSWER_DIGIT
        return MASK_ANSWER_DONE

    # -- transitions --

    def apply_policy_token(self, token: int, logprob: float) -> None:
        if self.terminated:
            raise RuntimeError("episode already terminated")
        if not self.legal_mask()[token]:
            raise ValueError(
                f"illegal token {vocab.token_name(token)} in phase {self.phase}"
            )
        self.steps.append(Step(token=token, role=ROLE_POLICY, logprob=logprob))

        if self.phase == PH_REASONING:
            if token == vocab.CALL:
                if not enforce_budget(self.sandbox):
                    # Force-close the span unexecuted: budget exhausted.
                    self.truncated = TRUNC_TOOL_BUDGET
                    self.terminated = True
                    return
                self.phase = PH_IN_CALL
                self.call_buffer = []
            elif token == vocab.ANSWER:
                self.phase = PH_IN_ANSWER
                self.answer_digits = []
            else:  # <eos> without an answer
                self.terminated = True
                return
        elif self.phase == PH_IN_CALL:
            if token == vocab.END_CALL:
                self._execute_span()
            else:
                self.call_buffer.append(token)
        else:  # PH_IN_ANSWER
            if token == vocab.EOS:
                self.final_answer = 10 * self.answer_digits[0] + self.answer_digits[1]
                self.terminated = True
                return
            self.answer_digits.append(token)

        self._check_token_limit()

    def _execute_span(self) -> None:
        expr = tuple(self.call_buffer)
        result, self.sandbox = execute_tool(expr, self.sandbox)
        ok = not isinstance(result, str)
        if ok:
            self.ops_applied += sum(1 for t in expr if vocab.is_operator(t))
        self.tool_events.append(
            ToolEvent(
                call_index=len(self.tool_events) + 1,
                expr_tokens=expr,
                result=result,
                sandbox_last_after=self.sandbox.last,
            )
        )
        out_tokens = vocab.two_digit_tokens(result) if ok else (vocab.ERR,)
        for tok in out_tokens:
            self.steps.append(Step(token=tok, role=ROLE_TOOL, logprob=None))
        self.call_buffer = []
        self.phase = PH_REASONING

    def _check_token_limit(self) -> None:
        if not self.terminated and self.total_tokens >= self.cfg.max_trajectory_tokens:
            self.truncated = TRUNC_TOKEN_LIMIT
            self.terminated = True

    def to_trajectory(self) -> Trajectory:
        return Trajectory(
            task_id=self.task.task_id,
            prompt_tokens=self.prompt,
            steps=tuple(self.steps),
            tool_events=tuple(self.tool_events),
            final_answer=self.final_answer,
            truncated=self.truncated,
        )

    def outcome(self) -> EnvOutcome:
        traj = self.to_trajectory()
        correct = self.final_answer is not None and self.final_answer == self.task.answer
        return EnvOutcome(
            trajectory=traj, correct=correct, used_tool=len(self.tool_events) >= 1
        )


def replay(trajectory: Trajectory, cfg: EnvConfig, check: bool = True) -> EpisodeState:
    """Re-drive an episode from its logged policy tokens.

    Tool outputs are regenerated by the sandbox; with check=True any
    divergence from the logged stream raises, catching corrupted logs.
    """
    task = decode_task(trajectory.prompt_tokens, trajectory.task_id)
    ep = EpisodeState(task, cfg)
    for i, step in enumerate(trajectory.steps):
        if step.role != ROLE_POLICY:
            continue
        before = len(ep.steps)
        ep.apply_policy_token(step.token, step.logprob)
        if check:
            for j in range(before, len(ep.steps)):
                if ep.steps[j].token != trajectory.steps[j].token or (
                    ep.steps[j].role != trajectory.steps[j].role
                ):
                    raise ValueError(
                        f"replay divergence at step {j} of {trajectory.task_id}"
                    )
    return ep
