"""Fixed 24-token vocabulary shared by the environment, policy, and logs.

Digit tokens occupy ids 0-9 so a digit token's id equals its value.
Prompt-only tokens are never legal policy emissions.
"""

from __future__ import annotations

DIGITS = tuple(range(10))

OP_ADD = 10
OP_SUB = 11
OP_MUL = 12

CALL = 13
END_CALL = 14
ANSWER = 15
EOS = 16
LAST = 17
ERR = 18

PROMPT_START = 19
PROMPT_OP_ADD = 20
PROMPT_OP_SUB = 21
PROMPT_OP_MUL = 22
PROMPT_SEP = 23

VOCAB_SIZE = 24

OPERATOR_TOKENS = (OP_ADD, OP_SUB, OP_MUL)

OP_TOKEN_BY_NAME = {"add": OP_ADD, "sub": OP_SUB, "mul": OP_MUL}
OP_NAME_BY_TOKEN = {tok: name for name, tok in OP_TOKEN_BY_NAME.items()}
PROMPT_OP_BY_NAME = {"add": PROMPT_OP_ADD, "sub": PROMPT_OP_SUB, "mul": PROMPT_OP_MUL}
OP_NAME_BY_PROMPT_TOKEN = {tok: name for name, tok in PROMPT_OP_BY_NAME.items()}

TOKEN_NAMES = tuple(
    [str(d) for d in range(10)]
    + ["+", "-", "*", "<call>", "<end_call>", "<answer>", "<eos>", "<last>", "<err>"]
    + ["<start>", "<add>", "<sub>", "<mul>", "<sep>"]
)


def is_digit(token: int) -> bool:
    return 0 <= token <= 9


def is_operator(token: int) -> bool:
    return token in OPERATOR_TOKENS


def token_name(token: int) -> str:
    return TOKEN_NAMES[token]


def render(tokens) -> str:
    """Human-readable join of a token id sequence, for logs and debugging."""
    return " ".join(TOKEN_NAMES[t] for t in tokens)


def two_digit_tokens(value: int) -> tuple[int, int]:
    """Render a value in [0, 99] as (tens, ones) digit tokens."""
    if not 0 <= value <= 99:
        raise ValueError(f"value out of two-digit range: {value}")
    return value // 10, value % 10
