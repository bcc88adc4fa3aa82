"""Seeded episode rollouts shared by training, evaluation, and probes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import EnvConfig, EnvOutcome, EpisodeState, Task
from .policy import (
    Featurizer,
    PolicyParams,
    dist_from_logits,
    entropy,
    sample_token,
)


@dataclass
class RolloutResult:
    outcome: EnvOutcome
    feature_rows: list[list[int]]
    masks: np.ndarray
    tokens: np.ndarray
    logprobs: np.ndarray
    entropies: np.ndarray
    logits: np.ndarray | None = None


def run_episode(
    params: PolicyParams,
    featurizer: Featurizer,
    task: Task,
    env_cfg: EnvConfig,
    temperature: float,
    top_p: float,
    rng: np.random.Generator,
    retain_logits: bool = False,
) -> RolloutResult:
    """Sample one full episode; features and masks are cached for reuse by the trainer."""
    ep = EpisodeState(task, env_cfg)
    if params.arch == "linear":
        w, b = params.linear_views()
        mlp = None
    else:
        mlp = params.mlp_views()

    rows: list[list[int]] = []
    masks: list[np.ndarray] = []
    tokens: list[int] = []
    logprobs: list[float] = []
    entropies: list[float] = []
    logits_log: list[np.ndarray] = []

    while not ep.terminated:
        idx = featurizer.active_indices(ep)
        mask = ep.legal_mask()
        if mlp is None:
            logits = w[:, idx].sum(axis=1) + b
        else:
            w1, b1, w2, b2 = mlp
            logits = w2 @ np.tanh(w1[:, idx].sum(axis=1) + b1) + b2
        dist = dist_from_logits(logits, mask)
        tok = sample_token(dist, temperature, top_p, rng)

        rows.append(idx)
        masks.append(mask)
        tokens.append(tok)
        logprobs.append(float(dist.logps[tok]))
        entropies.append(entropy(dist))
        if retain_logits:
            logits_log.append(logits)

        ep.apply_policy_token(tok, logprobs[-1])

    return RolloutResult(
        outcome=ep.outcome(),
        feature_rows=rows,
        masks=np.array(masks, dtype=bool),
        tokens=np.array(tokens, dtype=np.int64),
        logprobs=np.array(logprobs, dtype=np.float64),
        entropies=np.array(entropies, dtype=np.float64),
        logits=np.array(logits_log) if retain_logits else None,
    )
