"""Autoregressive categorical token policy with exact log-probabilities and gradients.

The default architecture is a linear-softmax head over hand-crafted binary
context features, which keeps every gradient analytic and cheap enough to
verify against finite differences over all parameters. A one-hidden-layer
tanh variant is available behind the `arch` switch.

Feature blocks are deliberately *gated*: value-carrying one-hots (which
register digit to copy, which chain operand comes next) are only active in
the states where they answer the decision at hand. A linear head cannot
multiply features together, so conjunctions the policy needs are computed
here instead.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import vocab
from .env import (
    ConfigError,
    EnvConfig,
    EpisodeState,
    PH_IN_ANSWER,
    PH_IN_CALL,
    PH_REASONING,
    replay,
)

V = vocab.VOCAB_SIZE


@dataclass(frozen=True)
class FeatureConfig:
    k: int = 4
    register_digits: bool = True
    budget_bucket: bool = True
    answer_position: bool = True
    answer_target: bool = True
    task_pointer: bool = True
    call_ops_bucket: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("window size k must be at least 1")


def compact_feature_config() -> FeatureConfig:
    """Reduced feature set keeping the policy under 2,000 parameters."""
    return FeatureConfig(k=1, register_digits=False, call_ops_bucket=False)


def _budget_bucket(remaining: int) -> int:
    if remaining <= 0:
        return 0
    if remaining <= 2:
        return 1
    if remaining <= 8:
        return 2
    return 3


def _call_ops_bucket(count: int) -> int:
    return min(count, 4)


class Featurizer:
    """Maps an episode state to a sparse binary feature vector.

    All features are 0/1 and a deterministic function of the trajectory
    prefix, sandbox state, and config.
    """

    def __init__(self, cfg: FeatureConfig = FeatureConfig()):
        self.cfg = cfg
        offset = 0
        self._window_off = offset
        offset += cfg.k * V
        self._phase_off = offset
        offset += 3
        self._anspos_off = offset if cfg.answer_position else -1
        offset += 3 if cfg.answer_position else 0
        self._anstarget_off = offset if cfg.answer_target else -1
        offset += 10 if cfg.answer_target else 0
        self._haslast_off = offset
        offset += 1
        self._register_off = offset if cfg.register_digits else -1
        offset += 20 if cfg.register_digits else 0
        self._bucket_off = offset if cfg.budget_bucket else -1
        offset += 4 if cfg.budget_bucket else 0
        self._pointer_off = offset if cfg.task_pointer else -1
        offset += 25 if cfg.task_pointer else 0
        self._callops_off = offset if cfg.call_ops_bucket else -1
        offset += 5 if cfg.call_ops_bucket else 0
        self.num_features = offset

    def active_indices(self, ep: EpisodeState) -> list[int]:
        cfg = self.cfg
        idx: list[int] = []

        for j, tok in enumerate(ep.window(cfg.k)):
            if tok is not None:
                idx.append(self._window_off + j * V + tok)

        idx.append(self._phase_off + ep.phase)

        if cfg.answer_position and ep.phase == PH_IN_ANSWER:
            idx.append(self._anspos_off + min(len(ep.answer_digits), 2))

        last = ep.sandbox.last
        if cfg.answer_target and ep.phase == PH_IN_ANSWER and last is not None:
            pos = len(ep.answer_digits)
            if pos == 0:
                idx.append(self._anstarget_off + last // 10)
            elif pos == 1:
                idx.append(self._anstarget_off + last % 10)

        if last is not None:
            idx.append(self._haslast_off)
            if cfg.register_digits:
                idx.append(self._register_off + last // 10)
                idx.append(self._register_off + 10 + last % 10)

        if cfg.budget_bucket:
            idx.append(self._bucket_off + _budget_bucket(ep.remaining_budget))

        if cfg.task_pointer:
            off = self._pointer_off
            p = ep.ops_pointer
            chain = ep.task.chain
            if ep.phase == PH_IN_CALL:
                buf = ep.call_buffer
                if not buf:
                    # Opening operand: start literal on a fresh register, <last> otherwise.
                    if last is None:
                        idx.append(off + ep.task.start_value)
                    else:
                        idx.append(off + 10)
                elif vocab.is_operator(buf[-1]) and p >= 1 and p <= len(chain):
                    idx.append(off + 11 + chain[p - 1][1])
                elif (vocab.is_digit(buf[-1]) or buf[-1] == vocab.LAST) and p < len(chain):
                    op = chain[p][0]
                    idx.append(off + 21 + ("add", "sub", "mul").index(op))
            if ep.chain_exhausted:
                idx.append(off + 24)

        if cfg.call_ops_bucket and ep.phase == PH_IN_CALL:
            idx.append(self._callops_off + _call_ops_bucket(ep.ops_in_current_call))

        return idx

    def features(self, ep: EpisodeState) -> np.ndarray:
        phi = np.zeros(self.num_features, dtype=np.float64)
        phi[self.active_indices(ep)] = 1.0
        return phi

    def feature_matrix(self, rows: list[list[int]]) -> np.ndarray:
        mat = np.zeros((len(rows), self.num_features), dtype=np.float64)
        for i, idx in enumerate(rows):
            mat[i, idx] = 1.0
        return mat


# --- parameters ---


def theta_size(num_features: int, arch: str = "linear", hidden: int = 0) -> int:
    if arch == "linear":
        return num_features * V + V
    if arch == "mlp":
        return hidden * num_features + hidden + V * hidden + V
    raise ConfigError(f"unknown policy arch: {arch}")


@dataclass
class PolicyParams:
    theta: np.ndarray
    feature_config: FeatureConfig
    arch: str = "linear"
    hidden: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        f = Featurizer(self.feature_config).num_features
        expected = theta_size(f, self.arch, self.hidden)
        if self.theta.shape != (expected,):
            raise ConfigError(
                f"theta length {self.theta.shape} != expected ({expected},)"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ConfigError("theta contains non-finite entries")
        self.num_features = f

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            theta=self.theta.copy(),
            feature_config=self.feature_config,
            arch=self.arch,
            hidden=self.hidden,
        )

    def linear_views(self) -> tuple[np.ndarray, np.ndarray]:
        f = self.num_features
        return self.theta[: f * V].reshape(V, f), self.theta[f * V :]

    def mlp_views(self):
        f, h = self.num_features, self.hidden
        o = 0
        w1 = self.theta[o : o + h * f].reshape(h, f)
        o += h * f
        b1 = self.theta[o : o + h]
        o += h
        w2 = self.theta[o : o + V * h].reshape(V, h)
        o += V * h
        b2 = self.theta[o : o + V]
        return w1, b1, w2, b2


def init_params(
    featurizer: Featurizer,
    arch: str = "linear",
    hidden: int = 0,
    scale: float = 0.0,
    seed: int = 0,
) -> PolicyParams:
    n = theta_size(featurizer.num_features, arch, hidden)
    if scale == 0.0:
        theta = np.zeros(n, dtype=np.float64)
    else:
        from .seeding import generator

        theta = generator("init", seed).normal(0.0, scale, size=n)
    return PolicyParams(theta=theta, feature_config=featurizer.cfg, arch=arch, hidden=hidden)


# --- distributions ---


@dataclass(frozen=True)
class TokenDistribution:
    logits: np.ndarray
    mask: np.ndarray
    probs: np.ndarray
    logps: np.ndarray


def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if not mask.any():
        raise ConfigError("distribution requested with an all-masked state")
    neg = np.where(mask, logits, -np.inf)
    m = neg.max()
    ex = np.where(mask, np.exp(neg - m), 0.0)
    z = ex.sum()
    probs = ex / z
    logps = np.where(mask, neg - (m + np.log(z)), -np.inf)
    return probs, logps


def distribution(params: PolicyParams, phi: np.ndarray, mask: np.ndarray) -> TokenDistribution:
    """Masked softmax over logits = W phi + b (or the MLP head)."""
    if params.arch == "linear":
        w, b = params.linear_views()
        logits = w @ phi + b
    else:
        w1, b1, w2, b2 = params.mlp_views()
        logits = w2 @ np.tanh(w1 @ phi + b1) + b2
    probs, logps = _masked_softmax(logits, mask)
    return TokenDistribution(logits=logits, mask=mask, probs=probs, logps=logps)


def dist_from_logits(logits: np.ndarray, mask: np.ndarray) -> TokenDistribution:
    probs, logps = _masked_softmax(logits, mask)
    return TokenDistribution(logits=logits, mask=mask, probs=probs, logps=logps)


def entropy(dist: TokenDistribution) -> float:
    """Shannon entropy in nats over the masked support."""
    p = dist.probs[dist.probs > 0]
    return float(-(p * np.log(p)).sum())


def nucleus_support(
    dist: TokenDistribution, temperature: float, top_p: float
) -> tuple[np.ndarray, np.ndarray]:
    """Token ids kept by nucleus truncation and their renormalized probabilities.

    Tokens are sorted by descending probability with ties broken by
    ascending id; the smallest prefix reaching cumulative mass top_p is
    kept.
    """
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    if not 0 < top_p <= 1:
        raise ConfigError("top_p must lie in (0, 1]")
    scaled = dist_from_logits(dist.logits / temperature, dist.mask)
    ids = np.nonzero(dist.mask)[0]
    p = scaled.probs[ids]
    order = np.lexsort((ids, -p))
    cum = np.cumsum(p[order])
    cutoff = int(np.searchsorted(cum, top_p - 1e-12, side="left"))
    kept = order[: cutoff + 1]
    kept_ids = ids[kept]
    kept_p = p[kept]
    return kept_ids, kept_p / kept_p.sum()


def sample_token(
    dist: TokenDistribution, temperature: float, top_p: float, rng: np.random.Generator
) -> int:
    kept_ids, kept_p = nucleus_support(dist, temperature, top_p)
    u = rng.random()
    j = int(np.searchsorted(np.cumsum(kept_p), u, side="right"))
    return int(kept_ids[min(j, len(kept_ids) - 1)])


def greedy_token(dist: TokenDistribution) -> int:
    # argmax returns the first maximum, i.e. the lowest token id on ties
    return int(np.argmax(dist.probs))


# --- batched evaluation over replayed decisions ---


def replay_decisions(
    trajectory, env_cfg: EnvConfig, featurizer: Featurizer
) -> tuple[list[list[int]], np.ndarray, np.ndarray]:
    """Feature rows, legal masks, and chosen tokens for every policy decision."""
    from .trajectory import ROLE_POLICY
    from .env import decode_task

    task = decode_task(trajectory.prompt_tokens, trajectory.task_id)
    ep = EpisodeState(task, env_cfg)
    rows: list[list[int]] = []
    masks: list[np.ndarray] = []
    tokens: list[int] = []
    for step in trajectory.steps:
        if step.role != ROLE_POLICY:
            continue
        rows.append(featurizer.active_indices(ep))
        masks.append(ep.legal_mask())
        tokens.append(step.token)
        ep.apply_policy_token(step.token, step.logprob)
    return rows, np.array(masks, dtype=bool), np.array(tokens, dtype=np.int64)


def batch_logits(params: PolicyParams, phi_mat: np.ndarray):
    """Logits for a batch of feature rows; returns (logits, cache-for-backprop)."""
    if params.arch == "linear":
        w, b = params.linear_views()
        return phi_mat @ w.T + b, None
    w1, b1, w2, b2 = params.mlp_views()
    h = np.tanh(phi_mat @ w1.T + b1)
    return h @ w2.T + b2, h


def batch_log_probs(logits: np.ndarray, masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise masked softmax; returns (probs, logps) with masked entries 0 / -inf."""
    neg = np.where(masks, logits, -np.inf)
    m = neg.max(axis=1, keepdims=True)
    ex = np.where(masks, np.exp(neg - m), 0.0)
    z = ex.sum(axis=1, keepdims=True)
    probs = ex / z
    logps = np.where(masks, neg - (m + np.log(z)), -np.inf)
    return probs, logps


def row_entropies(probs: np.ndarray) -> np.ndarray:
    contrib = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return -contrib.sum(axis=1)


def weighted_logprob_grad(
    params: PolicyParams,
    phi_mat: np.ndarray,
    masks: np.ndarray,
    tokens: np.ndarray,
    coeffs: np.ndarray,
) -> np.ndarray:
    """Gradient of sum_t coeff_t * log pi(token_t | state_t) over theta.

    For the linear head this is sum_t coeff_t (onehot(token_t) - p_t) (x) phi_t
    plus the matching bias terms.
    """
    logits, cache = batch_logits(params, phi_mat)
    probs, _ = batch_log_probs(logits, masks)
    s = -probs * coeffs[:, None]
    s[np.arange(len(tokens)), tokens] += coeffs
    grad = np.empty_like(params.theta)
    f = params.num_features
    if params.arch == "linear":
        grad[: f * V] = (s.T @ phi_mat).ravel()
        grad[f * V :] = s.sum(axis=0)
        return grad
    w1, b1, w2, b2 = params.mlp_views()
    h = cache
    dh = s @ w2
    dpre = dh * (1.0 - h * h)
    o = 0
    hid = params.hidden
    grad[o : o + hid * f] = (dpre.T @ phi_mat).ravel()
    o += hid * f
    grad[o : o + hid] = dpre.sum(axis=0)
    o += hid
    grad[o : o + V * hid] = (s.T @ h).ravel()
    o += V * hid
    grad[o : o + V] = s.sum(axis=0)
    return grad


def sequence_logprob(params: PolicyParams, trajectory, env_cfg: EnvConfig) -> np.ndarray:
    """Per-token log pi for every policy token, conditioning on the full interleaved prefix."""
    featurizer = Featurizer(params.feature_config)
    rows, masks, tokens = replay_decisions(trajectory, env_cfg, featurizer)
    if len(rows) == 0:
        return np.zeros(0, dtype=np.float64)
    phi = featurizer.feature_matrix(rows)
    logits, _ = batch_logits(params, phi)
    _, logps = batch_log_probs(logits, masks)
    return logps[np.arange(len(tokens)), tokens]


def grad_sequence_logprob(params: PolicyParams, trajectory, env_cfg: EnvConfig) -> np.ndarray:
    """Analytic gradient of sum_t log pi(o_t | prefix) over theta."""
    featurizer = Featurizer(params.feature_config)
    rows, masks, tokens = replay_decisions(trajectory, env_cfg, featurizer)
    if len(rows) == 0:
        return np.zeros_like(params.theta)
    phi = featurizer.feature_matrix(rows)
    return weighted_logprob_grad(params, phi, masks, tokens, np.ones(len(tokens)))


# --- checkpoints ---


def save_params(params: PolicyParams, path_prefix: str, config_hash: str = "") -> None:
    """Bit-exact checkpoint: flat float64 vector plus a text sidecar."""
    np.save(path_prefix + ".npy", params.theta)
    sidecar = {
        "num_features": params.num_features,
        "vocab_size": V,
        "arch": params.arch,
        "hidden": params.hidden,
        "feature_config": asdict(params.feature_config),
        "config_hash": config_hash,
    }
    with open(path_prefix + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)


def load_params(path_prefix: str) -> PolicyParams:
    theta = np.load(path_prefix + ".npy")
    with open(path_prefix + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    if sidecar["vocab_size"] != V:
        raise ConfigError("checkpoint vocabulary size mismatch")
    cfg = FeatureConfig(**sidecar["feature_config"])
    params = PolicyParams(
        theta=theta, feature_config=cfg, arch=sidecar["arch"], hidden=sidecar["hidden"]
    )
    if params.num_features != sidecar["num_features"]:
        raise ConfigError("checkpoint feature dimension mismatch")
    return params


def params_fingerprint(params: PolicyParams) -> str:
    return hashlib.sha256(params.theta.tobytes()).hexdigest()[:16]
