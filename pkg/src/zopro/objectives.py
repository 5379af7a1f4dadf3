"""Forward-only objectives: RLOO policy objective, Bradley-Terry loss, judge.

Rollouts are drawn by inverting the policy CDF with uniforms generated from a
rollout seed. Evaluating the objective at two nearby parameter vectors with the
same seed therefore shares all randomness (common random numbers), and the
sampled responses only change where a uniform sits close to a CDF boundary.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .models import MlpPolicy, RewardModel, inverse_cdf_sample, log_softmax, mlp_backward, mlp_forward
from .params import DimensionError, as_param_vector


@dataclass
class PromptBatch:
    features: np.ndarray
    prompt_ids: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.prompt_ids = np.asarray(self.prompt_ids, dtype=np.int64)
        if self.features.shape[0] < 1:
            raise ValueError("prompt batch must be non-empty")
        if self.prompt_ids.shape != (self.features.shape[0],):
            raise DimensionError("one prompt id per feature row required")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("prompt features must be finite")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, rows) -> "PromptBatch":
        rows = np.asarray(rows)
        return PromptBatch(self.features[rows], self.prompt_ids[rows])


@dataclass
class RolloutSet:
    prompt_id: int
    responses: np.ndarray
    rewards: np.ndarray
    logprobs: np.ndarray

    def __post_init__(self):
        k = len(self.responses)
        if k < 2 or len(self.rewards) != k or len(self.logprobs) != k:
            raise ValueError("a rollout set needs k >= 2 equally sized entries")

    @property
    def advantages(self) -> np.ndarray:
        return leave_one_out_advantages(np.asarray(self.rewards)[None, :])[0]


@dataclass(frozen=True)
class PreferenceRecord:
    prompt_id: int
    accepted: int
    rejected: int
    tie: bool = False

    def __post_init__(self):
        if not self.tie and self.accepted == self.rejected:
            raise ValueError("accepted and rejected responses must differ unless tied")


@dataclass
class HiddenUtility:
    """Frozen linear utility ``u(x, a) = W[a] . x + c[a]`` behind the judge."""

    n_features: int
    n_actions: int
    util_params: np.ndarray
    judge_noise_scale: float = 0.25

    def __post_init__(self):
        if self.judge_noise_scale < 0:
            raise ValueError("judge noise scale must be non-negative")
        self.util_params = as_param_vector(
            self.util_params, self.n_actions * self.n_features + self.n_actions)
        self.util_params.setflags(write=False)

    @classmethod
    def random(cls, n_features: int, n_actions: int, seed: int,
               judge_noise_scale: float = 0.25) -> "HiddenUtility":
        rng = np.random.Generator(np.random.PCG64(seed))
        W = rng.standard_normal((n_actions, n_features)) / np.sqrt(n_features)
        c = 0.5 * rng.standard_normal(n_actions)
        return cls(n_features, n_actions, np.concatenate([W.ravel(), c]), judge_noise_scale)

    def table(self, X: np.ndarray) -> np.ndarray:
        """Utilities of every response for every prompt, shape (n, A)."""
        k = self.n_actions * self.n_features
        W = self.util_params[:k].reshape(self.n_actions, self.n_features)
        return np.atleast_2d(X) @ W.T + self.util_params[k:]

    def __call__(self, features, response: int) -> float:
        return float(self.table(np.asarray(features)[None, :])[0, response])


def leave_one_out_advantages(rewards: np.ndarray) -> np.ndarray:
    """``r_j - mean_{i != j} r_i`` along the last axis."""
    rewards = np.asarray(rewards, dtype=np.float64)
    k = rewards.shape[-1]
    if k < 2:
        raise ValueError("leave-one-out baseline needs k >= 2 rollouts")
    # pairwise differences: exactly zero when all rewards tie
    return (rewards[..., :, None] - rewards[..., None, :]).sum(axis=-1) / (k - 1)


def rollout_uniforms(n: int, k: int, rollout_seed: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64(rollout_seed)).random((n, k))


def draw_rollouts(policy: MlpPolicy, batch: PromptBatch, k: int, rollout_seed: int,
                  params: np.ndarray | None = None,
                  hook: Callable[[np.ndarray], None] | None = None,
                  sample_params: np.ndarray | None = None):
    """Seeded rollouts: returns (responses (n, k), log-probs table (n, A)).

    Responses are drawn from the policy at ``sample_params`` (default: the
    evaluated ``params``); the log-probabilities are always those at ``params``.
    """
    if k < 2:
        raise ValueError(f"RLOO needs k >= 2 rollouts per prompt, got {k}")
    logp = policy.log_probs(batch.features, params)
    u = rollout_uniforms(len(batch), k, rollout_seed)
    if hook is not None:
        hook(u)
    if sample_params is None:
        responses = inverse_cdf_sample(np.exp(logp), u)
    else:
        responses = inverse_cdf_sample(np.exp(policy.log_probs(batch.features, sample_params)), u)
    return responses, logp


def rollout_sets(policy: MlpPolicy, rm: RewardModel, batch: PromptBatch, k: int,
                 rollout_seed: int, params: np.ndarray | None = None) -> list[RolloutSet]:
    responses, logp = draw_rollouts(policy, batch, k, rollout_seed, params)
    scores = rm.all_scores(batch.features)
    return [
        RolloutSet(int(pid), responses[i], scores[i, responses[i]], logp[i, responses[i]])
        for i, pid in enumerate(batch.prompt_ids)
    ]


def kl_to_reference(policy: MlpPolicy, reference: MlpPolicy, batch: PromptBatch,
                    params: np.ndarray | None = None) -> float:
    """Mean over prompts of KL(policy || reference), exact over the support."""
    if policy.layer_dims != reference.layer_dims:
        raise DimensionError("policy and reference architectures differ")
    logp = policy.log_probs(batch.features, params)
    logq = reference.log_probs(batch.features)
    return float(np.mean(np.sum(np.exp(logp) * (logp - logq), axis=1)))


def kl_grad(policy: MlpPolicy, reference: MlpPolicy, batch: PromptBatch) -> np.ndarray:
    logits, acts = mlp_forward(policy.params, policy.layer_dims, batch.features, keep=True)
    logp = log_softmax(logits)
    logq = reference.log_probs(batch.features)
    p = np.exp(logp)
    kl = np.sum(p * (logp - logq), axis=1, keepdims=True)
    g_out = p * (logp - logq - kl) / len(batch)
    return mlp_backward(policy.params, policy.layer_dims, acts, g_out)


def rloo_objective(policy: MlpPolicy, rm: RewardModel, batch: PromptBatch, k: int = 2,
                   rollout_seed: int = 0, params: np.ndarray | None = None,
                   reference: MlpPolicy | None = None, kl_coef: float = 0.0,
                   hook: Callable[[np.ndarray], None] | None = None,
                   sample_params: np.ndarray | None = None) -> float:
    """RLOO surrogate ``mean_j (r_j - baseline_j) * log pi(y_j | x)``.

    ``params`` overrides the policy's own parameters, which is how the SPSA
    step evaluates perturbed points without copying the model. Passing the
    unperturbed point as ``sample_params`` keeps the rollouts identical on both
    sides of a two-point estimate, so the difference is a smooth function of
    ``params``.
    """
    responses, logp = draw_rollouts(policy, batch, k, rollout_seed, params, hook, sample_params)
    rows = np.arange(len(batch))[:, None]
    rewards = rm.all_scores(batch.features)[rows, responses]
    adv = leave_one_out_advantages(rewards)
    J = float(np.mean(adv * logp[rows, responses]))
    if kl_coef:
        if reference is None:
            raise ValueError("a KL penalty needs a reference policy")
        J -= kl_coef * kl_to_reference(policy, reference, batch, params)
    return J


def rloo_gradient(policy: MlpPolicy, rm: RewardModel, batch: PromptBatch, k: int,
                  rollout_seed: int, reference: MlpPolicy | None = None,
                  kl_coef: float = 0.0) -> np.ndarray:
    """Analytic gradient of :func:`rloo_objective` with the rollouts held fixed."""
    responses, _ = draw_rollouts(policy, batch, k, rollout_seed)
    rows = np.arange(len(batch))[:, None]
    rewards = rm.all_scores(batch.features)[rows, responses]
    adv = leave_one_out_advantages(rewards)
    n = len(batch)
    X = np.repeat(batch.features, k, axis=0)
    grad = policy.grad_log_prob(X, responses.ravel(), adv.ravel() / (n * k))
    if kl_coef:
        if reference is None:
            raise ValueError("a KL penalty needs a reference policy")
        grad -= kl_coef * kl_grad(policy, reference, batch)
    return grad


def _record_arrays(records: Sequence[PreferenceRecord], features_lookup):
    records = [r for r in records]
    if not records:
        raise ValueError("Bradley-Terry loss needs at least one record")
    X = np.stack([np.asarray(features_lookup[r.prompt_id], dtype=np.float64) for r in records])
    acc = np.array([r.accepted for r in records])
    rej = np.array([r.rejected for r in records])
    return X, acc, rej


def bradley_terry_loss(rm: RewardModel, records: Sequence[PreferenceRecord], features_lookup) -> float:
    """Mean ``-log sigmoid(score(accepted) - score(rejected))``."""
    X, acc, rej = _record_arrays(records, features_lookup)
    margin = rm.scores(X, acc) - rm.scores(X, rej)
    return float(np.mean(np.logaddexp(0.0, -margin)))


def bradley_terry_grad(rm: RewardModel, records: Sequence[PreferenceRecord], features_lookup) -> np.ndarray:
    """Gradient of :func:`bradley_terry_loss` w.r.t. the reward model's flat params."""
    X, acc, rej = _record_arrays(records, features_lookup)
    margin = rm.scores(X, acc) - rm.scores(X, rej)
    # d/dm log(1 + e^-m) = -sigmoid(-m)
    w = -0.5 * (1.0 - np.tanh(0.5 * margin)) / len(X)
    XX = np.concatenate([X, X])
    return rm.grad_scores(XX, np.concatenate([acc, rej]), np.concatenate([w, -w]))


@dataclass(frozen=True)
class Verdict:
    accepted: int
    rejected: int
    tie: bool


def judge(util: HiddenUtility, prompt_features, gen1: int, gen2: int, seed: int) -> Verdict:
    """Noisy pairwise preference from the hidden utility.

    ``gen1`` wins with probability ``sigmoid((u1 - u2) / beta)``; ``beta = 0``
    gives the argmax judge. Identical generations come back flagged as a tie.
    """
    if util.judge_noise_scale < 0:
        raise ValueError("judge noise scale must be non-negative")
    if gen1 == gen2:
        return Verdict(gen1, gen2, True)
    u = util.table(np.asarray(prompt_features, dtype=np.float64)[None, :])[0]
    gap = u[gen1] - u[gen2]
    beta = util.judge_noise_scale
    if beta == 0.0:
        p_first = 1.0 if gap > 0 else (0.0 if gap < 0 else 0.5)
    else:
        p_first = 0.5 * (1.0 + np.tanh(0.5 * gap / beta))
    draw = np.random.Generator(np.random.PCG64(seed)).random()
    if draw < p_first:
        return Verdict(gen1, gen2, False)
    return Verdict(gen2, gen1, False)


def write_records(path: str | os.PathLike, records: Iterable[PreferenceRecord]) -> None:
    """One ``prompt_id accepted rejected tie`` line per record."""
    lines = [f"{r.prompt_id} {r.accepted} {r.rejected} {int(r.tie)}\n" for r in records]
    Path(path).write_text("".join(lines))


def read_records(path: str | os.PathLike) -> list[PreferenceRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        pid, acc, rej, tie = (int(p) for p in parts)
        out.append(PreferenceRecord(pid, acc, rej, bool(tie)))
    return out
