"""Iterative policy optimisation with reward-model refinement.

Each iteration optimises the policy against the current reward model,
collects judged preference pairs from the new policy, refines the reward
model on them and hands the resulting parameter deltas to the next
iteration's direction sampler.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .models import MlpPolicy, RewardModel, inverse_cdf_sample, softmax
from .objectives import (
    HiddenUtility,
    PreferenceRecord,
    PromptBatch,
    bradley_terry_grad,
    bradley_terry_loss,
    judge,
    rloo_objective,
    write_records,
)
from .optim import (
    IterationState,
    ObjectiveDivergence,
    SpsaConfig,
    first_order_rloo_step,
    linear_decay,
    spsa_step,
    zopro_direction,
)
from .params import Checkpoint, cosine, derive_seed, save_checkpoint, DEGENERACY_EPS

logger = logging.getLogger(__name__)

METHODS = ("zopro", "spsa", "first_order")

STEP_FIELDS = ["step", "iteration", "alpha", "epsilon", "eta", "projected_grad",
               "J_plus", "J_minus", "mean_reward", "flag"]
ITERATION_FIELDS = ["iteration", "mean_reward", "rm_reward", "judge_agreement", "n_records",
                    "n_ties", "n_used", "refine_loss_before", "refine_loss_after",
                    "delta_pi_norm", "delta_r_norm", "cos_delta_pi_prev", "angle_pi_r_deg",
                    "evaluations"]


class ConfigError(ValueError):
    pass


def evaluations_per_step(method: str) -> int:
    """Forward passes charged per policy step: two for SPSA, three for backprop."""
    return 3 if method == "first_order" else 2


@dataclass
class ExperimentConfig:
    # outer loop
    n_iterations: int = 5
    steps_per_iteration: int = 200
    k: int = 2
    batch_size: int = 32
    method: str = "zopro"
    # SPSA
    epsilon: float = 1e-4
    eta: float = 1e-2
    eta_decay: bool = True
    epsilon_decay: bool = False
    kl_coef: float = 0.0
    first_order_eta: float = 0.05
    # reward model
    judge_noise: float = 0.25
    refine_fraction: float = 0.2
    reward_lr: float = 0.1
    warmup_lr: float = 0.5
    reward_epochs: int = 20
    reward_replay: bool = True
    warmup_pairs: int = 8
    warmup_epochs: int = 300
    # environment
    n_features: int = 8
    n_actions: int = 32
    hidden: str = "32,32"
    n_prompts: int = 512
    n_heldout: int = 256
    # seeds
    env_seed: int = 0
    init_seed: int = 1
    rollout_seed: int = 2
    judge_seed: int = 3
    noise_seed: int = 4
    shuffle_seed: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.n_iterations >= 1, "n_iterations", "must be >= 1"),
            (self.steps_per_iteration >= 0, "steps_per_iteration", "must be >= 0"),
            (self.k >= 2, "k", "must be >= 2"),
            (self.batch_size >= 1, "batch_size", "must be >= 1"),
            (self.method in METHODS, "method", f"must be one of {', '.join(METHODS)}"),
            (self.epsilon > 0, "epsilon", "must be > 0"),
            (self.eta >= 0, "eta", "must be >= 0"),
            (self.first_order_eta >= 0, "first_order_eta", "must be >= 0"),
            (self.kl_coef >= 0, "kl_coef", "must be >= 0"),
            (self.judge_noise >= 0, "judge_noise", "must be >= 0"),
            (0 < self.refine_fraction <= 1, "refine_fraction", "must lie in (0, 1]"),
            (self.reward_epochs >= 0, "reward_epochs", "must be >= 0"),
            (self.warmup_pairs >= 0, "warmup_pairs", "must be >= 0"),
            (self.n_features >= 1 and self.n_actions >= 2, "n_actions", "need n_features >= 1, n_actions >= 2"),
            (self.n_prompts >= 1, "n_prompts", "must be >= 1"),
            (self.n_heldout >= 1, "n_heldout", "must be >= 1"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise ConfigError(f"{name}: {msg}")
        try:
            self.hidden_dims
        except ValueError:
            raise ConfigError(f"hidden: expected comma-separated positive integers, got {self.hidden!r}") from None

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        dims = tuple(int(h) for h in str(self.hidden).split(",") if h.strip())
        if any(h < 1 for h in dims):
            raise ValueError(self.hidden)
        return dims

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.n_features, *self.hidden_dims, self.n_actions)

    @property
    def spsa(self) -> SpsaConfig:
        return SpsaConfig(self.epsilon, self.eta if self.eta > 0 else 1e-300, self.eta_decay,
                          self.steps_per_iteration, self.epsilon_decay)

    @property
    def total_steps(self) -> int:
        return self.n_iterations * self.steps_per_iteration

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # --- flat key/value text format -------------------------------------

    def to_text(self) -> str:
        lines = ["# zopro experiment config"]
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values: dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (part.strip() for part in line.partition("="))
            where = f"{source}:{lineno}"
            if not sep:
                raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
            if key not in types:
                raise ConfigError(f"{where}: unknown field {key!r}")
            if key in values:
                raise ConfigError(f"{where}: duplicate field {key!r}")
            try:
                values[key] = _parse_value(types[key], value)
            except ValueError:
                raise ConfigError(f"{where}: field {key!r}: cannot parse {value!r} as {types[key]}") from None
        try:
            return cls(**values)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_text(path.read_text(), str(path))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _parse_value(type_name: str, text: str):
    if type_name == "int":
        return int(text)
    if type_name == "float":
        return float(text)
    if type_name == "bool":
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(text)
    return text


@dataclass
class Environment:
    """Synthetic preference task: prompts, held-out prompts and the hidden utility."""

    prompts: PromptBatch
    heldout: PromptBatch
    utility: HiddenUtility

    @classmethod
    def build(cls, config: ExperimentConfig) -> "Environment":
        rng = np.random.Generator(np.random.PCG64(config.env_seed))
        n, m, p = config.n_prompts, config.n_heldout, config.n_features
        X = rng.standard_normal((n + m, p))
        utility = HiddenUtility.random(p, config.n_actions, derive_seed(config.env_seed, 1),
                                       config.judge_noise)
        return cls(PromptBatch(X[:n], np.arange(n)), PromptBatch(X[n:], np.arange(n, n + m)), utility)

    def features_lookup(self) -> np.ndarray:
        return np.concatenate([self.prompts.features, self.heldout.features])

    def mean_reward(self, policy: MlpPolicy, params: np.ndarray | None = None) -> float:
        """Expected hidden utility of the policy, averaged over training prompts."""
        probs = softmax(policy.logits(self.prompts.features, params))
        return float(np.mean(np.sum(probs * self.utility.table(self.prompts.features), axis=1)))


def rm_mean_reward(policy: MlpPolicy, rm: RewardModel, prompts: PromptBatch) -> float:
    probs = softmax(policy.logits(prompts.features))
    return float(np.mean(np.sum(probs * rm.all_scores(prompts.features), axis=1)))


def judge_agreement(rm: RewardModel, env: Environment, seed: int, n_pairs: int | None = None) -> float:
    """Fraction of held-out pairs the reward model orders like the hidden utility."""
    X = env.heldout.features
    n = len(env.heldout) if n_pairs is None else n_pairs
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = rng.integers(0, len(env.heldout), n)
    a = rng.integers(0, env.utility.n_actions, n)
    b = (a + rng.integers(1, env.utility.n_actions, n)) % env.utility.n_actions
    u = env.utility.table(X[rows])
    s = rm.all_scores(X[rows])
    idx = np.arange(n)
    truth = np.sign(u[idx, a] - u[idx, b])
    pred = np.sign(s[idx, a] - s[idx, b])
    return float(np.mean(truth == pred))


@dataclass
class StepRecord:
    step: int
    iteration: int
    alpha: float | None
    epsilon: float
    eta: float
    projected_grad: float
    j_plus: float
    j_minus: float
    mean_reward: float
    flag: str | None
    wall_ms: float

    def row(self) -> dict:
        return {
            "step": self.step, "iteration": self.iteration,
            "alpha": "" if self.alpha is None else repr(self.alpha),
            "epsilon": repr(self.epsilon), "eta": repr(self.eta),
            "projected_grad": repr(self.projected_grad), "J_plus": repr(self.j_plus),
            "J_minus": repr(self.j_minus), "mean_reward": repr(self.mean_reward),
            "flag": self.flag or "",
        }


@dataclass
class TrajectoryLog:
    """Checkpoints and metrics of a run, indexed by iteration (0 = initial)."""

    policy: list[np.ndarray] = field(default_factory=list)
    reward: list[np.ndarray] = field(default_factory=list)
    reward_trunk_dim: int = 0
    delta_pi: list[np.ndarray] = field(default_factory=list)
    delta_r: list[np.ndarray] = field(default_factory=list)
    iterations: list[dict] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    snapshots: list[tuple[int, int, np.ndarray]] = field(default_factory=list)
    evaluations: int = 0
    initial_reward: float = math.nan
    status: str = "running"

    def trunk(self, t: int) -> np.ndarray:
        return self.reward[t][: self.reward_trunk_dim]


class RunAborted(RuntimeError):
    def __init__(self, message: str, log: TrajectoryLog):
        super().__init__(message)
        self.log = log


@dataclass
class Models:
    policy: MlpPolicy
    reference: MlpPolicy
    rm: RewardModel
    records: list[PreferenceRecord] = field(default_factory=list)


def initial_models(config: ExperimentConfig, env: Environment) -> Models:
    """Seeded policy and reward model, warmed up on uniformly drawn pairs.

    The policy and the reward trunk start from identical weights; the reward
    model is then fitted on judged pairs of uniformly random responses so the
    first iteration has an informative reward to optimise.
    """
    policy = MlpPolicy.init(config.layer_dims, config.init_seed)
    reference = policy.with_params(policy.params.copy())
    rm = RewardModel(config.layer_dims, policy.params.copy())
    if config.warmup_pairs and config.warmup_epochs:
        rng = np.random.Generator(np.random.PCG64(derive_seed(config.judge_seed, 0)))
        records = []
        for rep in range(config.warmup_pairs):
            for row, pid in enumerate(env.prompts.prompt_ids):
                a, b = rng.choice(config.n_actions, size=2, replace=False)
                v = judge(env.utility, env.prompts.features[row], int(a), int(b),
                          derive_seed(config.judge_seed, 0, rep, int(pid)))
                records.append(PreferenceRecord(int(pid), v.accepted, v.rejected, v.tie))
        rm, _ = refine_reward_model(rm, records, env.features_lookup(), config.warmup_lr,
                                    config.warmup_epochs)
    else:
        records = []
    return Models(policy, reference, rm, [r for r in records if not r.tie])


def optimise_policy(policy: MlpPolicy, rm: RewardModel, reference: MlpPolicy, prompts: PromptBatch,
                    state: IterationState, config: ExperimentConfig, env: Environment | None = None,
                    step_offset: int = 0, log: TrajectoryLog | None = None):
    """Run one iteration of policy steps; returns (policy', step records)."""
    t = state.iteration_index
    steps = config.steps_per_iteration
    records: list[StepRecord] = []
    if steps == 0:
        return policy, records
    shuffle = np.random.Generator(np.random.PCG64(derive_seed(config.shuffle_seed, t)))
    order = shuffle.permutation(len(prompts))
    bs = min(config.batch_size, len(prompts))
    n_batches = max(1, len(prompts) // bs)
    params = policy.params.copy()
    snap_every = max(1, steps // 10)

    def objective(theta, seed, batch, anchor):
        return rloo_objective(policy, rm, batch, config.k, seed, params=theta,
                              reference=reference, kl_coef=config.kl_coef, sample_params=anchor)

    for i in range(steps):
        t0 = time.perf_counter()
        gstep = step_offset + i
        rows = order[(i % n_batches) * bs:(i % n_batches + 1) * bs]
        batch = prompts.subset(rows)
        rollout_seed = derive_seed(config.rollout_seed, t, i)
        eps = config.epsilon
        if config.epsilon_decay:
            eps = linear_decay(eps, gstep, config.total_steps) or eps * 1e-3
        if config.method == "first_order":
            eta = linear_decay(config.first_order_eta, gstep, config.total_steps) if config.eta_decay \
                else config.first_order_eta
            current = policy.with_params(params)
            params = first_order_rloo_step(current, rm, batch, config.k, eta, rollout_seed,
                                           reference, config.kl_coef)
            if not np.all(np.isfinite(params)):
                raise ObjectiveDivergence("first-order step produced non-finite parameters",
                                          current.params, {"iteration": t, "step": i})
            alpha, pg, jp, jm, flag = None, math.nan, math.nan, math.nan, "first-order"
            evals = evaluations_per_step(config.method)
        else:
            eta = linear_decay(config.eta, gstep, config.total_steps) if config.eta_decay else config.eta
            state.step_index = i
            direction = zopro_direction(state, params.size, derive_seed(config.noise_seed, t, i), steps)
            try:
                res = spsa_step(params, lambda th, s: objective(th, s, batch, params), direction.z, eps,
                                eta, rollout_seed)
            except ObjectiveDivergence as exc:
                exc.context.update(iteration=t, step=i)
                raise
            params = res.params
            alpha, pg, jp, jm = direction.alpha, res.projected_grad, res.j_plus, res.j_minus
            flag = "skipped" if res.skipped else direction.flag
            evals = evaluations_per_step(config.method)
        if log is not None:
            log.evaluations += evals
        mean_r = env.mean_reward(policy, params) if env is not None else math.nan
        wall = (time.perf_counter() - t0) * 1e3
        records.append(StepRecord(gstep, t, alpha, eps, eta, pg, jp, jm, mean_r, flag, wall))
        if log is not None and (i + 1) % snap_every == 0 and i + 1 < steps:
            log.snapshots.append((t, i + 1, params.copy()))
    return policy.with_params(params), records


def collect_preferences(policy: MlpPolicy, prompts: PromptBatch, utility: HiddenUtility,
                        seed: int) -> list[PreferenceRecord]:
    """Two seeded samples per prompt from the policy, judged; ties flagged."""
    if len(prompts) == 0:
        raise ValueError("no prompts to collect preferences on")
    probs = softmax(policy.logits(prompts.features))
    out = []
    for row, pid in enumerate(prompts.prompt_ids):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, int(pid))))
        u1, u2 = rng.random(2)
        g1, g2 = (int(x) for x in inverse_cdf_sample(probs[row:row + 1], np.array([[u1, u2]]))[0])
        v = judge(utility, prompts.features[row], g1, g2, derive_seed(seed, int(pid), 1))
        out.append(PreferenceRecord(int(pid), v.accepted, v.rejected, v.tie))
    return out


def refine_reward_model(rm: RewardModel, records, features_lookup, lr: float, epochs: int):
    """Full-batch gradient descent on the Bradley-Terry loss.

    Returns ``(rm', (loss_before, loss_after))``. Ties are dropped; with no
    usable records, or if the loss turns non-finite, the input model is
    returned unchanged.
    """
    usable = [r for r in records if not r.tie]
    if not usable:
        logger.info("no-data: reward refinement skipped")
        return rm, (math.nan, math.nan)
    before = bradley_terry_loss(rm, usable, features_lookup)
    if epochs == 0:
        return rm, (before, before)
    phi = rm.flat()
    current = rm
    for _ in range(epochs):
        phi = phi - lr * bradley_terry_grad(current, usable, features_lookup)
        if not np.all(np.isfinite(phi)):
            logger.warning("non-finite reward parameters; keeping previous reward model")
            return rm, (before, math.nan)
        current = rm.with_flat(phi)
    after = bradley_terry_loss(current, usable, features_lookup)
    if not np.isfinite(after):
        logger.warning("non-finite Bradley-Terry loss; keeping previous reward model")
        return rm, (before, after)
    return current, (before, after)


def _angle(x: np.ndarray, y: np.ndarray) -> float:
    try:
        return math.degrees(math.acos(max(-1.0, min(1.0, cosine(x, y)))))
    except ValueError:
        return math.nan


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None,
                   models: Models | None = None) -> TrajectoryLog:
    """Alternate policy optimisation, preference collection and reward refinement.

    With ``out_dir`` every checkpoint, record file and metric is persisted as
    the run progresses, so an aborted run leaves its partial log on disk.
    """
    env = Environment.build(config)
    models = models or initial_models(config, env)
    policy, reference, rm = models.policy, models.reference, models.rm
    pool = list(models.records) if config.reward_replay else []
    lookup = env.features_lookup()
    log = TrajectoryLog(reward_trunk_dim=rm.trunk_dim, initial_reward=env.mean_reward(policy))
    log.policy.append(policy.params.copy())
    log.reward.append(rm.flat())
    writer = RunWriter(out_dir, config) if out_dir is not None else None
    if writer:
        writer.checkpoint(policy, rm, 0, config)
    state = IterationState(iteration_index=1)
    try:
        for t in range(1, config.n_iterations + 1):
            state.iteration_index = t
            state.step_index = 0
            rm_before = rm.flat()
            policy, steps = optimise_policy(policy, rm, reference, env.prompts, state, config, env,
                                            (t - 1) * config.steps_per_iteration, log)
            assert np.array_equal(rm_before, rm.flat()), "reward model changed during policy phase"
            log.steps.extend(steps)
            if writer:
                writer.steps(steps)

            records = collect_preferences(policy, env.prompts, env.utility,
                                          derive_seed(config.judge_seed, t))
            usable = [r for r in records if not r.tie]
            n_used = math.ceil(config.refine_fraction * len(usable))
            chosen = usable[:n_used]
            if config.reward_replay:
                pool.extend(chosen)
                train = pool
            else:
                train = chosen
            pi_before = policy.params.copy()
            rm, (loss_before, loss_after) = refine_reward_model(rm, train, lookup, config.reward_lr,
                                                                config.reward_epochs)
            assert np.array_equal(pi_before, policy.params), "policy changed during reward phase"

            log.policy.append(policy.params.copy())
            log.reward.append(rm.flat())
            d_pi = log.policy[t] - log.policy[t - 1]
            d_r = log.trunk(t) - log.trunk(t - 1)
            cos_prev = math.nan
            if log.delta_pi:
                try:
                    cos_prev = cosine(d_pi, log.delta_pi[-1])
                except ValueError:
                    pass
            log.delta_pi.append(d_pi)
            log.delta_r.append(d_r)
            if config.method == "zopro":
                state.delta_pi = d_pi if np.linalg.norm(d_pi) >= DEGENERACY_EPS else None
                state.delta_r = d_r
            summary = {
                "iteration": t,
                "mean_reward": env.mean_reward(policy),
                "rm_reward": rm_mean_reward(policy, rm, env.prompts),
                "judge_agreement": judge_agreement(rm, env, derive_seed(config.judge_seed, 99, t)),
                "n_records": len(records),
                "n_ties": len(records) - len(usable),
                "n_used": len(chosen),
                "refine_loss_before": loss_before,
                "refine_loss_after": loss_after,
                "delta_pi_norm": float(np.linalg.norm(d_pi)),
                "delta_r_norm": float(np.linalg.norm(d_r)),
                "cos_delta_pi_prev": cos_prev,
                "angle_pi_r_deg": _angle(d_pi, d_r),
                "evaluations": log.evaluations,
            }
            log.iterations.append(summary)
            logger.info("iteration %d: mean reward %.4f, judge agreement %.3f", t,
                        summary["mean_reward"], summary["judge_agreement"])
            if writer:
                writer.checkpoint(policy, rm, t, config)
                writer.records(t, records)
                writer.iteration(summary)
                writer.snapshots(log, t)
    except ObjectiveDivergence as exc:
        log.status = "diverged"
        if writer:
            writer.postmortem(exc, policy)
        raise RunAborted(f"objective diverged: {exc} {exc.context}", log) from exc
    except Exception as exc:
        log.status = "failed"
        raise RunAborted(f"run failed: {exc}", log) from exc
    log.status = "completed"
    return log


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunWriter:
    """Persists a run into ``out_dir`` as it progresses."""

    def __init__(self, out_dir, config: ExperimentConfig):
        self.root = Path(out_dir)
        (self.root / "checkpoints" / "snapshots").mkdir(parents=True, exist_ok=True)
        (self.root / "records").mkdir(exist_ok=True)
        self.config = config
        self._init_csv("metrics.csv", STEP_FIELDS)
        self._init_csv("timing.csv", ["step", "wall_ms"])
        self._init_csv("iterations.csv", ITERATION_FIELDS)
        self._snapshots_written = 0

    def _init_csv(self, name: str, fields) -> None:
        with open(self.root / name, "w", newline="") as fh:
            csv.writer(fh).writerow(fields)

    def checkpoint(self, policy: MlpPolicy, rm: RewardModel, t: int, config: ExperimentConfig) -> None:
        ck = self.root / "checkpoints"
        save_checkpoint(ck / f"policy_{t:03d}.ckpt", policy.checkpoint(t, config.init_seed))
        save_checkpoint(ck / f"reward_{t:03d}.ckpt", rm.checkpoint(t, config.init_seed))

    def snapshots(self, log: TrajectoryLog, t: int) -> None:
        for it, step, params in log.snapshots[self._snapshots_written:]:
            ckpt = Checkpoint(params, it, self.config.init_seed, (self.config.layer_dims, "tanh"),
                              {"step": str(step)})
            save_checkpoint(self.root / "checkpoints" / "snapshots" / f"policy_{it:03d}_{step:05d}.ckpt",
                            ckpt)
        self._snapshots_written = len(log.snapshots)

    def steps(self, steps: list[StepRecord]) -> None:
        with open(self.root / "metrics.csv", "a", newline="") as fh:
            w = csv.DictWriter(fh, STEP_FIELDS)
            for s in steps:
                w.writerow(s.row())
        with open(self.root / "timing.csv", "a", newline="") as fh:
            w = csv.writer(fh)
            for s in steps:
                w.writerow([s.step, f"{s.wall_ms:.3f}"])

    def iteration(self, summary: dict) -> None:
        with open(self.root / "iterations.csv", "a", newline="") as fh:
            csv.DictWriter(fh, ITERATION_FIELDS).writerow({k: _fmt(v) for k, v in summary.items()})

    def records(self, t: int, records) -> None:
        write_records(self.root / "records" / f"iter_{t:03d}.txt", records)

    def postmortem(self, exc: ObjectiveDivergence, policy: MlpPolicy) -> None:
        params = exc.params if exc.params is not None else policy.params
        t = int(exc.context.get("iteration", 0))
        save_checkpoint(self.root / "postmortem.ckpt",
                        Checkpoint(params, t, self.config.init_seed, (self.config.layer_dims, "tanh"),
                                   {"step": str(exc.context.get("step", -1))}))
