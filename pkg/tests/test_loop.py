import math

import numpy as np
import pytest

import zopro.loop as loop
from zopro.loop import (
    ConfigError,
    Environment,
    ExperimentConfig,
    RunAborted,
    collect_preferences,
    initial_models,
    judge_agreement,
    optimise_policy,
    refine_reward_model,
    run_experiment,
)
from zopro.models import MlpPolicy, RewardModel, mlp_param_count
from zopro.objectives import HiddenUtility, PreferenceRecord, PromptBatch, bradley_terry_loss
from zopro.optim import IterationState
from zopro.params import load_checkpoint


def small(**kw):
    base = dict(n_iterations=2, steps_per_iteration=20, n_prompts=64, n_heldout=64,
                warmup_epochs=100, hidden="8,8", n_actions=6)
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_text_round_trip():
    cfg = small(eta=3e-3, method="spsa")
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg
    assert cfg.digest() == ExperimentConfig.from_text(cfg.to_text()).digest()


def test_config_defaults_give_desk_scale_dimension():
    cfg = ExperimentConfig()
    assert cfg.layer_dims == (8, 32, 32, 32)
    assert mlp_param_count(cfg.layer_dims) == 2400
    assert (cfg.n_iterations, cfg.steps_per_iteration, cfg.k, cfg.refine_fraction) == (5, 200, 2, 0.2)


@pytest.mark.parametrize("text, where", [
    ("refine_fraction = 0\n", "refine_fraction"),
    ("eta = 1e-3\nbogus = 1\n", ":2: "),
    ("eta = fast\n", ":1:"),
    ("k 2\n", ":1:"),
    ("eta = 1\neta = 2\n", ":2:"),
])
def test_config_errors_name_line_and_field(text, where):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_text(text, "cfg.txt")
    assert where in str(info.value)
    assert "cfg.txt" in str(info.value)


def test_config_comments_and_blank_lines():
    cfg = ExperimentConfig.from_text("# comment\n\nn_iterations = 3  # trailing\n")
    assert cfg.n_iterations == 3


def _prepared(cfg):
    env = Environment.build(cfg)
    models = initial_models(cfg, env)
    return env, models


def test_zero_steps_is_vacuous():
    cfg = small(steps_per_iteration=0)
    env, m = _prepared(cfg)
    new, records = optimise_policy(m.policy, m.rm, m.reference, env.prompts, IterationState(), cfg, env)
    assert records == [] and np.array_equal(new.params, m.policy.params)


@pytest.mark.parametrize("method", ["zopro", "spsa"])
def test_zero_learning_rate_leaves_policy_bitwise(method):
    cfg = small(eta=0.0, method=method)
    env, m = _prepared(cfg)
    new, records = optimise_policy(m.policy, m.rm, m.reference, env.prompts, IterationState(), cfg, env)
    assert len(records) == cfg.steps_per_iteration
    assert new.params.tobytes() == m.policy.params.tobytes()


def test_one_iteration_on_toy_environment_improves_reward():
    cfg = ExperimentConfig(env_seed=7, init_seed=7, rollout_seed=7, judge_seed=7, noise_seed=7, shuffle_seed=7)
    env, m = _prepared(cfg)
    new, records = optimise_policy(m.policy, m.rm, m.reference, env.prompts, IterationState(), cfg, env)
    assert len(records) == 200
    assert env.mean_reward(new) > env.mean_reward(m.policy)


def test_dominant_policy_gives_only_ties():
    dims = (2, 4)
    policy = MlpPolicy(dims, np.r_[np.zeros(8), [0.0, 60.0, 0.0, 0.0]])
    prompts = PromptBatch(np.random.default_rng(0).standard_normal((30, 2)), np.arange(30))
    recs = collect_preferences(policy, prompts, HiddenUtility.random(2, 4, 0), 5)
    assert len(recs) == 30 and all(r.tie for r in recs)


def test_noiseless_judge_prefers_higher_utility():
    dims = (3, 5)
    policy = MlpPolicy(dims, np.zeros(mlp_param_count(dims)))
    prompts = PromptBatch(np.random.default_rng(1).standard_normal((1500, 3)), np.arange(1500))
    util = HiddenUtility.random(3, 5, 2, judge_noise_scale=0.0)
    recs = collect_preferences(policy, prompts, util, 9)
    assert len(recs) == 1500
    strict = [r for r in recs if not r.tie]
    assert len(strict) >= 1000
    for r in strict:
        x = prompts.features[r.prompt_id]
        assert util(x, r.accepted) >= util(x, r.rejected)


def test_refinement_zero_epochs_and_no_data():
    dims = (2, 3, 3)
    rm = RewardModel(dims, np.random.default_rng(0).standard_normal(mlp_param_count(dims)))
    lookup = np.ones((1, 2))
    same, _ = refine_reward_model(rm, [PreferenceRecord(0, 0, 1)], lookup, 0.1, 0)
    assert np.array_equal(same.flat(), rm.flat())
    same, losses = refine_reward_model(rm, [PreferenceRecord(0, 1, 1, tie=True)], lookup, 0.1, 10)
    assert same is rm and all(math.isnan(v) for v in losses)


def test_refinement_descends_on_separable_records():
    cfg = small()
    env = Environment.build(cfg)
    rm = RewardModel(cfg.layer_dims, MlpPolicy.init(cfg.layer_dims, 3).params)
    util = env.utility.table(env.prompts.features)
    recs = []
    for pid, row in zip(env.prompts.prompt_ids, util):
        a, b = int(np.argmax(row)), int(np.argmin(row))
        recs.append(PreferenceRecord(int(pid), a, b))
    new, (before, after) = refine_reward_model(rm, recs, env.features_lookup(), 0.5, 50)
    assert after < before
    assert bradley_terry_loss(new, recs, env.features_lookup()) == after


def test_refinement_keeps_model_on_non_finite_loss(monkeypatch):
    dims = (1, 2)
    rm = RewardModel(dims, np.zeros(4))
    values = iter([0.7, math.inf])
    monkeypatch.setattr(loop, "bradley_terry_loss", lambda *a: next(values))
    new, (before, after) = refine_reward_model(rm, [PreferenceRecord(0, 0, 1)], np.array([[1.0]]), 0.1, 3)
    assert new is rm and before == 0.7 and after == math.inf


def test_single_iteration_runs_in_cold_start():
    log = run_experiment(small(n_iterations=1))
    assert log.status == "completed"
    assert all(s.flag == "cold-start" for s in log.steps)


def test_run_persists_consistent_deltas(tmp_path):
    cfg = small(n_iterations=3)
    log = run_experiment(cfg, tmp_path)
    d = mlp_param_count(cfg.layer_dims)
    for t in range(1, 4):
        p_now = load_checkpoint(tmp_path / "checkpoints" / f"policy_{t:03d}.ckpt").values
        p_prev = load_checkpoint(tmp_path / "checkpoints" / f"policy_{t - 1:03d}.ckpt").values
        r_now = load_checkpoint(tmp_path / "checkpoints" / f"reward_{t:03d}.ckpt").values[:d]
        r_prev = load_checkpoint(tmp_path / "checkpoints" / f"reward_{t - 1:03d}.ckpt").values[:d]
        assert np.array_equal(p_now - p_prev, log.delta_pi[t - 1])
        assert np.array_equal(r_now - r_prev, log.delta_r[t - 1])
        assert log.delta_r[t - 1].shape == (d,)
    # the sampler left cold start once deltas existed
    assert any(s.alpha is not None for s in log.steps if s.iteration >= 2)
    assert math.isnan(log.iterations[0]["cos_delta_pi_prev"])
    assert all(math.isfinite(it["cos_delta_pi_prev"]) for it in log.iterations[1:])
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(loop.STEP_FIELDS)
    assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 1 + 3 * cfg.steps_per_iteration
    assert len(list((tmp_path / "checkpoints" / "snapshots").glob("*.ckpt"))) == 3 * 9


def test_policy_and_reward_share_initial_trunk():
    cfg = small(warmup_pairs=0)
    env, m = _prepared(cfg)
    assert np.array_equal(m.policy.params, m.rm.trunk_params)


def test_judge_agreement_of_perfect_model_is_one():
    cfg = small()
    env = Environment.build(cfg)

    class Oracle:
        def all_scores(self, X):
            return env.utility.table(X)

    assert judge_agreement(Oracle(), env, 0) == 1.0


def test_divergence_aborts_with_partial_artifacts(tmp_path, monkeypatch):
    cfg = small(n_iterations=3)
    real = loop.rloo_objective
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 2 * cfg.steps_per_iteration + 5:
            return math.nan
        return real(*args, **kwargs)

    monkeypatch.setattr(loop, "rloo_objective", flaky)
    with pytest.raises(RunAborted) as info:
        run_experiment(cfg, tmp_path)
    log = info.value.log
    assert log.status == "diverged"
    assert (tmp_path / "postmortem.ckpt").exists()
    assert (tmp_path / "checkpoints" / "policy_001.ckpt").exists()
    assert not (tmp_path / "checkpoints" / "policy_002.ckpt").exists()
    assert "iteration" in str(info.value)
