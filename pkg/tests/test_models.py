import json

import numpy as np
import pytest

import oracles
from zopro.models import (
    MlpPolicy,
    RewardModel,
    init_mlp_params,
    layer_blocks,
    mlp_param_count,
    policy_forward,
    policy_grad,
    policy_sample,
    reward_score,
    softmax,
)
from zopro.params import DimensionError


def test_param_count_and_blocks():
    dims = (8, 32, 32, 32)
    assert mlp_param_count(dims) == (8 * 32 + 32) + 2 * (32 * 32 + 32) == 2400
    blocks = layer_blocks(dims)
    assert np.array_equal(np.concatenate(blocks), np.arange(mlp_param_count(dims)))


def test_zero_weights_give_zero_logits():
    p = MlpPolicy((4, 6, 5), np.zeros(mlp_param_count((4, 6, 5))))
    assert np.array_equal(policy_forward(p, np.arange(4.0)), np.zeros(5))


def test_affine_single_layer():
    p = MlpPolicy((1, 1), np.array([2.5, -0.5]))
    assert policy_forward(p, [3.0])[0] == 2.5 * 3.0 - 0.5


@pytest.mark.parametrize("case", json.loads(oracles.GOLDEN.read_text()))
def test_forward_matches_golden(case):
    p = MlpPolicy(case["dims"], init_mlp_params(case["dims"], case["seed"]))
    np.testing.assert_allclose(policy_forward(p, case["x"]), case["logits"], rtol=0, atol=1e-12)


def test_forward_matches_pure_python_oracle():
    dims = (5, 7, 3)
    p = MlpPolicy.init(dims, 4)
    x = np.linspace(-1, 1, 5)
    np.testing.assert_allclose(policy_forward(p, x), oracles.forward(p.params, dims, x), atol=1e-13)


def test_forward_dimension_error():
    p = MlpPolicy.init((3, 4), 0)
    with pytest.raises(DimensionError):
        policy_forward(p, np.ones(5))


def test_softmax_sums_to_one():
    p = MlpPolicy.init((8, 32, 32, 32), 1)
    X = np.random.default_rng(0).standard_normal((20, 8)) * 5
    assert np.all(np.abs(softmax(p.logits(X)).sum(axis=1) - 1) <= 1e-12)


def test_sample_dominant_logit():
    p = MlpPolicy((1, 4), np.array([0, 0, 0, 0, 0, 0, 50.0, 0]))
    hits = sum(policy_sample(p, [1.0], s) == 2 for s in range(10_000))
    assert hits / 10_000 >= 0.999


def test_sample_uniform_frequencies():
    p = MlpPolicy((1, 4), np.zeros(8))
    counts = np.bincount([policy_sample(p, [1.0], s) for s in range(10_000)], minlength=4)
    assert np.all(np.abs(counts / 10_000 - 0.25) <= 0.02)


def test_sample_deterministic():
    p = MlpPolicy.init((3, 6), 2)
    assert policy_sample(p, [1, 2, 3], 99) == policy_sample(p, [1, 2, 3], 99)


def _fd_log_prob(policy, x, a, h=1e-6):
    g = np.zeros(policy.dim)
    for i in range(policy.dim):
        e = np.zeros(policy.dim)
        e[i] = h
        lp = policy.log_probs(x, policy.params + e)[0, a]
        lm = policy.log_probs(x, policy.params - e)[0, a]
        g[i] = (lp - lm) / (2 * h)
    return g


def test_policy_grad_matches_finite_differences():
    p = MlpPolicy.init((4, 6, 5), 3)
    x = np.array([0.3, -1.2, 0.8, 0.1])
    g = policy_grad(p, x, 2)
    fd = _fd_log_prob(p, x, 2)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) <= 1e-4


def test_policy_grad_uniform_output_bias():
    dims = (3, 4, 5)
    params = init_mlp_params(dims, 0)
    # zero the output layer so the distribution is uniform
    params[3 * 4 + 4:] = 0.0
    p = MlpPolicy(dims, params)
    g = policy_grad(p, [0.5, -0.2, 1.0], 1)
    bias = g[-5:]
    expected = np.full(5, -1 / 5)
    expected[1] = 1 - 1 / 5
    np.testing.assert_allclose(bias, expected, atol=1e-15)


def test_policy_grad_deterministic():
    p = MlpPolicy.init((3, 4, 5), 8)
    assert policy_grad(p, [1, 2, 3], 4).tobytes() == policy_grad(p, [1, 2, 3], 4).tobytes()


def test_policy_checkpoint_round_trip():
    p = MlpPolicy.init((3, 4, 5), 8)
    q = MlpPolicy.from_checkpoint(p.checkpoint())
    x = np.array([0.1, 0.2, 0.3])
    assert policy_forward(p, x).tobytes() == policy_forward(q, x).tobytes()


def test_reward_zero_weights():
    rm = RewardModel((3, 4, 5), np.zeros(mlp_param_count((3, 4, 5))))
    assert reward_score(rm, [1.0, 2.0, 3.0], 2) == 0.0


def test_reward_score_matches_oracle_and_is_deterministic():
    dims = (8, 32, 32, 32)
    rm = RewardModel(dims, init_mlp_params(dims, 1), np.linspace(0.5, 1.5, 33))
    x = np.random.default_rng(5).standard_normal(8)
    expected = oracles.reward_scores(rm.trunk_params, rm.head_params, dims, x)
    got = [reward_score(rm, x, a) for a in range(32)]
    np.testing.assert_allclose(got, expected, atol=1e-12)
    assert reward_score(rm, x, 7) == reward_score(rm, x, 7)


def test_reward_out_of_range():
    rm = RewardModel((3, 4), init_mlp_params((3, 4), 0))
    with pytest.raises(ValueError):
        reward_score(rm, [0, 0, 0], 4)


def test_reward_trunk_matches_policy_dimension():
    dims = (8, 32, 32, 32)
    rm = RewardModel(dims, init_mlp_params(dims, 1))
    assert rm.trunk_dim == MlpPolicy.init(dims, 1).dim
    assert rm.head_dim == 33


def test_reward_grad_matches_finite_differences():
    dims = (3, 4, 5)
    rm = RewardModel(dims, init_mlp_params(dims, 2), np.linspace(0.5, 1.5, 6))
    X = np.random.default_rng(1).standard_normal((4, 3))
    acts = np.array([0, 3, 3, 4])
    w = np.array([1.0, -0.5, 2.0, 0.3])
    g = rm.grad_scores(X, acts, w)
    phi = rm.flat()
    fd = np.zeros_like(phi)
    for i in range(phi.size):
        e = np.zeros_like(phi)
        e[i] = 1e-6
        fd[i] = (w @ rm.with_flat(phi + e).scores(X, acts) - w @ rm.with_flat(phi - e).scores(X, acts)) / 2e-6
    assert np.max(np.abs(g - fd)) <= 1e-4 * np.max(np.abs(fd))


def test_reward_checkpoint_round_trip():
    dims = (3, 4, 5)
    rm = RewardModel(dims, init_mlp_params(dims, 2), np.linspace(0.5, 1.5, 6))
    back = RewardModel.from_checkpoint(rm.checkpoint(2, 1))
    assert back.flat().tobytes() == rm.flat().tobytes()
