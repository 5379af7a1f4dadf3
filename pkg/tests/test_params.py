import math
import subprocess
import sys

import numpy as np
import pytest

from zopro.params import (
    Checkpoint,
    DimensionError,
    InvalidNoiseError,
    NoiseSpec,
    as_param_vector,
    axpy,
    checkpoint_bytes,
    compose_perturbation,
    cosine,
    dot,
    load_checkpoint,
    norm,
    parse_checkpoint,
    project_orthogonal,
    sample_gaussian,
    save_checkpoint,
)


def test_gaussian_same_spec_is_bitwise_identical():
    a = sample_gaussian(NoiseSpec(42, 1000))
    b = sample_gaussian(NoiseSpec(42, 1000))
    assert a.tobytes() == b.tobytes()


def test_gaussian_is_stable_across_processes():
    code = "from zopro.params import *; print(sample_gaussian(NoiseSpec(7, 5)).tobytes().hex())"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == sample_gaussian(NoiseSpec(7, 5)).tobytes().hex()


def test_gaussian_moments():
    g = sample_gaussian(NoiseSpec(3, 100_000))
    assert -0.02 <= g.mean() <= 0.02
    assert 0.97 <= g.var() <= 1.03


def test_gaussian_seeds_are_nearly_orthogonal():
    a = sample_gaussian(NoiseSpec(1, 100_000))
    b = sample_gaussian(NoiseSpec(2, 100_000))
    assert abs(cosine(a, b)) < 0.05


def test_gaussian_zero_dim_rejected():
    with pytest.raises(DimensionError):
        sample_gaussian(NoiseSpec(0, 0))


def test_projection_examples():
    v, flag = project_orthogonal(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
    assert flag is None and np.allclose(v, [0.0, 1.0], atol=0)
    v, _ = project_orthogonal(np.array([2.0, -4.0, 6.0]), np.array([1.0, -2.0, 3.0]))
    assert np.allclose(v, 0.0, atol=1e-15)
    v, _ = project_orthogonal(np.array([3.0, 4.0, 0.0]), np.array([0.0, 0.0, 5.0]))
    assert np.array_equal(v, [3.0, 4.0, 0.0])


def test_projection_against_zero_reference_is_flagged():
    v = np.array([1.0, 2.0])
    out, flag = project_orthogonal(v, np.zeros(2))
    assert flag == "no-projection"
    assert np.array_equal(out, v)


def test_compose_alpha_one_returns_delta_pi_bitwise():
    dp = np.array([0.1, -0.3, 0.7])
    z, flag = compose_perturbation(dp, np.array([1.0, 2.0, 3.0]), 1.0)
    assert flag is None and z.tobytes() == dp.tobytes()


def test_compose_alpha_zero_keeps_norm():
    dp = np.array([3.0, 4.0])
    u = np.array([-1.0, 7.0])
    z, _ = compose_perturbation(dp, u, 0.0)
    assert math.isclose(norm(z), 5.0, rel_tol=1e-15)
    assert np.allclose(z / norm(z), u / norm(u))


def test_compose_hand_example():
    z, _ = compose_perturbation(np.array([2.0, 0.0]), np.array([0.0, 5.0]), 0.6)
    # 0.6*(2,0) + sqrt(1-0.36)*(0,1)*2 evaluated by hand
    assert np.allclose(z, [1.2, 1.6], atol=1e-15)


def test_compose_cold_start_and_errors():
    u = np.array([1.0, 2.0])
    z, flag = compose_perturbation(np.zeros(2), u, 0.3)
    assert flag == "cold-start" and np.array_equal(z, u)
    with pytest.raises(InvalidNoiseError):
        compose_perturbation(np.array([1.0, 0.0]), np.zeros(2), 0.5)
    with pytest.raises(ValueError):
        compose_perturbation(np.array([1.0, 0.0]), u, 1.5)


def test_dot_norm_axpy():
    assert dot(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    assert norm(np.array([3.0, 4.0])) == 5.0
    assert np.array_equal(axpy(2.0, np.array([1.0, 1.0]), np.array([0.0, 1.0])), [2.0, 3.0])
    with pytest.raises(DimensionError):
        dot(np.ones(2), np.ones(3))
    with pytest.raises(DimensionError):
        axpy(1.0, np.ones(2), np.ones(3))


def test_param_vector_validation():
    with pytest.raises(ValueError):
        as_param_vector([1.0, np.nan])
    with pytest.raises(DimensionError):
        as_param_vector([1.0, 2.0], dim=3)
    with pytest.raises(DimensionError):
        as_param_vector(np.ones((2, 2)))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    values = rng.standard_normal(17) * 1e-300
    values[3] = -0.0
    ck = Checkpoint(values, iteration=4, seed=9, arch=((3, 2), "tanh"), extra={"step": "12"})
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert back.values.tobytes() == values.tobytes()
    assert (back.iteration, back.seed, back.arch, back.extra) == (4, 9, ((3, 2), "tanh"), {"step": "12"})
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_layout():
    data = checkpoint_bytes(Checkpoint(np.array([1.0, -2.0]), 3, 5))
    header, payload = data.split(b"END\n")
    assert header == b"ZOPRO1\ndim 2\niteration 3\nseed 5\n"
    assert payload == np.array([1.0, -2.0], dtype="<f8").tobytes()


def test_checkpoint_rejects_corruption():
    data = checkpoint_bytes(Checkpoint(np.ones(3)))
    with pytest.raises(ValueError):
        parse_checkpoint(data[:-1])
    with pytest.raises(ValueError):
        parse_checkpoint(b"NOPE" + data[6:])
