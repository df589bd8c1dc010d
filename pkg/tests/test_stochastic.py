import io

import numpy as np
import pytest

from mscbf.coupling import DiagonalMultiplier
from mscbf.fields import h_norm
from mscbf.stochastic import (
    Channel,
    CovarianceSpec,
    NoiseBatch,
    NoiseStream,
    apply_diffusion,
    derive_seed,
    hs_norm_sq,
    power_law_covariance,
    sample_increment,
    standard_ticks,
    write_seed_manifest,
    zero_covariance,
)


@pytest.fixture(scope="module")
def cov(basis):
    return power_law_covariance(basis, 2.0)


def test_zero_step_gives_zero(basis, cov):
    s = NoiseStream(1, 0, Channel.Q1)
    assert np.all(sample_increment(s, cov, 0.0).coeffs == 0)
    with pytest.raises(ValueError):
        sample_increment(s, cov, -1.0)


def test_increments_are_real_fields(basis, cov):
    assert sample_increment(NoiseStream(3, 1, Channel.Q2), cov, 0.1).is_real()


def test_mean_square_increment_matches_trace(basis, cov):
    n, dt = 100_000, 0.01
    z = standard_ticks(NoiseStream(7, 0, Channel.Q1), basis, n)
    e = dt * np.sum(cov.q * np.abs(z) ** 2, axis=-1)
    assert abs(e.mean() - dt * cov.trace) <= 3 * e.std(ddof=1) / np.sqrt(n)


def test_per_mode_variance(basis, cov):
    n, dt = 10_000, 0.5
    z = standard_ticks(NoiseStream(8, 0, Channel.Q2), basis, n)
    w = z * np.sqrt(dt * cov.q)
    pos = basis.positive_modes
    # real and imaginary parts each carry half of dt*q_k
    var = w.real[:, pos].var(axis=0, ddof=1)
    target = dt * cov.q[pos] / 2
    se = target * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(var - target) <= 4 * se)


def test_channels_are_uncorrelated(basis):
    n = 10_000
    a = standard_ticks(NoiseStream(9, 0, Channel.Q1), basis, n).real[:, 0]
    b = standard_ticks(NoiseStream(9, 0, Channel.Q2), basis, n).real[:, 0]
    assert abs(np.corrcoef(a, b)[0, 1]) <= 4 / np.sqrt(n)


def test_replay_is_bit_exact(basis, cov):
    s1, s2 = NoiseStream(11, 4, Channel.Q2, counter=17), NoiseStream(11, 4, Channel.Q2, counter=17)
    assert np.array_equal(sample_increment(s1, cov, 0.2).coeffs, sample_increment(s2, cov, 0.2).coeffs)


def test_counter_jump_equals_sequential_draws(basis):
    seq = standard_ticks(NoiseStream(5, 2, Channel.Q1), basis, 10)
    jump = standard_ticks(NoiseStream(5, 2, Channel.Q1, counter=6), basis, 4)
    assert np.array_equal(seq[6:], jump)


def test_batch_matches_individual_streams(basis):
    batch = NoiseBatch([NoiseStream(5, i, Channel.Q1) for i in range(3)], basis, chunk=4)
    got = batch.take(9)
    for i in range(3):
        assert np.array_equal(got[:, i], standard_ticks(NoiseStream(5, i, Channel.Q1), basis, 9))
    assert all(s.counter == 9 for s in batch.streams)


def test_distinct_keys_give_distinct_streams(basis):
    a = standard_ticks(NoiseStream(1, 0, Channel.Q1), basis, 1)
    for other in (NoiseStream(2, 0, Channel.Q1), NoiseStream(1, 1, Channel.Q1), NoiseStream(1, 0, Channel.Q2)):
        assert not np.array_equal(a, standard_ticks(other, basis, 1))
    assert derive_seed(1, 0) != derive_seed(1, 1) and derive_seed(1, 0) == derive_seed(1, 0)


def test_identity_multiplier(basis, cov):
    dw = sample_increment(NoiseStream(1, 0, Channel.Q1), cov, 0.3)
    assert np.array_equal(apply_diffusion(DiagonalMultiplier(np.ones(basis.n_modes), basis), dw).coeffs, dw.coeffs)
    assert np.all(apply_diffusion(DiagonalMultiplier(np.zeros(basis.n_modes)), dw).coeffs == 0)


def test_constant_multiplier_norm(basis, cov):
    m = DiagonalMultiplier(np.full(basis.n_modes, 1.5))
    assert hs_norm_sq(m, cov) == pytest.approx(2.25 * cov.trace)


def test_covariance_validation(basis):
    with pytest.raises(ValueError):
        CovarianceSpec(np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        power_law_covariance(basis, 2.0, -1.0)
    assert zero_covariance(basis).trace == 0.0


def test_default_covariance_is_trace_class(basis, cov):
    assert cov.q_max == 1.0
    assert cov.trace == pytest.approx(np.sum(basis.eigenvalues ** -2.0))


def test_seed_manifest_lines():
    buf = io.StringIO()
    write_seed_manifest(buf, 42, [0, 1], [Channel.Q1, Channel.Q2])
    assert buf.getvalue().splitlines() == [
        "seed.0=id=0;channels=Q1,Q2;master_seed=42",
        "seed.1=id=1;channels=Q1,Q2;master_seed=42",
    ]


def test_increment_norm_scales_with_sqrt_dt(basis, cov):
    a = sample_increment(NoiseStream(1, 0, Channel.Q1), cov, 1.0)
    b = sample_increment(NoiseStream(1, 0, Channel.Q1), cov, 0.25)
    assert h_norm(b) == pytest.approx(0.5 * h_norm(a))
