"""Structural invariants checked on randomly drawn fields and parameters."""
import numpy as np
from hypothesis import given, settings, strategies as st

from mscbf.config import SCHEMA, RunConfig, loads
from mscbf.coupling import CouplingSpec, eval_coupling, saturate
from mscbf.fields import (
    apply_convection,
    apply_damping,
    build_basis,
    h_norm,
    inner,
    leray_project,
    random_field,
    v_norm,
)
from mscbf.stochastic import Channel, NoiseStream, power_law_covariance, sample_increment

BASIS = build_basis(3, 24, 5)
COV = power_law_covariance(BASIS, 1.0)

seeds = st.integers(0, 2**32 - 1)
scales = st.floats(0.01, 10.0)
coef = st.floats(-3.0, 3.0, allow_nan=False)


def field(seed, scale=1.0, exponent=0.5):
    return random_field(BASIS, np.random.default_rng(seed), exponent=exponent, scale=scale)


@settings(max_examples=40, deadline=None)
@given(seeds, seeds, scales)
def test_convection_conserves_energy(s1, s2, scale):
    u, v = field(s1, scale), field(s2)
    b = apply_convection(u, v)
    assert abs(inner(b, v)) <= 1e-10 * (1 + h_norm(b) * h_norm(v))


@settings(max_examples=40, deadline=None)
@given(seeds, seeds, seeds)
def test_convection_is_antisymmetric_in_last_two_slots(s1, s2, s3):
    u, v, w = field(s1), field(s2), field(s3)
    lhs = inner(apply_convection(u, v), w)
    rhs = -inner(apply_convection(u, w), v)
    assert np.isclose(lhs, rhs, rtol=1e-9, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(seeds, seeds, scales, st.sampled_from([1.0, 2.0, 3.0, 4.0, 5.0]))
def test_damping_is_monotone(s1, s2, scale, r):
    u, v = field(s1, scale), field(s2, scale)
    gap = inner(apply_damping(u, r) - apply_damping(v, r), u - v)
    assert gap >= -1e-9 * (1 + h_norm(u - v) ** 2)


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(-1.0, 3.0))
def test_poincare_inequality(seed, exponent):
    u = field(seed, exponent=exponent)
    assert v_norm(u) ** 2 >= BASIS.lambda1 * h_norm(u) ** 2 * (1 - 1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_leray_projection_is_idempotent(seed):
    u = field(seed)
    once = leray_project(u.to_grid(), BASIS)
    assert np.allclose(once.coeffs, u.coeffs, atol=1e-12)
    # projecting an arbitrary grid field twice changes nothing the second time
    w = np.random.default_rng(seed).standard_normal(u.to_grid().shape)
    p1 = leray_project(w, BASIS)
    p2 = leray_project(p1.to_grid(), BASIS)
    assert np.allclose(p1.coeffs, p2.coeffs, atol=1e-12)


@given(
    st.complex_numbers(max_magnitude=50, allow_nan=False, allow_infinity=False),
    st.complex_numbers(max_magnitude=50, allow_nan=False, allow_infinity=False),
)
def test_saturation_is_one_lipschitz_and_commutes_with_conjugation(z, w):
    tz, tw = saturate(np.array([z])), saturate(np.array([w]))
    assert abs(tz - tw)[0] <= abs(z - w) + 1e-12
    assert np.allclose(saturate(np.conj(np.array([z]))), np.conj(tz))


@settings(max_examples=40, deadline=None)
@given(coef, coef, st.floats(0.0, 3.0), coef, seeds, seeds, seeds)
def test_fast_drift_one_sided_bound(G, c_g, d, a, sx, sy1, sy2):
    spec = CouplingSpec("tanh-diagonal", a=a, G=G, d=d, c_g=c_g)
    x, y1, y2 = field(sx, 3.0), field(sy1, 3.0), field(sy2, 3.0)
    lhs = inner(eval_coupling(spec, "g", x, y1) - eval_coupling(spec, "g", x, y2), y1 - y2)
    assert lhs <= spec.L_g() * h_norm(y1 - y2) ** 2 + 1e-10


_ROUND_TRIP_KEYS = {
    "model.epsilon": st.floats(1e-6, 1.0),
    "model.mu": st.floats(0.1, 10.0),
    "model.delta": st.one_of(st.none(), st.floats(1e-4, 1.0)),
    "run.seed": st.integers(0, 2**63 - 1),
    "run.n_rep": st.integers(1, 10_000),
    "integrator.convection": st.booleans(),
    "exp.eps_ladder": st.lists(st.floats(1e-5, 1.0), min_size=1, max_size=5).map(tuple),
    "exp.p_list": st.lists(st.integers(1, 8), min_size=1, max_size=4).map(tuple),
    "output.dir": st.from_regex(r"[a-z][a-z0-9_/]{0,20}", fullmatch=True),
}


@settings(max_examples=60, deadline=None)
@given(st.fixed_dictionaries({}, optional=_ROUND_TRIP_KEYS))
def test_config_dump_and_reload_round_trip(values):
    cfg = RunConfig({"experiment": "time_holder", **values})
    back = loads(cfg.dumps())
    assert back == cfg
    assert back.dumps() == cfg.dumps()
    assert set(back.effective()) == set(SCHEMA)


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(0, 10_000), st.sampled_from(list(Channel)), st.floats(1e-6, 1.0))
def test_noise_increment_is_real_and_replayable(seed, rid, channel, dt):
    a = sample_increment(NoiseStream(seed, rid, channel), COV, dt)
    b = sample_increment(NoiseStream(seed, rid, channel), COV, dt)
    assert a.is_real()
    assert np.array_equal(a.coeffs, b.coeffs)
