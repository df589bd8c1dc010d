"""Desk-scale acceptance run: K_max=4, 24x24 grid, T=1, 200 replicates unless noted.

Each criterion prints one ``PASS``/``FAIL`` line; the lines are repeated in the
terminal summary.  Runs standalone too: ``python3 tests/test_acceptance.py``.
Total wall time is about fifteen minutes on one core.
"""
from __future__ import annotations

import time

import numpy as np
import pytest

from mscbf.averaging import ErgodicConfig
from mscbf.cli import main as cli_main
from mscbf.coupling import CouplingSpec, ModelParams
from mscbf.dynamics import IntegratorConfig
from mscbf.experiments import (
    Check,
    Model,
    exp_aux_gap,
    exp_convergence,
    exp_fbar_oracle,
    exp_mixing,
    exp_moment_bounds,
    exp_monotonicity,
    exp_time_holder,
)
from mscbf.fields import build_basis, random_field, zeros
from mscbf.stochastic import power_law_covariance

RESULTS: dict[int, str] = {}

LINEAR = CouplingSpec("linear", a=0.5, b=1, G=1, d=1, s1=1, s2=1)
TANH = CouplingSpec("tanh-diagonal", a=0.5, b=1, G=1, d=0.5, c_g=0.5, s0=1, s_x=0.2, c0=1, c_x=0.2, c_y=0.5)
# stiff slow operator with rough slow noise: the increment functional sits in its sqrt(delta) range
HOLDER = CouplingSpec("linear", a=0, b=1, G=1, d=1, s1=1, s2=1)
FINE = IntegratorConfig(dt=1e-3, fast_ratio=0.02)


def _model(spec, q1_exponent=2.0, integrator=IntegratorConfig(), **params) -> Model:
    basis = build_basis(4, 24, 3)
    cov1, cov2 = power_law_covariance(basis, q1_exponent), power_law_covariance(basis, 2.0)
    p = ModelParams(**{"mu": 1.0, "beta": 0.0, "r": 3.0, "epsilon": 0.1, **params})
    return Model(basis, p.with_coupling(spec, cov1.q_max, cov2.q_max), spec, cov1, cov2, integrator)


def _checks(report, *prefixes):
    return [c for c in report.checks if c.name.startswith(prefixes)]


def _record(number: int, title: str, checks, started: float, budget: float) -> None:
    elapsed = time.time() - started
    in_time = elapsed <= budget
    ok = bool(checks) and all(c.status == "PASS" for c in checks) and in_time
    detail = "; ".join(f"{c.name} {c.status} ({c.detail})" for c in checks)
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} {title}: {detail}; {elapsed:.0f}s of {budget:.0f}s"
    RESULTS[number] = line
    print(line)
    assert ok, line


def test_criterion_1_operator_identities():
    t = time.time()
    basis = build_basis(4, 24, 5)
    rep = exp_monotonicity(basis, ModelParams(mu=1, beta=1, r=5), (3, 4, 5), 1000, seed=0)
    _record(1, "operator identities", rep.checks, t, 60)


def test_criterion_2_ou_oracle_suite():
    t = time.time()
    m = _model(LINEAR)
    x = random_field(m.basis, np.random.default_rng(5))
    rep = exp_fbar_oracle(m, x, 100, seed=1)
    _record(2, "OU oracle suite", rep.checks, t, 300)


def test_criterion_3_mixing_bound():
    t = time.time()
    m = _model(TANH)
    assert m.report().xi > 0
    rng = np.random.default_rng(3)
    xs = [zeros(m.basis), random_field(m.basis, rng), random_field(m.basis, rng, scale=3.0)]
    rep = exp_mixing(m, xs, horizon=3, n_rep=50, seed=2)
    _record(3, "mixing bound", _checks(rep, "rate_bound"), t, 300)


def test_criterion_4_moment_uniformity():
    t = time.time()
    m = _model(TANH, beta=0.5, integrator=FINE)
    rng = np.random.default_rng(3)
    x0, y0 = random_field(m.basis, rng), random_field(m.basis, rng)
    rep = exp_moment_bounds(m, [1, 0.1, 0.01], (1,), 1.0, 200, seed=4, x0=x0, y0=y0)
    _record(4, "moment uniformity", rep.checks, t, 600)


def test_criterion_5_time_increment_scaling():
    t = time.time()
    m = _model(HOLDER, q1_exponent=0.5, mu=4.0, epsilon=0.05, integrator=FINE)
    rep = exp_time_holder(m, [0.2, 0.1, 0.05, 0.025], 1.0, 200, seed=5)
    _record(5, "time-increment scaling", rep.checks, t, 600)


def test_criterion_6_auxiliary_gap():
    t = time.time()
    m = _model(HOLDER, q1_exponent=0.5, mu=4.0, epsilon=0.05, integrator=FINE)
    rep = exp_aux_gap(m, [0.2, 0.1, 0.05, 0.025], 1.0, 200, seed=5)
    _record(6, "auxiliary gap", _checks(rep, "strictly_decreasing", "no_flagged"), t, 600)


def test_criterion_7_averaging_principle():
    t = time.time()
    ladder = [0.1, 0.01, 0.001]
    lin = _model(LINEAR, integrator=FINE)
    x0 = random_field(lin.basis, np.random.default_rng(3))
    rep_lin = exp_convergence(lin, ladder, (1, 2), 1.0, 200, seed=6, x0=x0)
    tanh = _model(TANH, integrator=FINE)
    rep_tanh = exp_convergence(
        tanh, ladder, (1, 2), 1.0, 200, seed=6, x0=x0, fbar_mode="hmm",
        ergodic=ErgodicConfig(horizon=1.0, n_rep=8, dt=0.05), cache_tol=0.05,
    )
    checks = [
        Check(f"{rep.name}.{c.name}", c.status, c.detail)
        for rep in (rep_lin, rep_tanh) for c in rep.checks
    ]
    _record(7, "averaging principle", checks, t, 1800)


_DETERMINISM_CONFIGS = {
    "time_holder": "experiment=time_holder\nmodel.mu=4\nmodel.epsilon=0.05\nnoise.q1_exponent=0.5\n"
                   "coupling.b=1\ncoupling.G=1\ncoupling.d=1\ncoupling.s1=1\ncoupling.s2=1\n"
                   "integrator.fast_ratio=0.02\nrun.n_rep=120\nrun.seed=11\n",
    "mixing": "experiment=mixing\ncoupling.family=tanh-diagonal\ncoupling.a=0.5\ncoupling.b=1\ncoupling.G=1\n"
              "coupling.d=0.5\ncoupling.c_g=0.5\ncoupling.s0=1\ncoupling.s_x=0.2\ncoupling.c0=1\n"
              "coupling.c_x=0.2\ncoupling.c_y=0.5\nrun.n_rep=60\nexp.horizon=1\nergodic.horizon=2\nrun.seed=12\n",
    "convergence": "experiment=convergence\nexp.fbar_mode=hmm\nexp.eps_ladder=0.1,0.05,0.02\nexp.p_list=1\n"
                   "coupling.family=tanh-diagonal\ncoupling.a=0.5\ncoupling.b=1\ncoupling.G=1\ncoupling.d=0.5\n"
                   "coupling.c_g=0.5\ncoupling.s0=1\ncoupling.s_x=0.2\ncoupling.c0=1\ncoupling.c_x=0.2\n"
                   "coupling.c_y=0.5\nintegrator.fast_ratio=0.02\nergodic.horizon=1\nergodic.n_rep=8\n"
                   "ergodic.dt=0.05\nrun.n_rep=51\nrun.T=0.5\nrun.seed=13\n",
}


def test_criterion_8_determinism(tmp_path):
    t = time.time()
    checks = []
    for name, text in _DETERMINISM_CONFIGS.items():
        cfg = tmp_path / f"{name}.cfg"
        cfg.write_text(text)
        csvs = []
        for tag, workers in (("a", 1), ("b", 1), ("c", 2)):
            out = tmp_path / f"{name}-{tag}"
            code = cli_main([str(cfg), "--out", str(out), "--workers", str(workers)])
            assert code in (0, 1), f"{name} exited with {code}"
            csvs.append((out / "results.csv").read_bytes())
        checks.append(Check.of(f"{name}.rerun", csvs[0] == csvs[1], "identical bytes, one worker"))
        checks.append(Check.of(f"{name}.workers", csvs[0] == csvs[2], "one vs two workers"))
    _record(8, "determinism", checks, t, 1800)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
