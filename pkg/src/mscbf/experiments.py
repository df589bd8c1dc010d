"""Monte Carlo studies turning the averaging theory into pass/fail statistics.

Every experiment is a pure function of its arguments and seed.  Realizations
are processed in fixed-size chunks of ids; workers only decide which process
runs a chunk, so results do not depend on the worker count.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np
from scipy import stats as sps

from .averaging import (
    ErgodicConfig,
    FitRejected,
    HMMDrift,
    OracleDrift,
    block_steps_for,
    estimate_decay_rate,
    invariant_moment,
    run_hmm_averaged,
)
from .coupling import CouplingSpec, ModelParams, monotonicity_constant, validate_assumptions
from .dynamics import IntegratorConfig, Propagator, simulate
from .fields import StokesBasis, VelocityField, random_field
from .stats import N_BOOT, Estimate, loglog_slope, mean_ci, strictly_decreasing
from .stochastic import CovarianceSpec

CHUNK = 50


@dataclass(frozen=True, eq=False)
class Model:
    basis: StokesBasis
    params: ModelParams
    spec: CouplingSpec
    cov1: CovarianceSpec
    cov2: CovarianceSpec
    integrator: IntegratorConfig = IntegratorConfig()

    def with_epsilon(self, epsilon: float) -> Model:
        return replace(self, params=self.params.replace(epsilon=epsilon))

    def propagator(self) -> Propagator:
        return Propagator(self.basis, self.params, self.spec, self.cov1, self.cov2, self.integrator)

    def report(self):
        return validate_assumptions(self.params, self.spec, self.cov1.q_max, self.cov2.q_max)


@dataclass(frozen=True)
class Check:
    name: str
    status: str  # PASS / FAIL / SKIP
    detail: str = ""

    @classmethod
    def of(cls, name: str, ok: bool, detail: str = "") -> Check:
        return cls(name, "PASS" if ok else "FAIL", detail)


@dataclass
class ExperimentReport:
    name: str
    columns: list[str]
    rows: list[dict[str, Any]]
    checks: list[Check]
    data: Any = None
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.status != "FAIL" for c in self.checks)


@dataclass(frozen=True)
class ConvergenceRow:
    epsilon: float
    delta: float
    p: int
    n_rep: int
    estimate: Estimate
    flagged: int
    usable: bool


@dataclass
class ConvergenceTable:
    rows: list[ConvergenceRow]

    def column(self, p: int) -> list[ConvergenceRow]:
        return sorted((r for r in self.rows if r.p == p), key=lambda r: -r.epsilon)


@dataclass
class ScalingReport:
    control: np.ndarray
    statistic: list[Estimate]
    ratio: np.ndarray
    slope: float
    residual: float

    @property
    def spread(self) -> float:
        lo = self.ratio.min()
        return float(self.ratio.max() / lo) if lo > 0 else float("inf")


# -- chunked execution --------------------------------------------------------

def chunk_ids(n_rep: int, size: int = CHUNK) -> list[list[int]]:
    return [list(range(a, min(a + size, n_rep))) for a in range(0, n_rep, size)]


def map_chunks(fn: Callable, args: tuple, n_rep: int, workers: int = 1) -> list:
    """``fn(*args, ids)`` over fixed id chunks, results in chunk order."""
    chunks = chunk_ids(n_rep)
    if workers <= 1 or len(chunks) == 1:
        return [fn(*args, ids) for ids in chunks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*[(*args, ids) for ids in chunks])))


def _stack(results: list, key: str) -> np.ndarray:
    return np.concatenate([r[key] for r in results], axis=0)


def _fmt(x: float) -> str:
    return f"{x:.6g}"


# -- operator identities ------------------------------------------------------

def _operator_G(basis: StokesBasis, u: np.ndarray, mu: float, beta: float, r: float) -> np.ndarray:
    out = mu * basis.eigenvalues * u + basis.self_convection(u)
    if beta:
        out = out + beta * basis.damping(u, r)
    return out


def _re_inner(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.real(np.sum(a * np.conj(b), axis=-1))


def sample_pairs(basis: StokesBasis, n: int, seed: int, scale_range=(0.1, 3.0)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Three batches of V-regular real fields with log-uniform random scales."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(3):
        f = random_field(basis, rng, (n,)).coeffs
        s = np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), size=(n, 1)))
        out.append(f * s)
    return tuple(out)


def exp_monotonicity(
    basis: StokesBasis,
    params: ModelParams,
    r_list: Sequence[float] = (3, 4, 5),
    n_samples: int = 1000,
    seed: int = 0,
    batch: int = 250,
) -> ExperimentReport:
    """Worst margins of the convection cancellation, damping and monotonicity inequalities.

    ``params.mu``/``params.beta`` are used for the shifted (r > 3) and global
    (r = 3, 2 beta mu >= 1) monotonicity checks.
    """
    mu, beta = params.mu, params.beta
    worst: dict[tuple[str, float], float] = {}

    def note(name: str, r: float, vals: np.ndarray, larger_is_worse: bool) -> None:
        v = float(vals.max() if larger_is_worse else vals.min())
        key = (name, r)
        if key not in worst:
            worst[key] = v
        else:
            worst[key] = max(worst[key], v) if larger_is_worse else min(worst[key], v)

    lam = basis.eigenvalues
    for start in range(0, n_samples, batch):
        n = min(batch, n_samples - start)
        u, v, w = sample_pairs(basis, n, seed + start)
        hu = np.sqrt(_re_inner(u, u))
        vv = np.sqrt(np.sum(lam * np.abs(v) ** 2, axis=-1))
        vw = np.sqrt(np.sum(lam * np.abs(w) ** 2, axis=-1))
        Buv = basis.convection(u, v)
        note("trilinear", 0, np.abs(_re_inner(Buv, v)) / ((1 + hu) * (1 + vv) ** 2), True)
        Buw = basis.convection(u, w)
        anti = np.abs(_re_inner(Buv, w) + _re_inner(Buw, v)) / ((1 + hu) * (1 + vv) * (1 + vw))
        note("antisymmetry", 0, anti, True)
        d = u - v
        hd2 = _re_inner(d, d)
        for r in r_list:
            Cu, Cv = basis.damping(u, r), basis.damping(v, r)
            lhs = _re_inner(Cu - Cv, d)
            note("damping", r, lhs - 2.0 ** (-(r - 1)) * basis.lp_norm(d, r + 1) ** (r + 1), False)
            if beta > 0 and (r > 3 or (r == 3 and 2 * beta * mu >= 1)):
                Gd = _operator_G(basis, u, mu, beta, r) - _operator_G(basis, v, mu, beta, r)
                eta = monotonicity_constant(params.replace(r=r)) if r > 3 else 0.0
                name = "shifted-monotone" if r > 3 else "global-monotone"
                note(name, r, _re_inner(Gd, d) + eta * hd2, False)

    limits = {"trilinear": 1e-10, "antisymmetry": 1e-10, "damping": -1e-8, "shifted-monotone": -1e-8, "global-monotone": -1e-8}
    rows, checks = [], []
    for (name, r), val in sorted(worst.items()):
        lim = limits[name]
        ok = val <= lim if name in ("trilinear", "antisymmetry") else val >= lim
        eta = monotonicity_constant(params.replace(r=r)) if name == "shifted-monotone" else 0.0
        rows.append({"check": name, "r": _fmt(r), "worst": f"{val:.6e}", "limit": f"{lim:.0e}", "eta": _fmt(eta), "n_samples": n_samples})
        checks.append(Check.of(f"{name}" + (f"[r={r:g}]" if r else ""), ok, f"worst={val:.3e} limit={lim:.0e}"))
    return ExperimentReport("monotonicity", ["check", "r", "worst", "limit", "eta", "n_samples"], rows, checks, worst)


# -- mixing of the frozen equation --------------------------------------------

def exp_mixing(
    model: Model,
    x_list: Sequence[VelocityField],
    horizon: float = 3.0,
    n_rep: int = 50,
    seed: int = 0,
    dt: float = 0.01,
    ergodic: ErgodicConfig | None = None,
    y_scale: float = 1.0,
    n_boot: int = N_BOOT,
) -> ExperimentReport:
    """Synchronous-coupling decay rate and invariant second moment at several ``x``."""
    rep = model.report()
    zeta = rep.zeta_mix
    ergodic = ergodic or ErgodicConfig(horizon=20.0, n_rep=20, dt=dt)
    params = model.params.with_coupling(model.spec, model.cov1.q_max, model.cov2.q_max)
    rng = np.random.default_rng(seed)
    y1 = random_field(model.basis, rng, scale=y_scale)
    y2 = -1.0 * y1
    rows, checks, fits, moments = [], [], [], []
    for i, x in enumerate(x_list):
        try:
            fit = estimate_decay_rate(x, y1, y2, params, model.spec, model.cov2, horizon, n_rep, seed + 1000 * i, dt, n_boot=n_boot)
        except FitRejected as exc:
            checks.append(Check(f"decay_fit[x{i}]", "FAIL", str(exc)))
            fits.append(None)
            continue
        m = invariant_moment(x, params, model.spec, model.cov2, ergodic, seed + 1000 * i + 1)
        fits.append(fit)
        moments.append((float(np.linalg.norm(x.coeffs)) ** 2, m))
        ok = fit.rate >= zeta - fit.ci_width
        rows.append(
            {
                "x_index": i,
                "x_norm2": _fmt(float(np.linalg.norm(x.coeffs)) ** 2),
                "rate": _fmt(fit.rate),
                "rate_ci_low": _fmt(fit.ci_low),
                "rate_ci_high": _fmt(fit.ci_high),
                "r2": _fmt(fit.r2),
                "zeta_mix": _fmt(zeta),
                "moment": _fmt(m.value),
                "moment_stderr": _fmt(m.stderr),
                "nonstationary": int(m.nonstationary),
            }
        )
        checks.append(Check.of(f"rate_bound[x{i}]", ok, f"rate={fit.rate:.4f} >= zeta_mix - ci_width = {zeta - fit.ci_width:.4f}"))
    good = [f for f in fits if f is not None]
    if len(good) >= 2:
        lo = max(f.ci_low for f in good)
        hi = min(f.ci_high for f in good)
        spread = max(f.rate for f in good) / min(f.rate for f in good)
        checks.append(Check.of("rate_x_independent", lo <= hi or spread <= 1.1, f"rate spread {spread:.3f}"))
    if len(moments) >= 2:
        (n0, m0), (n1, m1) = min(moments, key=lambda t: t[0]), max(moments, key=lambda t: t[0])
        checks.append(Check.of("moment_grows_with_x", m0.value <= m1.value + 3 * math.hypot(m0.stderr, m1.stderr), f"{m0.value:.4g} <= {m1.value:.4g}"))
    cols = ["x_index", "x_norm2", "rate", "rate_ci_low", "rate_ci_high", "r2", "zeta_mix", "moment", "moment_stderr", "nonstationary"]
    return ExperimentReport("mixing", cols, rows, checks, fits)


# -- moment bounds ------------------------------------------------------------

def _chunk_moments(model: Model, x0: np.ndarray, y0: np.ndarray, T: float, p_list, seed: int, ids):
    prop = model.propagator()
    n_steps = int(round(T / model.integrator.dt))
    R = len(ids)
    sup_x = np.zeros((R, len(p_list)))
    ey = np.zeros((R, n_steps + 1, len(p_list)))
    flagged = None
    for snap in simulate(prop, x0, y0, n_steps, seed, ids):
        hx = np.sum(np.abs(snap.x) ** 2, axis=-1)
        hy = np.sum(np.abs(snap.y) ** 2, axis=-1)
        for j, p in enumerate(p_list):
            sup_x[:, j] = np.maximum(sup_x[:, j], hx ** p)
            ey[:, snap.n, j] = hy ** p
        flagged = snap.flagged
    return {"sup_x": sup_x, "y": ey, "flagged": flagged}


def _sup_mean_ci(series: np.ndarray, seed: int) -> Estimate:
    """``sup_t E[series]`` over rows with a bootstrap interval (rows resampled)."""
    stat = float(series.mean(axis=0).max())
    n = series.shape[0]
    if n < 2:
        return Estimate(stat, 0.0, stat, stat, n)
    res = sps.bootstrap(
        (np.arange(n),),
        lambda idx: series[idx.astype(int)].mean(axis=0).max(),
        vectorized=False,
        n_resamples=N_BOOT,
        method="percentile",
        random_state=np.random.default_rng(seed),
    )
    lo, hi = float(res.confidence_interval.low), float(res.confidence_interval.high)
    return Estimate(stat, float(np.nan), min(lo, stat), max(hi, stat), n)


def exp_moment_bounds(
    model: Model,
    eps_ladder: Sequence[float],
    p_list: Sequence[int] = (1,),
    T: float = 1.0,
    n_rep: int = 200,
    seed: int = 0,
    x0: VelocityField | None = None,
    y0: VelocityField | None = None,
    factor: float = 3.0,
    workers: int = 1,
) -> ExperimentReport:
    """``E sup_t |X|^{2p}`` and ``sup_t E|Y|^{2p}`` across an epsilon ladder."""
    basis = model.basis
    x0c = np.zeros(basis.n_modes, complex) if x0 is None else x0.coeffs
    y0c = np.zeros(basis.n_modes, complex) if y0 is None else y0.coeffs
    rows, checks = [], []
    stats_by_p: dict[int, list[tuple[float, float]]] = {p: [] for p in p_list}
    total_flagged = 0
    for eps in eps_ladder:
        m = model.with_epsilon(eps)
        res = map_chunks(_chunk_moments, (m, x0c, y0c, T, tuple(p_list), seed), n_rep, workers)
        flagged = _stack(res, "flagged")
        keep = ~flagged
        total_flagged += int(flagged.sum())
        sup_x, ys = _stack(res, "sup_x")[keep], _stack(res, "y")[keep]
        for j, p in enumerate(p_list):
            ex = mean_ci(sup_x[:, j], seed)
            ey = _sup_mean_ci(ys[:, :, j], seed)
            stats_by_p[p].append((ex.mean, ey.mean))
            rows.append(
                {
                    "epsilon": _fmt(eps), "p": p, "n_rep": int(keep.sum()), "flagged": int(flagged.sum()),
                    "E_sup_X": _fmt(ex.mean), "E_sup_X_ci_low": _fmt(ex.ci_low), "E_sup_X_ci_high": _fmt(ex.ci_high),
                    "sup_E_Y": _fmt(ey.mean), "sup_E_Y_ci_low": _fmt(ey.ci_low), "sup_E_Y_ci_high": _fmt(ey.ci_high),
                }
            )
    for p, vals in stats_by_p.items():
        for k, name in ((0, "X"), (1, "Y")):
            v = np.array([t[k] for t in vals])
            if np.all(v == 0):
                checks.append(Check.of(f"uniform_{name}[p={p}]", True, "all moments zero"))
                continue
            ratio = v.max() / v.min() if v.min() > 0 else np.inf
            checks.append(Check.of(f"uniform_{name}[p={p}]", ratio <= factor, f"max/min={ratio:.3f} <= {factor:g}"))
    checks.append(Check.of("no_flagged_paths", total_flagged == 0, f"flagged={total_flagged}"))
    cols = ["epsilon", "p", "n_rep", "flagged", "E_sup_X", "E_sup_X_ci_low", "E_sup_X_ci_high", "sup_E_Y", "sup_E_Y_ci_low", "sup_E_Y_ci_high"]
    return ExperimentReport("moment_bounds", cols, rows, checks, stats_by_p)


# -- time-increment and auxiliary-gap scaling ---------------------------------

def _chunk_increments(model: Model, x0, y0, T, block_list, seed, ids):
    prop = model.propagator()
    dt = model.integrator.dt
    n_steps = int(round(T / dt))
    R = len(ids)
    acc = np.zeros((R, len(block_list)))
    anchors = [None] * len(block_list)
    flagged = None
    for snap in simulate(prop, x0, y0, n_steps, seed, ids):
        for j, bs in enumerate(block_list):
            if snap.n % bs == 0:
                anchors[j] = snap.x.copy()
            if snap.n < n_steps:
                acc[:, j] += np.sum(np.abs(snap.x - anchors[j]) ** 2, axis=-1) * dt
        flagged = snap.flagged
    return {"stat": acc, "flagged": flagged}


def _chunk_aux(model: Model, x0, y0, T, block_steps, seed, ids):
    prop = model.propagator()
    n_steps = int(round(T / model.integrator.dt))
    dt = model.integrator.dt
    gap = np.zeros(len(ids))
    flagged = None
    for snap in simulate(prop, x0, y0, n_steps, seed, ids, block_steps=block_steps):
        if snap.n < n_steps:
            gap += np.sum(np.abs(snap.y - snap.yhat) ** 2, axis=-1) * dt
        flagged = snap.flagged
    return {"stat": gap, "flagged": flagged}


def _scaling(control: np.ndarray, samples: list[np.ndarray], seed: int) -> ScalingReport:
    ests = [mean_ci(s, seed + i) for i, s in enumerate(samples)]
    means = np.array([e.mean for e in ests])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = means / np.sqrt(control)
    fit = loglog_slope(control, means)
    return ScalingReport(control, ests, ratio, fit.slope, fit.residual)


def _scaling_rows(rep: ScalingReport, name: str, flagged: int) -> list[dict]:
    return [
        {
            name: _fmt(c), "statistic": f"{e.mean:.6e}", "ci_low": f"{e.ci_low:.6e}", "ci_high": f"{e.ci_high:.6e}",
            "ratio_sqrt": f"{r:.6e}", "n_rep": e.n, "flagged": flagged,
        }
        for c, e, r in zip(rep.control, rep.statistic, rep.ratio)
    ]


def exp_time_holder(
    model: Model,
    delta_ladder: Sequence[float],
    T: float = 1.0,
    n_rep: int = 200,
    seed: int = 0,
    x0: VelocityField | None = None,
    y0: VelocityField | None = None,
    max_spread: float = 2.0,
    min_slope: float = 0.45,
    workers: int = 1,
) -> ExperimentReport:
    """``E int_0^T |X_t - X_{t(delta)}|^2 dt`` for every block length, from one set of paths."""
    basis = model.basis
    x0c = np.zeros(basis.n_modes, complex) if x0 is None else x0.coeffs
    y0c = np.zeros(basis.n_modes, complex) if y0 is None else y0.coeffs
    blocks = tuple(block_steps_for(d, model.integrator.dt) for d in delta_ladder)
    res = map_chunks(_chunk_increments, (model, x0c, y0c, T, blocks, seed), n_rep, workers)
    flagged = _stack(res, "flagged")
    stat = _stack(res, "stat")[~flagged]
    deltas = np.asarray(delta_ladder, float)
    rep = _scaling(deltas, [stat[:, j] for j in range(len(deltas))], seed)
    checks = []
    if len(deltas) >= 3:
        checks.append(Check.of("ratio_bounded", rep.spread <= max_spread, f"max/min ratio={rep.spread:.3f} <= {max_spread:g}"))
        checks.append(Check.of("loglog_slope", rep.slope >= min_slope, f"slope={rep.slope:.3f} >= {min_slope:g}"))
    checks.append(Check.of("no_flagged_paths", not flagged.any(), f"flagged={int(flagged.sum())}"))
    cols = ["delta", "statistic", "ci_low", "ci_high", "ratio_sqrt", "n_rep", "flagged"]
    return ExperimentReport("time_holder", cols, _scaling_rows(rep, "delta", int(flagged.sum())), checks, rep)


def exp_aux_gap(
    model: Model,
    delta_ladder: Sequence[float],
    T: float = 1.0,
    n_rep: int = 200,
    seed: int = 0,
    x0: VelocityField | None = None,
    y0: VelocityField | None = None,
    ratio_factor: float = 2.0,
    workers: int = 1,
) -> ExperimentReport:
    """``E int_0^T |Y_t - Yhat_t|^2 dt`` per block length on paired noise."""
    basis = model.basis
    x0c = np.zeros(basis.n_modes, complex) if x0 is None else x0.coeffs
    y0c = np.zeros(basis.n_modes, complex) if y0 is None else y0.coeffs
    deltas = np.asarray(sorted(delta_ladder, reverse=True), float)
    samples, n_flag = [], 0
    for d in deltas:
        bs = block_steps_for(d, model.integrator.dt)
        res = map_chunks(_chunk_aux, (model, x0c, y0c, T, bs, seed), n_rep, workers)
        flagged = _stack(res, "flagged")
        n_flag += int(flagged.sum())
        samples.append(_stack(res, "stat")[~flagged])
    rep = _scaling(deltas, samples, seed)
    checks = [Check.of("strictly_decreasing", strictly_decreasing(rep.statistic), "CI-separated across the ladder")]
    if rep.ratio[0] > 0:
        growth = float(rep.ratio[-1] / rep.ratio[0])
        checks.append(Check.of("ratio_bounded", growth <= ratio_factor, f"ratio(smallest)/ratio(largest)={growth:.3f} <= {ratio_factor:g}"))
    checks.append(Check.of("no_flagged_paths", n_flag == 0, f"flagged={n_flag}"))
    cols = ["delta", "statistic", "ci_low", "ci_high", "ratio_sqrt", "n_rep", "flagged"]
    return ExperimentReport("aux_gap", cols, _scaling_rows(rep, "delta", n_flag), checks, rep)


# -- averaging principle ------------------------------------------------------

def _chunk_averaged(model: Model, x0, T, mode, ergodic, cache_tol, seed, ids):
    prop = model.propagator()
    if mode == "oracle":
        drift = OracleDrift(prop)
    else:
        drift = HMMDrift(prop, ergodic, seed, ids, cache_tol)
    path = run_hmm_averaged(
        VelocityField(x0, model.basis), model.params, model.spec, (model.cov1, model.cov2), T,
        ergodic, cache_tol, seed, ids, model.integrator, drift=drift,
    )
    return {"path": path.path, "flagged": path.flagged, "calls": getattr(drift, "calls", 0), "max_stderr": getattr(drift, "max_stderr", 0.0)}


def _chunk_gap(model: Model, x0, y0, T, xbar_path, p_list, block_steps, seed, ids):
    prop = model.propagator()
    n_steps = int(round(T / model.integrator.dt))
    R = len(ids)
    sup = np.zeros((R, len(p_list)))
    aux = np.zeros(R)
    flagged = None
    for snap in simulate(prop, x0, y0, n_steps, seed, ids, block_steps=block_steps):
        d2 = np.sum(np.abs(snap.x - xbar_path[:, snap.n]) ** 2, axis=-1)
        for j, p in enumerate(p_list):
            sup[:, j] = np.maximum(sup[:, j], d2 ** p)
        if snap.n < n_steps:
            aux += np.sum(np.abs(snap.y - snap.yhat) ** 2, axis=-1) * model.integrator.dt
        flagged = snap.flagged
    return {"sup": sup, "aux": aux, "flagged": flagged}


def _chunk_convergence(model: Model, x0, y0, T, eps_ladder, p_list, mode, ergodic, cache_tol, seed, ids):
    """Averaged path once per chunk, then the coupled run for every epsilon."""
    avg = _chunk_averaged(model, x0, T, mode, ergodic, cache_tol, seed, ids)
    out = {"avg_flagged": avg["flagged"], "calls": avg["calls"], "max_stderr": avg["max_stderr"]}
    for eps in eps_ladder:
        m = model.with_epsilon(eps)
        bs = max(1, int(round(eps ** (2.0 / 3.0) / model.integrator.dt)))
        out[eps] = _chunk_gap(m, x0, y0, T, avg["path"], p_list, bs, seed, ids)
    return out


def exp_convergence(
    model: Model,
    eps_ladder: Sequence[float],
    p_list: Sequence[int] = (1, 2),
    T: float = 1.0,
    n_rep: int = 200,
    seed: int = 0,
    x0: VelocityField | None = None,
    y0: VelocityField | None = None,
    fbar_mode: str = "oracle",
    ergodic: ErgodicConfig | None = None,
    cache_tol: float | None = None,
    workers: int = 1,
) -> ExperimentReport:
    """``E sup_t |X^eps - Xbar|^{2p}`` with shared slow noise across an epsilon ladder.

    ``fbar_mode`` is ``"oracle"`` (closed form, linear family) or ``"hmm"``
    (on-the-fly ergodic estimates).  The block length ``delta = eps^(2/3)``
    (rounded to the step grid) drives an auxiliary process whose gap is
    reported alongside.
    """
    if len(eps_ladder) < 3:
        raise ValueError("the convergence study needs at least three epsilon values")
    if fbar_mode not in ("oracle", "hmm"):
        raise ValueError("fbar_mode must be 'oracle' or 'hmm'")
    model.report().require_averaging()
    ergodic = ergodic or ErgodicConfig(horizon=1.0, n_rep=8, dt=0.05)
    basis = model.basis
    x0c = np.zeros(basis.n_modes, complex) if x0 is None else x0.coeffs
    y0c = np.zeros(basis.n_modes, complex) if y0 is None else y0.coeffs
    eps_sorted = sorted(eps_ladder, reverse=True)
    res = map_chunks(
        _chunk_convergence,
        (model, x0c, y0c, T, tuple(eps_sorted), tuple(p_list), fbar_mode, ergodic, cache_tol, seed),
        n_rep,
        workers,
    )
    avg_flag = np.concatenate([r["avg_flagged"] for r in res])
    rows, table = [], []
    for eps in eps_sorted:
        flagged = np.concatenate([r[eps]["flagged"] for r in res]) | avg_flag
        keep = ~flagged
        sup = np.concatenate([r[eps]["sup"] for r in res])[keep]
        aux = np.concatenate([r[eps]["aux"] for r in res])[keep]
        delta = eps ** (2.0 / 3.0)
        usable = flagged.mean() <= 0.05
        for j, p in enumerate(p_list):
            est = mean_ci(sup[:, j], seed + j)
            table.append(ConvergenceRow(eps, delta, p, int(keep.sum()), est, int(flagged.sum()), usable))
            rows.append(
                {
                    "epsilon": _fmt(eps), "delta": _fmt(delta), "p": p, "n_rep": int(keep.sum()),
                    "estimate": f"{est.mean:.6e}", "ci_low": f"{est.ci_low:.6e}", "ci_high": f"{est.ci_high:.6e}",
                    "flagged": int(flagged.sum()), "usable": int(usable), "aux_gap": f"{aux.mean():.6e}",
                }
            )
    tab = ConvergenceTable(table)
    checks = []
    for p in p_list:
        col = tab.column(p)
        checks.append(Check.of(f"strictly_decreasing[p={p}]", strictly_decreasing([r.estimate for r in col]), "CI-separated"))
        fit = loglog_slope([r.epsilon for r in col], [r.estimate.mean for r in col])
        checks.append(Check.of(f"loglog_slope[p={p}]", bool(fit.slope > 0), f"slope={fit.slope:.3f} > 0"))
    checks.append(Check.of("rows_usable", all(r.usable for r in table), "<= 5% flagged per row"))
    cols = ["epsilon", "delta", "p", "n_rep", "estimate", "ci_low", "ci_high", "flagged", "usable", "aux_gap"]
    rep = ExperimentReport(f"convergence[{fbar_mode}]", cols, rows, checks, tab)
    if fbar_mode == "hmm":
        rep.warnings.append(f"averaged-drift calls per chunk: {[r['calls'] for r in res]}; max stderr {max(r['max_stderr'] for r in res):.3g}")
    return rep


# -- closed-form oracle suite for the linear family ---------------------------

def exp_fbar_oracle(
    model: Model,
    x: VelocityField,
    repetitions: int = 100,
    ergodic: ErgodicConfig | None = None,
    seed: int = 0,
    decay_horizon: float = 2.0,
    min_coverage: float = 0.99,
) -> ExperimentReport:
    """Drift estimator, second moment and decay rate against their Ornstein-Uhlenbeck closed forms.

    Coverage counts every real coordinate (real and imaginary part of each
    positive mode) of every repetition that lies within three standard errors.
    """
    from .averaging import estimate_fbar, fbar_oracle_linear, ou_second_moment
    from .fields import zeros

    params = model.params.with_coupling(model.spec, model.cov1.q_max, model.cov2.q_max)
    spec, basis = model.spec, model.basis
    ergodic = ergodic or ErgodicConfig(horizon=10.0, n_rep=40, dt=0.05)
    oracle = fbar_oracle_linear(x, params, spec).coeffs
    pos = basis.positive_modes
    hits = np.zeros((2, pos.size))
    for k in range(repetitions):
        est = estimate_fbar(x, params, spec, model.cov2, ergodic, seed + k)
        d = est.value.coeffs - oracle
        hits[0] += np.abs(d.real[pos]) <= 3 * est.stderr_re[pos]
        hits[1] += np.abs(d.imag[pos]) <= 3 * est.stderr_im[pos]
    coverage = float(hits.sum() / (hits.size * repetitions))
    worst_coord = float(hits.min() / repetitions)

    m = invariant_moment(x, params, spec, model.cov2, ergodic, seed + repetitions)
    m_true = ou_second_moment(x, params, spec, model.cov2)
    rng = np.random.default_rng(seed)
    y1 = random_field(basis, rng)
    fit = estimate_decay_rate(x, y1, zeros(basis), params, spec, model.cov2, decay_horizon, 10, seed, ergodic.dt, slowest_only=True)
    rate_true = 2 * (params.mu * basis.lambda1 + spec.d)
    rel = abs(fit.rate - rate_true) / rate_true

    rows = [
        {"quantity": "fbar_coverage", "estimate": _fmt(coverage), "oracle": _fmt(min_coverage), "stderr": "", "detail": f"worst coordinate {worst_coord:.2f}"},
        {"quantity": "second_moment", "estimate": _fmt(m.value), "oracle": _fmt(m_true), "stderr": _fmt(m.stderr), "detail": ""},
        {"quantity": "decay_rate", "estimate": _fmt(fit.rate), "oracle": _fmt(rate_true), "stderr": "", "detail": f"R2={fit.r2:.4f}"},
    ]
    checks = [
        Check.of("fbar_within_3_stderr", coverage >= min_coverage, f"coverage={coverage:.4f} over {repetitions} repetitions"),
        Check.of("second_moment_within_3_stderr", abs(m.value - m_true) <= 3 * m.stderr, f"{m.value:.4f} vs {m_true:.4f} (se {m.stderr:.4f})"),
        Check.of("decay_rate_within_10pct", rel <= 0.10, f"rate={fit.rate:.4f} vs {rate_true:.4f}"),
    ]
    return ExperimentReport("fbar_oracle", ["quantity", "estimate", "oracle", "stderr", "detail"], rows, checks)
