"""Ergodic estimators for the frozen equation and the two multiscale drivers.

The invariant law of the frozen equation is never stored; only ergodic
averages of functionals against it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .coupling import CouplingSpec, ModelParams, validate_assumptions
from .dynamics import IntegratorConfig, Propagator, simulate
from .fields import VelocityField
from .stochastic import Channel, CovarianceSpec, NoiseStream, _standard_from_words, derive_seed
from .stats import N_BOOT


class FitRejected(ValueError):
    pass


class StderrBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class ErgodicConfig:
    burn_in: float | None = None  # None: five mixing times
    horizon: float = 10.0
    n_rep: int = 20
    dt: float = 0.01
    warm_burn_in: float = 0.0

    def __post_init__(self):
        if self.burn_in is not None and self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if self.n_rep < 1:
            raise ValueError("n_rep must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")

    def resolved_burn_in(self, params: ModelParams) -> float:
        if self.burn_in is not None:
            return self.burn_in
        zeta = params.zeta_mix
        return 5.0 / zeta if zeta > 0 else 0.0


@dataclass(frozen=True)
class FbarEstimate:
    value: VelocityField
    stderr: np.ndarray
    stderr_re: np.ndarray
    stderr_im: np.ndarray
    burn_in_used: float
    horizon_used: float
    nonstationary: bool = False


@dataclass(frozen=True)
class ScalarEstimate:
    value: float
    stderr: float
    nonstationary: bool = False


def _frozen_propagator(basis, params, spec, cov2, dt) -> Propagator:
    return Propagator(basis, params, spec, cov2, cov2, IntegratorConfig(dt=dt))


def _stderr_parts(samples: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    n = samples.shape[axis]
    if n < 2:
        z = np.zeros(np.delete(samples.shape, axis))
        return z, z
    se_re = samples.real.std(axis=axis, ddof=1) / math.sqrt(n)
    se_im = samples.imag.std(axis=axis, ddof=1) / math.sqrt(n)
    return se_re, se_im


class FrozenEnsemble:
    """Replicas of the frozen equation for a batch of slow states.

    Rows are ``(path, replica)``; path ``i`` draws its replicas from
    ``NoiseStream(seeds[i], j, Q2BAR)``.  The state persists between calls so
    successive averages can be warm-started.
    """

    def __init__(self, prop: Propagator, seeds: Sequence[int], n_rep: int, y0: np.ndarray | None = None):
        self.prop = prop
        self.basis = prop.basis
        self.n_paths = len(seeds)
        self.n_rep = n_rep
        self.streams = [[NoiseStream(int(s), j, Channel.Q2BAR) for j in range(n_rep)] for s in seeds]
        shape = (self.n_paths, n_rep, self.basis.n_modes)
        self.y = np.zeros(shape, dtype=complex) if y0 is None else np.broadcast_to(y0, shape).astype(complex)

    def _ticks(self, rows: np.ndarray, n_ticks: int) -> np.ndarray:
        n = self.basis.n_modes
        words = np.empty((n_ticks, rows.size, self.n_rep, n), dtype=np.uint64)
        for a, i in enumerate(rows):
            for j, s in enumerate(self.streams[i]):
                words[:, a, j] = s.words(n, s.counter, n_ticks)
                s.counter += n_ticks
        return _standard_from_words(words, self.basis)

    def run(
        self,
        x: np.ndarray,
        burn_in: float,
        horizon: float,
        functional: Callable[[np.ndarray, np.ndarray], np.ndarray],
        rows: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Advance selected paths and time-average ``functional(x, y)``.

        Returns the per-replica averages over the whole window and over its two
        halves, each shaped (rows, n_rep, ...).
        """
        rows = np.arange(self.n_paths) if rows is None else np.asarray(rows)
        dt = self.prop.cfg.dt
        n_burn = int(round(burn_in / dt))
        n_avg = max(2, int(round(horizon / dt)))
        z = self._ticks(rows, n_burn + n_avg)
        xs = np.asarray(x)[:, None, :]
        y = self.y[rows]
        for k in range(n_burn):
            y = self.prop.frozen_step(y, xs, z[k], dt)
        first = second = None
        half = n_avg // 2
        for k in range(n_avg):
            val = functional(xs, y)
            if k < half:
                first = val if first is None else first + val
            else:
                second = val if second is None else second + val
            y = self.prop.frozen_step(y, xs, z[n_burn + k], dt)
        self.y[rows] = y
        total = (first + second) / n_avg
        return total, first / half, second / (n_avg - half)


def _nonstationary(first: np.ndarray, second: np.ndarray, axis: int = -2) -> bool:
    """First- and second-half means differ by more than five standard errors."""
    diff = first.mean(axis=axis) - second.mean(axis=axis)
    s1 = _stderr_parts(first, axis)
    s2 = _stderr_parts(second, axis)
    for part, a, b in ((diff.real, s1[0], s2[0]), (diff.imag, s1[1], s2[1])):
        se = np.sqrt(a ** 2 + b ** 2)
        scale = 1e-12 * (1.0 + np.abs(first).max())
        if np.any(np.abs(part) > 5 * se + scale):
            return True
    return False


def estimate_fbar(
    x: VelocityField,
    params: ModelParams,
    spec: CouplingSpec,
    cov2: CovarianceSpec,
    cfg: ErgodicConfig,
    seed: int,
    y0: VelocityField | None = None,
) -> FbarEstimate:
    """Ergodic average of ``f(x, Y)`` over the frozen dynamics at ``x``.

    Each of ``cfg.n_rep`` replicas runs on its own ``Q2BAR`` stream; the
    standard error comes from the replica spread.
    """
    validate_assumptions(params, spec, q2_max=cov2.q_max).require_averaging()
    burn = cfg.resolved_burn_in(params)
    if spec.y_independent_f:
        val = spec.f(x.coeffs, np.zeros_like(x.coeffs))
        zero = np.zeros(x.basis.n_modes)
        return FbarEstimate(VelocityField(val, x.basis), zero, zero, zero, 0.0, 0.0)
    prop = _frozen_propagator(x.basis, params, spec, cov2, cfg.dt)
    ens = FrozenEnsemble(prop, [seed], cfg.n_rep, None if y0 is None else y0.coeffs)
    total, first, second = ens.run(x.coeffs[None, :], burn, cfg.horizon, spec.f)
    per_rep = total[0]
    se_re, se_im = _stderr_parts(per_rep, 0)
    return FbarEstimate(
        VelocityField(per_rep.mean(axis=0), x.basis),
        np.sqrt(se_re ** 2 + se_im ** 2),
        se_re,
        se_im,
        burn,
        cfg.horizon,
        _nonstationary(first[0], second[0], axis=0),
    )


def invariant_moment(
    x: VelocityField,
    params: ModelParams,
    spec: CouplingSpec,
    cov2: CovarianceSpec,
    cfg: ErgodicConfig,
    seed: int,
) -> ScalarEstimate:
    """Ergodic average of ``|Y|_H^2`` under the frozen dynamics at ``x``."""
    validate_assumptions(params, spec, q2_max=cov2.q_max).require_averaging()
    prop = _frozen_propagator(x.basis, params, spec, cov2, cfg.dt)
    ens = FrozenEnsemble(prop, [seed], cfg.n_rep)

    def energy(_x, y):
        return np.sum(np.abs(y) ** 2, axis=-1)

    total, first, second = ens.run(x.coeffs[None, :], cfg.resolved_burn_in(params), cfg.horizon, energy)
    per_rep = total[0]
    se = per_rep.std(ddof=1) / math.sqrt(per_rep.size) if per_rep.size > 1 else 0.0
    d = first[0].mean() - second[0].mean()
    se_d = math.hypot(
        first[0].std(ddof=1) / math.sqrt(per_rep.size) if per_rep.size > 1 else 0.0,
        second[0].std(ddof=1) / math.sqrt(per_rep.size) if per_rep.size > 1 else 0.0,
    )
    return ScalarEstimate(float(per_rep.mean()), float(se), bool(abs(d) > 5 * se_d + 1e-12 * (1 + abs(per_rep.mean()))))


def fbar_oracle_linear(x: VelocityField, params: ModelParams, spec: CouplingSpec) -> VelocityField:
    """Exact averaged drift for the linear family: ``a x + b G x_k / (mu lambda_k + d)``."""
    if not spec.is_linear:
        raise ValueError("closed-form averaged drift needs the linear coupling family")
    if params.beta != 0:
        raise ValueError("closed-form averaged drift needs beta = 0 in the fast equation")
    return VelocityField(fbar_linear_array(x.coeffs, params, spec, x.basis.eigenvalues), x.basis)


def fbar_linear_array(x: np.ndarray, params: ModelParams, spec: CouplingSpec, eigenvalues: np.ndarray) -> np.ndarray:
    mean = spec.G * x / (params.mu * eigenvalues + spec.d)
    return spec.a * x + spec.b * mean


def ou_second_moment(x: VelocityField, params: ModelParams, spec: CouplingSpec, cov2: CovarianceSpec) -> float:
    """``sum_k q_k s2^2 / (2(mu lambda_k + d)) + |mean|^2`` for the linear family."""
    if not spec.is_linear or params.beta != 0:
        raise ValueError("closed-form second moment needs the linear family with beta = 0")
    L = params.mu * x.basis.eigenvalues + spec.d
    mean = spec.G * x.coeffs / L
    return float(np.sum(cov2.q * spec.s2 ** 2 / (2 * L)) + np.sum(np.abs(mean) ** 2))


@dataclass(frozen=True)
class DecayFit:
    rate: float
    r2: float
    ci_low: float
    ci_high: float
    times: np.ndarray = field(repr=False)
    mean_gap: np.ndarray = field(repr=False)

    @property
    def ci_width(self) -> float:
        return self.ci_high - self.ci_low


def _fit_rate(times: np.ndarray, gap: np.ndarray) -> tuple[float, float]:
    ok = gap > 0
    if ok.sum() < 3:
        raise FitRejected("gap vanished before three fit points were available")
    fit = stats.linregress(times[ok], np.log(gap[ok]))
    return -float(fit.slope), float(fit.rvalue ** 2)


def estimate_decay_rate(
    x: VelocityField,
    y1: VelocityField,
    y2: VelocityField,
    params: ModelParams,
    spec: CouplingSpec,
    cov2: CovarianceSpec,
    horizon: float,
    n_rep: int,
    seed: int,
    dt: float = 0.01,
    slowest_only: bool = False,
    n_boot: int = N_BOOT,
) -> DecayFit:
    """Exponential rate of ``E|Y^{x,y1}_t - Y^{x,y2}_t|^2`` under synchronous coupling.

    Both copies share every ``Q2BAR`` increment.  ``slowest_only`` restricts the
    gap to the modes with the smallest eigenvalue.
    """
    if np.array_equal(y1.coeffs, y2.coeffs):
        raise FitRejected("identical initial states: the paired gap is identically zero")
    prop = _frozen_propagator(x.basis, params, spec, cov2, dt)
    ens = FrozenEnsemble(prop, [seed], n_rep)
    n_steps = int(round(horizon / dt))
    z = ens._ticks(np.array([0]), n_steps)[:, 0]
    ya = np.broadcast_to(y1.coeffs, (n_rep, x.basis.n_modes)).copy()
    yb = np.broadcast_to(y2.coeffs, (n_rep, x.basis.n_modes)).copy()
    mask = x.basis.eigenvalues == x.basis.lambda1 if slowest_only else slice(None)
    gaps = np.empty((n_rep, n_steps + 1))
    gaps[:, 0] = np.sum(np.abs(ya - yb)[:, mask] ** 2, axis=-1)
    xs = x.coeffs[None, :]
    for k in range(n_steps):
        ya = prop.frozen_step(ya, xs, z[k], dt)
        yb = prop.frozen_step(yb, xs, z[k], dt)
        gaps[:, k + 1] = np.sum(np.abs(ya - yb)[:, mask] ** 2, axis=-1)
    times = dt * np.arange(n_steps + 1)
    mean_gap = gaps.mean(axis=0)
    rate, r2 = _fit_rate(times, mean_gap)
    if r2 < 0.9:
        raise FitRejected(f"log-linear fit rejected: R^2 = {r2:.3f} < 0.9")
    if n_rep > 1 and n_boot:
        res = stats.bootstrap(
            (np.arange(n_rep),),
            lambda idx: _fit_rate(times, gaps[idx.astype(int)].mean(axis=0))[0],
            vectorized=False,
            n_resamples=n_boot,
            method="percentile",
            random_state=np.random.default_rng(seed),
        )
        lo, hi = float(res.confidence_interval.low), float(res.confidence_interval.high)
    else:
        lo = hi = rate
    return DecayFit(rate, r2, min(lo, rate), max(hi, rate), times, mean_gap)


# -- multiscale drivers -------------------------------------------------------

class HMMDrift:
    """Averaged-drift provider for a batch of slow paths.

    Each path owns a warm-started frozen ensemble; the first call burns in for
    ``cfg.resolved_burn_in``, later calls for ``cfg.warm_burn_in``.  An estimate
    is reused while ``|x - x_cached| <= cache_tol * |x|`` (``cache_tol=None``
    disables caching).
    """

    def __init__(
        self,
        prop: Propagator,
        cfg: ErgodicConfig,
        seed: int,
        ids: Sequence[int],
        cache_tol: float | None = 1e-2,
        max_rel_stderr: float = 1.0,
        stderr_floor: float = 0.05,
        log_path=None,
    ):
        params, spec = prop.params, prop.spec
        validate_assumptions(params, spec, q2_max=prop.cov2.q_max).require_averaging()
        self.prop = _frozen_propagator(prop.basis, params, spec, prop.cov2, cfg.dt)
        self.spec = spec
        self.cfg = cfg
        self.burn_in = cfg.resolved_burn_in(params)
        self.cache_tol = cache_tol
        self.max_rel_stderr = max_rel_stderr
        self.stderr_floor = stderr_floor
        self.ens = FrozenEnsemble(self.prop, [derive_seed(seed, i) for i in ids], cfg.n_rep)
        n = len(ids)
        self._warm = np.zeros(n, dtype=bool)
        self._x = np.zeros((n, prop.basis.n_modes), dtype=complex)
        self._value = np.zeros_like(self._x)
        self.calls = 0
        self.refreshes = 0
        self.max_stderr = 0.0
        self.log_rows: list[tuple[float, int, float, float]] = []
        self.log_path = log_path

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        if self.spec.y_independent_f:
            return self.spec.f(x, np.zeros_like(x))
        self.calls += 1
        if self.cache_tol is None:
            stale = np.ones(len(x), dtype=bool)
        else:
            moved = np.linalg.norm(x - self._x, axis=-1)
            stale = ~self._warm | (moved > self.cache_tol * np.linalg.norm(x, axis=-1))
        rows = np.flatnonzero(stale)
        if rows.size:
            was_warm = self._warm[rows]
            for warm in (False, True):
                sel = rows[was_warm == warm]
                if sel.size:
                    self._refresh(x, sel, self.cfg.warm_burn_in if warm else self.burn_in, t)
        return self._value.copy()

    def _refresh(self, x: np.ndarray, rows: np.ndarray, burn: float, t: float) -> None:
        total, _, _ = self.ens.run(x[rows], burn, self.cfg.horizon, self.spec.f, rows)
        value = total.mean(axis=1)
        se_re, se_im = _stderr_parts(total, 1)
        se = np.sqrt(np.sum(se_re ** 2 + se_im ** 2, axis=-1))
        budget = self.max_rel_stderr * np.linalg.norm(value, axis=-1) + self.stderr_floor
        if np.any(se > budget):
            worst = int(np.argmax(se - budget))
            raise StderrBudgetExceeded(
                f"averaged-drift stderr {se[worst]:.3g} exceeds budget {budget[worst]:.3g} at t={t:g}"
            )
        self._value[rows] = value
        self._x[rows] = x[rows]
        self._warm[rows] = True
        self.refreshes += rows.size
        self.max_stderr = max(self.max_stderr, float(se.max()))
        self.log_rows.append((t, self.calls, float(se.mean()), self.cfg.horizon + burn))

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "call_index", "stderr", "horizon_used"])
            for row in self.log_rows:
                w.writerow([f"{row[0]:.6g}", row[1], f"{row[2]:.6e}", f"{row[3]:.6g}"])


class OracleDrift:
    """Closed-form averaged drift of the linear family as a provider."""

    def __init__(self, prop: Propagator):
        if not prop.spec.is_linear or prop.params.beta != 0:
            raise ValueError("closed-form averaged drift needs the linear family with beta = 0")
        self.params, self.spec, self.lam = prop.params, prop.spec, prop.basis.eigenvalues

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        return fbar_linear_array(x, self.params, self.spec, self.lam)


@dataclass
class AveragedPath:
    times: np.ndarray
    path: np.ndarray  # (n_paths, n_records, n_modes)
    flagged: np.ndarray
    fbar_calls: int
    fbar_refreshes: int
    max_stderr: float


def run_hmm_averaged(
    x0: VelocityField,
    params: ModelParams,
    spec: CouplingSpec,
    covs: tuple[CovarianceSpec, CovarianceSpec],
    T: float,
    cfg: ErgodicConfig,
    cache_tol: float | None,
    seed: int,
    ids: Sequence[int] = (0,),
    integrator: IntegratorConfig | None = None,
    record_every: int = 1,
    max_rel_stderr: float = 1.0,
    stderr_floor: float = 0.05,
    drift: Callable | None = None,
    log_path=None,
) -> AveragedPath:
    """Integrate the averaged slow equation with on-the-fly drift estimates.

    Uses the ``Q1`` streams of ``(seed, id)``, i.e. exactly the slow noise of
    the coupled run with the same seed and ids.
    """
    integrator = integrator or IntegratorConfig()
    prop = Propagator(x0.basis, params, spec, covs[0], covs[1], integrator)
    provider = drift or HMMDrift(prop, cfg, seed, ids, cache_tol, max_rel_stderr, stderr_floor)
    n_steps = int(round(T / integrator.dt))
    rec, times = [], []
    flagged = None
    for snap in simulate(prop, x0.coeffs, x0.coeffs, n_steps, seed, ids, coupled=False, fbar=provider):
        if snap.n % record_every == 0 or snap.n == n_steps:
            rec.append(snap.xbar.copy())
            times.append(snap.t)
        flagged = snap.flagged
    if log_path is not None and isinstance(provider, HMMDrift):
        provider.write_log(log_path)
    return AveragedPath(
        np.array(times),
        np.stack(rec, axis=1),
        flagged,
        getattr(provider, "calls", 0),
        getattr(provider, "refreshes", 0),
        getattr(provider, "max_stderr", 0.0),
    )


@dataclass
class KhasminskiiResult:
    times: np.ndarray
    anchors: np.ndarray  # (n_paths, n_blocks, n_modes)
    gap_series: np.ndarray  # (n_paths, n_steps + 1): |Y - Yhat|^2
    gap_integral: np.ndarray  # int_0^T |Y - Yhat|^2 dt
    increment_integral: np.ndarray  # int_0^T |X - X_{t(delta)}|^2 dt
    block_functional: np.ndarray  # |int (f(X_{s(delta)}, Yhat) - fbar(X_{s(delta)})) ds|_H at T
    flagged: np.ndarray


def block_steps_for(delta: float, dt: float) -> int:
    k = delta / dt
    if abs(k - round(k)) > 1e-6 * max(1.0, k) or round(k) < 1:
        raise ValueError(f"block length {delta:g} must be a positive multiple of dt={dt:g}")
    return int(round(k))


def run_khasminskii(
    x0: VelocityField,
    y0: VelocityField,
    params: ModelParams,
    spec: CouplingSpec,
    covs: tuple[CovarianceSpec, CovarianceSpec],
    T: float,
    delta: float,
    integrator: IntegratorConfig,
    seed: int,
    ids: Sequence[int] = (0,),
    fbar: Callable | None = None,
) -> KhasminskiiResult:
    """Coupled run plus the block-anchored auxiliary fast process on shared noise."""
    prop = Propagator(x0.basis, params, spec, covs[0], covs[1], integrator)
    dt = integrator.dt
    bs = block_steps_for(delta, dt)
    n_steps = int(round(T / dt))
    R = len(ids)
    gaps = np.zeros((R, n_steps + 1))
    inc = np.zeros(R)
    gap_int = np.zeros(R)
    anchors = []
    flagged = np.zeros(R, dtype=bool)
    f_block = None
    for snap in simulate(prop, x0.coeffs, y0.coeffs, n_steps, seed, ids, block_steps=bs, block_fbar=fbar):
        g = np.sum(np.abs(snap.y - snap.yhat) ** 2, axis=-1)
        gaps[:, snap.n] = g
        if snap.n < n_steps:
            # left-point rule on [t_n, t_{n+1}); the anchor in force is X_{t(delta)}
            gap_int += g * dt
            inc += np.sum(np.abs(snap.x - snap.x_anchor) ** 2, axis=-1) * dt
        if snap.n % bs == 0 and snap.n < n_steps:
            anchors.append(snap.x_anchor.copy())
        flagged = snap.flagged
        f_block = snap.f_block
    bf = np.linalg.norm(f_block, axis=-1) if f_block is not None else np.full(R, np.nan)
    return KhasminskiiResult(
        dt * np.arange(n_steps + 1), np.stack(anchors, axis=1), gaps, gap_int, inc, bf, flagged
    )
