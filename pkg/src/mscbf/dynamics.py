"""Time integrators for the coupled, frozen, auxiliary and averaged systems.

All steppers work on coefficient arrays with a leading realization axis.  The
linear Stokes part (plus the fast dissipation ``d``) is integrated exactly per
mode; the convection and damping terms are explicit and tamed; the Lipschitz
couplings are explicit and untamed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Sequence

import numpy as np

from .coupling import CouplingSpec, ModelParams, validate_assumptions
from .fields import StokesBasis, VelocityField, check_same_basis
from .stochastic import Channel, CovarianceSpec, NoiseBatch, NoiseStream, standard_ticks

SCHEMES = ("exponential-tamed", "semi-implicit-linear")


class BlowUpError(RuntimeError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    dt_fast: float | None = None  # absolute micro step; overrides fast_ratio
    fast_ratio: float = 1e-3  # micro step as a multiple of epsilon
    scheme: str = "exponential-tamed"
    taming: float = 1.0
    blowup: float = 1e6
    convection: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.dt_fast is not None and not self.dt_fast > 0:
            raise ValueError("dt_fast must be > 0")
        if not self.fast_ratio > 0:
            raise ValueError("fast_ratio must be > 0")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.taming < 0:
            raise ValueError("taming strength must be >= 0")

    def substeps(self, epsilon: float) -> int:
        """Fast micro-steps per macro step."""
        h = self.dt_fast if self.dt_fast is not None else epsilon * self.fast_ratio
        return max(1, math.ceil(self.dt / h - 1e-9))

    def replace(self, **kw) -> IntegratorConfig:
        return replace(self, **kw)


@dataclass(frozen=True)
class CoupledState:
    x: VelocityField
    y: VelocityField
    t: float = 0.0

    def __post_init__(self):
        check_same_basis(self.x, self.y)


def _row_norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(a) ** 2, axis=-1))


def _tame(n: np.ndarray, h: float, theta: float) -> np.ndarray:
    if theta == 0:
        return n
    return n / (1.0 + theta * h * _row_norm(n))[..., None]


@dataclass(frozen=True, eq=False)
class _Linear:
    """Per-mode factors of one linear step ``du = -L u dt + ...`` of length ``h``."""

    decay: np.ndarray
    phi: np.ndarray
    noise: np.ndarray  # multiplies sqrt(h q) z

    @classmethod
    def build(cls, L: np.ndarray, h: float, scheme: str) -> _Linear:
        if scheme == "semi-implicit-linear":
            inv = 1.0 / (1.0 + L * h)
            return cls(inv, h * inv, inv)
        Lh = L * h
        decay = np.exp(-Lh)
        phi = -np.expm1(-Lh) / L
        noise = np.sqrt(-np.expm1(-2 * Lh) / (2 * Lh))
        return cls(decay, phi, noise)


class Propagator:
    """Precomputed stepping factors for one model configuration.

    ``slow_step`` advances the slow variable by ``dt`` given the coupling drift
    already evaluated; ``fast_substep`` advances a fast variable by one micro
    step of fast time ``tau`` with the slow argument held fixed.
    """

    def __init__(
        self,
        basis: StokesBasis,
        params: ModelParams,
        spec: CouplingSpec,
        cov1: CovarianceSpec,
        cov2: CovarianceSpec,
        cfg: IntegratorConfig,
    ):
        if cov1.q.shape != (basis.n_modes,) or cov2.q.shape != (basis.n_modes,):
            raise ValueError("covariances do not match the basis")
        if params.beta > 0:
            basis.check_order(params.r)
        self.basis, self.params, self.spec, self.cfg = basis, params, spec, cfg
        self.cov1, self.cov2 = cov1, cov2
        self.sqrt_q1 = cov1.sqrt_q
        self.sqrt_q2 = cov2.sqrt_q
        self.L_slow = params.mu * basis.eigenvalues
        self.L_fast = params.mu * basis.eigenvalues + spec.d
        self.slow = _Linear.build(self.L_slow, cfg.dt, cfg.scheme)
        self.n_sub = cfg.substeps(params.epsilon)
        self.h_fast = cfg.dt / self.n_sub
        self.tau = self.h_fast / params.epsilon
        self.fast = _Linear.build(self.L_fast, self.tau, cfg.scheme)
        self._frozen_cache: dict[float, _Linear] = {}

    # -- drift pieces -------------------------------------------------------
    def slow_nonlinear(self, x: np.ndarray) -> np.ndarray:
        """``B(x) + beta C(x)``."""
        out = self.basis.self_convection(x) if self.cfg.convection else np.zeros_like(x)
        if self.params.beta:
            out = out + self.params.beta * self.basis.damping(x, self.params.r)
        return out

    def fast_nonlinear(self, y: np.ndarray) -> np.ndarray | None:
        if not self.params.beta:
            return None
        return self.params.beta * self.basis.damping(y, self.params.r)

    # -- steps -------------------------------------------------------------
    def slow_step(self, x: np.ndarray, drift: np.ndarray, z1: np.ndarray) -> np.ndarray:
        """One macro step of the slow equation with coupling drift ``drift`` (f or f-bar)."""
        dt = self.cfg.dt
        n = _tame(self.slow_nonlinear(x), dt, self.cfg.taming)
        sig = self.spec.sigma1(x)
        noise = sig * (self.slow.noise * np.sqrt(dt) * self.sqrt_q1) * z1
        return self.slow.decay * x + self.slow.phi * (drift - n) + noise

    def _fast_generic(self, lin: _Linear, tau: float, y: np.ndarray, x: np.ndarray, z2: np.ndarray) -> np.ndarray:
        drift = self.spec.g_explicit(x, y)
        nl = self.fast_nonlinear(y)
        if nl is not None:
            drift = drift - _tame(nl, tau, self.cfg.taming)
        sig = self.spec.sigma2(x, y)
        noise = sig * (lin.noise * np.sqrt(tau) * self.sqrt_q2) * z2
        return lin.decay * y + lin.phi * drift + noise

    def fast_substep(self, y: np.ndarray, x: np.ndarray, z2: np.ndarray) -> np.ndarray:
        return self._fast_generic(self.fast, self.tau, y, x, z2)

    def frozen_factors(self, dt: float) -> _Linear:
        lin = self._frozen_cache.get(dt)
        if lin is None:
            lin = self._frozen_cache[dt] = _Linear.build(self.L_fast, dt, self.cfg.scheme)
        return lin

    def frozen_step(self, y: np.ndarray, x: np.ndarray, z2: np.ndarray, dt: float) -> np.ndarray:
        """Unit-speed fast equation (slow argument frozen at ``x``)."""
        return self._fast_generic(self.frozen_factors(dt), dt, y, x, z2)

    def guard(self, *arrays: np.ndarray) -> np.ndarray:
        """Rows that left the finite ball of radius ``blowup``."""
        bad = np.zeros(arrays[0].shape[:-1], dtype=bool)
        for a in arrays:
            nrm = _row_norm(a)
            bad |= ~np.isfinite(nrm) | (nrm > self.cfg.blowup)
        return bad


# -- single-field public steppers ---------------------------------------------

def _z(stream: NoiseStream, basis: StokesBasis) -> np.ndarray:
    return standard_ticks(stream, basis, 1)[0]


def _check_finite(prop: Propagator, *arrays: np.ndarray) -> None:
    if np.any(prop.guard(*arrays)):
        raise BlowUpError(f"state left the ball of radius {prop.cfg.blowup:g}")


def step_coupled(
    state: CoupledState,
    params: ModelParams,
    spec: CouplingSpec,
    cov1: CovarianceSpec,
    cov2: CovarianceSpec,
    s1: NoiseStream,
    s2: NoiseStream,
    cfg: IntegratorConfig,
    propagator: Propagator | None = None,
) -> CoupledState:
    """Advance ``(X, Y)`` by one macro step ``cfg.dt``.

    The fast variable takes ``cfg.substeps(epsilon)`` micro steps, each using
    one ``Q2`` tick; the slow variable uses one ``Q1`` tick and the mean of
    ``f(X_n, Y)`` over the micro steps.
    """
    basis = state.x.basis
    prop = propagator or Propagator(basis, params, spec, cov1, cov2, cfg)
    x, y = state.x.coeffs, state.y.coeffs
    f_acc = np.zeros_like(x)
    for _ in range(prop.n_sub):
        f_acc += spec.f(x, y)
        y = prop.fast_substep(y, x, _z(s2, basis))
    x_new = prop.slow_step(x, f_acc / prop.n_sub, _z(s1, basis))
    _check_finite(prop, x_new, y)
    return CoupledState(VelocityField(x_new, basis), VelocityField(y, basis), state.t + cfg.dt)


def step_frozen(
    y: VelocityField,
    x_frozen: VelocityField,
    params: ModelParams,
    spec: CouplingSpec,
    cov2: CovarianceSpec,
    s: NoiseStream,
    dt: float,
    cfg: IntegratorConfig | None = None,
) -> VelocityField:
    """One step of the unit-speed frozen equation driven by ``s`` (normally the Q2BAR channel)."""
    check_same_basis(y, x_frozen)
    cfg = cfg or IntegratorConfig(dt=dt)
    prop = Propagator(y.basis, params, spec, cov2, cov2, cfg)
    out = prop.frozen_step(y.coeffs, x_frozen.coeffs, _z(s, y.basis), dt)
    _check_finite(prop, out)
    return VelocityField(out, y.basis)


def step_auxiliary(
    yhat: VelocityField,
    x_anchor: VelocityField,
    params: ModelParams,
    spec: CouplingSpec,
    cov2: CovarianceSpec,
    s2: NoiseStream,
    dt: float,
    cfg: IntegratorConfig | None = None,
) -> VelocityField:
    """Advance the block-anchored fast process by ``dt`` at speed ``1/epsilon``.

    Consumes the same number of ``Q2`` ticks as :func:`step_coupled` would for
    the same macro step, so a stream replayed from the same counter gives the
    pathwise pairing.
    """
    check_same_basis(yhat, x_anchor)
    cfg = (cfg or IntegratorConfig()).replace(dt=dt)
    prop = Propagator(yhat.basis, params, spec, cov2, cov2, cfg)
    y = yhat.coeffs
    for _ in range(prop.n_sub):
        y = prop.fast_substep(y, x_anchor.coeffs, _z(s2, yhat.basis))
    _check_finite(prop, y)
    return VelocityField(y, yhat.basis)


def step_averaged(
    xbar: VelocityField,
    fbar_value: VelocityField,
    params: ModelParams,
    spec: CouplingSpec,
    cov1: CovarianceSpec,
    s1: NoiseStream,
    dt: float,
    cfg: IntegratorConfig | None = None,
) -> VelocityField:
    check_same_basis(xbar, fbar_value)
    cfg = (cfg or IntegratorConfig()).replace(dt=dt)
    prop = Propagator(xbar.basis, params, spec, cov1, cov1, cfg)
    out = prop.slow_step(xbar.coeffs, fbar_value.coeffs, _z(s1, xbar.basis))
    _check_finite(prop, out)
    return VelocityField(out, xbar.basis)


# -- batched path engine ------------------------------------------------------

FbarProvider = Callable[[np.ndarray, float], np.ndarray]


@dataclass
class Snapshot:
    """State of every tracked process after macro step ``n`` (arrays, rows = realizations)."""

    n: int
    t: float
    x: np.ndarray | None
    y: np.ndarray | None
    yhat: np.ndarray | None
    x_anchor: np.ndarray | None
    xbar: np.ndarray | None
    flagged: np.ndarray
    f_block: np.ndarray | None = None


def simulate(
    prop: Propagator,
    x0: np.ndarray,
    y0: np.ndarray,
    n_steps: int,
    master_seed: int,
    ids: Sequence[int],
    *,
    coupled: bool = True,
    block_steps: int | None = None,
    fbar: FbarProvider | None = None,
    block_fbar: FbarProvider | None = None,
    chunk: int = 64,
) -> Iterator[Snapshot]:
    """Yield a :class:`Snapshot` at ``n = 0..n_steps``.

    ``block_steps`` switches on the auxiliary process whose slow argument is
    the coupled ``X`` at the last multiple of ``block_steps`` macro steps.
    ``fbar`` switches on the averaged process, driven by the same ``Q1`` ticks
    as the coupled one.  ``block_fbar`` additionally accumulates the block
    functional ``int (f(X_anchor, Yhat) - fbar(X_anchor)) ds``.
    Rows that blow up are flagged, zeroed and stay zero.
    """
    basis = prop.basis
    spec = prop.spec
    R = len(ids)
    x0 = np.broadcast_to(np.asarray(x0, dtype=complex), (R, basis.n_modes)).copy()
    y0 = np.broadcast_to(np.asarray(y0, dtype=complex), (R, basis.n_modes)).copy()
    aux = block_steps is not None
    if aux and not coupled:
        raise ValueError("the auxiliary process needs the coupled run for its anchors")
    q1 = NoiseBatch([NoiseStream(master_seed, i, Channel.Q1) for i in ids], basis, chunk)
    q2 = NoiseBatch([NoiseStream(master_seed, i, Channel.Q2) for i in ids], basis, chunk * prop.n_sub) if (coupled or aux) else None

    x = x0.copy() if coupled else None
    y = y0.copy() if coupled else None
    yhat = y0.copy() if aux else None
    anchor = x0.copy() if aux else None
    xbar = x0.copy() if fbar is not None else None
    f_block = np.zeros_like(x0) if block_fbar is not None else None
    fb_anchor = block_fbar(anchor, 0.0) if block_fbar is not None else None
    flagged = np.zeros(R, dtype=bool)
    dt = prop.cfg.dt
    yield Snapshot(0, 0.0, x, y, yhat, anchor, xbar, flagged.copy(), f_block)

    for n in range(1, n_steps + 1):
        t_prev = (n - 1) * dt
        z1 = q1.next()
        if coupled:
            f_acc = np.zeros_like(x)
            for _ in range(prop.n_sub):
                z2 = q2.next()
                f_acc += spec.f(x, y)
                if aux:
                    if f_block is not None:
                        f_block += (spec.f(anchor, yhat) - fb_anchor) * prop.h_fast
                    yhat = prop.fast_substep(yhat, anchor, z2)
                y = prop.fast_substep(y, x, z2)
            x = prop.slow_step(x, f_acc / prop.n_sub, z1)
        if xbar is not None:
            xbar = prop.slow_step(xbar, fbar(xbar, t_prev), z1)
        tracked = [a for a in (x, y, yhat, xbar) if a is not None]
        flagged |= prop.guard(*tracked)
        if flagged.any():
            for a in tracked:
                a[flagged] = 0.0
        if aux and n % block_steps == 0:
            anchor = x.copy()
            if block_fbar is not None:
                fb_anchor = block_fbar(anchor, n * dt)
        yield Snapshot(n, n * dt, x, y, yhat, anchor, xbar, flagged.copy(), f_block)


def energy_residual(
    prop: Propagator,
    x0: np.ndarray,
    y0: np.ndarray,
    T: float,
    master_seed: int,
    ids: Sequence[int],
) -> np.ndarray:
    """Per-path residual of the discrete Ito energy balance of the slow variable.

    ``|X_T|^2 - |X_0|^2`` minus the left-point sums of
    ``2(-mu|X|_V^2 - beta|X|_{L^{r+1}}^{r+1} + <f, X>) dt + |sigma1|^2_{L_Q} dt + 2<sigma1 dW, X>``.
    """
    p = prop.params
    basis = prop.basis
    n_steps = int(round(T / prop.cfg.dt))
    dt = prop.cfg.dt
    q1 = prop.cov1.q
    budget = None
    x_prev = None
    y_prev = None
    z_stream = NoiseBatch([NoiseStream(master_seed, i, Channel.Q1) for i in ids], basis, 64)
    for snap in simulate(prop, x0, y0, n_steps, master_seed, ids):
        if snap.n == 0:
            budget = np.zeros(len(ids))
            e0 = np.sum(np.abs(snap.x) ** 2, axis=-1)
        else:
            x = x_prev
            diss = p.mu * np.sum(basis.eigenvalues * np.abs(x) ** 2, axis=-1)
            if p.beta:
                diss = diss + p.beta * basis.lp_norm(x, p.r + 1) ** (p.r + 1)
            fx = np.real(np.sum(prop.spec.f(x, y_prev) * np.conj(x), axis=-1))
            sig = np.broadcast_to(prop.spec.sigma1(x), x.shape)
            hs = np.sum(np.abs(sig) ** 2 * q1, axis=-1)
            dW = np.sqrt(dt) * prop.sqrt_q1 * z_stream.next()
            mart = np.real(np.sum(sig * dW * np.conj(x), axis=-1))
            budget += 2 * (-diss + fx) * dt + hs * dt + 2 * mart
        x_prev, y_prev = snap.x.copy(), snap.y.copy()
    return np.sum(np.abs(x_prev) ** 2, axis=-1) - e0 - budget


def require_admissible(params: ModelParams, spec: CouplingSpec, cov1: CovarianceSpec, cov2: CovarianceSpec) -> None:
    validate_assumptions(params, spec, cov1.q_max, cov2.q_max).require_averaging()
