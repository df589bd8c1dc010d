"""Model constants, the built-in coupling families and the assumption checks."""
from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields, replace

import numpy as np

from .fields import VelocityField, check_same_basis


class AssumptionError(ValueError):
    """Raised when the dissipativity gap needed for averaging is not positive."""


def saturate(z: np.ndarray) -> np.ndarray:
    """Mode-wise tanh on real and imaginary parts.

    1-Lipschitz per mode and commutes with conjugation, so it maps real fields
    to real fields.
    """
    if np.iscomplexobj(z):
        return np.tanh(z.real) + 1j * np.tanh(z.imag)
    return np.tanh(z)


FAMILIES = ("linear", "tanh-diagonal", "constant-sigma")
_COEFFS = {
    "linear": ("a", "b", "G", "d", "s1", "s2"),
    "tanh-diagonal": ("a", "b", "G", "d", "c_g", "s0", "s_x", "c0", "c_x", "c_y"),
    "constant-sigma": ("a", "b", "G", "d", "c_g", "s0", "c0"),
}


@dataclass(frozen=True)
class CouplingSpec:
    """Concrete ``f, g, sigma1, sigma2`` from one of the built-in families.

    linear:          f = a x + b y,       g = G x - d y,                  s1, s2 constant
    tanh-diagonal:   f = a x + b T(y),    g = G T(x) - d y + c_g T(y),
                     sigma1 = s0 + s_x T(x),  sigma2 = c0 + c_x T(x) + c_y T(y)
    constant-sigma:  drifts as tanh-diagonal, sigma1 = s0, sigma2 = c0

    with ``T`` the mode-wise tanh of :func:`saturate`.  Diffusions are diagonal
    multipliers acting on ``Q^{1/2}``-coloured increments.
    """

    family: str = "linear"
    a: float = 0.0
    b: float = 0.0
    G: float = 0.0
    d: float = 0.0
    c_g: float = 0.0
    s1: float = 0.0
    s2: float = 0.0
    s0: float = 0.0
    s_x: float = 0.0
    c0: float = 0.0
    c_x: float = 0.0
    c_y: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown coupling family {self.family!r}; choose from {FAMILIES}")
        allowed = set(_COEFFS[self.family])
        for f in dc_fields(self):
            if f.name == "family":
                continue
            val = getattr(self, f.name)
            if not np.isfinite(val):
                raise ValueError(f"coupling coefficient {f.name} must be finite")
            if f.name not in allowed and val != 0.0:
                raise ValueError(f"coefficient {f.name!r} is not used by family {self.family!r}")
        if self.d < 0:
            raise ValueError("fast dissipation d must be >= 0")

    @classmethod
    def coefficient_names(cls, family: str) -> tuple[str, ...]:
        return _COEFFS[family]

    # -- certified constants (``q_max`` bounds the covariance eigenvalues) --
    def L_g(self) -> float:
        """One-sided constant of ``g`` in ``y``: <g(x,y1)-g(x,y2), y1-y2> <= L_g |y1-y2|^2."""
        return max(0.0, abs(self.c_g) - self.d)

    def L_g_lip(self) -> float:
        """Two-sided Lipschitz constant of ``g`` in ``y``."""
        return self.d + abs(self.c_g)

    def L_sigma2(self, q2_max: float = 1.0) -> float:
        return abs(self.c_y) * float(np.sqrt(q2_max)) if self.family == "tanh-diagonal" else 0.0

    def C_lip(self, q1_max: float = 1.0, q2_max: float = 1.0) -> float:
        vals = [abs(self.a), abs(self.b), abs(self.G)]
        if self.family == "tanh-diagonal":
            vals += [abs(self.s_x) * np.sqrt(q1_max), abs(self.c_x) * np.sqrt(q2_max)]
        return float(max(vals))

    @property
    def is_linear(self) -> bool:
        return self.family == "linear"

    @property
    def y_independent_f(self) -> bool:
        return self.b == 0.0

    # -- array-level evaluation (coefficient arrays, batch axes first) ----
    def f(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.family == "linear":
            return self.a * x + self.b * y
        return self.a * x + self.b * saturate(y)

    def g(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.g_explicit(x, y) - self.d * y

    def g_explicit(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``g + d y``: the part of the fast drift not folded into the linear operator."""
        if self.family == "linear":
            return self.G * x + 0.0 * y
        out = self.G * saturate(x)
        if self.c_g:
            out = out + self.c_g * saturate(y)
        return out

    def sigma1(self, x: np.ndarray) -> np.ndarray | float:
        if self.family == "linear":
            return self.s1
        if self.family == "constant-sigma" or self.s_x == 0.0:
            return self.s0
        return self.s0 + self.s_x * saturate(x)

    def sigma2(self, x: np.ndarray, y: np.ndarray) -> np.ndarray | float:
        if self.family == "linear":
            return self.s2
        if self.family == "constant-sigma" or (self.c_x == 0.0 and self.c_y == 0.0):
            return self.c0
        out = self.c0 + self.c_x * saturate(x)
        if self.c_y:
            out = out + self.c_y * saturate(y)
        return out

    @property
    def sigma1_constant(self) -> bool:
        return self.family != "tanh-diagonal" or self.s_x == 0.0

    @property
    def sigma2_constant(self) -> bool:
        return self.family != "tanh-diagonal" or (self.c_x == 0.0 and self.c_y == 0.0)

    def as_dict(self) -> dict[str, float | str]:
        out: dict[str, float | str] = {"family": self.family}
        for name in _COEFFS[self.family]:
            out[name] = getattr(self, name)
        return out


@dataclass(frozen=True)
class DiagonalMultiplier:
    """Per-mode factor applied to a Wiener increment (scalar or batched array)."""

    values: np.ndarray
    basis: object = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values))

    def hs_norm_sq(self, q: np.ndarray) -> np.ndarray:
        """``||sigma||^2_{L_Q} = sum_k |m_k|^2 q_k``."""
        v = np.broadcast_to(self.values, np.broadcast_shapes(self.values.shape, q.shape))
        return np.sum(np.abs(v) ** 2 * q, axis=-1)


def eval_coupling(spec: CouplingSpec, which: str, x: VelocityField, y: VelocityField):
    """Evaluate ``f``/``g`` (fields) or ``sigma1``/``sigma2`` (diagonal multipliers)."""
    if not isinstance(spec, CouplingSpec):
        raise TypeError("eval_coupling needs a validated CouplingSpec")
    check_same_basis(x, y)
    basis = x.basis
    if which == "f":
        return VelocityField(spec.f(x.coeffs, y.coeffs), basis)
    if which == "g":
        return VelocityField(spec.g(x.coeffs, y.coeffs), basis)
    shape = np.broadcast_shapes(x.coeffs.shape, y.coeffs.shape)
    if which == "sigma1":
        return DiagonalMultiplier(np.broadcast_to(spec.sigma1(x.coeffs), shape), basis)
    if which == "sigma2":
        return DiagonalMultiplier(np.broadcast_to(spec.sigma2(x.coeffs, y.coeffs), shape), basis)
    raise ValueError(f"unknown coupling component {which!r}")


@dataclass(frozen=True)
class ModelParams:
    """Equation constants.  ``alpha`` (Darcy term) is fixed to zero and absent.

    ``L_g``, ``L_sigma2``, ``C_lip`` are the certified constants of the active
    coupling; use :meth:`with_coupling` to copy them from a :class:`CouplingSpec`.
    ``epsilon = 1`` is accepted so that the moment study can include the
    unscaled system.
    """

    mu: float = 1.0
    beta: float = 0.0
    r: float = 3.0
    epsilon: float = 0.1
    delta: float | None = None
    L_g: float = 0.0
    L_sigma2: float = 0.0
    C_lip: float = 0.0
    zeta_growth: float = 0.5
    lambda1: float = 1.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be > 0")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if not self.r >= 1:
            raise ValueError("r must be >= 1")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.delta is not None and not self.delta > 0:
            raise ValueError("delta must be > 0")
        if not 0 < self.zeta_growth < 1:
            raise ValueError("zeta_growth must lie in (0, 1)")
        if self.L_g < 0 or self.L_sigma2 < 0 or self.C_lip < 0:
            raise ValueError("Lipschitz constants must be >= 0")

    @property
    def block_length(self) -> float:
        """Khasminskii block length, ``epsilon^(2/3)`` unless set explicitly."""
        return self.delta if self.delta is not None else self.epsilon ** (2.0 / 3.0)

    @property
    def gamma(self) -> float:
        return self.mu * self.lambda1 - 2 * self.L_g

    @property
    def kappa(self) -> float:
        return self.mu * self.lambda1 - 2 * self.L_g - self.L_sigma2 ** 2

    @property
    def zeta_mix(self) -> float:
        return 2 * self.mu * self.lambda1 - 2 * self.L_g - self.L_sigma2 ** 2

    @property
    def xi(self) -> float:
        return self.mu * self.lambda1 - 2 * self.L_g - 2 * self.L_sigma2 ** 2

    def with_coupling(self, spec: CouplingSpec, q1_max: float = 1.0, q2_max: float = 1.0) -> ModelParams:
        return replace(
            self,
            L_g=spec.L_g(),
            L_sigma2=spec.L_sigma2(q2_max),
            C_lip=spec.C_lip(q1_max, q2_max),
        )

    def replace(self, **kw) -> ModelParams:
        return replace(self, **kw)


@dataclass(frozen=True)
class ValidationReport:
    gamma: float
    kappa: float
    zeta_mix: float
    xi: float
    L_g: float
    L_sigma2: float
    C_lip: float

    @property
    def gaps(self) -> dict[str, float]:
        return {"gamma": self.gamma, "kappa": self.kappa, "zeta_mix": self.zeta_mix, "xi": self.xi}

    @property
    def failures(self) -> list[str]:
        return [f"{name} = {val:.6g} <= 0" for name, val in self.gaps.items() if val <= 0]

    @property
    def ok(self) -> bool:
        return self.xi > 0

    def require_averaging(self) -> None:
        if not self.ok:
            raise AssumptionError(
                f"dissipativity gap xi = mu*lambda1 - 2 L_g - 2 L_sigma2^2 = {self.xi:.6g} "
                f"must be > 0 (L_g={self.L_g:g}, L_sigma2={self.L_sigma2:g})"
            )


def validate_assumptions(
    params: ModelParams, spec: CouplingSpec | None = None, q1_max: float = 1.0, q2_max: float = 1.0
) -> ValidationReport:
    """Gap report.  With ``spec`` the coupling's certified constants take precedence."""
    if spec is not None:
        params = params.with_coupling(spec, q1_max, q2_max)
    return ValidationReport(
        gamma=params.gamma,
        kappa=params.kappa,
        zeta_mix=params.zeta_mix,
        xi=params.xi,
        L_g=params.L_g,
        L_sigma2=params.L_sigma2,
        C_lip=params.C_lip,
    )


def monotonicity_constant(params: ModelParams) -> float:
    """Shift ``eta`` making ``G + eta I`` monotone when ``r > 3``."""
    r, mu, beta = params.r, params.mu, params.beta
    if r <= 3:
        raise ValueError("the shifted-monotonicity constant needs r > 3; r = 3 with 2*beta*mu >= 1 is monotone outright")
    if beta <= 0:
        raise ValueError("the shifted-monotonicity constant needs beta > 0")
    return (r - 3) / (2 * mu * (r - 1)) * (2 / (beta * mu * (r - 1))) ** (2 / (r - 3))
