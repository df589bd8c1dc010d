"""Plain-text ``key=value`` run configuration with dotted sections."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .averaging import ErgodicConfig
from .coupling import CouplingSpec, FAMILIES, ModelParams, validate_assumptions
from .dynamics import SCHEMES, IntegratorConfig
from .fields import build_basis, required_grid_size
from .stochastic import power_law_covariance

EXPERIMENTS = ("monotonicity", "mixing", "moment_bounds", "time_holder", "aux_gap", "convergence", "fbar_oracle")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_opt_float(s: str) -> float | None:
    return None if s.strip().lower() in ("none", "") else float(s)


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _fmt_value(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt_value(x) for x in v)
    return str(v)


# key -> (parser, default); ``None`` defaults mark "unset"
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "experiment": (str, None),
    "model.mu": (float, 1.0),
    "model.beta": (float, 0.0),
    "model.r": (float, 3.0),
    "model.epsilon": (float, 0.1),
    "model.delta": (_parse_opt_float, None),
    "model.zeta_growth": (float, 0.5),
    "model.L_g": (_parse_opt_float, None),
    "model.L_sigma2": (_parse_opt_float, None),
    "model.C_lip": (_parse_opt_float, None),
    "coupling.family": (str, "linear"),
    **{f"coupling.{name}": (float, 0.0) for name in ("a", "b", "G", "d", "c_g", "s1", "s2", "s0", "s_x", "c0", "c_x", "c_y")},
    "basis.k_max": (int, 4),
    "basis.grid_size": (int, 24),
    "noise.q1_exponent": (float, 2.0),
    "noise.q1_scale": (float, 1.0),
    "noise.q2_exponent": (float, 2.0),
    "noise.q2_scale": (float, 1.0),
    "integrator.dt": (float, 1e-3),
    "integrator.dt_fast": (_parse_opt_float, None),
    "integrator.fast_ratio": (float, 1e-3),
    "integrator.scheme": (str, "exponential-tamed"),
    "integrator.taming": (float, 1.0),
    "integrator.blowup": (float, 1e6),
    "integrator.convection": (_parse_bool, True),
    "ergodic.burn_in": (_parse_opt_float, None),
    "ergodic.horizon": (float, 10.0),
    "ergodic.n_rep": (int, 20),
    "ergodic.dt": (float, 0.01),
    "ergodic.warm_burn_in": (float, 0.0),
    "ergodic.cache_tol": (_parse_opt_float, 0.05),
    "run.seed": (int, 0),
    "run.workers": (int, 0),
    "run.n_rep": (int, 200),
    "run.T": (float, 1.0),
    "exp.eps_ladder": (_parse_floats, (0.1, 0.01, 0.001)),
    "exp.delta_ladder": (_parse_floats, (0.2, 0.1, 0.05, 0.025)),
    "exp.p_list": (_parse_ints, (1,)),
    "exp.r_list": (_parse_floats, (3.0, 4.0, 5.0)),
    "exp.n_samples": (int, 1000),
    "exp.x_scales": (_parse_floats, (0.0, 1.0, 3.0)),
    "exp.x0_scale": (float, 1.0),
    "exp.y0_scale": (float, 0.0),
    "exp.horizon": (float, 3.0),
    "exp.factor": (float, 3.0),
    "exp.max_spread": (float, 2.0),
    "exp.min_slope": (float, 0.45),
    "exp.fbar_mode": (str, "oracle"),
    "exp.repetitions": (int, 100),
    "output.dir": (str, "out"),
}


@dataclass(eq=False)
class RunConfig:
    """Explicitly set values; every other key takes its schema default."""

    values: dict[str, Any] = field(default_factory=dict)

    def effective(self) -> dict[str, Any]:
        return {k: self[k] for k in SCHEMA}

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RunConfig) and self.effective() == other.effective()

    def __getitem__(self, key: str) -> Any:
        if key in self.values:
            return self.values[key]
        return SCHEMA[key][1]

    @property
    def experiment(self) -> str:
        return self["experiment"]

    @property
    def seed(self) -> int:
        return self["run.seed"]

    @property
    def workers(self) -> int:
        w = self["run.workers"]
        return w if w > 0 else (os.cpu_count() or 1)

    @property
    def output_dir(self) -> Path:
        return Path(self["output.dir"])

    def with_overrides(self, **kw) -> RunConfig:
        vals = dict(self.values)
        vals.update(kw)
        return RunConfig(vals)

    # -- builders ------------------------------------------------------------
    def coupling(self) -> CouplingSpec:
        fam = self["coupling.family"]
        names = set(CouplingSpec.coefficient_names(fam)) if fam in FAMILIES else set()
        # explicitly set coefficients go through so CouplingSpec can reject the unused ones
        names |= {k.split(".", 1)[1] for k in self.values if k.startswith("coupling.") and k != "coupling.family"}
        coeffs = {n: self[f"coupling.{n}"] for n in sorted(names)}
        return CouplingSpec(fam, **coeffs)

    def params(self) -> ModelParams:
        """Equation constants; explicit Lipschitz keys may only loosen the certified ones."""
        spec = self.coupling()
        base = ModelParams(
            mu=self["model.mu"], beta=self["model.beta"], r=self["model.r"],
            epsilon=self["model.epsilon"], delta=self["model.delta"], zeta_growth=self["model.zeta_growth"],
        )
        base = base.with_coupling(spec, self.q_max("q1"), self.q_max("q2"))
        over = {}
        for key in ("L_g", "L_sigma2", "C_lip"):
            v = self[f"model.{key}"]
            if v is not None:
                over[key] = max(v, getattr(base, key))
        return base.replace(**over)

    def q_max(self, which: str) -> float:
        # lambda ranges over [1, 2 k_max^2]; a power law peaks at an end point
        e, s = self[f"noise.{which}_exponent"], self[f"noise.{which}_scale"]
        lam_max = 2.0 * max(self["basis.k_max"], 1) ** 2
        return s * max(1.0, lam_max ** (-e))

    def covariances(self, basis):
        return tuple(
            power_law_covariance(basis, self[f"noise.{w}_exponent"], self[f"noise.{w}_scale"]) for w in ("q1", "q2")
        )

    def ergodic(self) -> ErgodicConfig:
        return ErgodicConfig(
            burn_in=self["ergodic.burn_in"], horizon=self["ergodic.horizon"], n_rep=self["ergodic.n_rep"],
            dt=self["ergodic.dt"], warm_burn_in=self["ergodic.warm_burn_in"],
        )

    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(
            dt=self["integrator.dt"], dt_fast=self["integrator.dt_fast"], fast_ratio=self["integrator.fast_ratio"],
            scheme=self["integrator.scheme"], taming=self["integrator.taming"], blowup=self["integrator.blowup"],
            convection=self["integrator.convection"],
        )

    def basis(self):
        return build_basis(self["basis.k_max"], self["basis.grid_size"], self["model.r"])

    def dumps(self) -> str:
        """Every key with its effective value, one per line, sorted."""
        return "".join(f"{k}={_fmt_value(self[k])}\n" for k in sorted(SCHEMA))


def loads(text: str, source: str = "<string>") -> RunConfig:
    values: dict[str, Any] = {}
    errors: list[str] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
            continue
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in seen:
            errors.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        seen.add(key)
        try:
            values[key] = SCHEMA[key][0](val)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: bad value for {key}: {exc}")
    cfg = RunConfig(values)
    errors.extend(validate(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"config file not found: {p}"])
    return loads(p.read_text(), str(p))


def validate(cfg: RunConfig) -> list[str]:
    """All semantic problems of a parsed configuration."""
    errors: list[str] = []
    if cfg.values.get("experiment") is None:
        errors.append("missing required key 'experiment'")
    elif cfg.experiment not in EXPERIMENTS:
        errors.append(f"unknown experiment {cfg.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    if cfg["coupling.family"] not in FAMILIES:
        errors.append(f"unknown coupling.family {cfg['coupling.family']!r}")
    if cfg["integrator.scheme"] not in SCHEMES:
        errors.append(f"unknown integrator.scheme {cfg['integrator.scheme']!r}")
    if cfg["exp.fbar_mode"] not in ("oracle", "hmm"):
        errors.append("exp.fbar_mode must be 'oracle' or 'hmm'")
    for key in ("run.n_rep", "ergodic.n_rep", "exp.n_samples", "exp.repetitions"):
        if cfg[key] < 1:
            errors.append(f"{key} must be >= 1")
    if cfg["run.T"] <= 0:
        errors.append("run.T must be > 0")
    k_max, grid = cfg["basis.k_max"], cfg["basis.grid_size"]
    if k_max < 1:
        errors.append("basis.k_max must be >= 1")
    else:
        orders = [cfg["model.r"]]
        if cfg.values.get("experiment") == "monotonicity":
            orders += list(cfg["exp.r_list"])
        need = max(required_grid_size(k_max, r) for r in orders)
        if grid < need:
            errors.append(f"basis.grid_size={grid} violates dealiasing for k_max={k_max} and r={max(orders):g}: need >= {need}")
    for key in ("noise.q1_scale", "noise.q2_scale"):
        if cfg[key] < 0:
            errors.append(f"{key} must be >= 0")
    built = {}
    for name, build in (("coupling", cfg.coupling), ("model", cfg.params), ("integrator", cfg.integrator), ("ergodic", cfg.ergodic)):
        if name == "model" and "coupling" not in built:
            continue  # the model constants derive from the coupling; its error is already listed
        try:
            built[name] = build()
        except (ValueError, TypeError, KeyError) as exc:
            errors.append(f"{name}: {exc}")
    if len(built) == 4 and cfg.values.get("experiment") not in (None, "monotonicity"):
        params = built["model"]
        rep = validate_assumptions(params)
        if not rep.ok:
            errors.append(
                f"dissipativity gap violated: xi = mu*lambda1 - 2*L_g - 2*L_sigma2^2 = {rep.xi:.6g} <= 0 "
                f"(mu={params.mu:g}, L_g={params.L_g:g}, L_sigma2={params.L_sigma2:g})"
            )
    return errors
