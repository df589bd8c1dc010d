"""Divergence-free Fourier basis on the 2-torus and the deterministic SCBF operators.

A velocity field is stored as complex amplitudes over the retained wave-vectors
``k`` (``0 < |k|_inf <= k_max``).  Mode ``k`` carries the real unit polarization
``p_k`` (orthogonal to ``k``) chosen so that ``p_{-k} = p_k``; the physical field is

    u(x) = sum_k c_k p_k exp(i k.x) / (2 pi)

which makes the basis H-orthonormal and a field real iff ``c_{-k} = conj(c_k)``.
All operators broadcast over leading batch axes of the coefficient array.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi


class BasisMismatchError(ValueError):
    pass


class DealiasingError(ValueError):
    pass


def required_grid_size(k_max: int, r: float | None = None) -> int:
    """Smallest admissible collocation size for products of order ``max(2, r)``."""
    q = max(2.0, float(r) if r is not None else 2.0)
    # 3*k_max + 1 keeps the quadratic convection product alias-free at the edge
    return int(max(np.ceil((q + 1.0) * k_max), 3 * k_max + 1))


@dataclass(frozen=True, eq=False)
class StokesBasis:
    k_max: int
    grid_size: int
    modes: np.ndarray
    eigenvalues: np.ndarray
    polarization: np.ndarray
    partner: np.ndarray
    dealias_mask: np.ndarray
    _pos: np.ndarray = field(repr=False)
    _half: np.ndarray = field(repr=False)
    _neg_half: np.ndarray = field(repr=False)

    def __post_init__(self):
        # partial inverse DFT matrices: rows are grid points, columns retained wavenumbers
        M, K = self.grid_size, self.k_max
        xs = TWO_PI * np.arange(M) / M
        e1 = np.exp(1j * np.outer(xs, np.arange(-K, K + 1)))
        e2 = np.exp(1j * np.outer(xs, np.arange(K + 1))) * np.r_[1.0, 2.0 * np.ones(K)]
        lookup = np.full(len(self.modes), -1)
        lookup[self._half] = np.arange(self._half.size)
        object.__setattr__(self, "_synthesis", (e1, e2.T.copy()))
        hm = self.modes[self._half]
        object.__setattr__(self, "_rfft_index", (hm[:, 0] % M) * (M // 2 + 1) + hm[:, 1])
        object.__setattr__(self, "_h1", self.modes[self._half, 0] + K)
        object.__setattr__(self, "_h2", self.modes[self._half, 1])
        # amplitude weights of (u1, u2, vorticity) per mode
        k = self.modes.astype(float)
        pol = self.polarization
        vort = 1j * (k[:, 0] * pol[:, 1] - k[:, 1] * pol[:, 0])
        object.__setattr__(self, "_rot_weights", np.stack([pol[:, 0], pol[:, 1], vort]))
        object.__setattr__(self, "_neg_from_half", lookup[self.partner[self._neg_half]])

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def basis_id(self) -> tuple[int, int]:
        return (self.k_max, self.grid_size)

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues.min())

    @property
    def positive_modes(self) -> np.ndarray:
        """Indices of one representative per ``{k, -k}`` pair."""
        return self._pos

    @property
    def cell_area(self) -> float:
        return (TWO_PI / self.grid_size) ** 2

    def index(self, k) -> int:
        k1, k2 = (int(v) for v in k)
        hit = np.flatnonzero((self.modes[:, 0] == k1) & (self.modes[:, 1] == k2))
        if hit.size == 0:
            raise KeyError(f"wave-vector {tuple(k)} not in basis")
        return int(hit[0])

    def check_order(self, r: float) -> None:
        need = required_grid_size(self.k_max, r)
        if self.grid_size < need:
            raise DealiasingError(
                f"grid_size={self.grid_size} too small for products of order "
                f"{max(2.0, r):g} with k_max={self.k_max} (need >= {need})"
            )

    # -- transforms -------------------------------------------------------
    # A scalar "amplitude" array a (..., n_modes) stands for sum_k a_k exp(i k.x) / (2 pi).
    def synthesize(self, a: np.ndarray) -> np.ndarray:
        """Grid values (..., M, M) of a real scalar amplitude array."""
        K = self.k_max
        spec = np.zeros(a.shape[:-1] + (2 * K + 1, K + 1), dtype=complex)
        spec[..., self._h1, self._h2] = a[..., self._half] / TWO_PI
        e1, e2t = self._synthesis
        return (e1 @ spec @ e2t).real

    def analyze(self, f: np.ndarray) -> np.ndarray:
        """Amplitudes (..., n_modes) of the retained wavenumbers of a real grid function."""
        M = self.grid_size
        spec = sfft.rfft2(f).reshape(f.shape[:-2] + (-1,))
        half = np.take(spec, self._rfft_index, axis=-1) * (TWO_PI / (M * M))
        out = np.empty(f.shape[:-2] + (self.n_modes,), dtype=complex)
        out[..., self._half] = half
        out[..., self._neg_half] = np.conj(half[..., self._neg_from_half])
        return out

    def to_grid(self, c: np.ndarray) -> np.ndarray:
        """Physical values (..., 2, M, M) of a real field."""
        return self.synthesize(c[..., None, :] * self.polarization.T)

    def to_grid_complex(self, c: np.ndarray) -> np.ndarray:
        M = self.grid_size
        spec = np.zeros(c.shape[:-1] + (2, M, M), dtype=complex)
        k1 = self.modes[:, 0] % M
        k2 = self.modes[:, 1] % M
        ch = c * (M * M / TWO_PI)
        spec[..., 0, k1, k2] = ch * self.polarization[:, 0]
        spec[..., 1, k1, k2] = ch * self.polarization[:, 1]
        return sfft.ifft2(spec)

    def project_grid(self, v: np.ndarray) -> np.ndarray:
        """Leray-project grid values (..., 2, M, M) and truncate to the retained modes."""
        M = self.grid_size
        if v.shape[-3:] != (2, M, M):
            raise BasisMismatchError(f"grid field shape {v.shape[-3:]} does not match basis grid {M}x{M}")
        if np.iscomplexobj(v):
            spec = sfft.fft2(v)
            vk = spec[..., :, self.modes[:, 0] % M, self.modes[:, 1] % M] * (TWO_PI / (M * M))
        else:
            vk = self.analyze(v)
        return vk[..., 0, :] * self.polarization[:, 0] + vk[..., 1, :] * self.polarization[:, 1]

    # -- array-level operators --------------------------------------------
    def convection(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Coefficients of P((u.grad) v) for real fields."""
        ug = self.to_grid(u)
        ik = 1j * self.modes.T.astype(float)  # (2, n)
        # dv[j, i] = d_j v_i
        dv = self.synthesize(v[..., None, None, :] * ik[:, None, :] * self.polarization.T[None, :, :])
        w = ug[..., 0:1, :, :] * dv[..., 0, :, :, :] + ug[..., 1:2, :, :] * dv[..., 1, :, :, :]
        return self.project_grid(w)

    def self_convection(self, u: np.ndarray) -> np.ndarray:
        """Coefficients of B(u) = P((u.grad) u) via the rotational form omega * u_perp."""
        g = self.synthesize(u[..., None, :] * self._rot_weights)
        w = np.stack([-g[..., 2, :, :] * g[..., 1, :, :], g[..., 2, :, :] * g[..., 0, :, :]], axis=-3)
        return self.project_grid(w)

    def convection_complex(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        ug = self.to_grid_complex(u)
        d1 = self.to_grid_complex(v * (1j * self.modes[:, 0]))
        d2 = self.to_grid_complex(v * (1j * self.modes[:, 1]))
        w = ug[..., 0:1, :, :] * d1 + ug[..., 1:2, :, :] * d2
        return self.project_grid(w)

    def damping(self, u: np.ndarray, r: float) -> np.ndarray:
        """Coefficients of C(u) = P(|u|^{r-1} u) for real fields."""
        if r == 1:
            return u.copy()
        ug = self.to_grid(u)
        mag = np.sqrt(ug[..., 0, :, :] ** 2 + ug[..., 1, :, :] ** 2)
        return self.project_grid(ug * (mag ** (r - 1.0))[..., None, :, :])

    def lp_norm(self, u: np.ndarray, p: float) -> np.ndarray:
        ug = self.to_grid(u)
        mag2 = ug[..., 0, :, :] ** 2 + ug[..., 1, :, :] ** 2
        return (self.cell_area * np.sum(mag2 ** (p / 2.0), axis=(-2, -1))) ** (1.0 / p)


def build_basis(k_max: int, grid_size: int, r: float | None = None) -> StokesBasis:
    """Enumerate the divergence-free Fourier modes with ``|k|_inf <= k_max``.

    ``grid_size`` must satisfy the dealiasing rule for products of order
    ``max(2, r)``; see :func:`required_grid_size`.
    """
    if int(k_max) < 1:
        raise ValueError("k_max must be >= 1")
    k_max = int(k_max)
    grid_size = int(grid_size)
    need = required_grid_size(k_max, r)
    if grid_size < need:
        raise DealiasingError(
            f"grid_size={grid_size} violates dealiasing for k_max={k_max}, "
            f"order {max(2.0, r or 2.0):g}: need >= {need}"
        )
    rng = np.arange(-k_max, k_max + 1)
    k1, k2 = np.meshgrid(rng, rng, indexing="ij")
    ks = np.stack([k1.ravel(), k2.ravel()], axis=1)
    ks = ks[np.any(ks != 0, axis=1)]
    lam = (ks ** 2).sum(axis=1).astype(float)
    order = np.lexsort((ks[:, 1], ks[:, 0], lam))
    ks, lam = ks[order], lam[order]

    positive = (ks[:, 0] > 0) | ((ks[:, 0] == 0) & (ks[:, 1] > 0))
    canon = np.where(positive[:, None], ks, -ks)
    perp = np.stack([-canon[:, 1], canon[:, 0]], axis=1).astype(float)
    pol = perp / np.sqrt(lam)[:, None]

    lookup = {tuple(k): i for i, k in enumerate(ks)}
    partner = np.array([lookup[(-a, -b)] for a, b in ks])

    kx = np.fft.fftfreq(grid_size, 1.0 / grid_size).astype(int)
    KX, KY = np.meshgrid(kx, kx, indexing="ij")
    mask = (np.abs(KX) <= k_max) & (np.abs(KY) <= k_max)

    half = np.flatnonzero(ks[:, 1] >= 0)
    neg_half = np.flatnonzero(ks[:, 1] < 0)
    return StokesBasis(
        k_max=k_max,
        grid_size=grid_size,
        modes=ks,
        eigenvalues=lam,
        polarization=pol,
        partner=partner,
        dealias_mask=mask,
        _pos=np.flatnonzero(positive),
        _half=half,
        _neg_half=neg_half,
    )


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Coefficient array (batch axes first, modes last) tied to one basis."""

    coeffs: np.ndarray
    basis: StokesBasis

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape[-1:] != (self.basis.n_modes,):
            raise BasisMismatchError(f"expected {self.basis.n_modes} coefficients, got shape {c.shape}")
        object.__setattr__(self, "coeffs", c)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.coeffs.shape[:-1]

    def _other(self, other: VelocityField) -> np.ndarray:
        check_same_basis(self, other)
        return other.coeffs

    def __add__(self, other: VelocityField) -> VelocityField:
        return VelocityField(self.coeffs + self._other(other), self.basis)

    def __sub__(self, other: VelocityField) -> VelocityField:
        return VelocityField(self.coeffs - self._other(other), self.basis)

    def __mul__(self, a) -> VelocityField:
        return VelocityField(self.coeffs * a, self.basis)

    __rmul__ = __mul__

    def __neg__(self) -> VelocityField:
        return VelocityField(-self.coeffs, self.basis)

    def __getitem__(self, item) -> VelocityField:
        return VelocityField(self.coeffs[item], self.basis)

    def is_real(self, tol: float = 1e-12) -> bool:
        c = self.coeffs
        scale = 1.0 + (np.abs(c).max() if c.size else 0.0)
        return bool(np.all(np.abs(c[..., self.basis.partner] - np.conj(c)) <= tol * scale))

    def to_grid(self) -> np.ndarray:
        if self.is_real():
            return self.basis.to_grid(self.coeffs)
        return self.basis.to_grid_complex(self.coeffs)


def check_same_basis(*fields: VelocityField) -> None:
    ids = {f.basis.basis_id for f in fields}
    if len(ids) > 1:
        raise BasisMismatchError(f"fields live on different bases: {sorted(ids)}")


def zeros(basis: StokesBasis, batch: tuple[int, ...] = ()) -> VelocityField:
    return VelocityField(np.zeros(batch + (basis.n_modes,), dtype=complex), basis)


def mode_field(basis: StokesBasis, k, amplitude: complex = 1.0) -> VelocityField:
    """The single basis vector ``e_k`` (complex unless paired with its partner)."""
    c = np.zeros(basis.n_modes, dtype=complex)
    c[basis.index(k)] = amplitude
    return VelocityField(c, basis)


def real_mode_field(basis: StokesBasis, k, amplitude: complex = 1.0) -> VelocityField:
    """``(a e_k + conj(a) e_{-k}) / sqrt(2)``: a real field of H-norm ``|a|``."""
    c = np.zeros(basis.n_modes, dtype=complex)
    i = basis.index(k)
    c[i] += amplitude / np.sqrt(2.0)
    c[basis.partner[i]] += np.conj(amplitude) / np.sqrt(2.0)
    return VelocityField(c, basis)


def random_field(
    basis: StokesBasis,
    rng: np.random.Generator,
    batch: tuple[int, ...] = (),
    exponent: float = 1.0,
    scale: float = 1.0,
) -> VelocityField:
    """Gaussian real field with amplitudes proportional to ``lambda_k^{-exponent}``."""
    pos = basis.positive_modes
    z = rng.standard_normal(batch + (pos.size, 2)) @ np.array([1.0, 1j])
    c = np.zeros(batch + (basis.n_modes,), dtype=complex)
    amp = scale * basis.eigenvalues[pos] ** (-exponent) / np.sqrt(2.0)
    c[..., pos] = amp * z
    c[..., basis.partner[pos]] = np.conj(c[..., pos])
    return VelocityField(c, basis)


# -- public operators ---------------------------------------------------------

def apply_stokes(u: VelocityField) -> VelocityField:
    return VelocityField(u.coeffs * u.basis.eigenvalues, u.basis)


def leray_project(v: np.ndarray, basis: StokesBasis) -> VelocityField:
    """Divergence-free part of a grid vector field, truncated to the retained modes."""
    return VelocityField(basis.project_grid(np.asarray(v)), basis)


def apply_convection(u: VelocityField, v: VelocityField) -> VelocityField:
    check_same_basis(u, v)
    b = u.basis
    if u.is_real() and v.is_real():
        uc, vc = np.broadcast_arrays(u.coeffs, v.coeffs)
        return VelocityField(b.convection(uc, vc), b)
    return VelocityField(b.convection_complex(u.coeffs, v.coeffs), b)


def apply_damping(u: VelocityField, r: float) -> VelocityField:
    if r < 1:
        raise ValueError("absorption exponent r must be >= 1")
    u.basis.check_order(r)
    if not u.is_real():
        raise ValueError("damping operator needs a real field")
    return VelocityField(u.basis.damping(u.coeffs, r), u.basis)


def inner(u: VelocityField, v: VelocityField) -> np.ndarray:
    """H inner product ``Re sum_k u_k conj(v_k)`` (exact for real fields)."""
    check_same_basis(u, v)
    return np.real(np.sum(u.coeffs * np.conj(v.coeffs), axis=-1))


def h_norm(u: VelocityField) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(u.coeffs) ** 2, axis=-1))


def v_norm(u: VelocityField) -> np.ndarray:
    return np.sqrt(np.sum(u.basis.eigenvalues * np.abs(u.coeffs) ** 2, axis=-1))


def lp_norm(u: VelocityField, p: float) -> np.ndarray:
    if p < 1:
        raise ValueError("p must be >= 1")
    if not u.is_real():
        raise ValueError("Lp norm needs a real field")
    return u.basis.lp_norm(u.coeffs, p)


def norms(u: VelocityField, kind: str, p: float | None = None) -> np.ndarray:
    """``kind`` is ``"H"``, ``"V"`` or ``"Lp"`` (with exponent ``p``)."""
    if kind == "H":
        return h_norm(u)
    if kind == "V":
        return v_norm(u)
    if kind == "Lp":
        if p is None:
            raise ValueError("Lp norm needs p")
        return lp_norm(u, p)
    raise ValueError(f"unknown norm kind {kind!r}")


# -- checkpoint format --------------------------------------------------------
# little-endian: magic "MSCB", u32 version, u32 k_max, u32 grid_size, u32 n_modes,
# u32 n_records; then per record: f64 time, n_modes x (f64 re, f64 im)
_MAGIC = b"MSCB"
_HEADER = struct.Struct("<4sIIIII")


def save_snapshots(path, fields: VelocityField, times=None) -> None:
    c = np.atleast_2d(fields.coeffs).reshape(-1, fields.basis.n_modes)
    n = c.shape[0]
    t = np.zeros(n) if times is None else np.asarray(times, dtype=float).reshape(n)
    b = fields.basis
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, b.k_max, b.grid_size, b.n_modes, n))
        for ti, ci in zip(t, c):
            fh.write(np.asarray(ti, dtype="<f8").tobytes())
            fh.write(ci.astype("<c16").tobytes())


def load_snapshots(path, r: float | None = None) -> tuple[VelocityField, np.ndarray]:
    raw = Path(path).read_bytes()
    magic, version, k_max, grid, n_modes, n = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not a snapshot file")
    basis = build_basis(k_max, grid, r)
    if basis.n_modes != n_modes:
        raise ValueError(f"{path}: mode count {n_modes} inconsistent with k_max={k_max}")
    rec = np.dtype([("t", "<f8"), ("c", "<c16", (n_modes,))])
    body = np.frombuffer(raw, dtype=rec, count=n, offset=_HEADER.size)
    return VelocityField(body["c"].astype(complex), basis), body["t"].astype(float)
