"""Q-Wiener increments from counter-based keyed streams.

Each stream is keyed by ``(master_seed, realization_id, channel)`` and reads a
Philox block sequence at an explicit counter, so tick ``n`` of a stream can be
regenerated anywhere without replaying ticks ``0..n-1``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .coupling import DiagonalMultiplier
from .fields import BasisMismatchError, StokesBasis, VelocityField

_WORDS_PER_BLOCK = 4
_U53 = 2.0 ** -53


class Channel(enum.IntEnum):
    Q1 = 1
    Q2 = 2
    Q2BAR = 3


@dataclass(frozen=True, eq=False)
class CovarianceSpec:
    q: np.ndarray
    law: str = "custom"
    basis: StokesBasis | None = None

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 1 or np.any(q < 0) or not np.all(np.isfinite(q)):
            raise ValueError("covariance eigenvalues must be a finite nonnegative vector")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "trace", float(q.sum()))
        object.__setattr__(self, "sqrt_q", np.sqrt(q))

    @property
    def q_max(self) -> float:
        return float(self.q.max()) if self.q.size else 0.0


def power_law_covariance(basis: StokesBasis, exponent: float = 2.0, scale: float = 1.0) -> CovarianceSpec:
    """``q_k = scale * lambda_k^(-exponent)``."""
    if scale < 0:
        raise ValueError("covariance scale must be >= 0")
    q = scale * basis.eigenvalues ** (-float(exponent))
    return CovarianceSpec(q, law=f"{scale:g}*lambda^-{exponent:g}", basis=basis)


def zero_covariance(basis: StokesBasis) -> CovarianceSpec:
    return CovarianceSpec(np.zeros(basis.n_modes), law="zero", basis=basis)


def stream_key(master_seed: int, realization_id: int, channel: Channel) -> np.ndarray:
    seq = np.random.SeedSequence([int(master_seed) & (2**64 - 1), int(realization_id), int(channel)])
    return seq.generate_state(2, dtype=np.uint64)


def derive_seed(master_seed: int, *path: int) -> int:
    """Child master seed for nested ensembles (e.g. per-path drift replicas)."""
    seq = np.random.SeedSequence([int(master_seed) & (2**64 - 1), *[int(p) for p in path], 0x5EED])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


@dataclass
class NoiseStream:
    master_seed: int
    realization_id: int
    channel: Channel
    counter: int = 0

    def __post_init__(self):
        self.channel = Channel(self.channel)
        self._key = stream_key(self.master_seed, self.realization_id, self.channel)

    def spawn(self, channel: Channel) -> NoiseStream:
        return NoiseStream(self.master_seed, self.realization_id, channel, 0)

    def words(self, n_modes: int, start: int, n_ticks: int) -> np.ndarray:
        """Raw words of ticks ``start .. start+n_ticks-1`` (does not move the counter)."""
        if n_modes % _WORDS_PER_BLOCK:
            raise ValueError("mode count must be a multiple of 4")
        blocks = n_modes // _WORDS_PER_BLOCK
        bitgen = np.random.Philox(key=self._key, counter=[start * blocks, 0, 0, 0])
        return bitgen.random_raw(n_ticks * n_modes).reshape(n_ticks, n_modes)


def _standard_from_words(words: np.ndarray, basis: StokesBasis) -> np.ndarray:
    """Hermitian standard normals (E|z_k|^2 = 1) from raw words (..., n_modes)."""
    half = basis.n_modes // 2
    u1 = ((words[..., :half] >> np.uint64(11)).astype(float) + 1.0) * _U53
    u2 = (words[..., half:] >> np.uint64(11)).astype(float) * _U53
    rad = np.sqrt(-np.log(u1))  # |z|^2 has mean 1
    ang = (2.0 * np.pi) * u2
    z = rad * np.cos(ang) + 1j * (rad * np.sin(ang))
    return np.take(np.concatenate([z, z.conj()], axis=-1), _hermitian_order(basis), axis=-1)


def _hermitian_order(basis: StokesBasis) -> np.ndarray:
    """Permutation taking ``[z_pos, conj(z_pos)]`` to basis order."""
    pos = basis.positive_modes
    order = np.empty(basis.n_modes, dtype=np.intp)
    order[pos] = np.arange(pos.size)
    order[basis.partner[pos]] = pos.size + np.arange(pos.size)
    return order


def standard_ticks(stream: NoiseStream, basis: StokesBasis, n_ticks: int) -> np.ndarray:
    """Next ``n_ticks`` standard increments of ``stream``; advances its counter."""
    w = stream.words(basis.n_modes, stream.counter, n_ticks)
    stream.counter += n_ticks
    return _standard_from_words(w, basis)


def sample_increment(
    stream: NoiseStream, cov: CovarianceSpec, dt: float, basis: StokesBasis | None = None
) -> VelocityField:
    """One increment ``dW`` with per-mode variance ``dt * q_k``; advances the counter once."""
    basis = basis or cov.basis
    if basis is None:
        raise ValueError("covariance carries no basis; pass one explicitly")
    if dt < 0:
        raise ValueError("dt must be >= 0")
    if cov.q.shape != (basis.n_modes,):
        raise BasisMismatchError("covariance does not match basis")
    z = standard_ticks(stream, basis, 1)[0]
    return VelocityField(z * (np.sqrt(dt) * cov.sqrt_q), basis)


class NoiseBatch:
    """Standard increments for many realizations, generated in chunks of ticks.

    ``next()`` returns an array (n_streams, n_modes) and advances every stream's
    counter by one, exactly as repeated :func:`standard_ticks` calls would.
    """

    def __init__(self, streams: Sequence[NoiseStream], basis: StokesBasis, chunk: int = 64):
        self.streams = list(streams)
        self.basis = basis
        self.chunk = max(1, int(chunk))
        self._buf: np.ndarray | None = None
        self._pos = 0

    def _refill(self, n: int) -> None:
        words = np.stack([s.words(self.basis.n_modes, s.counter, n) for s in self.streams], axis=1)
        self._buf = _standard_from_words(words, self.basis)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._buf is None or self._pos >= self._buf.shape[0]:
            self._refill(self.chunk)
        z = self._buf[self._pos]
        self._pos += 1
        for s in self.streams:
            s.counter += 1
        return z

    def take(self, n: int) -> np.ndarray:
        """``n`` consecutive ticks as an array (n, n_streams, n_modes)."""
        return np.stack([self.next() for _ in range(n)])


def streams_for(master_seed: int, ids: Iterable[int], channel: Channel) -> list[NoiseStream]:
    return [NoiseStream(master_seed, int(i), channel) for i in ids]


def apply_diffusion(multiplier: DiagonalMultiplier, dW: VelocityField) -> VelocityField:
    """Mode-wise product ``sigma * dW``."""
    if multiplier.basis is not None and multiplier.basis.basis_id != dW.basis.basis_id:
        raise BasisMismatchError("multiplier and increment live on different bases")
    vals = np.asarray(multiplier.values)
    if vals.ndim and vals.shape[-1] != dW.basis.n_modes:
        raise BasisMismatchError("multiplier length does not match the basis")
    return VelocityField(vals * dW.coeffs, dW.basis)


def hs_norm_sq(multiplier: DiagonalMultiplier, cov: CovarianceSpec) -> np.ndarray:
    return multiplier.hs_norm_sq(cov.q)


def write_seed_manifest(fh: TextIO, master_seed: int, ids: Iterable[int], channels: Iterable[Channel]) -> None:
    names = ",".join(Channel(c).name for c in channels)
    for i in ids:
        fh.write(f"seed.{int(i)}=id={int(i)};channels={names};master_seed={int(master_seed)}\n")
