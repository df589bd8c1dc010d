"""Brute-force reference implementations that share no code with the package."""
import numpy as np

TWO_PI = 2 * np.pi


def grid_points(m):
    xs = TWO_PI * np.arange(m) / m
    return np.meshgrid(xs, xs, indexing="ij")


def evaluate(basis, coeffs, m):
    """Velocity on an m x m grid by explicit summation over modes."""
    x1, x2 = grid_points(m)
    u = np.zeros((2, m, m), dtype=complex)
    for c, k, p in zip(coeffs, basis.modes, basis.polarization):
        wave = np.exp(1j * (k[0] * x1 + k[1] * x2)) / TWO_PI
        u[0] += c * p[0] * wave
        u[1] += c * p[1] * wave
    return u


def project(basis, w):
    """Coefficients <w, p_k e^{ik.x}/(2 pi)> by rectangle-rule quadrature."""
    m = w.shape[-1]
    x1, x2 = grid_points(m)
    area = (TWO_PI / m) ** 2
    out = np.empty(basis.n_modes, dtype=complex)
    for i, (k, p) in enumerate(zip(basis.modes, basis.polarization)):
        wave = np.exp(-1j * (k[0] * x1 + k[1] * x2)) / TWO_PI
        out[i] = area * np.sum((w[0] * p[0] + w[1] * p[1]) * wave)
    return out


def convect(basis, u, v, m):
    """(u.grad)v on an m x m grid by explicit summation."""
    ug = evaluate(basis, u, m)
    out = np.zeros((2, m, m), dtype=complex)
    for j in range(2):
        dv = evaluate(basis, v * 1j * basis.modes[:, j], m)
        out += ug[j] * dv
    return out
