import numpy as np
import pytest

from mscbf.fields import (
    BasisMismatchError,
    DealiasingError,
    VelocityField,
    apply_convection,
    apply_damping,
    apply_stokes,
    build_basis,
    h_norm,
    inner,
    leray_project,
    load_snapshots,
    lp_norm,
    mode_field,
    norms,
    random_field,
    real_mode_field,
    required_grid_size,
    save_snapshots,
    v_norm,
    zeros,
)

import oracles


def test_unit_basis_has_eight_modes_with_known_eigenvalues():
    b = build_basis(1, 8)
    assert b.n_modes == 8
    assert sorted(b.eigenvalues.tolist()) == [1, 1, 1, 1, 2, 2, 2, 2]


def test_desk_basis_mode_count(basis):
    # every k in [-4, 4]^2 except the origin: 9*9 - 1
    assert basis.n_modes == 80


def test_tiny_grid_is_rejected():
    with pytest.raises(DealiasingError):
        build_basis(1, 2)


@pytest.mark.parametrize("k_max,r,need", [(4, None, 13), (4, 3, 16), (4, 5, 24), (1, 2, 4)])
def test_required_grid_size(k_max, r, need):
    assert required_grid_size(k_max, r) == need


def test_lowest_eigenvalue_is_one(basis, small_basis):
    assert basis.lambda1 == 1.0 and small_basis.lambda1 == 1.0


def test_basis_is_orthonormal_and_divergence_free(basis):
    k = basis.modes.astype(float)
    assert np.allclose(np.sum(k * basis.polarization, axis=1), 0.0)
    assert np.allclose(np.linalg.norm(basis.polarization, axis=1), 1.0)
    assert np.all(basis.modes[basis.partner] == -basis.modes)


def test_stokes_on_single_mode(basis):
    e = mode_field(basis, (1, 0))
    assert np.allclose(apply_stokes(e).coeffs, e.coeffs)


def test_stokes_of_zero(basis):
    assert np.all(apply_stokes(zeros(basis)).coeffs == 0)


def test_stokes_multiplies_by_wavenumber_squared(basis):
    u = mode_field(basis, (1, 1)) + mode_field(basis, (2, 0))
    want = 2 * mode_field(basis, (1, 1)).coeffs + 4 * mode_field(basis, (2, 0)).coeffs
    assert np.allclose(apply_stokes(u).coeffs, want)


def test_leray_keeps_divergence_free_fields(basis, rng):
    u = random_field(basis, rng)
    back = leray_project(u.to_grid(), basis)
    assert np.max(np.abs(back.coeffs - u.coeffs)) <= 1e-12


def test_leray_kills_gradients(basis):
    x1, x2 = oracles.grid_points(basis.grid_size)
    # phi = sin(x1 + 2 x2) + cos(3 x2)
    grad = np.stack([np.cos(x1 + 2 * x2), 2 * np.cos(x1 + 2 * x2) - 3 * np.sin(3 * x2)])
    assert np.max(np.abs(leray_project(grad, basis).coeffs)) <= 1e-12


def test_leray_separates_mode_from_gradient(basis):
    e = real_mode_field(basis, (1, 0))
    x1, _ = oracles.grid_points(basis.grid_size)
    grad = np.stack([np.cos(x1), np.zeros_like(x1)])  # grad of sin(x1)
    out = leray_project(e.to_grid() + grad, basis)
    assert np.max(np.abs(out.coeffs - e.coeffs)) <= 1e-12


def test_leray_is_self_adjoint(basis, rng):
    M = basis.grid_size
    v, w = rng.standard_normal((2, 2, M, M))
    pv, pw = leray_project(v, basis), leray_project(w, basis)
    area = basis.cell_area
    lhs = area * np.sum(pv.to_grid() * w)
    rhs = area * np.sum(v * pw.to_grid())
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)


def test_leray_rejects_wrong_grid(basis):
    with pytest.raises(BasisMismatchError):
        leray_project(np.zeros((2, 10, 10)), basis)


def test_convection_with_zero_transport(basis, rng):
    v = random_field(basis, rng)
    assert np.max(np.abs(apply_convection(zeros(basis), v).coeffs)) == 0


def test_convection_of_two_modes_against_quadrature(basis):
    u = real_mode_field(basis, (1, 0))
    v = real_mode_field(basis, (0, 1))
    want = oracles.project(basis, oracles.convect(basis, u.coeffs, v.coeffs, 32))
    got = apply_convection(u, v).coeffs
    assert np.allclose(got, want, atol=1e-13)
    # (u.grad)v = (cos x1 sin x2 / (2 pi^2), 0): only the four diagonal neighbours survive
    nz = np.flatnonzero(np.abs(got) > 1e-12)
    assert sorted(map(tuple, basis.modes[nz])) == [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    assert np.allclose(np.abs(got[nz]), 1 / (4 * np.sqrt(2) * np.pi))


def test_convection_general_pair_against_quadrature(small_basis, rng):
    u, v = random_field(small_basis, rng), random_field(small_basis, rng)
    want = oracles.project(small_basis, oracles.convect(small_basis, u.coeffs, v.coeffs, 24))
    assert np.allclose(apply_convection(u, v).coeffs, want, atol=1e-12)


def test_self_convection_matches_general_form(basis, rng):
    u = random_field(basis, rng, batch=(3,))
    assert np.allclose(basis.self_convection(u.coeffs), basis.convection(u.coeffs, u.coeffs), atol=1e-13)


def test_complex_convection_path_agrees_on_real_fields(basis, rng):
    u, v = random_field(basis, rng), random_field(basis, rng)
    assert np.allclose(basis.convection_complex(u.coeffs, v.coeffs), basis.convection(u.coeffs, v.coeffs), atol=1e-13)


def test_trilinear_cancellation(basis, rng):
    u, v = random_field(basis, rng), random_field(basis, rng)
    assert abs(inner(apply_convection(u, v), v)) <= 1e-10 * h_norm(u) * v_norm(v) ** 2


def test_damping_of_zero(basis):
    assert np.all(apply_damping(zeros(basis), 3).coeffs == 0)


def test_damping_with_unit_exponent_is_identity(basis, rng):
    u = random_field(basis, rng)
    assert np.array_equal(apply_damping(u, 1).coeffs, u.coeffs)


def test_cubic_damping_energy_matches_fine_quadrature(basis):
    u = real_mode_field(basis, (1, 0), 0.7) + real_mode_field(basis, (1, 2), 0.4 - 0.3j)
    ug = oracles.evaluate(basis, u.coeffs, 4 * basis.grid_size).real
    quad = (2 * np.pi / (4 * basis.grid_size)) ** 2 * np.sum((ug[0] ** 2 + ug[1] ** 2) ** 2)
    assert inner(apply_damping(u, 3), u) == pytest.approx(quad, rel=1e-12)


def test_damping_rejects_unresolved_order():
    b = build_basis(4, 16, 3)
    u = random_field(b, np.random.default_rng(0))
    with pytest.raises(DealiasingError):
        apply_damping(u, 5)


def test_damping_needs_real_field(basis):
    with pytest.raises(ValueError):
        apply_damping(mode_field(basis, (1, 0)), 3)


def test_unit_mode_norms(basis):
    e = mode_field(basis, (2, 1))
    assert h_norm(e) == pytest.approx(1.0)
    assert v_norm(e) == pytest.approx(np.sqrt(5.0))


def test_poincare(basis, rng):
    u = random_field(basis, rng, batch=(20,))
    assert np.all(np.sqrt(basis.lambda1) * h_norm(u) <= v_norm(u) + 1e-15)


def test_poincare_equality_on_lowest_modes(basis):
    u = real_mode_field(basis, (1, 0), 0.3) + real_mode_field(basis, (0, 1), 1.1j)
    assert v_norm(u) == pytest.approx(h_norm(u), rel=1e-14)


def test_l2_norm_equals_h_norm(basis, rng):
    u = random_field(basis, rng, batch=(5,))
    assert np.allclose(lp_norm(u, 2), h_norm(u), rtol=1e-8)


def test_norm_dispatch(basis, rng):
    u = random_field(basis, rng)
    assert norms(u, "H") == h_norm(u)
    assert norms(u, "V") == v_norm(u)
    assert norms(u, "Lp", 4) == lp_norm(u, 4)
    with pytest.raises(ValueError):
        norms(u, "Lp")
    with pytest.raises(ValueError):
        norms(u, "W")


def test_mixed_bases_are_refused(basis, small_basis):
    with pytest.raises(BasisMismatchError):
        zeros(basis) + zeros(small_basis)
    with pytest.raises(BasisMismatchError):
        VelocityField(np.zeros(3), basis)


def test_snapshot_round_trip(tmp_path, basis, rng):
    u = random_field(basis, rng, batch=(4,))
    save_snapshots(tmp_path / "s.bin", u, [0.0, 0.5, 1.0, 1.5])
    back, t = load_snapshots(tmp_path / "s.bin", 5)
    assert np.array_equal(back.coeffs, u.coeffs)
    assert t.tolist() == [0.0, 0.5, 1.0, 1.5]
    assert back.basis.basis_id == basis.basis_id


def test_snapshot_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError):
        load_snapshots(p)
