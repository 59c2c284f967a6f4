import numpy as np
import pytest

from services.channel import (
    ConstantObservable,
    QuadraticObservable,
    erg_check,
    peripheral_eigenfunction,
    period_and_cycles,
    phi_apply,
    pi_on_quadratic,
    pi_pointwise,
    superoperator_matrix,
)
from services.errors import ErgodicityError, PreconditionError, SizeLimitExceeded
from services.instrument import Instrument
from services.projective import haar_vectors, random_hermitian, random_matrix


def test_phi_is_unital(all_builtins):
    for ins in all_builtins:
        assert np.allclose(phi_apply(ins, np.eye(ins.dim)), np.eye(ins.dim)), ins.label


def test_phi_star_examples(pndm, ad):
    assert np.allclose(phi_apply(pndm, np.diag([0.2, 0.8]), adjoint=True), np.diag([0.8, 0.2]))
    assert np.allclose(phi_apply(ad, np.diag([0.0, 1.0]), adjoint=True), np.diag([0.36, 0.64]))


def test_superoperator_matches_direct_application(all_builtins, rng):
    X = random_matrix(2, rng)
    for ins in all_builtins:
        for adjoint in (False, True):
            S = superoperator_matrix(ins, adjoint=adjoint)
            assert np.allclose(S.apply(X), phi_apply(ins, X, adjoint=adjoint)), ins.label


def test_phi_star_preserves_trace(all_builtins, rng):
    X = random_matrix(2, rng)
    for ins in all_builtins:
        assert np.trace(phi_apply(ins, X, adjoint=True)) == pytest.approx(np.trace(X))


def test_superoperator_size_limit(monkeypatch, ad):
    from app.config import settings

    monkeypatch.setattr(settings, "superoperator_limit", 3)
    with pytest.raises(SizeLimitExceeded):
        superoperator_matrix(ad)


def test_erg_check_examples(ndm, ad, dr):
    report = erg_check(ndm)
    assert not report.holds and report.fixed_space_dim == 2

    report = erg_check(ad)
    assert report.holds
    assert np.allclose(report.invariant_state, np.diag([1.0, 0.0]), atol=1e-10)
    assert report.E_basis.shape == (2, 1)
    assert abs(report.E_basis[0, 0]) == pytest.approx(1.0)

    report = erg_check(dr)
    assert report.holds and report.E_basis.shape == (2, 2)
    assert np.allclose(phi_apply(dr, report.invariant_state, adjoint=True), report.invariant_state, atol=1e-10)


def test_period_of_amplitude_damping(ad):
    cd = period_and_cycles(ad)
    assert cd.m == 1
    assert np.allclose(cd.M[0], np.eye(2), atol=1e-8)
    assert abs(cd.E_bases[0][0, 0]) == pytest.approx(1.0)


def test_period_of_permuted_dephasing(pndm):
    cd = period_and_cycles(pndm)
    assert cd.m == 2
    assert np.allclose(cd.M[0], np.diag([1.0, 0.0]), atol=1e-8)
    assert np.allclose(cd.M[1], np.diag([0.0, 1.0]), atol=1e-8)
    assert np.allclose(cd.rho[0], np.diag([1.0, 0.0]), atol=1e-8)
    assert np.allclose(sorted(z.real for z in cd.eigenvalues), [-1.0, 1.0], atol=1e-8)
    defects = cd.defects(pndm)
    assert max(defects.values()) < 1e-8


def test_period_of_dephasing_rotation(dr):
    cd = period_and_cycles(dr)
    assert cd.m == 1
    assert np.allclose(cd.M[0], np.eye(2), atol=1e-8)


def test_period_requires_erg(ndm):
    with pytest.raises(ErgodicityError):
        period_and_cycles(ndm)


def test_peripheral_eigenfunctions(pndm, ad):
    cd = period_and_cycles(pndm)
    assert np.allclose(peripheral_eigenfunction(cd, 0).matrix, np.eye(2), atol=1e-8)
    assert np.allclose(peripheral_eigenfunction(cd, 1).matrix, np.diag([-1.0, 1.0]), atol=1e-8)
    with pytest.raises(PreconditionError):
        peripheral_eigenfunction(period_and_cycles(ad), 1)


def test_peripheral_eigenfunctions_pointwise(pndm, rng):
    cd = period_and_cycles(pndm)
    X = haar_vectors(2, 1000, rng)
    for l in range(cd.m):
        f = peripheral_eigenfunction(cd, l)
        expected = np.exp(1j * np.pi * l) * f(X)
        assert np.max(np.abs(pi_pointwise(pndm, f, X) - expected)) < 1e-10


def test_pi_on_quadratic_examples(pndm):
    assert np.allclose(pi_on_quadratic(pndm, np.eye(2)), np.eye(2))
    A = np.diag([-1.0, 1.0])
    assert np.allclose(pi_on_quadratic(pndm, A), -A)


def test_quadratic_action_identity(all_builtins, rng):
    X = haar_vectors(2, 500, rng)
    for ins in all_builtins:
        for _ in range(20):
            A = random_hermitian(2, rng)
            lhs = pi_pointwise(ins, QuadraticObservable(A), X)
            rhs = QuadraticObservable(pi_on_quadratic(ins, A))(X)
            assert np.max(np.abs(lhs - rhs)) < 1e-10, ins.label


def test_pi_pointwise_skips_null_images(ad):
    # AD at e0: the second atom annihilates e0.
    X = np.array([[1.0, 0.0]], dtype=complex)
    values = pi_pointwise(ad, ConstantObservable(2.0), X)
    assert values[0] == pytest.approx(2.0)


def test_observables():
    f = QuadraticObservable(np.diag([1.0, -1.0]))
    assert f.is_hermitian
    assert np.allclose(f(np.eye(2)), [1.0, -1.0])
    assert np.allclose(f.centered(0.5)(np.eye(2)), [0.5, -1.5])
    assert np.allclose(ConstantObservable(3.0)(np.eye(2)), [3.0, 3.0])


def test_unitary_channels_fail_erg(uni):
    assert erg_check(uni).fixed_space_dim == 2
    assert erg_check(Instrument(weights=[1.0], matrices=np.eye(2))).fixed_space_dim == 4
