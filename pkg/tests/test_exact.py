import numpy as np
import pytest
import scipy.linalg as sla

from sse_oracle import PAULI, hamiltonian as dense_hamiltonian, site_op
from dissxyz import exact
from dissxyz.lattice import LatticeSpec, ModelParams

SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)  # |up>=(1,0) -> |down>=(0,1)


def dense_steady_state(params, spec):
    """Null vector of the full column-stacked Liouvillian."""
    N = spec.N
    H = dense_hamiltonian(params.J, spec.edges, N)
    I = np.eye(2**N)
    Lsup = -1j * (np.kron(I, H) - np.kron(H.T, I))
    for j in range(N):
        L = np.sqrt(params.gamma) * site_op(SIGMA_MINUS, j, N)
        LdL = L.conj().T @ L
        Lsup += np.kron(L.conj(), L) - 0.5 * np.kron(I, LdL) - 0.5 * np.kron(LdL.T, I)
    ns = sla.null_space(Lsup, rcond=1e-10)
    assert ns.shape[1] == 1
    rho = ns[:, 0].reshape(2**N, 2**N, order="F")
    return rho / np.trace(rho)


def test_spin_operators_match_kronecker():
    for N in (1, 3):
        for s in range(N):
            for a in range(3):
                assert np.allclose(exact.spin_operator(N, s, a).toarray(), site_op(PAULI[a], s, N))


def test_hamiltonian_matches_dense():
    spec = LatticeSpec(2, 2)
    params = ModelParams(0.9, 1.05, 1.0)
    assert np.allclose(exact.hamiltonian(params, spec).toarray(),
                       dense_hamiltonian(params.J, spec.edges, spec.N))


def test_lindbladian_matches_dense(rng):
    spec = LatticeSpec(3, 1, "open")
    params = ModelParams(0.3, -0.7, 1.1, gamma=0.8)
    N = spec.N
    A = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
    rho = A @ A.conj().T
    rho /= np.trace(rho)
    H = dense_hamiltonian(params.J, spec.edges, N)
    expected = -1j * (H @ rho - rho @ H)
    for j in range(N):
        L = np.sqrt(params.gamma) * site_op(SIGMA_MINUS, j, N)
        expected += L @ rho @ L.conj().T - 0.5 * (L.conj().T @ L @ rho + rho @ L.conj().T @ L)
    got = exact.apply_lindbladian(params, spec, rho)
    assert np.allclose(got, expected, atol=1e-13)
    assert abs(np.trace(got)) < 1e-13


def test_dark_state_is_stationary():
    spec = LatticeSpec(2, 2)
    params = ModelParams(0.7, 0.7, 1.3)
    rho = exact.dark_state(4)
    assert np.max(np.abs(exact.apply_lindbladian(params, spec, rho))) < 1e-14


def test_single_spin_decay_rate():
    spec = LatticeSpec(1, 1, "open")
    params = ModelParams(0.0, 0.0, 0.0)
    rho = np.array([[1, 0], [0, 0]], dtype=complex)
    d = exact.apply_lindbladian(params, spec, rho)
    assert np.trace(exact.spin_operator(1, 0, 2) @ d).real == pytest.approx(-2.0)
    # d<sigma^z>/dt = -gamma (1 + <sigma^z>); at <sigma^z> = 0:
    rho0 = exact.maximally_mixed(1)
    d0 = exact.apply_lindbladian(params, spec, rho0)
    assert np.trace(exact.spin_operator(1, 0, 2) @ d0).real == pytest.approx(-1.0)
    ss = exact.evolve_to_steady_state(params, spec, rho0=rho0, tol=1e-10)
    assert ss.converged and ss.rho[1, 1].real == pytest.approx(1.0, abs=1e-9)


def test_evolve_decay_matches_exponential():
    spec = LatticeSpec(1, 1, "open")
    params = ModelParams(0.0, 0.0, 0.0)
    rho = exact.evolve(params, spec, np.array([[1, 0], [0, 0]], dtype=complex), 1.0, dt=0.01)
    assert rho[0, 0].real == pytest.approx(np.exp(-1.0), abs=1e-9)


@pytest.mark.parametrize("J", [0.5, 1.0, 1.7])
def test_isotropic_plane_relaxes_to_dark_state(J):
    spec = LatticeSpec(2, 2)
    params = ModelParams(J, J, 1.0)
    ss = exact.evolve_to_steady_state(params, spec, rho0=exact.maximally_mixed(4), tol=1e-9)
    m = exact.one_point(ss.rho, 4)
    assert np.allclose(m[:, 2], -1.0, atol=1e-6)


def test_steady_state_matches_null_space():
    spec = LatticeSpec(2, 2)
    params = ModelParams(0.9, 1.05, 1.0)
    ss = exact.evolve_to_steady_state(params, spec, tol=1e-10)
    assert ss.converged
    ref = dense_steady_state(params, spec)
    assert np.max(np.abs(ss.rho - ref)) < 1e-8
    chk = exact.check_density_matrix(ss.rho)
    assert chk["hermitian"] and chk["trace"] and chk["positive"]


def test_steady_state_unique_from_two_initial_states():
    spec = LatticeSpec(2, 2)
    params = ModelParams(0.9, 1.1, 1.0)
    a = exact.evolve_to_steady_state(params, spec, tol=1e-10)
    b = exact.evolve_to_steady_state(params, spec, rho0=exact.maximally_mixed(4), tol=1e-10)
    assert np.max(np.abs(a.rho - b.rho)) < 1e-8


def test_exchange_of_x_and_y_couplings():
    # Jx <-> Jy is a pi/2 rotation about z: sigma^x -> sigma^y, sigma^y -> -sigma^x
    spec = LatticeSpec(2, 2)
    p1 = ModelParams(0.9, 1.1, 1.0)
    p2 = ModelParams(1.1, 0.9, 1.0)
    G1 = exact.two_point(exact.evolve_to_steady_state(p1, spec, tol=1e-10).rho, 4)
    G2 = exact.two_point(exact.evolve_to_steady_state(p2, spec, tol=1e-10).rho, 4)
    assert G1[0, 3] == pytest.approx(G2[1, 4], abs=1e-7)
    assert G1[1, 4] == pytest.approx(G2[0, 3], abs=1e-7)
    assert G1[0, 4] == pytest.approx(-G2[1, 3], abs=1e-7)


def test_two_point_and_collective_moments_consistent():
    spec = LatticeSpec(2, 2)
    params = ModelParams(0.9, 1.05, 1.0)
    rho = exact.evolve_to_steady_state(params, spec, tol=1e-10).rho
    G = exact.two_point(rho, 4)
    assert np.allclose(G, G.T)
    m2 = exact.collective_moment_exact(rho, 4, "x", order=2)
    assert m2 == pytest.approx(G[0::3, 0::3].sum() / 16, abs=1e-12)
    Jx = exact.collective_operator(4, "x", scale=0.25).toarray()
    assert exact.collective_moment_exact(rho, 4, "x", order=4) == pytest.approx(
        np.trace(rho @ np.linalg.matrix_power(Jx, 4)).real, abs=1e-12)


def test_qfi_pure_state_is_four_times_variance():
    N = 3
    psi = np.zeros(8, dtype=complex)
    psi[0] = psi[-1] = 1 / np.sqrt(2)  # GHZ
    rho = np.outer(psi, psi.conj())
    A = exact.collective_operator(N, "z", scale=0.5).toarray()
    var = (psi.conj() @ A @ A @ psi - (psi.conj() @ A @ psi) ** 2).real
    assert exact.qfi(exact.spectral_decomposition(rho), A) == pytest.approx(4 * var)
    assert exact.qfi(exact.spectral_decomposition(rho), A) == pytest.approx(N**2)


def test_qfi_vanishes_for_maximally_mixed():
    A = exact.collective_operator(3, "x", scale=0.5).toarray()
    assert exact.qfi(exact.spectral_decomposition(exact.maximally_mixed(3)), A) == pytest.approx(0.0)


def test_qfim_additive_on_product_states(rng):
    def rand_rho():
        v = rng.normal(size=2) + 1j * rng.normal(size=2)
        v /= np.linalg.norm(v)
        return 0.7 * np.outer(v, v.conj()) + 0.15 * np.eye(2)

    r1, r2 = rand_rho(), rand_rho()
    A1, A2 = PAULI[0] / 2, PAULI[0] / 2
    f1 = exact.qfi(exact.spectral_decomposition(r1), A1)
    f2 = exact.qfi(exact.spectral_decomposition(r2), A2)
    rho = np.kron(r1, r2)
    A = np.kron(A1, np.eye(2)) + np.kron(np.eye(2), A2)
    assert exact.qfi(exact.spectral_decomposition(rho), A) == pytest.approx(f1 + f2)


def test_size_cap():
    with pytest.raises(exact.ExactSizeError):
        exact.build_operators(ModelParams(1, 1, 1), LatticeSpec(4, 3))
