import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from closure_oracle import closure_moment, random_state
from sse_oracle import PAULI, random_pair_product_state, site_op
from dissxyz.cumulants import (CumulantState, NonFiniteStateError, collective_moment,
                               moment_from_cumulants, reduce_three_point)
from dissxyz.lattice import LatticeSpec


def state_from_vector(psi, N):
    ops = [site_op(PAULI[a], s, N) for s in range(N) for a in range(3)]
    ev = [np.vdot(psi, O @ psi).real for O in ops]
    F = np.zeros((3 * N, 3 * N))
    for i in range(3 * N):
        for j in range(3 * N):
            if i // 3 != j // 3:
                F[i, j] = np.vdot(psi, ops[i] @ ops[j] @ psi).real - ev[i] * ev[j]
    return CumulantState(0.0, np.array(ev).reshape(N, 3), F)


def test_first_moment_and_square(rng):
    m, F = random_state(rng, 3)
    st_ = CumulantState(0.0, m, F)
    assert moment_from_cumulants(st_, [(1, "x")]) == pytest.approx(m[1, 0])
    assert moment_from_cumulants(st_, [(2, "x"), (2, "x")]) == pytest.approx(1.0)


def test_three_distinct_sites(rng):
    m, F = random_state(rng, 3)
    st_ = CumulantState(0.0, m, F)
    i, j, k = 0, 1, 2
    expected = (F[3 * i, 3 * j + 1] * m[k, 2] + F[3 * i, 3 * k + 2] * m[j, 1]
                + F[3 * j + 1, 3 * k + 2] * m[i, 0] + m[i, 0] * m[j, 1] * m[k, 2])
    assert moment_from_cumulants(st_, [(i, 0), (j, 1), (k, 2)]) == pytest.approx(expected, abs=1e-14)


def test_matches_brute_force_on_random_states(rng):
    for _ in range(5):
        m, F = random_state(rng, 3)
        st_ = CumulantState(0.0, m, F)
        ops = [(s, a) for s in range(3) for a in range(3)]
        for n in (3, 4):
            for combo in itertools.product(ops, repeat=n):
                if rng.random() > 0.02:
                    continue
                assert abs(moment_from_cumulants(st_, list(combo)) - closure_moment(m, F, combo)) < 1e-12


def test_order_above_four_rejected(rng):
    m, F = random_state(rng, 5)
    with pytest.raises(ValueError):
        moment_from_cumulants(CumulantState(0, m, F), [(i, 0) for i in range(5)])


def test_non_finite_state_rejected():
    st_ = CumulantState.all_down(2)
    st_.means[0, 0] = np.nan
    with pytest.raises(NonFiniteStateError):
        moment_from_cumulants(st_, [(0, 0)])


def test_gutzwiller_limit(rng):
    m = rng.uniform(-1, 1, size=(4, 3))
    st_ = CumulantState.product(m)
    ops = [(0, 0), (1, 2), (3, 1), (2, 2)]
    assert moment_from_cumulants(st_, ops) == pytest.approx(m[0, 0] * m[1, 2] * m[3, 1] * m[2, 2])


@given(st.permutations([(0, 0), (1, 1), (2, 2), (3, 0)]))
def test_distinct_site_permutation_invariance(perm):
    rng = np.random.default_rng(3)
    m, F = random_state(rng, 4)
    st_ = CumulantState(0.0, m, F)
    ref = moment_from_cumulants(st_, [(0, 0), (1, 1), (2, 2), (3, 0)])
    assert moment_from_cumulants(st_, list(perm)) == pytest.approx(ref, abs=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_two_qubit_moments_exact(seed):
    rng = np.random.default_rng(seed)
    psi = random_pair_product_state(rng, 2)
    st_ = state_from_vector(psi, 2)
    ops = [(s, a) for s in range(2) for a in range(3)]
    for n in (1, 2, 3, 4):
        for combo in itertools.product(ops, repeat=n):
            M = np.eye(4, dtype=complex)
            for s, a in combo:
                M = M @ site_op(PAULI[a], s, 2)
            exact = np.vdot(psi, M @ psi)
            assert abs(moment_from_cumulants(st_, list(combo)) - exact) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_reduce_three_point_on_two_qubits(seed):
    rng = np.random.default_rng(seed)
    psi = random_pair_product_state(rng, 2)
    st_ = state_from_vector(psi, 2)
    s, q = 0, 1
    for a, b, c in itertools.product(range(3), repeat=3):
        mc = st_.means[q, c]
        op = site_op(PAULI[a], s, 2) @ site_op(PAULI[b], q, 2) @ (site_op(PAULI[c], q, 2) - mc * np.eye(4))
        exact = np.vdot(psi, op @ psi).real
        assert reduce_three_point(st_, s, a, q, b, q, c) == pytest.approx(exact, abs=1e-12)


def test_reduce_three_point_distinct_sites(rng):
    psi = random_pair_product_state(rng, 4)
    st_ = state_from_vector(psi, 4)
    assert reduce_three_point(CumulantState.product(st_.means), 0, 0, 1, 1, 2, 2) == 0.0
    for a, b, c in itertools.product(range(3), repeat=3):
        # sites 0, 2, 3: the pair (2, 3) is entangled, 0 is independent
        mc = st_.means[3, c]
        op = site_op(PAULI[a], 0, 4) @ site_op(PAULI[b], 2, 4) @ (site_op(PAULI[c], 3, 4) - mc * np.eye(16))
        assert reduce_three_point(st_, 0, a, 2, b, 3, c) == pytest.approx(np.vdot(psi, op @ psi).real, abs=1e-12)


def test_collective_moment_product_state():
    st_ = CumulantState.all_down(4)
    assert collective_moment(st_, "x", order=2) == pytest.approx(0.25)
    assert collective_moment(st_, "z", order=1) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        collective_moment(st_, "x", order=3)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("axis", [0, 1, 2])
def test_collective_moments_exact_on_pair_products(seed, axis):
    # pair-product states have no cumulants beyond second order
    N = 6
    rng = np.random.default_rng(seed)
    psi = random_pair_product_state(rng, N)
    st_ = state_from_vector(psi, N)
    signs = LatticeSpec(3, 2).stagger()
    for s in (None, signs):
        w = np.ones(N) if s is None else s
        J = sum(w[i] * site_op(PAULI[axis], i, N) for i in range(N)) / N
        for order in (1, 2, 4):
            exact = np.vdot(psi, np.linalg.matrix_power(J, order) @ psi).real
            got = collective_moment(st_, axis, staggered=s is not None, order=order, signs=s)
            assert got == pytest.approx(exact, abs=1e-12)


def test_collective_second_moment_double_loop(rng):
    m, F = random_state(rng, 5)
    st_ = CumulantState(0.0, m, F)
    G = st_.two_point()
    direct = sum(G[3 * i + 1, 3 * j + 1] for i in range(5) for j in range(5)) / 25
    assert collective_moment(st_, "y", order=2) == pytest.approx(direct)


def test_snapshot_roundtrip(tmp_path, rng):
    m, F = random_state(rng, 3)
    st_ = CumulantState(1.5, m, F)
    for name in ("s.json", "s.npz"):
        st_.save(tmp_path / name)
        back = CumulantState.load(tmp_path / name)
        assert back.t == 1.5
        assert np.array_equal(back.means, m) and np.array_equal(back.cov, F)


def test_invariant_monitors():
    st_ = CumulantState.all_down(3)
    assert st_.physical_violations() == {"means": 0, "pairs": 0}
    st_.means[0, 2] = -1.2
    assert st_.physical_violations()["means"] == 1
    assert st_.symmetry_residual() == 0.0
    G = st_.two_point()
    assert np.array_equal(G[:3, :3], np.eye(3))


def test_cov_shape_validation():
    with pytest.raises(ValueError):
        CumulantState(0.0, np.zeros((2, 3)), np.zeros((5, 5)))
