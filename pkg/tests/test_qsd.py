import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sse_oracle import random_pair_product_state, sse_rates
from test_cumulants import state_from_vector
from dissxyz.cumulants import CumulantState
from dissxyz.lattice import LatticeSpec, ModelParams
from dissxyz import qsd

SPECS = [LatticeSpec(4, 1, "open"), LatticeSpec(2, 2), LatticeSpec(3, 2)]


def _oracle_case(seed, spec, params, eta=1.0):
    rng = np.random.default_rng(seed)
    psi = random_pair_product_state(rng, spec.N)
    ref = sse_rates(psi, params.J, spec.edges, spec.N, params.gamma, eta)
    return state_from_vector(psi, spec.N), ref


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.Lx}x{s.Ly}{s.boundary[0]}")
@pytest.mark.parametrize("seed", range(3))
def test_order2_drift_matches_state_vector(spec, seed):
    params = ModelParams(0.9, 1.05, 1.0, gamma=1.0)
    state, ref = _oracle_case(seed, spec, params)
    assert np.allclose(state.means, ref["m"], atol=1e-12)
    dm, dF = qsd.drift_k2(state, params, spec, eta=1.0)
    assert np.max(np.abs(dm - ref["dm"])) < 1e-11
    assert np.max(np.abs(dF - ref["dF"])) < 1e-11


@pytest.mark.parametrize("eta", [0.0, 0.4])
def test_order2_drift_eta_scaling(eta):
    spec = LatticeSpec(2, 2)
    params = ModelParams(-0.4, 1.3, 0.7, gamma=0.6)
    state, ref = _oracle_case(7, spec, params, eta=eta)
    dm, dF = qsd.drift_k2(state, params, spec, eta=eta)
    assert np.max(np.abs(dF - ref["dF"])) < 1e-11


@pytest.mark.parametrize("seed", range(3))
def test_order2_noise_matches_state_vector(seed):
    spec = LatticeSpec(2, 2)
    params = ModelParams(0.9, 1.05, 1.0, gamma=0.8)
    state, ref = _oracle_case(seed, spec, params)
    BX, BY = qsd.noise_matrix_k2(state, params)
    assert np.max(np.abs(BX - ref["BX"])) < 1e-12
    assert np.max(np.abs(BY - ref["BY"])) < 1e-12
    draws = np.random.default_rng(seed).normal(size=(spec.N, 2))
    expected = np.einsum("ijk,k->ij", ref["CX"], draws[:, 0]) + np.einsum("ijk,k->ij", ref["CY"], draws[:, 1])
    got = qsd.cov_noise_k2(state, draws, params, eta=1.0)
    assert np.max(np.abs(got - expected)) < 1e-12
    assert np.allclose(got, got.T)


def test_order1_is_order2_without_covariances(rng):
    spec = LatticeSpec(3, 3)
    params = ModelParams(0.9, 1.1, 1.0)
    m = rng.uniform(-0.6, 0.6, size=(spec.N, 3))
    state = CumulantState.product(m)
    dm2, _ = qsd.drift_k2(state, params, spec, eta=1.0)
    assert np.allclose(qsd.drift_means_k1(m, params, spec), dm2, atol=1e-14)
    BX, BY = qsd.noise_coefficients_k1(m, params)
    BX2, BY2 = qsd.noise_matrix_k2(state, params)
    assert np.allclose(BX2, np.diag(BX.reshape(-1)) @ np.kron(np.eye(spec.N), np.ones((3, 1))))
    assert np.allclose(BY2.reshape(spec.N, 3, spec.N)[np.arange(spec.N), :, np.arange(spec.N)], BY)


def test_order1_drift_on_dark_state_vanishes():
    spec = LatticeSpec(3, 3)
    m = np.tile([0.0, 0.0, -1.0], (spec.N, 1))
    dm = qsd.drift_means_k1(m, ModelParams(0.9, 1.2, 1.0), spec)
    assert np.max(np.abs(dm)) < 1e-15


def test_order1_uncoupled_relaxation_at_equator():
    spec = LatticeSpec(2, 2)
    dm = qsd.drift_means_k1(np.zeros((4, 3)), ModelParams(0.0, 0.0, 0.0), spec)
    assert np.allclose(dm[:, 2], -1.0) and np.allclose(dm[:, :2], 0.0)


def test_order1_noise_vanishes_at_dark_state_and_at_zero_efficiency(rng):
    params = ModelParams(0.9, 1.1, 1.0)
    m = np.tile([0.0, 0.0, -1.0], (4, 1))
    draws = rng.normal(size=(4, 2))
    assert np.max(np.abs(qsd.noise_means_k1(m, draws, params))) < 1e-15
    m2 = rng.uniform(-0.5, 0.5, size=(4, 3))
    assert np.max(np.abs(qsd.noise_means_k1(m2, draws, params, eta=0.0))) == 0.0


def test_order1_noise_has_zero_mean(rng):
    params = ModelParams(0.9, 1.1, 1.0)
    m = np.array([[0.3, -0.2, 0.4]])
    draws = rng.normal(size=(100_000, 1, 2)) * np.sqrt(1e-3)
    incs = np.array([qsd.noise_means_k1(m, d, params)[0] for d in draws[:2000]])
    BX, BY = qsd.noise_coefficients_k1(m, params)
    full = BX[0][None, :] * draws[:, 0, 0:1] + BY[0][None, :] * draws[:, 0, 1:2]
    assert np.allclose(incs, full[:2000])
    se = full.std(axis=0) / np.sqrt(len(full))
    assert np.all(np.abs(full.mean(axis=0)) < 5 * se)


def test_single_spin_noise_matches_state_vector(rng):
    spec = LatticeSpec(1, 1, "open")
    params = ModelParams(0.0, 0.0, 0.0, gamma=0.7)
    v = rng.normal(size=2) + 1j * rng.normal(size=2)
    psi = v / np.linalg.norm(v)
    ref = sse_rates(psi, params.J, [], 1, params.gamma)
    BX, BY = qsd.noise_coefficients_k1(ref["m"], params)
    assert np.allclose(BX[0], ref["BX"][:, 0]) and np.allclose(BY[0], ref["BY"][:, 0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_covariance_drift_symmetric(seed, eta):
    rng = np.random.default_rng(seed)
    spec = LatticeSpec(3, 2)
    m = rng.uniform(-0.5, 0.5, size=(spec.N, 3))
    F = rng.normal(scale=0.05, size=(3 * spec.N, 3 * spec.N))
    F = F + F.T
    for i in range(spec.N):
        F[3 * i:3 * i + 3, 3 * i:3 * i + 3] = 0.0
    state = CumulantState(0.0, m, F)
    _, dF = qsd.drift_k2(state, ModelParams(0.9, 1.1, 1.0), spec, eta=eta)
    assert np.max(np.abs(dF - dF.T)) < 1e-13
    for i in range(spec.N):
        assert np.all(dF[3 * i:3 * i + 3, 3 * i:3 * i + 3] == 0.0)


def test_em_step_consistent_with_rates(rng):
    spec = LatticeSpec(2, 2)
    params = ModelParams(0.9, 1.05, 1.0)
    state, _ = _oracle_case(1, spec, params)
    cfg = qsd.IntegratorConfig(order=2, dt=1e-3, include_cov_noise=True)
    draws = rng.normal(size=(4, 2)) * np.sqrt(cfg.dt)
    new = qsd.em_step(state, cfg, params, spec, draws)
    dm, dF = qsd.drift_k2(state, params, spec)
    assert np.allclose(new.means, state.means + dm * cfg.dt + qsd.noise_means_k2(state, draws, params))
    assert np.allclose(new.cov, state.cov + dF * cfg.dt + qsd.cov_noise_k2(state, draws, params))
    assert new.t == pytest.approx(cfg.dt)


def test_non_finite_state_rejected():
    state = CumulantState.all_down(4)
    state.cov[0, 3] = np.inf
    with pytest.raises(FloatingPointError):
        qsd.drift_k2(state, ModelParams(1, 1, 1), LatticeSpec(2, 2))


def test_config_validation():
    with pytest.raises(ValueError):
        qsd.IntegratorConfig(order=3)
    with pytest.raises(ValueError):
        qsd.IntegratorConfig(window_start=10, window_end=5, t_max=20)
    with pytest.raises(ValueError):
        qsd.IntegratorConfig(eta=1.5)
    assert qsd.IntegratorConfig(eta=None).efficiency(ModelParams(1, 1, 1, eta=0.3)) == 0.3


def _short(**kw):
    base = dict(dt=2e-3, t_max=4.0, window_start=2.0, window_end=4.0, seed=11)
    base.update(kw)
    return qsd.IntegratorConfig(**base)


@pytest.mark.parametrize("order", [1, 2])
def test_isotropic_plane_stays_dark(order):
    spec = LatticeSpec(2, 2)
    res = qsd.run_trajectory(_short(order=order, include_cov_noise=order == 2), ModelParams(1.1, 1.1, 1.0), spec)
    assert res.ok
    assert np.allclose(res.m[:, 2], -1.0, atol=1e-12)
    assert np.allclose(res.G[2::3, 2::3], 1.0, atol=1e-12)


def test_trajectory_deterministic_for_fixed_seed():
    spec = LatticeSpec(2, 2)
    params = ModelParams(0.9, 1.05, 1.0)
    cfg = _short(init="tilted")
    a = qsd.run_trajectory(cfg, params, spec, index=3)
    b = qsd.run_trajectory(cfg, params, spec, index=3)
    c = qsd.run_trajectory(cfg, params, spec, index=4)
    assert np.array_equal(a.G, b.G) and np.array_equal(a.moments, b.moments)
    assert not np.array_equal(a.G, c.G)


def test_trajectory_matches_stepwise_integration():
    spec = LatticeSpec(2, 2)
    params = ModelParams(0.9, 1.05, 1.0)
    cfg = qsd.IntegratorConfig(dt=1e-3, t_max=0.05, window_start=0.0, window_end=0.05,
                               seed=5, sample_every=1, include_cov_noise=True, block_steps=7)
    res = qsd.run_trajectory(cfg, params, spec, keep_state=True)
    rng = qsd.trajectory_rng(cfg.seed, 0)
    state = qsd.initial_state(cfg, spec.N, rng)
    n = 50
    draws = []
    while len(draws) < n:
        k = min(cfg.block_steps, n - len(draws))
        draws.extend(rng.standard_normal((k, spec.N, 2)) * np.sqrt(cfg.dt))
    for d in draws:
        state = qsd.em_step(state, cfg, params, spec, d)
    assert np.allclose(res.final_state.means, state.means, atol=1e-12)
    assert np.allclose(res.final_state.cov, state.cov, atol=1e-12)


def test_runaway_trajectory_reported_divergent():
    spec = LatticeSpec(2, 2)
    cfg = _short(dt=0.5, t_max=200.0, window_start=100.0, window_end=200.0, init="tilted")
    res = qsd.run_trajectory(cfg, ModelParams(3.0, -2.0, 5.0), spec)
    assert res.status == "divergent" and res.G is None


def test_bond_imaginary_parts_cancel_along_trajectory():
    spec = LatticeSpec(2, 2)
    params = ModelParams(0.9, 1.05, 1.0, eta=0.0)
    cfg = qsd.IntegratorConfig(dt=1e-3, t_max=3.0, window_start=2.0, window_end=3.0, init="down")
    res = qsd.run_trajectory(cfg, params, spec, keep_state=True)
    assert qsd.imaginary_residue(res.final_state, params, spec) < 1e-12
    rng = np.random.default_rng(0)
    m = rng.uniform(-0.5, 0.5, size=(4, 3))
    F = rng.normal(scale=0.1, size=(12, 12))
    assert qsd.imaginary_residue(CumulantState(0, m, F + F.T), params, spec) < 1e-12


def test_zero_efficiency_is_deterministic():
    spec = LatticeSpec(2, 1, "open")
    params = ModelParams(0.9, 1.05, 1.0, eta=0.0)
    a = qsd.run_trajectory(_short(), params, spec, index=0)
    b = qsd.run_trajectory(_short(), params, spec, index=9)
    assert np.array_equal(a.G, b.G)
