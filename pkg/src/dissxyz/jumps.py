"""Wavefunction Monte Carlo (quantum-jump unraveling) for lattices up to 16 sites.

Between jumps the unnormalized state follows ``-i H_traj psi`` with
``H_traj = H - (i gamma / 2) sum_j sigma_j^+ sigma_j^-``.  Jumps use the
waiting-time algorithm: a uniform ``zeta`` is drawn, and a jump fires once the
accumulated norm^2 drops below it.  Basis and bit conventions follow
:mod:`dissxyz.exact` (bit 0 = spin up, site 0 = most significant bit).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from .exact import hamiltonian
from .lattice import LatticeSpec, ModelParams
from .qsd import TrajectoryResult, trajectory_rng

log = logging.getLogger(__name__)

N_MAX_JUMP = 16
RENORM_EVERY = 100
NORM_GROWTH_TOL = 1e-10


class NormGrowthError(RuntimeError):
    pass


@dataclass(frozen=True)
class JumpConfig:
    """Run settings of a jump trajectory (times in units of 1/gamma)."""

    dt: float = 0.01
    seed: int = 0
    t_max: float = 150.0
    window_start: float = 75.0
    window_end: float = 150.0
    sample_every: int = 10
    uniform_block: int = 256

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.window_start < self.window_end <= self.t_max:
            raise ValueError("need window_start < window_end <= t_max")

    def step_indices(self) -> tuple[int, int, int]:
        n = int(round(self.t_max / self.dt))
        return n, int(round(self.window_start / self.dt)), int(round(self.window_end / self.dt))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrajectoryOperator:
    """CSR arrays of H_traj plus the data needed for jumps."""

    N: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    gamma: float


def trajectory_operator(params: ModelParams, spec: LatticeSpec) -> TrajectoryOperator:
    N = spec.N
    if N > N_MAX_JUMP:
        raise ValueError(f"N={N} exceeds the jump-unraveling cap of {N_MAX_JUMP}")
    H = hamiltonian(params, spec).tolil()
    idx = np.arange(2**N)
    n_up = np.zeros(2**N)
    for j in range(N):
        n_up += ((idx >> (N - 1 - j)) & 1) == 0
    H.setdiag(H.diagonal() - 0.5j * params.gamma * n_up)
    H = H.tocsr()
    H.sort_indices()
    return TrajectoryOperator(N, H.indptr.astype(np.int64), H.indices.astype(np.int64),
                              H.data.astype(complex), params.gamma)


@njit(cache=True)
def _matvec(indptr, indices, data, x, out):
    for r in range(indptr.shape[0] - 1):
        acc = 0j
        for p in range(indptr[r], indptr[r + 1]):
            acc += data[p] * x[indices[p]]
        out[r] = acc


@njit(cache=True)
def _rk4(indptr, indices, data, psi, dt, k1, k2, k3, k4, tmp):
    # d psi = -i H_traj psi dt
    _matvec(indptr, indices, data, psi, k1)
    k1 *= -1j
    for i in range(psi.shape[0]):
        tmp[i] = psi[i] + 0.5 * dt * k1[i]
    _matvec(indptr, indices, data, tmp, k2)
    k2 *= -1j
    for i in range(psi.shape[0]):
        tmp[i] = psi[i] + 0.5 * dt * k2[i]
    _matvec(indptr, indices, data, tmp, k3)
    k3 *= -1j
    for i in range(psi.shape[0]):
        tmp[i] = psi[i] + dt * k3[i]
    _matvec(indptr, indices, data, tmp, k4)
    k4 *= -1j
    for i in range(psi.shape[0]):
        psi[i] += dt / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i])


@njit(cache=True)
def _norm2(psi):
    acc = 0.0
    for v in psi:
        acc += v.real * v.real + v.imag * v.imag
    return acc


@njit(cache=True)
def _jump_weights(psi, N):
    """||sigma_l^- psi||^2 for every site (without gamma)."""
    w = np.zeros(N)
    for idx in range(psi.shape[0]):
        p = psi[idx].real ** 2 + psi[idx].imag ** 2
        if p == 0.0:
            continue
        for l in range(N):
            if ((idx >> (N - 1 - l)) & 1) == 0:
                w[l] += p
    return w


@njit(cache=True)
def _apply_lowering(psi, N, l, out):
    bit = 1 << (N - 1 - l)
    for i in range(psi.shape[0]):
        out[i] = 0j
    for idx in range(psi.shape[0]):
        if (idx & bit) == 0:
            out[idx | bit] = psi[idx]


@njit(cache=True)
def _pauli_images(psi, N):
    """Phi[:, 3i+a] = sigma_i^a psi."""
    D = psi.shape[0]
    Phi = np.empty((D, 3 * N), dtype=np.complex128)
    for i in range(N):
        bit = 1 << (N - 1 - i)
        for idx in range(D):
            b = (idx >> (N - 1 - i)) & 1
            f = idx ^ bit
            sgn = 1.0 - 2.0 * b
            # sigma^x|b> = |1-b>, sigma^y|b> = i(-1)^b|1-b>, sigma^z|b> = (-1)^b|b>
            Phi[f, 3 * i] = psi[idx]
            Phi[f, 3 * i + 1] = 1j * sgn * psi[idx]
            Phi[idx, 3 * i + 2] = sgn * psi[idx]
    return Phi


@njit(cache=True)
def _sample_observables(psi, N, m_acc, G_acc, P_acc, mom_acc):
    n2 = _norm2(psi)
    Phi = _pauli_images(psi, N)
    M = np.real(np.conj(Phi).T @ Phi) / n2  # Re <sigma_i^a sigma_j^b>
    m = np.zeros(3 * N)
    for i in range(N):
        for a in range(3):
            # <psi|sigma|psi> = <psi|Phi col>
            acc = 0j
            col = 3 * i + a
            for idx in range(psi.shape[0]):
                acc += np.conj(psi[idx]) * Phi[idx, col]
            m[col] = acc.real / n2
    for i in range(3 * N):
        m_acc[i // 3, i % 3] += m[i]
        for j in range(3 * N):
            P_acc[i, j] += m[i] * m[j]
            if i // 3 != j // 3:
                G_acc[i, j] += M[i, j]
    for a in range(2):
        # J psi and J^2 psi for the uniform Pauli component a
        D = psi.shape[0]
        Jpsi = np.zeros(D, dtype=np.complex128)
        for i in range(N):
            for idx in range(D):
                Jpsi[idx] += Phi[idx, 3 * i + a]
        J2psi = _pauli_images(Jpsi, N)
        v = np.zeros(D, dtype=np.complex128)
        for i in range(N):
            for idx in range(D):
                v[idx] += J2psi[idx, 3 * i + a]
        mom_acc[a] += _norm2(Jpsi) / n2 / N**2
        mom_acc[2 + a] += _norm2(v) / n2 / N**4


@njit(cache=True)
def _run_block(indptr, indices, data, gamma, N, psi, state, uniforms, n_steps, dt, step0, ws, we,
               stride, m_acc, G_acc, P_acc, mom_acc, counters):
    """Advance up to n_steps; stops early when the uniform buffer runs out.

    state = [accumulated norm^2, zeta]; uniforms are consumed in pairs (site
    choice, next zeta).  counters = [samples, jumps, uniforms used, steps
    done, dark-state warnings].  Returns the number of steps taken, or -1 on
    norm growth.
    """
    D = psi.shape[0]
    k1 = np.empty(D, dtype=np.complex128)
    k2 = np.empty(D, dtype=np.complex128)
    k3 = np.empty(D, dtype=np.complex128)
    k4 = np.empty(D, dtype=np.complex128)
    tmp = np.empty(D, dtype=np.complex128)
    nu = uniforms.shape[0]
    for k in range(n_steps):
        if counters[2] + 2 > nu:
            return k
        before = _norm2(psi)
        _rk4(indptr, indices, data, psi, dt, k1, k2, k3, k4, tmp)
        after = _norm2(psi)
        if after > before * (1.0 + 1e-10):
            return -1
        step = step0 + k + 1
        if state[0] * after < state[1]:
            w = _jump_weights(psi, N)
            total = w.sum()
            if total <= 0.0:
                counters[4] += 1
            else:
                r = uniforms[counters[2]] * total
                l = 0
                acc = w[0]
                while acc < r and l < N - 1:
                    l += 1
                    acc += w[l]
                _apply_lowering(psi, N, l, tmp)
                nrm = math.sqrt(_norm2(tmp))
                for i in range(D):
                    psi[i] = tmp[i] / nrm
                counters[1] += 1
            counters[2] += 1
            state[0] = 1.0
            state[1] = uniforms[counters[2]]
            counters[2] += 1
        elif (step % 100) == 0:
            state[0] *= after
            nrm = math.sqrt(after)
            for i in range(D):
                psi[i] /= nrm
        counters[3] += 1
        if step >= ws and step <= we and (step - ws) % stride == 0:
            _sample_observables(psi, N, m_acc, G_acc, P_acc, mom_acc)
            counters[0] += 1
    return n_steps


def dark_state_vector(N: int) -> np.ndarray:
    psi = np.zeros(2**N, dtype=complex)
    psi[-1] = 1.0
    return psi


def nonhermitian_step(psi: np.ndarray, params: ModelParams, spec: LatticeSpec, dt: float) -> np.ndarray:
    """One RK4 step of the no-jump evolution; returns the unnormalized state."""
    if dt * params.gamma > 1e-2:
        raise ValueError("dt * gamma must not exceed 1e-2")
    op = trajectory_operator(params, spec)
    out = np.array(psi, dtype=complex)
    D = out.shape[0]
    before = float(np.vdot(out, out).real)
    bufs = [np.empty(D, dtype=complex) for _ in range(5)]
    _rk4(op.indptr, op.indices, op.data, out, dt, *bufs)
    after = float(np.vdot(out, out).real)
    if after > before * (1 + NORM_GROWTH_TOL):
        raise NormGrowthError(f"norm grew from {before} to {after}")
    return out


def jump_if_due(psi_unnorm: np.ndarray, zeta: float, params: ModelParams,
                site_uniform: float | None = None, rng: np.random.Generator | None = None):
    """Apply a jump when ||psi||^2 < zeta.

    Returns ``(psi, jumped, site)``.  After a jump the returned state is
    normalized; the caller draws the next ``zeta``.  The site is picked with
    probability proportional to ||sigma_l^- psi||^2 using ``site_uniform`` (or
    a fresh draw from ``rng``).
    """
    psi = np.asarray(psi_unnorm, dtype=complex)
    N = int(round(math.log2(psi.shape[0])))
    if float(np.vdot(psi, psi).real) >= zeta:
        return psi, False, None
    w = _jump_weights(psi, N) * params.gamma
    total = w.sum()
    if total <= 0:
        log.warning("jump due but all jump weights vanish (dark state); skipping")
        return psi, False, None
    if site_uniform is None:
        site_uniform = (rng or np.random.default_rng()).random()
    l = int(np.searchsorted(np.cumsum(w), site_uniform * total, side="left"))
    l = min(l, N - 1)
    out = np.empty_like(psi)
    _apply_lowering(psi, N, l, out)
    return out / np.linalg.norm(out), True, l


def run_jump_trajectory(config: JumpConfig, params: ModelParams, spec: LatticeSpec,
                        rng: np.random.Generator | None = None, index: int = 0,
                        psi0: np.ndarray | None = None) -> TrajectoryResult:
    """Integrate one jump trajectory and window-average its observables.

    Starts from the all-down state unless ``psi0`` is given.  The result has
    the same layout as the cumulant trajectories (``G`` symmetrized with an
    identity same-site block, ``P`` the product of expectations).
    """
    rng = trajectory_rng(config.seed, index) if rng is None else rng
    op = trajectory_operator(params, spec)
    N = spec.N
    psi = dark_state_vector(N) if psi0 is None else np.array(psi0, dtype=complex)
    psi /= np.linalg.norm(psi)
    n_steps, ws, we = config.step_indices()
    m_acc = np.zeros((N, 3))
    G_acc = np.zeros((3 * N, 3 * N))
    P_acc = np.zeros((3 * N, 3 * N))
    mom_acc = np.zeros(4)
    counters = np.zeros(5, dtype=np.int64)
    state = np.array([1.0, rng.random()])
    done = 0
    while done < n_steps:
        uniforms = rng.random(config.uniform_block)
        counters[2] = 0
        taken = _run_block(op.indptr, op.indices, op.data, op.gamma, N, psi, state, uniforms,
                           n_steps - done, config.dt, done, ws, we, config.sample_every,
                           m_acc, G_acc, P_acc, mom_acc, counters)
        if taken < 0:
            raise NormGrowthError("norm increased during the no-jump evolution")
        done += taken
    if counters[4]:
        log.warning("%d jump triggers with vanishing weights", counters[4])
    ns = int(counters[0])
    if ns == 0:
        raise ValueError("averaging window contains no samples")
    P = P_acc / ns
    G = G_acc / ns
    G = 0.5 * (G + G.T)
    for i in range(N):
        G[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = np.eye(3)
    return TrajectoryResult(index, "ok", m_acc / ns, G, P, mom_acc / ns, ns,
                            jumps=int(counters[1]))
