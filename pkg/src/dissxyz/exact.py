"""Exact Lindblad evolution for small lattices (the reference oracle).

Basis convention: site 0 is the most significant bit; bit value 0 is spin up
(sigma^z = +1), so the dissipative dark state |down...down> is the last basis
vector.  The Lindbladian is applied matrix-free: only the 2^N x 2^N sparse
Hamiltonian is built, never the 4^N x 4^N superoperator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .lattice import LatticeSpec, ModelParams, axis_index

log = logging.getLogger(__name__)

N_MAX_EXACT = 10


class ExactSizeError(ValueError):
    pass


def _bits(N: int) -> np.ndarray:
    """(D, N) array of bit values, column i is site i."""
    idx = np.arange(2**N)
    return (idx[:, None] >> (N - 1 - np.arange(N))[None, :]) & 1


@lru_cache(maxsize=64)
def spin_operator(N: int, site: int, axis) -> sp.csr_matrix:
    """sigma_site^axis on the full 2^N space as a sparse matrix."""
    a = axis_index(axis)
    D = 2**N
    idx = np.arange(D)
    b = (idx >> (N - 1 - site)) & 1
    if a == 2:
        return sp.diags((1 - 2 * b).astype(complex), format="csr")
    flipped = idx ^ (1 << (N - 1 - site))
    if a == 0:
        vals = np.ones(D, dtype=complex)
    else:
        # sigma^y |b> = i (-1)^b |1-b>
        vals = 1j * (1 - 2 * b).astype(complex)
    # column = input state, row = output state
    return sp.csr_matrix((vals, (flipped, idx)), shape=(D, D))


def collective_operator(N: int, axis=None, phi: float | None = None, signs=None,
                        scale: float = 1.0) -> sp.csr_matrix:
    """scale * sum_i s_i sigma_i^a, or the in-plane component at angle phi."""
    signs = np.ones(N) if signs is None else np.asarray(signs, dtype=float)
    D = 2**N
    out = sp.csr_matrix((D, D), dtype=complex)
    for i in range(N):
        if phi is not None:
            op = np.cos(phi) * spin_operator(N, i, 0) + np.sin(phi) * spin_operator(N, i, 1)
        else:
            op = spin_operator(N, i, axis)
        out = out + signs[i] * op
    return (scale * out).tocsr()


@dataclass(frozen=True)
class ExactOperators:
    N: int
    H: sp.csr_matrix = field(repr=False)
    n_up: np.ndarray = field(repr=False)
    jump_pairs: tuple = field(repr=False)
    gamma: float = 1.0

    @property
    def dim(self) -> int:
        return 2**self.N


def hamiltonian(params: ModelParams, spec: LatticeSpec) -> sp.csr_matrix:
    """Sparse XYZ Hamiltonian sum_<ij> (Jx sx sx + Jy sy sy + Jz sz sz)."""
    N = spec.N
    D = 2**N
    bits = _bits(N)
    z = 1 - 2 * bits
    idx = np.arange(D)
    diag = np.zeros(D)
    rows, cols, vals = [], [], []
    for i, j in spec.edges:
        diag += params.Jz * z[:, i] * z[:, j]
        same = bits[:, i] == bits[:, j]
        amp = np.where(same, params.Jx - params.Jy, params.Jx + params.Jy)
        keep = amp != 0
        mask = (1 << (N - 1 - i)) | (1 << (N - 1 - j))
        rows.append((idx ^ mask)[keep])
        cols.append(idx[keep])
        vals.append(amp[keep])
    rows.append(idx)
    cols.append(idx)
    vals.append(diag)
    H = sp.csr_matrix(
        (np.concatenate(vals).astype(complex), (np.concatenate(rows), np.concatenate(cols))),
        shape=(D, D),
    )
    H.sum_duplicates()
    H.eliminate_zeros()
    return H


@lru_cache(maxsize=32)
def build_operators(params: ModelParams, spec: LatticeSpec,
                    n_max: int = N_MAX_EXACT) -> ExactOperators:
    N = spec.N
    if N > n_max:
        raise ExactSizeError(f"N={N} exceeds the exact-solver cap of {n_max}")
    bits = _bits(N)
    n_up = (bits == 0).sum(axis=1).astype(float)
    pairs = []
    for j in range(N):
        down = np.nonzero(bits[:, j] == 1)[0]
        up = down ^ (1 << (N - 1 - j))
        pairs.append((up, down))
    return ExactOperators(N, hamiltonian(params, spec), n_up, tuple(pairs), params.gamma)


def _lindblad(ops: ExactOperators, rho: np.ndarray, hermitian: bool = False) -> np.ndarray:
    Hrho = ops.H @ rho
    # for Hermitian rho, rho H = (H rho)^dagger
    rhoH = Hrho.conj().T if hermitian else (ops.H.T @ rho.T).T
    out = -1j * (Hrho - rhoH)
    g = ops.gamma
    out -= 0.5 * g * (ops.n_up[:, None] + ops.n_up[None, :]) * rho
    for up, down in ops.jump_pairs:
        out[np.ix_(down, down)] += g * rho[np.ix_(up, up)]
    return out


def apply_lindbladian(params: ModelParams, spec: LatticeSpec, rho: np.ndarray,
                      n_max: int = N_MAX_EXACT) -> np.ndarray:
    """d rho / dt for the dissipative XYZ master equation."""
    ops = build_operators(params, spec, n_max)
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (ops.dim, ops.dim):
        raise ValueError(f"rho has shape {rho.shape}, expected {(ops.dim, ops.dim)}")
    return _lindblad(ops, rho)


def spectral_radius_bound(ops: ExactOperators) -> float:
    """Upper estimate of the largest |eigenvalue| of the Lindbladian."""
    h = abs(ops.H).sum(axis=1).max()  # row-sum norm >= spectral norm
    return 2.0 * float(h) + ops.gamma * ops.N


def _rk4_step(ops, rho, dt):
    k1 = _lindblad(ops, rho, True)
    k2 = _lindblad(ops, rho + 0.5 * dt * k1, True)
    k3 = _lindblad(ops, rho + 0.5 * dt * k2, True)
    k4 = _lindblad(ops, rho + dt * k3, True)
    return rho + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def default_dt(ops: ExactOperators) -> float:
    # RK4 is stable for |lambda dt| <~ 2.8 on both axes; keep a margin
    return min(0.05, 2.0 / spectral_radius_bound(ops))


def evolve(params: ModelParams, spec: LatticeSpec, rho0: np.ndarray, t: float,
           dt: float | None = None) -> np.ndarray:
    ops = build_operators(params, spec)
    dt = default_dt(ops) if dt is None else dt
    n = max(1, int(np.ceil(t / dt)))
    h = t / n
    rho = np.array(rho0, dtype=complex)
    for _ in range(n):
        rho = _rk4_step(ops, rho, h)
    return rho


@dataclass
class SteadyState:
    rho: np.ndarray
    converged: bool
    t: float
    residual: float
    dt: float
    steps: int

    def metadata(self) -> dict:
        return {"converged": self.converged, "t": self.t, "residual": self.residual,
                "dt": self.dt, "steps": self.steps}


def dark_state(N: int) -> np.ndarray:
    rho = np.zeros((2**N, 2**N), dtype=complex)
    rho[-1, -1] = 1.0
    return rho


def maximally_mixed(N: int) -> np.ndarray:
    return np.eye(2**N, dtype=complex) / 2**N


def evolve_to_steady_state(params: ModelParams, spec: LatticeSpec, rho0=None,
                           tol: float = 1e-9, t_max: float = 2000.0,
                           dt: float | None = None, check_every: int = 20) -> SteadyState:
    """Integrate with fixed-step RK4 until ||d rho/dt||_F < tol or t_max."""
    ops = build_operators(params, spec)
    dt = default_dt(ops) if dt is None else dt
    rho = dark_state(spec.N) if rho0 is None else np.array(rho0, dtype=complex)
    t, steps = 0.0, 0
    residual = float(np.linalg.norm(_lindblad(ops, rho)))
    while residual >= tol and t < t_max:
        for _ in range(check_every):
            rho = _rk4_step(ops, rho, dt)
        steps += check_every
        t += check_every * dt
        # Hermiticity and unit trace drift only at round-off level; re-impose both
        rho = 0.5 * (rho + rho.conj().T)
        rho /= np.trace(rho).real
        residual = float(np.linalg.norm(_lindblad(ops, rho)))
    converged = residual < tol
    if not converged:
        log.warning("steady state not converged: residual %.3e at t=%.1f", residual, t)
    return SteadyState(rho, converged, t, residual, dt, steps)


# -- observables of a density matrix ------------------------------------------

def one_point(rho: np.ndarray, N: int) -> np.ndarray:
    out = np.zeros((N, 3))
    for i in range(N):
        for a in range(3):
            out[i, a] = np.real(spin_operator(N, i, a).multiply(rho.T).sum())
    return out


def two_point(rho: np.ndarray, N: int) -> np.ndarray:
    """Re Tr(rho sigma_i^a sigma_j^b) as (3N, 3N); the same-site block is delta_ab."""
    G = np.zeros((3 * N, 3 * N))
    for i in range(N):
        for a in range(3):
            Mi = spin_operator(N, i, a) @ rho  # sigma_i rho
            for j in range(i + 1, N):
                for b in range(3):
                    # Tr(rho sigma_i sigma_j) = Tr(sigma_j sigma_i rho)
                    val = np.real(spin_operator(N, j, b).multiply(Mi.T).sum())
                    G[3 * i + a, 3 * j + b] = G[3 * j + b, 3 * i + a] = val
        G[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = np.eye(3)
    return G


def expectation(rho: np.ndarray, op) -> complex:
    if sp.issparse(op):
        return complex(op.multiply(rho.T).sum())
    return complex(np.sum(op * rho.T))


def collective_moment_exact(rho: np.ndarray, N: int, axis, order: int = 2,
                            signs=None) -> float:
    """Tr(rho (N^-1 sum_j s_j sigma_j^axis)^order)."""
    J = collective_operator(N, axis, signs=signs, scale=1.0 / N)
    X = np.array(rho, dtype=complex)
    for _ in range(order):
        X = J @ X
    return float(np.real(np.trace(X)))


@dataclass
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def spectral_decomposition(rho: np.ndarray) -> SpectralDecomposition:
    w, v = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    order = np.argsort(w)[::-1]
    return SpectralDecomposition(w[order], v[:, order])


QFI_CUTOFF = 1e-12


def _qfi_weights(lam: np.ndarray, cutoff: float) -> np.ndarray:
    s = lam[:, None] + lam[None, :]
    d = lam[:, None] - lam[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(s > cutoff, d**2 / s, 0.0)
    return w


def qfim_entry(decomp: SpectralDecomposition, Ai, Aj, cutoff: float = QFI_CUTOFF) -> float:
    """2 sum_lm (l_l - l_m)^2/(l_l + l_m) <m|Ai|l><l|Aj|m>, real part."""
    V = decomp.eigenvectors
    Ai_lm = V.conj().T @ (Ai @ V)  # <l|Ai|m>
    Aj_lm = V.conj().T @ (Aj @ V)
    w = _qfi_weights(decomp.eigenvalues, cutoff)
    # <m|Ai|l> = conj(<l|Ai|m>) for Hermitian Ai
    return float(np.real(2.0 * np.sum(w * Ai_lm.conj() * Aj_lm)))


def qfi(decomp: SpectralDecomposition, A, cutoff: float = QFI_CUTOFF) -> float:
    return qfim_entry(decomp, A, A, cutoff)


def check_density_matrix(rho: np.ndarray, tol: float = 1e-10, pos_tol: float = 1e-8) -> dict:
    herm = float(np.max(np.abs(rho - rho.conj().T)))
    tr = float(abs(np.trace(rho) - 1.0))
    lam_min = float(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min())
    return {"hermitian": herm < tol, "trace": tr < tol, "positive": lam_min >= -pos_tol,
            "hermiticity_error": herm, "trace_error": tr, "min_eigenvalue": lam_min}
