"""Heterodyne (quantum-state-diffusion) trajectories under cumulant truncation.

Order 1 evolves only the single-site Bloch vectors (factorized state).  Order 2
also evolves the cross-site covariances ``F`` with all third cumulants set to
zero.  The stochastic increments are real Wiener pairs ``dW^X_j, dW^Y_j`` per
site (``dZ_j = (dW^X_j + i dW^Y_j) / sqrt(2)``), each with variance ``dt``.

Conventions used by every kernel below:

* Hamiltonian drift of a single spin,
  ``d<sigma_s^a>|_H = sum_{s' in nb(s)} sum_t KC[a,t] <sigma_s^{KD[a,t]} sigma_{s'}^{KG[a,t]}>``
  with ``KC[a, t] = -2 J_g eps_{g a d}``.
* Dissipative damping rates ``lam = (gamma/2, gamma/2, gamma)`` plus the
  constant ``-gamma`` pull on the z component.
* The noise on an expectation value ``<O>`` is
  ``sqrt(2 eta) (Re a_j dW^X_j - Im a_j dW^Y_j)`` with
  ``a_j = sqrt(gamma) <sigma_j^+ (O - <O>)>``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from .cumulants import SIGMA_PLUS_C0, SIGMA_PLUS_C1, CumulantState
from .lattice import LatticeSpec, ModelParams, levi_civita

DIVERGENCE_BOUND = 1.5
DIVERGENCE_STEPS = 100

STATUS_OK = 0
STATUS_BOUND = 1
STATUS_NONFINITE = 2
STATUS_NAMES = {STATUS_OK: "ok", STATUS_BOUND: "divergent", STATUS_NONFINITE: "divergent"}

# (delta, gamma) axis pairs entering the Hamiltonian drift of component alpha
_KD = np.array([[2, 1], [0, 2], [1, 0]], dtype=np.int64)
_KG = np.array([[1, 2], [2, 0], [0, 1]], dtype=np.int64)


def drift_coefficients(params: ModelParams) -> np.ndarray:
    """KC[a, t] = -2 J_g eps_{g a d} for the two (d, g) pairs of each axis a."""
    J = params.J
    kc = np.zeros((3, 2))
    for a in range(3):
        for t in range(2):
            d, g = _KD[a, t], _KG[a, t]
            kc[a, t] = -2.0 * J[g] * levi_civita(g, a, d)
    return kc


def damping_rates(gamma: float) -> np.ndarray:
    return np.array([0.5 * gamma, 0.5 * gamma, gamma])


@dataclass(frozen=True)
class IntegratorConfig:
    """Settings of a single trajectory integration.

    Attributes:
        order: cumulant truncation order, 1 or 2.
        dt: Euler-Maruyama step in units of 1/gamma.
        eta: measurement efficiency; ``None`` takes the value from ModelParams.
        include_cov_noise: add the stochastic covariance increments (order 2).
        seed: master seed of the ensemble.
        t_max, window_start, window_end: run length and averaging window.
        init: ``"down"`` (all spins along -z) or ``"tilted"`` (random product
            state tilted away from -z by at most ``tilt`` radians).
        sample_every: steps between samples inside the window.
        block_steps: noise increments drawn per block.
    """

    order: int = 2
    dt: float = 1e-3
    eta: float | None = None
    include_cov_noise: bool = False
    seed: int = 0
    t_max: float = 150.0
    window_start: float = 75.0
    window_end: float = 150.0
    init: str = "down"
    tilt: float = 0.3
    sample_every: int = 10
    block_steps: int = 2000

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.eta is not None and not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if not self.window_start < self.window_end <= self.t_max:
            raise ValueError("need window_start < window_end <= t_max")
        if self.init not in ("down", "tilted"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.sample_every < 1 or self.block_steps < 1:
            raise ValueError("sample_every and block_steps must be >= 1")

    def efficiency(self, params: ModelParams) -> float:
        return params.eta if self.eta is None else float(self.eta)

    def step_indices(self) -> tuple[int, int, int]:
        """(total steps, first window step, last window step)."""
        n = int(round(self.t_max / self.dt))
        return n, int(round(self.window_start / self.dt)), int(round(self.window_end / self.dt))

    def to_dict(self) -> dict:
        return asdict(self)


# -- numba kernels ------------------------------------------------------------

@njit(cache=True)
def _local_noise(mx, my, mz, alpha, sqrt_gamma, C0, C1):
    """(BX, BY) of <sigma_s^alpha> driven by its own site's noise."""
    mv = (mx, my, mz)
    acc = C0[alpha]
    for k in range(3):
        acc += C1[alpha, k] * mv[k]
    acc -= 0.5 * (mx + 1j * my) * mv[alpha]
    a = sqrt_gamma * acc
    return math.sqrt(2.0) * a.real, -math.sqrt(2.0) * a.imag


@njit(cache=True)
def _k1_rates(m, nb, cnt, KD, KG, KC, lam, gamma, dm, BX, BY, C0, C1):
    N = m.shape[0]
    sg = math.sqrt(gamma)
    for s in range(N):
        for a in range(3):
            acc = -lam[a] * m[s, a]
            if a == 2:
                acc -= gamma
            for k in range(cnt[s]):
                sp = nb[s, k]
                for t in range(2):
                    acc += KC[a, t] * m[s, KD[a, t]] * m[sp, KG[a, t]]
            dm[s, a] = acc
            bx, by = _local_noise(m[s, 0], m[s, 1], m[s, 2], a, sg, C0, C1)
            BX[s, a] = bx
            BY[s, a] = by


@njit(cache=True)
def _k2_rates(m, F, nb, cnt, KD, KG, KC, lam, gamma, eta, dm, dF, BX, BY, T, C0, C1):
    """Mean drift dm, covariance drift dF (with Ito term) and noise matrices.

    BX, BY have shape (3N, N): column j holds the coefficient of dW^X_j, dW^Y_j
    (without the sqrt(eta) factor).
    """
    N = m.shape[0]
    n3 = 3 * N
    c = math.sqrt(0.5 * gamma)
    sg = math.sqrt(gamma)
    for s in range(N):
        for a in range(3):
            acc = -lam[a] * m[s, a]
            if a == 2:
                acc -= gamma
            for k in range(cnt[s]):
                sp = nb[s, k]
                for t in range(2):
                    d = KD[a, t]
                    g = KG[a, t]
                    acc += KC[a, t] * (F[3 * s + d, 3 * sp + g] + m[s, d] * m[sp, g])
            dm[s, a] = acc
    for i in range(n3):
        for j in range(N):
            BX[i, j] = c * F[i, 3 * j]
            BY[i, j] = -c * F[i, 3 * j + 1]
    for s in range(N):
        for a in range(3):
            bx, by = _local_noise(m[s, 0], m[s, 1], m[s, 2], a, sg, C0, C1)
            BX[3 * s + a, s] = bx
            BY[3 * s + a, s] = by
    # T[(s,a),(q,b)]: drift of the s-operator inside F[(s,a),(q,b)].  Rows are
    # built with the neighbour-summed table AF and local field h assuming
    # s' != q, then bonds with s' = q are corrected.
    AF = np.zeros((n3, n3))
    h = np.zeros((N, 3))
    for s in range(N):
        for k in range(cnt[s]):
            sp = nb[s, k]
            for g in range(3):
                h[s, g] += m[sp, g]
                for j in range(n3):
                    AF[3 * s + g, j] += F[3 * sp + g, j]
    for s in range(N):
        for a in range(3):
            i = 3 * s + a
            for j in range(n3):
                T[i, j] = -lam[a] * F[i, j]
            for t in range(2):
                d = KD[a, t]
                g = KG[a, t]
                c1 = KC[a, t] * m[s, d]
                c2 = KC[a, t] * h[s, g]
                for j in range(n3):
                    T[i, j] += c1 * AF[3 * s + g, j] + c2 * F[3 * s + d, j]
            for k in range(cnt[s]):
                q = nb[s, k]
                for b in range(3):
                    corr = 0.0
                    for t in range(2):
                        d = KD[a, t]
                        g = KG[a, t]
                        e3 = -m[q, b] * (F[3 * s + d, 3 * q + g] + m[s, d] * m[q, g])
                        if g == b:
                            e3 += m[s, d]
                        # the generic row used m_s^d F[qg, qb] (= 0) + m_q^g F[sd, qb]
                        e3 -= m[q, g] * F[3 * s + d, 3 * q + b]
                        corr += KC[a, t] * e3
                    T[i, 3 * q + b] += corr
    ito = BX @ BX.T + BY @ BY.T
    for i in range(n3):
        si = i // 3
        for j in range(n3):
            if j // 3 == si:
                dF[i, j] = 0.0
            else:
                dF[i, j] = T[i, j] + T[j, i] - 0.5 * eta * (ito[i, j] + ito[j, i])


@njit(cache=True)
def _k2_cov_noise(m, F, gamma, dWX, dWY, out, C1):
    """Stochastic covariance increment (without sqrt(eta)); symmetric by construction."""
    N = m.shape[0]
    n3 = 3 * N
    sg = math.sqrt(gamma)
    r2 = math.sqrt(2.0)
    D = np.zeros((n3, n3))
    for s in range(N):
        plus = 0.5 * (m[s, 0] + 1j * m[s, 1])
        for a in range(3):
            i = 3 * s + a
            for j in range(n3):
                if j // 3 == s:
                    continue
                acc = 0j
                for k in range(3):
                    acc += C1[a, k] * F[3 * s + k, j]
                acc -= plus * F[i, j]
                acc -= 0.5 * m[s, a] * (F[3 * s, j] + 1j * F[3 * s + 1, j])
                av = sg * acc
                D[i, j] = r2 * av.real * dWX[s] - r2 * av.imag * dWY[s]
    for i in range(n3):
        for j in range(n3):
            out[i, j] = D[i, j] + D[j, i]


@njit(cache=True)
def _esym4(v):
    p1 = 0.0
    p2 = 0.0
    p3 = 0.0
    p4 = 0.0
    for x in v:
        x2 = x * x
        p1 += x
        p2 += x2
        p3 += x2 * x
        p4 += x2 * x2
    e1 = p1
    e2 = (e1 * p1 - p2) / 2.0
    e3 = (e2 * p1 - e1 * p2 + p3) / 3.0
    return (e3 * p1 - e2 * p2 + e1 * p3 - p4) / 4.0


@njit(cache=True)
def _collective_m2_m4(m, F, a):
    """<(J^a/N)^2>, <(J^a/N)^4> for uniform Pauli J^a under the pair closure."""
    N = m.shape[0]
    mu = m[:, a].copy()
    S = mu.sum()
    Q = (mu * mu).sum()
    rows = np.zeros(N)
    tot = 0.0
    for i in range(N):
        for j in range(N):
            if i != j:
                rows[i] += F[3 * i + a, 3 * j + a]
        tot += rows[i]
    T2 = tot + S * S - Q
    m2 = (N + T2) / N**2
    acc6 = 0.0
    acc3 = 0.0
    for i in range(N):
        for j in range(N):
            if i == j:
                continue
            c = F[3 * i + a, 3 * j + a]
            r = S - mu[i] - mu[j]
            acc6 += c * (r * r - (Q - mu[i] ** 2 - mu[j] ** 2))
            acc3 += c * (tot - 2 * rows[i] - 2 * rows[j] + 2 * c)
    d4 = 24.0 * _esym4(mu) + 6.0 * acc6 + 3.0 * acc3
    m4 = (N + 4 * T2 + 3 * N * (N - 1) + 6 * (N - 2) * T2 + d4) / N**4
    return m2, m4


@njit(cache=True)
def _accumulate(m, F, order, m_acc, F_acc, P_acc, mom_acc):
    N = m.shape[0]
    n3 = 3 * N
    for s in range(N):
        for a in range(3):
            m_acc[s, a] += m[s, a]
    for i in range(n3):
        mi = m[i // 3, i % 3]
        for j in range(n3):
            P_acc[i, j] += mi * m[j // 3, j % 3]
            if order == 2:
                F_acc[i, j] += F[i, j]
    for a in range(2):
        m2, m4 = _collective_m2_m4(m, F, a)
        mom_acc[a] += m2
        mom_acc[2 + a] += m4


@njit(cache=True)
def _run_block(order, m, F, nb, cnt, KD, KG, KC, lam, gamma, eta, dt, dW, step0,
               ws, we, stride, cov_noise, m_acc, F_acc, P_acc, mom_acc, counters, C0, C1):
    """Advance up to dW.shape[0] steps; returns a status code.

    counters = [samples, consecutive out-of-bound steps, sampled physicality
    violations, steps done].
    """
    N = m.shape[0]
    n3 = 3 * N
    se = math.sqrt(eta)
    dm = np.zeros((N, 3))
    BXl = np.zeros((N, 3))
    BYl = np.zeros((N, 3))
    dF = np.zeros((n3, n3))
    BX = np.zeros((n3, N))
    BY = np.zeros((n3, N))
    T = np.zeros((n3, n3))
    Fn = np.zeros((n3, n3))
    dWX = np.zeros(N)
    dWY = np.zeros(N)
    for k in range(dW.shape[0]):
        for j in range(N):
            dWX[j] = dW[k, j, 0]
            dWY[j] = dW[k, j, 1]
        if order == 1:
            _k1_rates(m, nb, cnt, KD, KG, KC, lam, gamma, dm, BXl, BYl, C0, C1)
            for s in range(N):
                for a in range(3):
                    m[s, a] += dm[s, a] * dt + se * (BXl[s, a] * dWX[s] + BYl[s, a] * dWY[s])
        else:
            _k2_rates(m, F, nb, cnt, KD, KG, KC, lam, gamma, eta, dm, dF, BX, BY, T, C0, C1)
            if cov_noise and eta > 0.0:
                _k2_cov_noise(m, F, gamma, dWX, dWY, Fn, C1)
            noise = BX @ dWX + BY @ dWY
            for s in range(N):
                for a in range(3):
                    m[s, a] += dm[s, a] * dt + se * noise[3 * s + a]
            for i in range(n3):
                for j in range(n3):
                    F[i, j] += dF[i, j] * dt
                    if cov_noise and eta > 0.0:
                        F[i, j] += se * Fn[i, j]
        counters[3] += 1
        step = step0 + k + 1
        big = 0.0
        finite = True
        for s in range(N):
            for a in range(3):
                v = m[s, a]
                if not np.isfinite(v):
                    finite = False
                elif abs(v) > big:
                    big = abs(v)
        if not finite:
            return 2
        if big > 1.5:
            counters[1] += 1
            if counters[1] >= 100:
                return 1
        else:
            counters[1] = 0
        if step >= ws and step <= we and (step - ws) % stride == 0:
            if order == 2:
                for i in range(n3):
                    for j in range(n3):
                        if not np.isfinite(F[i, j]):
                            return 2
            if big > 1.05:
                counters[2] += 1
            _accumulate(m, F, order, m_acc, F_acc, P_acc, mom_acc)
            counters[0] += 1
    return 0


# -- Python-level operations ---------------------------------------------------

def _lattice_arrays(spec: LatticeSpec):
    nb, cnt = spec.neighbor_table()
    return nb, cnt


def _as_means(state) -> np.ndarray:
    if isinstance(state, CumulantState):
        return state.means
    return np.ascontiguousarray(state, dtype=float).reshape(-1, 3)


def _draw_arrays(draws, N):
    d = np.asarray(draws, dtype=float).reshape(N, 2)
    return np.ascontiguousarray(d[:, 0]), np.ascontiguousarray(d[:, 1])


def drift_means_k1(state, params: ModelParams, spec: LatticeSpec) -> np.ndarray:
    """Deterministic rate d<sigma_s^a>/dt of the factorized (order 1) equations."""
    m = np.ascontiguousarray(_as_means(state))
    nb, cnt = _lattice_arrays(spec)
    dm = np.zeros_like(m)
    BX = np.zeros_like(m)
    BY = np.zeros_like(m)
    _k1_rates(m, nb, cnt, _KD, _KG, drift_coefficients(params), damping_rates(params.gamma),
              params.gamma, dm, BX, BY, SIGMA_PLUS_C0, SIGMA_PLUS_C1)
    return dm


def noise_coefficients_k1(state, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Local (BX, BY) coefficients, each (N, 3), without the sqrt(eta) factor."""
    m = np.ascontiguousarray(_as_means(state))
    N = m.shape[0]
    dm = np.zeros_like(m)
    BX = np.zeros_like(m)
    BY = np.zeros_like(m)
    nb = np.full((N, 1), -1, dtype=np.int64)
    _k1_rates(m, nb, np.zeros(N, dtype=np.int64), _KD, _KG, np.zeros((3, 2)),
              damping_rates(params.gamma), params.gamma, dm, BX, BY, SIGMA_PLUS_C0, SIGMA_PLUS_C1)
    return BX, BY


def noise_means_k1(state, draws, params: ModelParams, eta: float | None = None) -> np.ndarray:
    """Stochastic increment of the means for one step; draws is (N, 2) = (dW^X, dW^Y)."""
    eta = params.eta if eta is None else eta
    BX, BY = noise_coefficients_k1(state, params)
    dWX, dWY = _draw_arrays(draws, BX.shape[0])
    return math.sqrt(eta) * (BX * dWX[:, None] + BY * dWY[:, None])


def drift_k2(state: CumulantState, params: ModelParams, spec: LatticeSpec,
             eta: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(dm/dt, dF/dt) of the order-2 equations, Ito correction scaled by eta."""
    eta = params.eta if eta is None else eta
    if not state.is_finite():
        raise FloatingPointError("state contains non-finite entries")
    N = state.N
    nb, cnt = _lattice_arrays(spec)
    dm = np.zeros((N, 3))
    dF = np.zeros((3 * N, 3 * N))
    BX = np.zeros((3 * N, N))
    BY = np.zeros((3 * N, N))
    T = np.zeros((3 * N, 3 * N))
    _k2_rates(np.ascontiguousarray(state.means), np.ascontiguousarray(state.cov), nb, cnt,
              _KD, _KG, drift_coefficients(params), damping_rates(params.gamma), params.gamma,
              float(eta), dm, dF, BX, BY, T, SIGMA_PLUS_C0, SIGMA_PLUS_C1)
    if not (np.isfinite(dm).all() and np.isfinite(dF).all()):
        raise FloatingPointError("non-finite drift")
    return dm, dF


def noise_matrix_k2(state: CumulantState, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """(BX, BY), each (3N, N): coefficient of dW^X_j, dW^Y_j in d<sigma_s^a>, without sqrt(eta)."""
    N = state.N
    nb, cnt = np.full((N, 1), -1, dtype=np.int64), np.zeros(N, dtype=np.int64)
    dm = np.zeros((N, 3))
    dF = np.zeros((3 * N, 3 * N))
    BX = np.zeros((3 * N, N))
    BY = np.zeros((3 * N, N))
    T = np.zeros((3 * N, 3 * N))
    _k2_rates(np.ascontiguousarray(state.means), np.ascontiguousarray(state.cov), nb, cnt,
              _KD, _KG, np.zeros((3, 2)), damping_rates(params.gamma), params.gamma, 0.0,
              dm, dF, BX, BY, T, SIGMA_PLUS_C0, SIGMA_PLUS_C1)
    return BX, BY


def noise_means_k2(state: CumulantState, draws, params: ModelParams,
                   eta: float | None = None) -> np.ndarray:
    """Stochastic increment of the means (N, 3), local plus cross-site terms."""
    eta = params.eta if eta is None else eta
    BX, BY = noise_matrix_k2(state, params)
    dWX, dWY = _draw_arrays(draws, state.N)
    return (math.sqrt(eta) * (BX @ dWX + BY @ dWY)).reshape(state.N, 3)


def cov_noise_k2(state: CumulantState, draws, params: ModelParams,
                 eta: float | None = None) -> np.ndarray:
    """Stochastic covariance increment (3N, 3N) for one step."""
    eta = params.eta if eta is None else eta
    dWX, dWY = _draw_arrays(draws, state.N)
    out = np.zeros_like(state.cov)
    _k2_cov_noise(np.ascontiguousarray(state.means), np.ascontiguousarray(state.cov),
                  params.gamma, dWX, dWY, out, SIGMA_PLUS_C1)
    return math.sqrt(eta) * out


def em_step(state: CumulantState, config: IntegratorConfig, params: ModelParams,
            spec: LatticeSpec, draws) -> CumulantState:
    """One Euler-Maruyama step; returns a new state. Raises on non-finite output."""
    eta = config.efficiency(params)
    dt = config.dt
    new = state.copy()
    if config.order == 1:
        dm = drift_means_k1(state, params, spec)
        new.means = state.means + dm * dt + noise_means_k1(state, draws, params, eta)
    else:
        dm, dF = drift_k2(state, params, spec, eta)
        new.means = state.means + dm * dt + noise_means_k2(state, draws, params, eta)
        new.cov = state.cov + dF * dt
        if config.include_cov_noise and eta > 0:
            new.cov = new.cov + cov_noise_k2(state, draws, params, eta)
    new.t = state.t + dt
    if not new.is_finite():
        raise FloatingPointError("trajectory diverged")
    return new


def initial_state(config: IntegratorConfig, N: int, rng: np.random.Generator | None = None) -> CumulantState:
    if config.init == "down":
        return CumulantState.all_down(N)
    if rng is None:
        raise ValueError("tilted initialization needs a random generator")
    theta = np.pi - config.tilt * rng.random(N)
    phi = 2 * np.pi * rng.random(N)
    means = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=1)
    return CumulantState.product(means)


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    """Counter-based generator keyed by (master_seed, trajectory index)."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class TrajectoryResult:
    """Window averages of one trajectory.

    ``G`` is the symmetrized two-point table <sigma_i^a sigma_j^b> (same-site
    block = identity), ``P`` the product of expectations <sigma_i^a><sigma_j^b>
    (including the same-site block), both time-averaged over the window.
    ``moments`` holds (m2x, m2y, m4x, m4y) of the uniform collective spin.
    """

    index: int
    status: str
    m: np.ndarray | None = None
    G: np.ndarray | None = None
    P: np.ndarray | None = None
    moments: np.ndarray | None = None
    samples: int = 0
    phys_violations: int = 0
    jumps: int = 0
    final_state: CumulantState | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def run_trajectory(config: IntegratorConfig, params: ModelParams, spec: LatticeSpec,
                   rng: np.random.Generator | None = None, index: int = 0,
                   keep_state: bool = False) -> TrajectoryResult:
    """Integrate one trajectory from the initial state to t_max and window-average it.

    A trajectory that produces a non-finite value, or whose means stay beyond
    the divergence bound for 100 consecutive steps, is returned with status
    ``"divergent"`` and no data.
    """
    rng = trajectory_rng(config.seed, index) if rng is None else rng
    N = spec.N
    state = initial_state(config, N, rng)
    m = np.ascontiguousarray(state.means.copy())
    F = np.ascontiguousarray(state.cov.copy())
    eta = config.efficiency(params)
    nb, cnt = _lattice_arrays(spec)
    kc = drift_coefficients(params)
    lam = damping_rates(params.gamma)
    n_steps, ws, we = config.step_indices()
    m_acc = np.zeros((N, 3))
    F_acc = np.zeros((3 * N, 3 * N))
    P_acc = np.zeros((3 * N, 3 * N))
    mom_acc = np.zeros(4)
    counters = np.zeros(4, dtype=np.int64)
    sdt = math.sqrt(config.dt)
    done = 0
    status = STATUS_OK
    while done < n_steps:
        nblk = min(config.block_steps, n_steps - done)
        dW = rng.standard_normal((nblk, N, 2)) * sdt
        if eta == 0.0:
            dW[:] = 0.0
        status = _run_block(config.order, m, F, nb, cnt, _KD, _KG, kc, lam, params.gamma, eta,
                            config.dt, dW, done, ws, we, config.sample_every,
                            config.include_cov_noise, m_acc, F_acc, P_acc, mom_acc, counters,
                            SIGMA_PLUS_C0, SIGMA_PLUS_C1)
        if status != STATUS_OK:
            return TrajectoryResult(index, STATUS_NAMES[status])
        done += nblk
    ns = int(counters[0])
    if ns == 0:
        raise ValueError("averaging window contains no samples")
    P = P_acc / ns
    G = F_acc / ns + P
    G = 0.5 * (G + G.T)
    for i in range(N):
        G[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = np.eye(3)
    final = CumulantState(done * config.dt, m.copy(), F.copy()) if keep_state else None
    return TrajectoryResult(index, "ok", m_acc / ns, G, P, mom_acc / ns, ns,
                            phys_violations=int(counters[2]), final_state=final)


def imaginary_residue(state: CumulantState, params: ModelParams, spec: LatticeSpec) -> float:
    """Largest net imaginary part dropped from the bond terms of the covariance drift.

    For a bond (s, q) the drift of <sigma_s^a sigma_q^b> contains
    <i[H, sigma_s^a] sigma_q^b> + <sigma_s^a i[H, sigma_q^b]>.  Each piece has a
    same-site product with an imaginary Pauli part; the drift keeps only real
    parts, which is exact when the two imaginary parts cancel.  Returns the
    largest |Im| of their sum over all bonds and axis pairs.
    """
    kc = drift_coefficients(params)
    flat = state.means.reshape(-1)
    G = state.cov + np.outer(flat, flat)
    worst = 0.0
    for s0, q0 in spec.edges:
        for s, q in ((s0, q0), (q0, s0)):
            for a in range(3):
                for b in range(3):
                    im = 0.0
                    for t in range(2):
                        # i[H, sigma_s^a] sigma_q^b, bond term: sigma_s^d (sigma_q^g sigma_q^b)
                        d, g = _KD[a, t], _KG[a, t]
                        if g != b:
                            k = 3 - g - b
                            im += kc[a, t] * levi_civita(g, b, k) * G[3 * s + d, 3 * q + k]
                        # sigma_s^a i[H, sigma_q^b], bond term: sigma_q^d (sigma_s^a sigma_s^g)
                        d, g = _KD[b, t], _KG[b, t]
                        if g != a:
                            k = 3 - a - g
                            im += kc[b, t] * levi_civita(a, g, k) * G[3 * s + k, 3 * q + d]
                    worst = max(worst, abs(im))
    return worst
