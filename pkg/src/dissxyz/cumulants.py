"""Truncated-cumulant trajectory state and the moment/cumulant closure algebra.

A :class:`CumulantState` holds the first moments ``m[i, a] = <sigma_i^a>`` and
the cross-site covariances ``F[(i,a),(j,b)] = <sigma_i^a sigma_j^b> - m[i,a] m[j,b]``
stored densely as a ``(3N, 3N)`` array indexed by ``3*i + a``.  Same-site 3x3
blocks are kept at zero: products on one site are reduced with the Pauli
algebra instead of being stored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lattice import axis_index, pauli_product

TOL_PHYS = 0.05
# same-site sigma^+ sigma^a = C0[a] + sum_k C1[a, k] sigma^k
SIGMA_PLUS_C0 = np.array([0.5, 0.5j, 0.0])
SIGMA_PLUS_C1 = np.array(
    [
        [0.0, 0.0, 0.5],
        [0.0, 0.0, 0.5j],
        [-0.5, -0.5j, 0.0],
    ]
)


class NonFiniteStateError(ValueError):
    pass


@dataclass
class CumulantState:
    t: float
    means: np.ndarray
    cov: np.ndarray = field(default=None)

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=float).reshape(-1, 3)
        n3 = 3 * self.means.shape[0]
        if self.cov is None:
            self.cov = np.zeros((n3, n3))
        self.cov = np.ascontiguousarray(self.cov, dtype=float)
        if self.cov.shape != (n3, n3):
            raise ValueError(f"cov must have shape {(n3, n3)}, got {self.cov.shape}")

    @property
    def N(self) -> int:
        return self.means.shape[0]

    @classmethod
    def product(cls, means, t: float = 0.0) -> "CumulantState":
        return cls(t, np.array(means, dtype=float))

    @classmethod
    def all_down(cls, N: int, t: float = 0.0) -> "CumulantState":
        m = np.zeros((N, 3))
        m[:, 2] = -1.0
        return cls(t, m)

    def copy(self) -> "CumulantState":
        return CumulantState(self.t, self.means.copy(), self.cov.copy())

    def F(self, i: int, a, j: int, b) -> float:
        return self.cov[3 * i + axis_index(a), 3 * j + axis_index(b)]

    def two_point(self) -> np.ndarray:
        """Symmetrised <sigma_i^a sigma_j^b> for all pairs; same-site block is delta_ab."""
        flat = self.means.reshape(-1)
        G = self.cov + np.outer(flat, flat)
        for i in range(self.N):
            G[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = np.eye(3)
        return G

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.means).all() and np.isfinite(self.cov).all())

    def physical_violations(self, tol: float = TOL_PHYS) -> dict:
        """Count entries outside the Pauli bounds |<sigma>| <= 1, |<sigma sigma>| <= 1."""
        flat = self.means.reshape(-1)
        G = self.cov + np.outer(flat, flat)
        mask = np.ones_like(G, dtype=bool)
        for i in range(self.N):
            mask[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = False
        return {
            "means": int(np.sum(np.abs(self.means) > 1 + tol)),
            "pairs": int(np.sum(np.abs(G[mask]) > 1 + tol)) // 2,
        }

    def symmetry_residual(self) -> float:
        return float(np.max(np.abs(self.cov - self.cov.T))) if self.cov.size else 0.0

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        iu = np.triu_indices(3 * self.N, k=1)
        return {
            "t": float(self.t),
            "N": self.N,
            "means": self.means.reshape(-1).tolist(),
            "cov_upper": self.cov[iu].tolist(),
            "layout": "means row-major (site, axis); cov_upper = strict upper triangle of the "
            "(3N, 3N) covariance, row-major, index 3*site+axis",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CumulantState":
        N = int(d["N"])
        cov = np.zeros((3 * N, 3 * N))
        iu = np.triu_indices(3 * N, k=1)
        cov[iu] = np.asarray(d["cov_upper"], dtype=float)
        cov = cov + cov.T
        return cls(float(d["t"]), np.asarray(d["means"], dtype=float).reshape(N, 3), cov)

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix == ".npz":
            np.savez(path, t=self.t, means=self.means, cov=self.cov)
        else:
            path.write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "CumulantState":
        path = Path(path)
        if path.suffix == ".npz":
            with np.load(path) as z:
                return cls(float(z["t"]), z["means"], z["cov"])
        return cls.from_dict(json.loads(path.read_text()))


def reduce_site_products(ops) -> tuple[complex, list[tuple[int, int]]]:
    """Collapse operators acting on the same site with the Pauli algebra.

    Operators on different sites commute, so only the relative order of
    operators on a common site matters.  Returns ``(coeff, ops)`` where the
    remaining ops sit on pairwise distinct sites.
    """
    per_site: dict[int, tuple[complex, int | None]] = {}
    order = []
    for site, axis in ops:
        a = axis_index(axis)
        if site not in per_site:
            per_site[site] = (1.0 + 0j, a)
            order.append(site)
            continue
        coeff, cur = per_site[site]
        if cur is None:
            per_site[site] = (coeff, a)
        else:
            p = pauli_product(cur, a)
            if p.axis is None:
                per_site[site] = (coeff * p.identity_coeff, None)
            else:
                per_site[site] = (coeff * p.axis_coeff, p.axis)
    coeff = 1.0 + 0j
    reduced = []
    for site in order:
        c, a = per_site[site]
        coeff *= c
        if a is not None:
            reduced.append((site, a))
    return coeff, reduced


def _pair_partitions(items):
    """Set partitions of ``items`` into blocks of size one or two."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _pair_partitions(rest):
        yield [(first,)] + part
    for k, other in enumerate(rest):
        remaining = rest[:k] + rest[k + 1 :]
        for part in _pair_partitions(remaining):
            yield [(first, other)] + part


def distinct_site_moment(state: CumulantState, ops) -> float:
    """<prod sigma> over distinct sites with all cumulants of order >= 3 set to zero."""
    total = 0.0
    m, F = state.means, state.cov
    for part in _pair_partitions(list(ops)):
        term = 1.0
        for block in part:
            if len(block) == 1:
                (s, a), = block
                term *= m[s, a]
            else:
                (s, a), (t, b) = block
                term *= F[3 * s + a, 3 * t + b]
        total += term
    return total


def moment_from_cumulants(state: CumulantState, ops) -> complex:
    """Moment <prod_k sigma_{s_k}^{a_k}> under the second-order cumulant closure."""
    if len(ops) > 4:
        raise ValueError("closure moments are supported up to fourth order")
    if not state.is_finite():
        raise NonFiniteStateError("state contains non-finite entries")
    coeff, reduced = reduce_site_products(ops)
    if coeff == 0:
        return 0j
    return coeff * distinct_site_moment(state, reduced)


def reduce_three_point(state: CumulantState, s, a, sp, b, m, c) -> float:
    """Real part of <sigma_s^a sigma_sp^b delta_m^c> with the third cumulant dropped.

    ``delta_m^c = sigma_m^c - <sigma_m^c>``; requires ``s != m`` and ``s != sp``.
    """
    a, b, c = axis_index(a), axis_index(b), axis_index(c)
    mu, F = state.means, state.cov
    if sp == m:
        # sigma_m^b sigma_m^c = delta_bc + i eps sigma_m^k; the i-eps part is imaginary
        p = pauli_product(b, c)
        value = p.identity_coeff * mu[s, a]
        if p.axis is not None:
            k = p.axis
            value += p.axis_coeff * (F[3 * s + a, 3 * m + k] + mu[s, a] * mu[m, k])
        value -= mu[m, c] * (F[3 * s + a, 3 * m + b] + mu[s, a] * mu[m, b])
        return float(np.real(value))
    return float(mu[s, a] * F[3 * sp + b, 3 * m + c] + mu[sp, b] * F[3 * s + a, 3 * m + c])


def _elementary_symmetric(values: np.ndarray, k: int) -> float:
    # Newton's identities from power sums
    p = [None] + [float(np.sum(values**r)) for r in range(1, k + 1)]
    e = [1.0]
    for n in range(1, k + 1):
        e.append(sum((-1) ** (r - 1) * e[n - r] * p[r] for r in range(1, n + 1)) / n)
    return e[k]


def collective_moment(state: CumulantState, axis, staggered: bool = False, order: int = 2,
                      signs=None) -> float:
    """<(N^-1 sum_j s_j sigma_j^axis)^order> under the closure, order in {1, 2, 4}.

    ``s_j`` is 1 (uniform) or the sublattice sign; pass ``signs`` explicitly for
    staggered moments (``LatticeSpec.stagger()``).
    """
    if order not in (1, 2, 4):
        raise ValueError(f"unsupported order {order}")
    a = axis_index(axis)
    N = state.N
    if signs is None:
        if staggered:
            raise ValueError("staggered moments need the lattice sign pattern")
        signs = np.ones(N)
    signs = np.asarray(signs, dtype=float)
    mu = signs * state.means[:, a]
    C = state.cov[a::3, a::3] * np.outer(signs, signs)
    C = C - np.diag(np.diag(C))
    if order == 1:
        return float(mu.sum() / N)
    S, Q = mu.sum(), np.sum(mu**2)
    T2 = C.sum() + S * S - Q
    if order == 2:
        return float((N + T2) / N**2)
    # index coincidence classes of the four positions: {1234}, 4x{123}{4},
    # 3x{12}{34}, 6x{12}{3}{4}, and the all-distinct term
    rows = C.sum(axis=1)
    tot = C.sum()
    rest = (S - mu[:, None] - mu[None, :]) ** 2 - (Q - mu[:, None] ** 2 - mu[None, :] ** 2)
    d4 = (
        24.0 * _elementary_symmetric(mu, 4)
        + 6.0 * np.sum(C * rest)
        + 3.0 * np.sum(C * (tot - 2 * rows[:, None] - 2 * rows[None, :] + 2 * C))
    )
    total = N + 4 * T2 + 3 * N * (N - 1) + 6 * (N - 2) * T2 + d4
    return float(total / N**4)
