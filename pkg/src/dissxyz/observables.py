"""Ensemble accumulators and the physical observables built from them.

Trajectory averages are written ``[.]``.  For every trajectory the window
averages of the symmetrized two-point table ``G_ij^ab = <sigma_i^a sigma_j^b>``
and of the product of expectations ``P_ij^ab = <sigma_i^a><sigma_j^b>`` are
stored, so that

* total correlations ``C = [G] - [m][m]``,
* classical correlations ``C_c = [P] - [m][m]``,
* quantum correlations ``C_q = [G - P]``

satisfy ``C = C_c + C_q`` by construction.  Pair correlators and structure
factors use Pauli operators; quantities entering the Fisher-information chain
are reported per spin under the spin-1/2 convention (separable bound = 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeSpec, axis_index

MIN_JZ = 1e-9


@dataclass
class TrajectorySummary:
    """Compact per-trajectory features kept for standard errors.

    Attributes:
        index: trajectory index within the ensemble.
        m: window-averaged means, (N, 3).
        QG, QP: (2, 3, 3) structure matrices of G and P at k = 0 and k = (pi, pi),
            ``Q[k, a, b] = N^-2 sum_ij s_i^k s_j^k X_ij^ab`` (P keeps its diagonal).
        profG, profP: (R, 3, 3) mean of the pair blocks at each axis separation r.
        moments: (m2x, m2y, m4x, m4y) of the uniform collective Pauli spin / N.
    """

    index: int
    m: np.ndarray
    QG: np.ndarray
    QP: np.ndarray
    profG: np.ndarray
    profP: np.ndarray
    moments: np.ndarray


def _block_sums(X: np.ndarray, signs: np.ndarray) -> np.ndarray:
    N = signs.shape[0]
    Xb = X.reshape(N, 3, N, 3)
    return np.einsum("i,iajb,j->ab", signs, Xb, signs) / N**2


class _Geometry:
    """Cached sign patterns and separation bins of a lattice."""

    def __init__(self, spec: LatticeSpec):
        self.spec = spec
        self.N = spec.N
        self.signs = np.stack([np.ones(spec.N), spec.stagger()])
        pairs = spec.axis_separation_pairs()
        self.radii = np.array(sorted(pairs), dtype=int)
        self.pairs = [np.array(pairs[r], dtype=int) for r in self.radii]

    def profile(self, X: np.ndarray) -> np.ndarray:
        N = self.N
        Xb = X.reshape(N, 3, N, 3)
        out = np.zeros((len(self.radii), 3, 3))
        for k, pr in enumerate(self.pairs):
            out[k] = Xb[pr[:, 0], :, pr[:, 1], :].mean(axis=0)
        return out

    def summarize(self, res) -> TrajectorySummary:
        QG = np.stack([_block_sums(res.G, s) for s in self.signs])
        QP = np.stack([_block_sums(res.P, s) for s in self.signs])
        mom = np.full(4, np.nan) if res.moments is None else np.asarray(res.moments, dtype=float)
        return TrajectorySummary(res.index, np.array(res.m), QG, QP, self.profile(res.G),
                                 self.profile(res.P), mom)


@dataclass
class EnsembleStats:
    """Mergeable accumulator over completed trajectories.

    Sums (and sums of squares) of the per-trajectory window averages are kept
    for every site and pair; compact per-trajectory summaries are kept for
    trajectory-level standard errors of derived quantities.
    """

    spec: LatticeSpec
    count: int = 0
    divergent: int = 0
    phys_violations: int = 0
    sum_m: np.ndarray = None
    sumsq_m: np.ndarray = None
    sum_G: np.ndarray = None
    sumsq_G: np.ndarray = None
    sum_P: np.ndarray = None
    sumsq_P: np.ndarray = None
    records: list = field(default_factory=list)

    def __post_init__(self):
        N = self.spec.N
        for name, shape in (("sum_m", (N, 3)), ("sumsq_m", (N, 3)), ("sum_G", (3 * N, 3 * N)),
                            ("sumsq_G", (3 * N, 3 * N)), ("sum_P", (3 * N, 3 * N)),
                            ("sumsq_P", (3 * N, 3 * N))):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(shape))
        self._geom = None

    @property
    def N(self) -> int:
        return self.spec.N

    @property
    def requested(self) -> int:
        return self.count + self.divergent

    @property
    def geometry(self) -> _Geometry:
        if self._geom is None:
            self._geom = _Geometry(self.spec)
        return self._geom

    def add(self, res) -> None:
        """Add one TrajectoryResult (divergent ones only bump the counter)."""
        if not res.ok:
            self.divergent += 1
            return
        self.count += 1
        self.phys_violations += int(getattr(res, "phys_violations", 0))
        self.sum_m += res.m
        self.sumsq_m += res.m**2
        self.sum_G += res.G
        self.sumsq_G += res.G**2
        self.sum_P += res.P
        self.sumsq_P += res.P**2
        self.records.append(self.geometry.summarize(res))

    def merge(self, other: "EnsembleStats") -> "EnsembleStats":
        return merge(self, other)

    # -- means ------------------------------------------------------------------

    def _require(self, n: int = 1):
        if self.count < n:
            raise ValueError(f"need at least {n} completed trajectories, have {self.count}")

    @property
    def mean_m(self) -> np.ndarray:
        self._require()
        return self.sum_m / self.count

    @property
    def mean_G(self) -> np.ndarray:
        self._require()
        return self.sum_G / self.count

    @property
    def mean_P(self) -> np.ndarray:
        self._require()
        return self.sum_P / self.count

    def record_array(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    # -- persistence ------------------------------------------------------------

    def to_arrays(self) -> dict:
        out = {
            "spec": np.array([self.spec.Lx, self.spec.Ly, self.spec.boundary == "periodic"]),
            "counts": np.array([self.count, self.divergent, self.phys_violations]),
        }
        for name in ("sum_m", "sumsq_m", "sum_G", "sumsq_G", "sum_P", "sumsq_P"):
            out[name] = getattr(self, name)
        for name in ("index", "m", "QG", "QP", "profG", "profP", "moments"):
            out["rec_" + name] = self.record_array(name)
        return out

    def save(self, path) -> None:
        np.savez_compressed(path, **self.to_arrays())

    @classmethod
    def load(cls, path) -> "EnsembleStats":
        with np.load(path) as z:
            lx, ly, per = (int(v) for v in z["spec"])
            spec = LatticeSpec(lx, ly, "periodic" if per else "open")
            count, div, phys = (int(v) for v in z["counts"])
            st = cls(spec, count, div, phys, *(z[n].copy() for n in
                     ("sum_m", "sumsq_m", "sum_G", "sumsq_G", "sum_P", "sumsq_P")))
            for k in range(len(z["rec_index"])):
                st.records.append(TrajectorySummary(int(z["rec_index"][k]), *(z["rec_" + n][k].copy() for n in
                                  ("m", "QG", "QP", "profG", "profP", "moments"))))
        return st


def merge(a: EnsembleStats, b: EnsembleStats) -> EnsembleStats:
    """Combine two accumulators; records are kept sorted by trajectory index."""
    if a.spec != b.spec:
        raise ValueError("cannot merge statistics of different lattices")
    out = EnsembleStats(a.spec, a.count + b.count, a.divergent + b.divergent,
                        a.phys_violations + b.phys_violations)
    for name in ("sum_m", "sumsq_m", "sum_G", "sumsq_G", "sum_P", "sumsq_P"):
        setattr(out, name, getattr(a, name) + getattr(b, name))
    out.records = sorted(a.records + b.records, key=lambda r: r.index)
    return out


# -- statistics helpers ------------------------------------------------------------

def mean_and_se(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean over the first axis and its standard error (0 for a single sample)."""
    x = np.asarray(samples, dtype=float)
    n = x.shape[0]
    mu = x.mean(axis=0)
    if n < 2:
        return mu, np.zeros_like(mu)
    return mu, x.std(axis=0, ddof=1) / math.sqrt(n)


def jackknife(func, *columns) -> tuple[float, float]:
    """Value of ``func`` at the full-sample means and its delete-one jackknife error."""
    cols = [np.asarray(c, dtype=float) for c in columns]
    n = cols[0].shape[0]
    sums = [c.sum(axis=0) for c in cols]
    value = func(*(s / n for s in sums))
    if n < 2:
        return float(value), 0.0
    loo = np.array([func(*((s - c[k]) / (n - 1) for s, c in zip(sums, cols))) for k in range(n)])
    se = math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return float(value), float(se)


def _direction(phi: float) -> np.ndarray:
    return np.array([math.cos(phi), math.sin(phi), 0.0])


def quadratic_form(S: np.ndarray, phi: float) -> float:
    u = _direction(phi)
    return float(u @ S @ u)


# -- structure factors -----------------------------------------------------------

def structure_matrix_from_G(G: np.ndarray, signs=None) -> np.ndarray:
    """3x3 matrix N^-2 sum_ij s_i s_j <sigma_i^a sigma_j^b> (symmetrized, same-site = delta)."""
    N = G.shape[0] // 3
    s = np.ones(N) if signs is None else np.asarray(signs, dtype=float)
    Gs = np.array(G, dtype=float)
    for i in range(N):
        Gs[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = np.eye(3)
    S = _block_sums(0.5 * (Gs + Gs.T), s)
    return 0.5 * (S + S.T)


def _k_index(k) -> int:
    if k in (0, "0", (0, 0)):
        return 0
    if k in ("pi", (math.pi, math.pi), "(pi,pi)"):
        return 1
    raise ValueError(f"unsupported wave vector {k!r}; use 0 or 'pi'")


def structure_matrix(stats: EnsembleStats, k=0) -> tuple[np.ndarray, np.ndarray]:
    """Ensemble structure matrix S^{ab}(k) and its standard error."""
    stats._require()
    return mean_and_se(stats.record_array("QG")[:, _k_index(k)])


def structure_factor(stats, axes=("x", "x"), k=0, spec: LatticeSpec | None = None) -> tuple[float, float]:
    """S^{ab}_SS(k) with diagonal terms <(sigma_i^a)^2> = 1; returns (value, se).

    ``stats`` is an EnsembleStats, or a two-point table G (then ``spec`` is
    needed for k = (pi, pi) and the error is zero).
    """
    a, b = axis_index(axes[0]), axis_index(axes[1])
    if isinstance(stats, EnsembleStats):
        S, se = structure_matrix(stats, k)
        return float(S[a, b]), float(se[a, b])
    signs = None
    if _k_index(k) == 1:
        if spec is None:
            raise ValueError("staggered structure factor of a bare table needs the lattice")
        signs = spec.stagger()
    return float(structure_matrix_from_G(stats, signs)[a, b]), 0.0


def optimal_angle(Sxx: float, Syy: float, Cxy: float) -> tuple[float, bool]:
    """In-plane angle maximizing S^{phi phi} = cos^2 Sxx + sin^2 Syy + sin(2 phi) Cxy.

    Returns ``(phi, degenerate)``; phi lies in [0, pi).  Both stationary
    branches of tan(2 phi) = 2 Cxy / (Sxx - Syy) are evaluated explicitly.
    """
    if Sxx == Syy and Cxy == 0:
        return 0.0, True
    if Sxx == Syy:
        base = math.pi / 4 if Cxy > 0 else -math.pi / 4
    else:
        base = 0.5 * math.atan(2 * Cxy / (Sxx - Syy))
    S = np.array([[Sxx, Cxy, 0.0], [Cxy, Syy, 0.0], [0.0, 0.0, 0.0]])
    cands = [base, base + math.pi / 2]
    vals = [quadratic_form(S, p) for p in cands]
    phi = cands[int(np.argmax(vals))] % math.pi
    return phi, False


def optimal_structure_factor(stats, k=0, spec: LatticeSpec | None = None) -> dict:
    """Optimal angle and S^{phi phi}(k) (with its error for ensembles)."""
    if isinstance(stats, EnsembleStats):
        QG = stats.record_array("QG")[:, _k_index(k)]
        S = QG.mean(axis=0)
        phi, deg = optimal_angle(S[0, 0], S[1, 1], S[0, 1])
        val, se = mean_and_se(np.array([quadratic_form(q, phi) for q in QG]))
        return {"phi": phi, "degenerate": deg, "S": float(val), "se": float(se)}
    signs = spec.stagger() if _k_index(k) == 1 else None
    S = structure_matrix_from_G(stats, signs)
    phi, deg = optimal_angle(S[0, 0], S[1, 1], S[0, 1])
    return {"phi": phi, "degenerate": deg, "S": quadratic_form(S, phi), "se": 0.0}


# -- correlation decomposition and profiles ---------------------------------------------

def correlation_decomposition(stats: EnsembleStats, i: int, j: int, phi: float) -> tuple[float, float, float]:
    """(C, C_c, C_q) of sigma_i^phi and sigma_j^phi."""
    if i == j:
        raise ValueError("correlation decomposition needs two distinct sites")
    stats._require(2)
    u = _direction(phi)
    m = stats.mean_m
    mi, mj = m[i] @ u, m[j] @ u
    Gij = u @ stats.mean_G[3 * i : 3 * i + 3, 3 * j : 3 * j + 3] @ u
    Pij = u @ stats.mean_P[3 * i : 3 * i + 3, 3 * j : 3 * j + 3] @ u
    C = Gij - mi * mj
    Cc = Pij - mi * mj
    Cq = u @ ((stats.sum_G - stats.sum_P)[3 * i : 3 * i + 3, 3 * j : 3 * j + 3] / stats.count) @ u
    return float(C), float(Cc), float(Cq)


@dataclass
class CorrelationProfile:
    """Axis-separation profiles of the phi component (r = 0 is the same site)."""

    r: np.ndarray
    C: np.ndarray
    C_c: np.ndarray
    C_q: np.ndarray
    C_q_se: np.ndarray

    def rows(self):
        for k in range(len(self.r)):
            yield {"r": int(self.r[k]), "C": self.C[k], "C_c": self.C_c[k], "C_q": self.C_q[k],
                   "C_q_se": self.C_q_se[k]}


def correlation_profile(stats: EnsembleStats, phi: float, staggered: bool = False) -> CorrelationProfile:
    stats._require(2)
    geom = stats.geometry
    u = _direction(phi)
    s = geom.signs[1] if staggered else geom.signs[0]
    mu = stats.mean_m @ u
    mm = np.outer(mu, mu)
    G = stats.mean_G.reshape(geom.N, 3, geom.N, 3)
    P = stats.mean_P.reshape(geom.N, 3, geom.N, 3)
    Gu = np.einsum("a,iajb,b->ij", u, G, u)
    Pu = np.einsum("a,iajb,b->ij", u, P, u)
    Cq_pairs = np.einsum("a,iajb,b->ij", u, ((stats.sum_G - stats.sum_P) / stats.count)
                         .reshape(geom.N, 3, geom.N, 3), u)
    C, Cc, Cq = [], [], []
    for pr in geom.pairs:
        ss = s[pr[:, 0]] * s[pr[:, 1]]
        i, j = pr[:, 0], pr[:, 1]
        C.append(np.mean(ss * (Gu[i, j] - mm[i, j])))
        Cc.append(np.mean(ss * (Pu[i, j] - mm[i, j])))
        Cq.append(np.mean(ss * Cq_pairs[i, j]))
    # trajectory-level error of C_q(r): only the pair-averaged blocks are needed
    dq = stats.record_array("profG") - stats.record_array("profP")
    if staggered:
        signs_r = np.array([np.mean(s[pr[:, 0]] * s[pr[:, 1]]) for pr in geom.pairs])
        if not np.allclose(np.abs(signs_r), 1.0):
            raise ValueError("staggered profile needs a bipartite lattice")
        dq = dq * signs_r[None, :, None, None]
    _, se = mean_and_se(np.einsum("a,nrab,b->nr", u, dq, u))
    return CorrelationProfile(geom.radii.copy(), np.array(C), np.array(Cc), np.array(Cq), se)


@dataclass
class CoherenceFit:
    length: float
    r_squared: float
    n_points: int
    defined: bool
    reason: str = ""


def coherence_length(r, C_q, se=None, r_max: int | None = None, min_points: int = 3) -> CoherenceFit:
    """Decay length from a least-squares fit of log|C_q(r)| against r.

    Distances r >= 1 (up to ``r_max``) whose |C_q| exceeds twice the standard
    error are used.  Fewer than ``min_points`` usable distances leave the
    length undefined.
    """
    r = np.asarray(r, dtype=float)
    y = np.abs(np.asarray(C_q, dtype=float))
    keep = r >= 1
    if r_max is not None:
        keep &= r <= r_max
    if se is not None:
        keep &= y > 2.0 * np.asarray(se, dtype=float)
    keep &= y > 0
    n = int(keep.sum())
    if n < min_points:
        return CoherenceFit(float("nan"), float("nan"), n, False,
                            f"only {n} distances above the noise floor")
    x, ly = r[keep], np.log(y[keep])
    slope, icept = np.polyfit(x, ly, 1)
    resid = ly - (slope * x + icept)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    if slope >= 0:
        return CoherenceFit(float("inf"), float(r2), n, False, "profile does not decay")
    return CoherenceFit(float(-1.0 / slope), float(r2), n, True)


# -- squeezing and Fisher-information bounds ----------------------------------------

def _squeezing_value(N, S_perp, M_perp, M_z):
    if abs(M_z) < MIN_JZ:
        return float("nan")
    return N * (S_perp - M_perp**2) / M_z**2


def squeezing(stats, phi: float, staggered: bool = False, spec: LatticeSpec | None = None,
              m=None) -> tuple[float, float]:
    """Squeezing parameter xi_R^2 = N Var(J^{phi+pi/2}) / <J^z>^2 (Pauli J); returns (value, se).

    With ``staggered`` the transverse component carries the sublattice sign
    while J^z stays uniform.  For a bare two-point table pass ``spec`` and the
    one-point table ``m``.  A vanishing <J^z> gives NaN.
    """
    perp = phi + math.pi / 2
    u = _direction(perp)
    if isinstance(stats, EnsembleStats):
        N = stats.N
        kk = 1 if staggered else 0
        signs = stats.geometry.signs[kk]
        QG = stats.record_array("QG")[:, kk]
        ms = stats.record_array("m")
        S_perp = np.einsum("a,nab,b->n", u, QG, u)
        M_perp = np.einsum("i,nia,a->n", signs, ms, u) / N
        M_z = ms[:, :, 2].mean(axis=1)
        return jackknife(lambda a, b, c: _squeezing_value(N, a, b, c), S_perp, M_perp, M_z)
    G = np.asarray(stats)
    N = G.shape[0] // 3
    signs = spec.stagger() if staggered else np.ones(N)
    S = structure_matrix_from_G(G, signs)
    m = np.asarray(m)
    return _squeezing_value(N, quadratic_form(S, perp), float(signs @ m @ u) / N,
                            float(m[:, 2].mean())), 0.0


def fq_upper_bound(stats: EnsembleStats, phi: float, staggered: bool = False) -> tuple[float, float]:
    """4 F_q / N for the (optionally staggered) collective spin-1/2 component at phi.

    F_q = sum_ij [G - P]_ij^{phi phi} is the trajectory average of pure-state
    variances, including the same-site terms 1 - <sigma_i^phi>^2.
    """
    stats._require()
    kk = 1 if staggered else 0
    u = _direction(phi)
    Q = stats.record_array("QG")[:, kk] - stats.record_array("QP")[:, kk]
    per_traj = stats.N * np.einsum("a,nab,b->n", u, Q, u)
    val, se = mean_and_se(per_traj)
    return float(val), float(se)


def exact_qfi_density(rho: np.ndarray, spec: LatticeSpec, phi: float, staggered: bool = False) -> float:
    """QFI(J^phi)/N of a density matrix with spin-1/2 operators J = sum s_i sigma_i / 2."""
    from .exact import collective_operator, qfi, spectral_decomposition

    signs = spec.stagger() if staggered else None
    A = collective_operator(spec.N, phi=phi, signs=signs, scale=0.5)
    return qfi(spectral_decomposition(rho), A) / spec.N


@dataclass
class ChainReport:
    xi_inv: float
    qfi: float | None
    fq: float
    ok: bool
    skipped: bool = False
    reason: str = ""
    violations: list = field(default_factory=list)


def bound_chain_check(xi_inv: float, fq: float, qfi: float | None = None, xi_se: float = 0.0,
                      fq_se: float = 0.0, nsigma: float = 3.0, atol: float = 1e-9) -> ChainReport:
    """Check xi_R^-2 <= QFI/N <= 4F_q/N within nsigma combined standard errors."""
    if xi_inv is None or not np.isfinite(xi_inv):
        return ChainReport(float("nan"), qfi, fq, True, True, "squeezing undefined (<J^z> = 0)")
    viol = []
    tol = nsigma * math.hypot(xi_se, fq_se) + atol
    if xi_inv > fq + tol:
        viol.append(f"xi^-2 = {xi_inv:.6g} exceeds 4F_q/N = {fq:.6g}")
    if qfi is not None:
        if xi_inv > qfi + nsigma * xi_se + atol:
            viol.append(f"xi^-2 = {xi_inv:.6g} exceeds QFI/N = {qfi:.6g}")
        if qfi > fq + nsigma * fq_se + atol:
            viol.append(f"QFI/N = {qfi:.6g} exceeds 4F_q/N = {fq:.6g}")
    return ChainReport(xi_inv, qfi, fq, not viol, violations=viol)


def transverse_magnetization(stats) -> tuple[float, float]:
    """m^z = N^-1 sum_i [<sigma_i^z>]; accepts an ensemble or a one-point table."""
    if isinstance(stats, EnsembleStats):
        stats._require()
        val, se = mean_and_se(stats.record_array("m")[:, :, 2].mean(axis=1))
        return float(val), float(se)
    return float(np.asarray(stats)[:, 2].mean()), 0.0


def collective_moments(stats: EnsembleStats) -> dict:
    """Ensemble means and errors of m2^x, m2^y, m4^x, m4^y."""
    stats._require()
    mu, se = mean_and_se(stats.record_array("moments"))
    names = ("m2x", "m2y", "m4x", "m4y")
    return {n: (float(mu[k]), float(se[k])) for k, n in enumerate(names)}
