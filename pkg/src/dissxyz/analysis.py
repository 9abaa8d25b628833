"""Finite-size scaling and parameter-scan post-processing.

All routines are pure functions of tabulated curves; they never run
simulations themselves.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import isotonic_regression

# -- scan grids -------------------------------------------------------------------


def default_jy_grid(lo: float = 0.9, hi: float = 1.35, dense=((1.0, 1.12), (1.18, 1.3)),
                    fine: float = 0.01, coarse: float = 0.05) -> np.ndarray:
    """J_y values with ``fine`` spacing inside the ``dense`` windows and ``coarse`` elsewhere."""
    pts = set(np.round(np.arange(lo, hi + 1e-9, coarse), 10))
    for a, b in dense:
        a, b = max(a, lo), min(b, hi)
        if a < b:
            pts |= set(np.round(np.arange(a, b + 1e-9, fine), 10))
    return np.array(sorted(pts))


@dataclass
class ScanGrid:
    """Grid of (J_x, J_y) points at fixed J_z, each run on a list of sizes L."""

    points: list
    Jz: float = 1.0
    sizes: list = field(default_factory=lambda: [4])
    manifests: dict = field(default_factory=dict)

    @classmethod
    def line(cls, Jx: float, Jy_values, Jz: float = 1.0, sizes=(4,)) -> "ScanGrid":
        return cls([(float(Jx), float(j)) for j in Jy_values], Jz, list(sizes))

    @classmethod
    def rectangle(cls, Jx_values, Jy_values, Jz: float = 1.0, sizes=(4,)) -> "ScanGrid":
        return cls([(float(a), float(b)) for a in Jx_values for b in Jy_values], Jz, list(sizes))

    def to_dict(self) -> dict:
        return {"points": [list(p) for p in self.points], "Jz": self.Jz, "sizes": list(self.sizes),
                "manifests": self.manifests}

    def missing(self, done) -> list:
        """(Jx, Jy, L) triples without a completed run among ``done`` keys."""
        return [(jx, jy, L) for (jx, jy) in self.points for L in self.sizes
                if (round(jx, 10), round(jy, 10), L) not in done]


# -- scan tables ---------------------------------------------------------------------


def read_scan_csv(path) -> list[dict]:
    """Rows of a long-format scan table (Lx, Ly, Jx, Jy, Jz, eta, observable, value, se)."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out = dict(r)
            for k in ("Lx", "Ly"):
                out[k] = int(out[k])
            for k in ("Jx", "Jy", "Jz", "eta", "value", "se"):
                if k in out and out[k] != "":
                    out[k] = float(out[k])
            rows.append(out)
    return rows


def curves_by_size(rows: list[dict], observable: str, Jx: float | None = None) -> dict:
    """{L: (Jy, value, se)} sorted in J_y, optionally restricted to one J_x."""
    acc = defaultdict(list)
    for r in rows:
        if r["observable"] != observable:
            continue
        if Jx is not None and not math.isclose(r["Jx"], Jx, abs_tol=1e-9):
            continue
        acc[r["Lx"]].append((r["Jy"], r["value"], r.get("se", 0.0)))
    out = {}
    for L, pts in sorted(acc.items()):
        a = np.array(sorted(pts))
        out[L] = (a[:, 0], a[:, 1], a[:, 2])
    return out


# -- collapse -----------------------------------------------------------------------------


@dataclass
class CollapseResult:
    beta: float
    nu: float
    Jyc: float
    Q: float
    defined: bool
    curves: dict
    reason: str = ""


def rescale(L: int, Jy, S, beta: float, nu: float, Jyc: float):
    """(|Jy - Jyc| L^{1/nu}, S L^{2 beta / nu}, side) with side = sign(Jy - Jyc)."""
    Jy = np.asarray(Jy, dtype=float)
    inv_nu = 0.0 if math.isinf(nu) else 1.0 / nu
    x = np.abs(Jy - Jyc) * L**inv_nu
    y = np.asarray(S, dtype=float) * L ** (2.0 * beta * inv_nu)
    side = np.where(Jy >= Jyc, 1, -1)
    return x, y, side


def _monotone_residuals(x, y):
    order = np.argsort(x, kind="stable")
    ys = y[order]
    best = None
    for inc in (True, False):
        fit = isotonic_regression(ys, increasing=inc).x
        r = ys - fit
        if best is None or np.sum(r**2) < np.sum(best[0] ** 2):
            best = (r, fit)
    r = np.empty_like(y)
    f = np.empty_like(y)
    r[order], f[order] = best
    return r, f


def rescale_and_collapse(curves: dict, beta: float, nu: float, Jyc: float) -> CollapseResult:
    """Collapse quality of S L^{2 beta/nu} against |J_y - J_yc| L^{1/nu}.

    ``curves`` maps L to (Jy, S).  Each side of J_yc is pooled over sizes and
    fitted by a monotone (isotonic) master curve; Q is the mean squared
    relative deviation of all points from it.  Q is undefined when no two sizes
    overlap in rescaled range on either side.
    """
    if len(curves) < 3:
        raise ValueError("collapse needs at least three system sizes")
    resc = {}
    for L, c in curves.items():
        x, y, side = rescale(L, c[0], c[1], beta, nu, Jyc)
        resc[L] = (x, y, side)
    res_all = []
    overlap = False
    for sd in (-1, 1):
        xs, ys, ranges = [], [], []
        for L, (x, y, side) in resc.items():
            msk = side == sd
            if msk.sum() == 0:
                continue
            xs.append(x[msk])
            ys.append(y[msk])
            ranges.append((x[msk].min(), x[msk].max()))
        if len(ranges) < 2:
            continue
        for i in range(len(ranges)):
            for j in range(i + 1, len(ranges)):
                if min(ranges[i][1], ranges[j][1]) > max(ranges[i][0], ranges[j][0]):
                    overlap = True
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        r, f = _monotone_residuals(x, y)
        scale = np.where(np.abs(f) > 0, np.abs(f), np.abs(y).mean() or 1.0)
        res_all.append(r / scale)
    out_curves = {L: {"x": v[0], "y": v[1], "side": v[2]} for L, v in resc.items()}
    if not overlap or not res_all:
        return CollapseResult(beta, nu, Jyc, float("nan"), False, out_curves,
                              "rescaled curves do not overlap")
    r = np.concatenate(res_all)
    return CollapseResult(beta, nu, Jyc, float(np.mean(r**2)), True, out_curves)


def scan_collapse(curves: dict, beta: float, nu: float, Jyc_values) -> list[CollapseResult]:
    """Collapse quality over candidate critical points (diagnostic only)."""
    return [rescale_and_collapse(curves, beta, nu, j) for j in Jyc_values]


# -- crossings ------------------------------------------------------------------------


@dataclass
class CrossingResult:
    Jy: float
    defined: bool
    multiple: bool = False
    candidates: list = field(default_factory=list)
    reason: str = ""


def find_crossing(curve_a, curve_b, L_a: int, L_b: int, beta: float, nu: float,
                  reference: float | None = None) -> CrossingResult:
    """Intersection of S L^{2beta/nu} for two sizes by linear interpolation.

    ``curve_*`` are (Jy, S).  Both are interpolated onto the union of their
    J_y nodes inside the common range.  With several sign changes the one
    nearest ``reference`` (or the first) is returned and flagged.
    """
    Ja, Sa = (np.asarray(v, dtype=float) for v in curve_a[:2])
    Jb, Sb = (np.asarray(v, dtype=float) for v in curve_b[:2])
    lo, hi = max(Ja.min(), Jb.min()), min(Ja.max(), Jb.max())
    if not lo < hi:
        return CrossingResult(float("nan"), False, reason="curves share no J_y range")
    grid = np.unique(np.concatenate([Ja, Jb]))
    grid = grid[(grid >= lo) & (grid <= hi)]
    inv_nu = 0.0 if math.isinf(nu) else 1.0 / nu
    ya = np.interp(grid, Ja, Sa) * L_a ** (2 * beta * inv_nu)
    yb = np.interp(grid, Jb, Sb) * L_b ** (2 * beta * inv_nu)
    d = ya - yb
    cands = []
    for k in range(len(grid) - 1):
        if d[k] == 0:
            cands.append(float(grid[k]))
        elif d[k] * d[k + 1] < 0:
            t = d[k] / (d[k] - d[k + 1])
            cands.append(float(grid[k] + t * (grid[k + 1] - grid[k])))
    if d[-1] == 0:
        cands.append(float(grid[-1]))
    cands = sorted(set(cands))
    if not cands:
        return CrossingResult(float("nan"), False, reason="no sign change of the difference")
    if len(cands) == 1:
        return CrossingResult(cands[0], True, False, cands)
    pick = cands[0] if reference is None else min(cands, key=lambda c: abs(c - reference))
    return CrossingResult(pick, True, True, cands, "multiple crossings")


def pairwise_crossings(curves: dict, beta: float, nu: float, reference: float | None = None) -> dict:
    """Crossings of consecutive sizes {(L1, L2): CrossingResult}."""
    Ls = sorted(curves)
    return {(a, b): find_crossing(curves[a], curves[b], a, b, beta, nu, reference)
            for a, b in zip(Ls[:-1], Ls[1:])}


# -- magnetization derivative -------------------------------------------------------------


@dataclass
class DerivativeFit:
    derivatives: dict
    peaks: dict
    dips: dict
    peak_fit: tuple
    dip_fit: tuple
    peak_monotone: bool
    dip_monotone: bool
    peak_residuals: np.ndarray
    dip_residuals: np.ndarray


def _log_fit(sizes, heights):
    sizes = np.asarray(sizes, dtype=float)
    heights = np.asarray(heights, dtype=float)
    if len(sizes) < 2:
        return (float("nan"), float("nan")), np.zeros(len(sizes))
    B, A = np.polyfit(np.log(sizes), heights, 1)
    return (float(A), float(B)), heights - (A + B * np.log(sizes))


def derivative_fit(curves: dict, peak_window=None, dip_window=None) -> DerivativeFit:
    """Central-difference d m^z / d J_y per size, extremum locations and log-L fits.

    ``curves`` maps L to (Jy, m^z).  The maximum is searched in ``peak_window``
    and the minimum in ``dip_window`` (whole range when omitted); heights are
    fitted as A + B log L.
    """
    ders, peaks, dips = {}, {}, {}
    for L, c in sorted(curves.items()):
        Jy, mz = np.asarray(c[0], dtype=float), np.asarray(c[1], dtype=float)
        d = np.gradient(mz, Jy)
        ders[L] = (Jy, d)
        for win, store, fn in ((peak_window, peaks, np.argmax), (dip_window, dips, np.argmin)):
            msk = np.ones_like(Jy, dtype=bool) if win is None else (Jy >= win[0]) & (Jy <= win[1])
            if not msk.any():
                continue
            k = fn(d[msk])
            store[L] = (float(Jy[msk][k]), float(d[msk][k]))
    Ls = sorted(peaks)
    pfit, pres = _log_fit(Ls, [peaks[L][1] for L in Ls])
    Ld = sorted(dips)
    dfit, dres = _log_fit(Ld, [dips[L][1] for L in Ld])
    ph = [peaks[L][1] for L in Ls]
    dh = [dips[L][1] for L in Ld]
    return DerivativeFit(ders, peaks, dips, pfit, dfit,
                         bool(np.all(np.diff(ph) > 0)), bool(np.all(np.diff(dh) < 0)), pres, dres)


def power_law_fit(sizes, values) -> tuple[float, float]:
    """(exponent, prefactor) of values = c * sizes^p by a log-log least-squares fit."""
    p, logc = np.polyfit(np.log(np.asarray(sizes, dtype=float)), np.log(np.asarray(values, dtype=float)), 1)
    return float(p), float(math.exp(logc))


# -- phase diagram ------------------------------------------------------------------------


def mirror_points(points: list[dict]) -> list[dict]:
    """Complete a scan with its images under Jx <-> Jy and (Jx, Jy) -> (-Jx, -Jy).

    Each point has keys Jx, Jy, S0, Spi (optimal-angle uniform and staggered
    structure factors).  The sign flip corresponds to a pi rotation of one
    sublattice and swaps S0 and Spi.  Existing points take precedence.
    """
    out = {(round(p["Jx"], 10), round(p["Jy"], 10)): dict(p) for p in points}

    def put(jx, jy, s0, spi, src):
        key = (round(jx, 10), round(jy, 10))
        if key not in out:
            out[key] = {"Jx": jx, "Jy": jy, "S0": s0, "Spi": spi, "mirrored_from": src}

    for p in list(out.values()):
        src = (p["Jx"], p["Jy"])
        put(p["Jy"], p["Jx"], p["S0"], p["Spi"], src)
        put(-p["Jx"], -p["Jy"], p["Spi"], p["S0"], src)
        put(-p["Jy"], -p["Jx"], p["Spi"], p["S0"], src)
    return sorted(out.values(), key=lambda p: (p["Jx"], p["Jy"]))


@dataclass
class PhaseDiagram:
    Jx: np.ndarray
    Jy: np.ndarray
    value: np.ndarray
    order: np.ndarray
    level: float
    contour: np.ndarray
    interpolated: np.ndarray


def _grid_from_points(points, key):
    jx = np.unique(np.round([p["Jx"] for p in points], 10))
    jy = np.unique(np.round([p["Jy"] for p in points], 10))
    Z = np.full((len(jx), len(jy)), np.nan)
    ix = {v: k for k, v in enumerate(jx)}
    iy = {v: k for k, v in enumerate(jy)}
    for p in points:
        Z[ix[round(p["Jx"], 10)], iy[round(p["Jy"], 10)]] = key(p)
    return jx, jy, Z


def _fill_missing(jx, jy, Z):
    """Fill NaNs by linear interpolation along J_y then J_x; returns the mask of filled cells."""
    miss = np.isnan(Z)
    out = Z.copy()
    for axis, coords in ((1, jy), (0, jx)):
        for k in range(out.shape[1 - axis]):
            line = out[k] if axis == 1 else out[:, k]
            good = ~np.isnan(line)
            if good.sum() >= 2 and (~good).any():
                line[~good] = np.interp(coords[~good], coords[good], line[good])
    return out, miss


def contour_points(jx, jy, Z, level) -> np.ndarray:
    """Level crossings on the grid edges, linearly interpolated; (K, 2) array of (Jx, Jy)."""
    pts = []
    for i in range(len(jx)):
        for j in range(len(jy)):
            for di, dj in ((1, 0), (0, 1)):
                i2, j2 = i + di, j + dj
                if i2 >= len(jx) or j2 >= len(jy):
                    continue
                a, b = Z[i, j] - level, Z[i2, j2] - level
                if np.isnan(a) or np.isnan(b) or a * b > 0 or a == b:
                    continue
                t = a / (a - b)
                pts.append((jx[i] + t * (jx[i2] - jx[i]), jy[j] + t * (jy[j2] - jy[j])))
    return np.array(pts).reshape(-1, 2)


def phase_diagram(points: list[dict], reference=(0.9, 1.24), mirror: bool = True) -> PhaseDiagram:
    """Map of max(S^{phi phi}(0), S^{phi phi}(pi,pi)) with a contour at the reference point's value.

    ``points`` carry Jx, Jy, S0, Spi.  Missing grid cells are interpolated and
    flagged in ``interpolated``.  ``order`` is +1 where the uniform factor
    dominates, -1 where the staggered one does.
    """
    pts = mirror_points(points) if mirror else list(points)
    jx, jy, Z = _grid_from_points(pts, lambda p: max(p["S0"], p["Spi"]))
    _, _, O = _grid_from_points(pts, lambda p: 1.0 if p["S0"] >= p["Spi"] else -1.0)
    Zf, miss = _fill_missing(jx, jy, Z)
    level = float(_interp2(jx, jy, Zf, *reference))
    return PhaseDiagram(jx, jy, Zf, O, level, contour_points(jx, jy, Zf, level), miss)


def _interp2(jx, jy, Z, x, y):
    f = RegularGridInterpolator((jx, jy), Z, bounds_error=False, fill_value=None)
    return f([[x, y]])[0]


def mirror_residual(points: list[dict], se_key: str | None = None) -> list[dict]:
    """Differences between each point and its Jx <-> Jy image (both must be present)."""
    by = {(round(p["Jx"], 10), round(p["Jy"], 10)): p for p in points}
    out = []
    for (jx, jy), p in by.items():
        q = by.get((jy, jx))
        if q is None or jx > jy:
            continue
        v = max(p["S0"], p["Spi"]) - max(q["S0"], q["Spi"])
        se = math.hypot(p.get(se_key, 0.0), q.get(se_key, 0.0)) if se_key else 0.0
        out.append({"Jx": jx, "Jy": jy, "residual": v, "se": se})
    return out


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
