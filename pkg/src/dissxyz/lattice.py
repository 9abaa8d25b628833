"""Square-lattice geometry, model parameters and single-site Pauli algebra.

Sites are indexed row-major: ``site = row * Lx + col`` with ``row < Ly``.
All rates are in units of ``gamma`` (couplings are ``J / gamma``, times are
``t * gamma``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AXES = ("x", "y", "z")
AXIS_INDEX = {"x": 0, "y": 1, "z": 2}

SIGMA = np.array(
    [
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)


def levi_civita(a: int, b: int, c: int) -> int:
    return (a - b) * (b - c) * (c - a) // 2


def axis_index(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXIS_INDEX[axis]
        except KeyError:
            raise ValueError(f"unknown axis {axis!r}") from None
    axis = int(axis)
    if axis not in (0, 1, 2):
        raise ValueError(f"unknown axis {axis!r}")
    return axis


@dataclass(frozen=True)
class PauliProduct:
    """Result of multiplying two single-site Pauli matrices.

    ``sigma^a sigma^b = identity_coeff * I + axis_coeff * sigma^axis``.
    """

    identity_coeff: complex
    axis_coeff: complex
    axis: int | None

    def matrix(self) -> np.ndarray:
        out = self.identity_coeff * np.eye(2, dtype=complex)
        if self.axis is not None:
            out = out + self.axis_coeff * SIGMA[self.axis]
        return out


def pauli_product(a, b) -> PauliProduct:
    """sigma^a sigma^b = delta_ab I + i eps_abc sigma^c."""
    a, b = axis_index(a), axis_index(b)
    if a == b:
        return PauliProduct(1.0 + 0j, 0j, None)
    c = 3 - a - b
    return PauliProduct(0j, 1j * levi_civita(a, b, c), c)


@dataclass(frozen=True)
class LatticeSpec:
    Lx: int
    Ly: int
    boundary: str = "periodic"
    _edges: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.Lx) < 1 or int(self.Ly) < 1:
            raise ValueError("Lx and Ly must be positive")
        if self.boundary not in ("periodic", "open"):
            raise ValueError(f"boundary must be 'periodic' or 'open', got {self.boundary!r}")
        object.__setattr__(self, "Lx", int(self.Lx))
        object.__setattr__(self, "Ly", int(self.Ly))
        object.__setattr__(self, "_edges", tuple(self._build_edges()))

    @property
    def N(self) -> int:
        return self.Lx * self.Ly

    def coords(self, site: int) -> tuple[int, int]:
        """(col, row) of a site."""
        return site % self.Lx, site // self.Lx

    def site(self, col: int, row: int) -> int:
        return row * self.Lx + col

    def _build_edges(self):
        periodic = self.boundary == "periodic"
        seen = set()
        edges = []
        for s in range(self.N):
            col, row = self.coords(s)
            for dc, dr in ((1, 0), (0, 1)):
                c2, r2 = col + dc, row + dr
                if periodic:
                    c2 %= self.Lx
                    r2 %= self.Ly
                elif c2 >= self.Lx or r2 >= self.Ly:
                    continue
                t = self.site(c2, r2)
                if t == s:
                    continue
                key = (min(s, t), max(s, t))
                if key not in seen:
                    seen.add(key)
                    edges.append(key)
        return edges

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Undirected nearest-neighbour bonds, each stored once as (i, j) with i < j."""
        return list(self._edges)

    def neighbors(self, site: int) -> list[int]:
        if not 0 <= site < self.N:
            raise IndexError(f"site {site} out of range for N={self.N}")
        out = [j if i == site else i for i, j in self._edges if site in (i, j)]
        return sorted(out)

    def neighbor_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded neighbour array (N, zmax) and per-site counts, for kernels."""
        lists = [self.neighbors(s) for s in range(self.N)]
        zmax = max((len(l) for l in lists), default=0)
        table = np.full((self.N, max(zmax, 1)), -1, dtype=np.int64)
        counts = np.zeros(self.N, dtype=np.int64)
        for s, l in enumerate(lists):
            table[s, : len(l)] = l
            counts[s] = len(l)
        return table, counts

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.N, self.N))
        for i, j in self._edges:
            A[i, j] = A[j, i] = 1.0
        return A

    def stagger(self) -> np.ndarray:
        """(-1)^(col + row) for every site."""
        return np.array([(-1.0) ** sum(self.coords(s)) for s in range(self.N)])

    def displacement(self, i: int, j: int) -> tuple[int, int]:
        """r_j - r_i, minimum image under periodic boundaries."""
        (ci, ri), (cj, rj) = self.coords(i), self.coords(j)
        dx, dy = cj - ci, rj - ri
        if self.boundary == "periodic":
            dx = (dx + self.Lx // 2) % self.Lx - self.Lx // 2
            dy = (dy + self.Ly // 2) % self.Ly - self.Ly // 2
        return dx, dy

    def axis_separation_pairs(self) -> dict[int, list[tuple[int, int]]]:
        """Ordered pairs (i, j) separated purely along x or y, keyed by |r|.

        Used for 1D correlation profiles; r runs from 0 to max(Lx, Ly) // 2.
        """
        out: dict[int, list[tuple[int, int]]] = {}
        for i in range(self.N):
            for j in range(self.N):
                dx, dy = self.displacement(i, j)
                if dx != 0 and dy != 0:
                    continue
                r = abs(dx) + abs(dy)
                out.setdefault(r, []).append((i, j))
        return dict(sorted(out.items()))

    def to_dict(self) -> dict:
        return {"lx": self.Lx, "ly": self.Ly, "boundary": self.boundary}


@dataclass(frozen=True)
class ModelParams:
    Jx: float
    Jy: float
    Jz: float
    gamma: float = 1.0
    eta: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        for name in ("Jx", "Jy", "Jz"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def J(self) -> np.ndarray:
        return np.array([self.Jx, self.Jy, self.Jz], dtype=float)

    def replace(self, **kw) -> "ModelParams":
        d = self.to_dict()
        d.update(kw)
        return ModelParams(**d)

    def to_dict(self) -> dict:
        return {"Jx": self.Jx, "Jy": self.Jy, "Jz": self.Jz, "gamma": self.gamma, "eta": self.eta}


def load_config(path) -> tuple[LatticeSpec, ModelParams]:
    """Read lattice and model parameters from a YAML or JSON file.

    Recognised keys: lx, ly, boundary, jx, jy, jz, eta (and optionally gamma).
    """
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        raw = json.loads(text)
    else:
        import yaml

        raw = yaml.safe_load(text)
    raw = {str(k).lower(): v for k, v in (raw or {}).items()}
    missing = [k for k in ("lx", "ly", "jx", "jy", "jz") if k not in raw]
    if missing:
        raise ValueError(f"config {path} is missing keys: {', '.join(missing)}")
    spec = LatticeSpec(int(raw["lx"]), int(raw["ly"]), raw.get("boundary", "periodic"))
    params = ModelParams(
        float(raw["jx"]),
        float(raw["jy"]),
        float(raw["jz"]),
        gamma=float(raw.get("gamma", 1.0)),
        eta=float(raw.get("eta", 1.0)),
    )
    return spec, params
