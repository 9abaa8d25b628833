"""Parallel trajectory ensembles with deterministic seeding and persistence.

Trajectories are grouped into fixed-size blocks of consecutive indices.  Each
block is integrated sequentially by one worker and the block accumulators are
merged in block order, so the floating-point summation order (and hence every
output byte) does not depend on the number of workers.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from .jumps import JumpConfig, run_jump_trajectory
from .lattice import LatticeSpec, ModelParams
from .observables import (EnsembleStats, collective_moments, fq_upper_bound, merge,
                          optimal_structure_factor, squeezing, structure_matrix,
                          transverse_magnetization)
from .qsd import IntegratorConfig, run_trajectory

log = logging.getLogger(__name__)

WORKERS_ENV = "DISSXYZ_WORKERS"
BLOCK_SIZE = 8
CONVENTIONS = {
    "pair_correlators": "Pauli operators; structure factors N^-2 sum_ij",
    "fisher_chain": "collective spin-1/2 operators J = sum_i s_i sigma_i / 2, reported per spin",
    "squeezing": "xi_R^2 = N Var(J_perp) / <J^z>^2 over the full ensemble",
}


class AllTrajectoriesDivergedError(RuntimeError):
    pass


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class RunManifest:
    master_seed: int
    n_requested: int
    n_completed: int
    n_discarded: int
    method: str
    dt: float
    window: tuple
    t_max: float
    order: int | None
    eta: float | None
    include_cov_noise: bool | None
    lattice: dict
    params: dict
    code_version: str
    wall_time: float
    workers: int
    sample_every: int
    phys_violations: int = 0
    config: dict = field(default_factory=dict)
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _trajectory_record(res) -> dict:
    rec = {"index": res.index, "status": res.status}
    if res.ok:
        rec.update({
            "samples": res.samples,
            "means": res.m.round(12).tolist(),
            "moments": np.asarray(res.moments).round(12).tolist(),
        })
        if res.jumps:
            rec["jumps"] = res.jumps
    return rec


def _run_block(args):
    method, config, params, spec, indices, want_records = args
    stats = EnsembleStats(spec)
    records = []
    for idx in indices:
        if method == "jump":
            res = run_jump_trajectory(config, params, spec, index=idx)
        else:
            res = run_trajectory(config, params, spec, index=idx)
        stats.add(res)
        if want_records:
            records.append(_trajectory_record(res))
    return stats, records


def run_ensemble(config, params: ModelParams, spec: LatticeSpec, n_traj: int,
                 workers: int | None = None, records_path=None,
                 block_size: int = BLOCK_SIZE) -> tuple[EnsembleStats, RunManifest]:
    """Run ``n_traj`` independent trajectories and merge their statistics.

    ``config`` is an IntegratorConfig (cumulant trajectories) or a JumpConfig
    (quantum jumps).  Trajectory ``k`` always uses the generator keyed by
    ``(config.seed, k)``.  Divergent trajectories are counted and dropped; if
    none completes an error is raised.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be positive")
    method = "jump" if isinstance(config, JumpConfig) else "qsd"
    workers = default_workers() if workers is None else max(1, int(workers))
    blocks = [list(range(s, min(s + block_size, n_traj))) for s in range(0, n_traj, block_size)]
    want = records_path is not None
    tasks = [(method, config, params, spec, b, want) for b in blocks]
    t0 = time.perf_counter()
    if workers == 1 or len(blocks) == 1:
        results = [_run_block(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_block, tasks))
    stats = EnsembleStats(spec)
    records = []
    for part, recs in results:
        stats = merge(stats, part)
        records.extend(recs)
    wall = time.perf_counter() - t0
    eta = config.efficiency(params) if method == "qsd" else None
    manifest = RunManifest(
        master_seed=int(config.seed), n_requested=n_traj, n_completed=stats.count,
        n_discarded=stats.divergent, method=method, dt=config.dt,
        window=(config.window_start, config.window_end), t_max=config.t_max,
        order=getattr(config, "order", None), eta=eta,
        include_cov_noise=getattr(config, "include_cov_noise", None),
        lattice=spec.to_dict(), params=params.to_dict(), code_version=code_version(),
        wall_time=wall, workers=workers, sample_every=config.sample_every,
        phys_violations=stats.phys_violations, config=config.to_dict(),
    )
    if want:
        write_jsonl(records_path, records, aggregate_rows(stats, manifest))
    if stats.count == 0:
        raise AllTrajectoriesDivergedError(
            f"all {n_traj} trajectories diverged; try a smaller measurement efficiency eta "
            "or disable the stochastic covariance terms")
    return stats, manifest


# -- output ----------------------------------------------------------------------

def aggregate_rows(stats: EnsembleStats, manifest: RunManifest) -> list[dict]:
    """One row per observable with value and standard error."""
    rows = []

    def add(name, value, se=0.0):
        rows.append({"observable": name, "value": float(value), "se": float(se)})

    add("n_requested", manifest.n_requested)
    add("n_completed", stats.count)
    add("n_discarded", stats.divergent)
    if stats.count == 0:
        return rows
    mz, mz_se = transverse_magnetization(stats)
    add("m_z", mz, mz_se)
    axes = "xyz"
    for k, tag in ((0, "0"), ("pi", "pi")):
        S, se = structure_matrix(stats, k)
        for a in range(3):
            for b in range(a, 3):
                add(f"S_{axes[a]}{axes[b]}({tag})", S[a, b], se[a, b])
        opt = optimal_structure_factor(stats, k)
        add(f"phi_opt({tag})", opt["phi"])
        add(f"S_phiphi({tag})", opt["S"], opt["se"])
        staggered = tag == "pi"
        xi2, xi_se = squeezing(stats, opt["phi"], staggered=staggered)
        add(f"xi2_R({tag})", xi2, xi_se)
        fq, fq_se = fq_upper_bound(stats, opt["phi"], staggered=staggered)
        add(f"4Fq_over_N({tag})", fq, fq_se)
    for name, (v, se) in collective_moments(stats).items():
        add(name, v, se)
    return rows


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(path, rows: list[dict], extra: dict | None = None) -> None:
    Path(path).write_text(rows_to_csv(rows, extra))


def rows_to_csv(rows: list[dict], extra: dict | None = None) -> str:
    """Deterministic CSV text; floats are written with repr (round-trip exact)."""
    extra = extra or {}
    buf = io.StringIO()
    cols = list(extra) + list(rows[0]) if rows else list(extra)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        vals = [extra[k] for k in extra] + [r[k] for k in r]
        w.writerow([_fmt(v) if isinstance(v, float) else v for v in vals])
    return buf.getvalue()


def write_jsonl(path, records: list[dict], aggregate: list[dict] | None = None) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
        if aggregate is not None:
            fh.write(json.dumps({"aggregate": aggregate}) + "\n")


def read_jsonl(path) -> tuple[list[dict], list[dict] | None]:
    records, agg = [], None
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "aggregate" in d:
            agg = d["aggregate"]
        else:
            records.append(d)
    return records, agg


def param_columns(params: ModelParams, spec: LatticeSpec) -> dict:
    return {"Lx": spec.Lx, "Ly": spec.Ly, "Jx": float(params.Jx), "Jy": float(params.Jy),
            "Jz": float(params.Jz), "eta": float(params.eta)}
