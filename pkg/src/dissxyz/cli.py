"""Command-line entry point: ``dissxyz {exact,jump,traj,scan,analyze}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .ensemble import CONVENTIONS, aggregate_rows, param_columns, rows_to_csv, run_ensemble
from .exact import (check_density_matrix, collective_moment_exact, evolve_to_steady_state,
                    maximally_mixed, one_point, two_point)
from .jumps import JumpConfig
from .lattice import LatticeSpec, ModelParams, load_config
from .observables import (exact_qfi_density, optimal_structure_factor, squeezing,
                          structure_matrix_from_G)
from .qsd import IntegratorConfig

log = logging.getLogger("dissxyz")


def _add_model_args(p):
    p.add_argument("--config", help="YAML/JSON file with lx, ly, boundary, jx, jy, jz, eta")
    p.add_argument("--lx", type=int, default=2)
    p.add_argument("--ly", type=int, default=2)
    p.add_argument("--boundary", choices=("periodic", "open"), default="periodic")
    p.add_argument("--jx", type=float, default=0.9)
    p.add_argument("--jy", type=float, default=1.05)
    p.add_argument("--jz", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=1.0)


def _model(args) -> tuple[LatticeSpec, ModelParams]:
    if args.config:
        return load_config(args.config)
    return (LatticeSpec(args.lx, args.ly, args.boundary),
            ModelParams(args.jx, args.jy, args.jz, eta=args.eta))


def _add_run_args(p, dt_default):
    p.add_argument("--trajectories", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt", type=float, default=dt_default)
    p.add_argument("--tmax", type=float, default=150.0)
    p.add_argument("--window", type=float, nargs=2, default=(75.0, 150.0), metavar=("START", "END"))
    p.add_argument("--sample-every", type=int, default=10)
    p.add_argument("--workers", type=int, default=None, help="default: $DISSXYZ_WORKERS or 1")
    p.add_argument("--out", help="JSON-lines file with one record per trajectory plus the aggregate")
    p.add_argument("--csv", help="aggregate CSV (observable, value, se)")
    p.add_argument("--manifest", help="run manifest JSON")


def exact_record(spec: LatticeSpec, params: ModelParams, tol: float, t_max: float,
                 check_uniqueness: bool = True) -> dict:
    """Steady-state observables of the master equation as a JSON-ready dict."""
    ss = evolve_to_steady_state(params, spec, tol=tol, t_max=t_max)
    N = spec.N
    m = one_point(ss.rho, N)
    G = two_point(ss.rho, N)
    obs = {"m_z": float(m[:, 2].mean())}
    axes = "xyz"
    for tag, signs in (("0", None), ("pi", spec.stagger())):
        S = structure_matrix_from_G(G, signs)
        for a in range(3):
            for b in range(a, 3):
                obs[f"S_{axes[a]}{axes[b]}({tag})"] = float(S[a, b])
        opt = optimal_structure_factor(G, "pi" if tag == "pi" else 0, spec)
        obs[f"phi_opt({tag})"] = opt["phi"]
        obs[f"S_phiphi({tag})"] = opt["S"]
        stag = tag == "pi"
        xi2, _ = squeezing(G, opt["phi"], staggered=stag, spec=spec, m=m)
        obs[f"xi2_R({tag})"] = xi2
        obs[f"QFI_over_N({tag})"] = exact_qfi_density(ss.rho, spec, opt["phi"], staggered=stag)
    for a, name in ((0, "x"), (1, "y")):
        obs[f"m2{name}"] = collective_moment_exact(ss.rho, N, a, 2)
        obs[f"m4{name}"] = collective_moment_exact(ss.rho, N, a, 4)
    conv = ss.metadata()
    conv.update(check_density_matrix(ss.rho))
    if check_uniqueness:
        alt = evolve_to_steady_state(params, spec, rho0=maximally_mixed(N), tol=tol, t_max=t_max)
        conv["uniqueness_difference"] = float(np.max(np.abs(alt.rho - ss.rho)))
    return {"params": params.to_dict(), "lattice": spec.to_dict(), "observables": obs,
            "convergence": conv, "conventions": CONVENTIONS}


def cmd_exact(args):
    spec, params = _model(args)
    rec = exact_record(spec, params, args.tol, args.tmax, not args.no_uniqueness_check)
    text = json.dumps(rec, indent=2, default=lambda o: o.item() if hasattr(o, "item") else str(o))
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def _emit_ensemble(args, spec, params, config):
    stats, manifest = run_ensemble(config, params, spec, args.trajectories, workers=args.workers,
                                   records_path=args.out)
    rows = aggregate_rows(stats, manifest)
    text = rows_to_csv(rows, param_columns(params, spec))
    if args.csv:
        Path(args.csv).write_text(text)
    else:
        sys.stdout.write(text)
    if args.manifest:
        manifest.save(args.manifest)
    return stats, manifest


def cmd_jump(args):
    spec, params = _model(args)
    cfg = JumpConfig(dt=args.dt, seed=args.seed, t_max=args.tmax, window_start=args.window[0],
                     window_end=args.window[1], sample_every=args.sample_every)
    _emit_ensemble(args, spec, params, cfg)


def _qsd_config(args, **over) -> IntegratorConfig:
    kw = dict(order=args.order, dt=args.dt, eta=None, include_cov_noise=args.cov_noise,
              seed=args.seed, t_max=args.tmax, window_start=args.window[0],
              window_end=args.window[1], init=args.init, sample_every=args.sample_every)
    kw.update(over)
    return IntegratorConfig(**kw)


def cmd_traj(args):
    spec, params = _model(args)
    _emit_ensemble(args, spec, params, _qsd_config(args))


def cmd_scan(args):
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    if args.jy_range:
        lo, hi, step = args.jy_range
        jys = np.round(np.arange(lo, hi + 1e-9, step), 10)
    elif args.jy:
        jys = np.array(args.jy)
    else:
        jys = analysis.default_jy_grid()
    grid = analysis.ScanGrid.rectangle(args.jx, jys, args.jz, args.sizes)
    table = out / "scan.csv"
    header = not table.exists()
    for L in grid.sizes:
        spec = LatticeSpec(L, L, args.boundary)
        for jx, jy in grid.points:
            params = ModelParams(jx, jy, args.jz, eta=args.eta)
            tag = f"L{L}_jx{jx:+.4f}_jy{jy:+.4f}"
            if args.method == "exact":
                rec = exact_record(spec, params, 1e-9, 5000.0, check_uniqueness=False)
                rows = [{"observable": k, "value": float(v), "se": 0.0}
                        for k, v in rec["observables"].items()]
                (out / f"{tag}.json").write_text(json.dumps(rec, indent=2, default=float))
            else:
                cfg = _qsd_config(args) if args.method == "traj" else JumpConfig(
                    dt=args.dt, seed=args.seed, t_max=args.tmax, window_start=args.window[0],
                    window_end=args.window[1], sample_every=args.sample_every)
                stats, manifest = run_ensemble(cfg, params, spec, args.trajectories,
                                               workers=args.workers)
                rows = aggregate_rows(stats, manifest)
                manifest.save(out / f"{tag}.manifest.json")
                grid.manifests[tag] = f"{tag}.manifest.json"
            text = rows_to_csv(rows, param_columns(params, spec))
            with open(table, "a") as fh:
                fh.write(text if header else text.split("\n", 1)[1])
            header = False
            log.info("finished %s", tag)
    (out / "grid.json").write_text(json.dumps(grid.to_dict(), indent=2))


def cmd_analyze(args):
    rows = analysis.read_scan_csv(args.input)
    out = []
    if args.what in ("collapse", "crossing"):
        curves = analysis.curves_by_size(rows, args.observable, args.jx)
        if args.what == "collapse":
            res = analysis.rescale_and_collapse(curves, args.beta, args.nu, args.jyc)
            for L, c in res.curves.items():
                for x, y, s in zip(c["x"], c["y"], c["side"]):
                    out.append({"L": L, "x": float(x), "y": float(y), "side": int(s)})
            print(json.dumps({"beta": res.beta, "nu": res.nu, "Jyc": res.Jyc, "Q": res.Q,
                              "defined": res.defined, "reason": res.reason}))
        else:
            for (a, b), c in analysis.pairwise_crossings(curves, args.beta, args.nu, args.jyc).items():
                out.append({"L1": a, "L2": b, "Jy_cross": c.Jy, "defined": c.defined,
                            "multiple": c.multiple})
    elif args.what == "derivative":
        curves = analysis.curves_by_size(rows, "m_z", args.jx)
        fit = analysis.derivative_fit(curves, args.peak_window, args.dip_window)
        for L, (jy, d) in fit.derivatives.items():
            for x, y in zip(jy, d):
                out.append({"L": L, "Jy": float(x), "dmz_dJy": float(y)})
        print(json.dumps({"peaks": fit.peaks, "dips": fit.dips, "peak_fit_A_B": fit.peak_fit,
                          "dip_fit_A_B": fit.dip_fit, "peak_monotone": fit.peak_monotone,
                          "dip_monotone": fit.dip_monotone}, default=float))
    else:
        pts = {}
        for r in rows:
            if r["Lx"] != args.size:
                continue
            key = (r["Jx"], r["Jy"])
            pts.setdefault(key, {"Jx": r["Jx"], "Jy": r["Jy"]})
            if r["observable"] == "S_phiphi(0)":
                pts[key]["S0"] = r["value"]
            elif r["observable"] == "S_phiphi(pi)":
                pts[key]["Spi"] = r["value"]
        pd = analysis.phase_diagram([p for p in pts.values() if "S0" in p and "Spi" in p])
        for i, jx in enumerate(pd.Jx):
            for j, jy in enumerate(pd.Jy):
                out.append({"Jx": float(jx), "Jy": float(jy), "value": float(pd.value[i, j]),
                            "order": int(pd.order[i, j]) if np.isfinite(pd.order[i, j]) else 0,
                            "interpolated": bool(pd.interpolated[i, j])})
        if args.contour:
            analysis.write_rows(args.contour, [{"Jx": float(a), "Jy": float(b), "level": pd.level}
                                               for a, b in pd.contour])
    analysis.write_rows(args.output, out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dissxyz", description="Dissipative XYZ lattice simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("exact", help="master-equation steady state")
    _add_model_args(p)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--tmax", type=float, default=2000.0)
    p.add_argument("--no-uniqueness-check", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_exact)

    p = sub.add_parser("jump", help="quantum-jump trajectories")
    _add_model_args(p)
    _add_run_args(p, 0.01)
    p.set_defaults(func=cmd_jump)

    def qsd_flags(p):
        p.add_argument("--order", type=int, choices=(1, 2), default=2)
        p.add_argument("--cov-noise", action="store_true")
        p.add_argument("--init", choices=("down", "tilted"), default="down")

    p = sub.add_parser("traj", help="cumulant heterodyne trajectories")
    _add_model_args(p)
    _add_run_args(p, 1e-3)
    qsd_flags(p)
    p.set_defaults(func=cmd_traj)

    p = sub.add_parser("scan", help="run ensembles over a (Jx, Jy) grid and sizes L")
    p.add_argument("--method", choices=("traj", "jump", "exact"), default="traj")
    p.add_argument("--jx", type=float, nargs="+", default=[0.9])
    p.add_argument("--jy", type=float, nargs="+")
    p.add_argument("--jy-range", type=float, nargs=3, metavar=("LO", "HI", "STEP"))
    p.add_argument("--jz", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--sizes", type=int, nargs="+", default=[4])
    p.add_argument("--boundary", choices=("periodic", "open"), default="periodic")
    p.add_argument("--outdir", required=True)
    _add_run_args(p, 1e-3)
    qsd_flags(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("analyze", help="post-process a scan table into plot-ready CSV")
    p.add_argument("what", choices=("collapse", "crossing", "derivative", "phase-diagram"))
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--observable", default="S_phiphi(0)")
    p.add_argument("--jx", type=float, default=None)
    p.add_argument("--beta", type=float, default=0.125)
    p.add_argument("--nu", type=float, default=1.0)
    p.add_argument("--jyc", type=float, default=1.064)
    p.add_argument("--peak-window", type=float, nargs=2, default=None)
    p.add_argument("--dip-window", type=float, nargs=2, default=None)
    p.add_argument("--size", type=int, default=4, help="lattice size for the phase diagram")
    p.add_argument("--contour", help="CSV for the reference-level contour points")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
