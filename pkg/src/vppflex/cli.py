"""Command-line front end: run pipeline stages and write JSON/CSV artifacts."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import caseio, ccopf, costagg, mcoracle, pfr, tcf, uncert
from .caseio import FORMAT_VERSION, CaseError
from .jobs import JOBS_ENV, default_jobs

log = logging.getLogger("vppflex")

UNITS = {
    "power": "p.u. (system base MVA)",
    "energy": "p.u.*h",
    "ramp": "p.u./period",
    "voltage": "p.u.",
    "current": "p.u.",
    "confidence": "probability",
}


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _header(kind: str, model: ccopf.VppModel | None = None) -> dict:
    h = {"format_version": FORMAT_VERSION, "artifact": kind, "units": dict(UNITS)}
    if model is not None:
        h["case"] = model.name
        h["bases"] = {"mva": model.network.base_mva, "kv": model.network.base_kv}
    return h


def write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1) + "\n")


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r] for r in rows])


def _sibling(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def write_manifest(out: Path, args, bundle: caseio.CaseBundle | None, extra=None) -> None:
    """Run record next to ``out``; the only artifact carrying a timestamp."""
    m = {
        "format_version": FORMAT_VERSION,
        "artifact": "manifest",
        "command": args.command,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "versions": {"vppflex": _version(), "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "arguments": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                      if k not in ("func",)},
    }
    if bundle is not None:
        m["inputs"] = {k: str(getattr(bundle, k)) for k in ("network_path", "fleet_path", "profiles_path",
                                                             "history_path")}
        m["config"] = caseio.config_dict(bundle.config)
    if extra:
        m.update(extra)
    write_json(_sibling(out, ".manifest.json"), m)


def open_case(arg: str, **overrides) -> caseio.CaseBundle:
    """A case directory, a ``case.json`` path or the name of a bundled case."""
    p = Path(arg)
    bundle = caseio.load_case(p) if p.exists() else caseio.bundled_case(arg)
    return caseio.with_config(bundle, **overrides)


def _periods(spec: str | None, model: ccopf.VppModel, default: int) -> list[int]:
    if spec is None:
        return [default]
    if spec == "all":
        return list(range(model.horizon))
    out = [int(s) for s in spec.split(",")]
    for t in out:
        if not 0 <= t < model.horizon:
            raise CaseError(f"--periods: period {t} outside 0..{model.horizon - 1}")
    return out


# ---- artifact builders (shared by the subcommands and export-flex) ----


def surface_record(surface: pfr.PfrSurface, gammas) -> dict:
    polys = []
    for g in gammas:
        poly = pfr.polygon_at(surface, g)
        polys.append({**poly.to_dict(), "area": poly.area})
    A, b = surface.domain
    return {
        "t": surface.t,
        "anchor": list(surface.anchor),
        "fit": {"rmse": surface.rmse, "r2": surface.r2, "pieces": surface.model.m},
        "surface": surface.model.to_dict(),
        "domain": {"A": A.tolist(), "b": b.tolist()},
        "polygons": polys,
    }


def build_pfr(model, cfg: caseio.RunConfig, periods, jobs=None) -> tuple[list[dict], list]:
    records, scatter = [], []
    for t in periods:
        s = pfr.build_surface(model, t, cfg.gamma_grid, cfg.angles, cfg.partitions, cfg.restarts, cfg.seed,
                              cfg.exterior, jobs)
        records.append(surface_record(s, cfg.gamma_grid))
        scatter += [(t, p.p, p.q, p.gamma) for p in s.points]
    return records, scatter


def build_tcf(model, cfg: caseio.RunConfig, jobs=None) -> dict:
    res = tcf.robust_modify(model, cfg.gamma, cfg.theta, cfg.eps, cfg.max_iter, cfg.horizon, jobs=jobs)
    return {
        "status": res.status,
        "iterations": res.iterations,
        "violations": res.violations,
        "theta": cfg.theta,
        "eps": cfg.eps,
        "envelope": res.envelope.to_dict(),
    }


def build_cost(model, cfg: caseio.RunConfig, periods) -> tuple[list[dict], list]:
    curves, rows = [], []
    for t in periods:
        s = costagg.sample_cost_points(model, cfg.gamma, t, cfg.cost_samples, cfg.chp_segments)
        c = costagg.fit_cost_curve(s, cfg.cost_partitions, t, cfg.gamma, cfg.restarts, cfg.seed)
        curves.append({**c.to_dict(), "rmse": c.rmse, "r2": c.r2})
        rows += [(t, p, v) for p, v in s]
    return curves, rows


# ---- subcommands ----


def cmd_gmm_fit(args) -> None:
    path = Path(args.samples)
    with path.open(newline="") as fh:
        header = next(csv.reader(fh), None)
    if not header:
        raise CaseError(f"{path}:1: empty sample file")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if header[0] == "period":
        periods, X, labels = data[:, 0].astype(int), data[:, 1:], header[1:]
    else:
        periods, X, labels = np.zeros(len(data), int), data, header
    fits = []
    for t in np.unique(periods):
        Xt = X[periods == t]
        if args.components == "auto":
            g = uncert.fit_auto(Xt, args.max_components, seed=args.seed or 0)
        else:
            g = uncert.fit_em(Xt, int(args.components), seed=args.seed or 0)
        fits.append({"period": int(t), "n_samples": len(Xt), "bic": uncert.bic(g, Xt), **g.to_dict()})
    write_json(args.out, {**_header("gmm"), "labels": labels, "gmms": fits})
    write_manifest(args.out, args, None)


def cmd_linearize(args) -> None:
    bundle = open_case(args.case, linearization=args.method)
    model = caseio.build_model(bundle)
    lm = model.linmodel
    out = {
        **_header("linear-network-model", model),
        "method": lm.method,
        "labels": list(lm.labels),
        "nodes": [list(n) for n in lm.nodes],
        "branch_phases": [list(b) for b in lm.branch_phases],
        "x_base": lm.x_base.tolist(),
        "K": lm.K.tolist(), "b": lm.b.tolist(),
        "J": lm.J.tolist(), "d": lm.d.tolist(),
        "m": lm.m.tolist(), "g_const": lm.g_const,
        "h": lm.h.tolist(), "l": lm.l,
    }
    if args.check:
        out["max_voltage_error"] = ccopf.linearization_error(model, args.check, args.seed or 0)
    write_json(args.out, out)
    write_manifest(args.out, args, bundle)


def cmd_pfr(args) -> None:
    over = {"angles": args.angles, "partitions": args.partitions, "seed": args.seed}
    if args.gamma_grid:
        over["gamma_grid"] = tuple(float(g) for g in args.gamma_grid.split(","))
    bundle = open_case(args.case, **over)
    model = caseio.build_model(bundle)
    periods = _periods(args.periods, model, bundle.config.period)
    records, scatter = build_pfr(model, bundle.config, periods, args.jobs)
    write_json(args.out, {**_header("pfr", model), "gamma_grid": list(bundle.config.gamma_grid),
                          "periods": records})
    write_csv(_sibling(args.out, ".scatter.csv"), ["t", "P", "Q", "gamma"], scatter)
    write_manifest(args.out, args, bundle)


def cmd_tcf(args) -> None:
    bundle = open_case(args.case, gamma=args.gamma, theta=args.theta, eps=args.eps, max_iter=args.max_iter)
    model = caseio.build_model(bundle)
    rec = build_tcf(model, bundle.config, args.jobs)
    write_json(args.out, {**_header("tcf", model), **rec})
    write_manifest(args.out, args, bundle)
    if rec["status"] != "CONVERGED":
        raise tcf.TcfNotConverged(f"NOT_CONVERGED after {rec['iterations']} iterations")


def cmd_cost(args) -> None:
    bundle = open_case(args.case, gamma=args.gamma, cost_samples=args.samples,
                       cost_partitions=args.partitions, seed=args.seed)
    model = caseio.build_model(bundle)
    periods = _periods(args.periods, model, bundle.config.period)
    curves, rows = build_cost(model, bundle.config, periods)
    write_json(args.out, {**_header("cost", model), "curves": curves})
    write_csv(_sibling(args.out, ".samples.csv"), ["t", "P", "cost"], rows)
    write_manifest(args.out, args, bundle)


def cmd_mc_verify(args) -> None:
    bundle = open_case(args.case, mc_grid=args.grid, mc_scenarios=args.scenarios, seed=args.seed)
    cfg = bundle.config
    model = caseio.build_model(bundle)
    t = cfg.period if args.period is None else args.period
    t0 = time.perf_counter()
    surface = pfr.build_surface(model, t, cfg.gamma_grid, cfg.angles, cfg.partitions, cfg.restarts, cfg.seed,
                                cfg.exterior, args.jobs)
    t_analytic = time.perf_counter() - t0
    t0 = time.perf_counter()
    pa, qa = mcoracle.grid_axes(model, t, cfg.mc_grid, cfg.mc_margin)
    grid = mcoracle.mc_confidence_grid(model, t, pa, qa, cfg.mc_scenarios, cfg.seed, jobs=args.jobs)
    t_mc = time.perf_counter() - t0
    cmp = mcoracle.compare_surfaces(surface, grid)
    Pm, Qm = grid.mesh()
    analytic = surface(Pm, Qm)
    rows = [(float(p), float(q), float(c), float(a))
            for p, q, c, a in zip(Pm.ravel(), Qm.ravel(), grid.confidence.ravel(), analytic.ravel())]
    write_csv(_sibling(args.out, ".grid.csv"), ["P", "Q", "mc", "analytic"], rows)
    write_json(args.out, {**_header("mc-verify", model), "t": t, "grid": cfg.mc_grid,
                          "scenarios": cfg.mc_scenarios, "seed": cfg.seed, **cmp, "lp_count": grid.lp_count})
    write_manifest(args.out, args, bundle, {"timing_s": {"analytic": t_analytic, "mc": t_mc}})


def build_flex(model, cfg: caseio.RunConfig, jobs=None) -> dict:
    periods = list(range(model.horizon))
    records, _ = build_pfr(model, cfg, periods, jobs)
    curves, _ = build_cost(model, cfg, periods)
    return {
        **_header("flexibility-model", model),
        "gamma": cfg.gamma,
        "horizon": model.horizon,
        "dt": model.dt,
        "pfr": records,
        "tcf": build_tcf(model, cfg, jobs),
        "cost": curves,
    }


def cmd_export_flex(args) -> None:
    bundle = open_case(args.case, seed=args.seed)
    model = caseio.build_model(bundle)
    write_json(args.out, build_flex(model, bundle.config, args.jobs))
    write_manifest(args.out, args, bundle)


def read_flex(path) -> dict:
    """Load an exported flexibility model, rebuilding its numeric objects."""
    data, _ = caseio.read_json(Path(path))
    if data.get("artifact") != "flexibility-model":
        raise CaseError(f"{path}:1: field artifact: not a flexibility model")
    from .cpwl import PwlModel

    return {
        "surfaces": [PwlModel.from_dict(r["surface"]) for r in data["pfr"]],
        "polygons": [[(np.array(p["A"]), np.array(p["b"]), p["gamma"]) for p in r["polygons"]] for r in data["pfr"]],
        "envelope": tcf.TcfEnvelope.from_dict(data["tcf"]["envelope"]),
        "cost": [PwlModel(np.array(c["slopes"]), np.array(c["intercepts"]), "max") for c in data["cost"]],
        "raw": data,
    }


def cmd_demo(args) -> None:
    out = Path(args.out)
    case = args.case
    runs = [
        ["linearize", "--case", case, "--out", str(out / "linear.json")],
        ["pfr", "--case", case, "--periods", "all", "--out", str(out / "pfr.json")],
        ["tcf", "--case", case, "--out", str(out / "tcf.json")],
        ["cost", "--case", case, "--periods", "all", "--out", str(out / "cost.json")],
        ["export-flex", "--case", case, "--out", str(out / "flex.json")],
    ]
    if args.mc:
        runs.append(["mc-verify", "--case", case, "--grid", "20", "--scenarios", "200",
                     "--out", str(out / "mc.json")])
    for argv in runs:
        log.info("demo: %s", " ".join(argv[:1]))
        a = build_parser().parse_args(argv + ["--jobs", str(args.jobs or default_jobs())])
        a.func(a)
    print(f"demo artifacts written to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vppflex", description="Stochastic VPP flexibility pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, case=True, **kw):
        sp = sub.add_parser(name, **kw)
        if case:
            sp.add_argument("--case", default="desk4", help="case directory, case.json or bundled case name")
        sp.add_argument("--out", type=Path, required=True)
        sp.add_argument("--jobs", type=int, default=None, help=f"worker processes (default ${JOBS_ENV} or 1)")
        sp.add_argument("--seed", type=int, default=None)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gmm-fit", cmd_gmm_fit, case=False, help="fit a Gaussian mixture to error samples")
    sp.add_argument("--samples", required=True)
    sp.add_argument("--components", default="auto")
    sp.add_argument("--max-components", type=int, default=5)

    sp = add("linearize", cmd_linearize, help="linear network model")
    sp.add_argument("--method", choices=("jacobian", "fixed-point"), default=None)
    sp.add_argument("--check", type=int, default=0, metavar="N", help="sample N injections per period for accuracy")

    sp = add("pfr", cmd_pfr, help="confidence surface and level polygons")
    sp.add_argument("--gamma-grid", default=None, help="comma separated levels")
    sp.add_argument("--angles", type=int, default=None)
    sp.add_argument("--partitions", type=int, default=None)
    sp.add_argument("--periods", default=None, help="'all' or comma separated periods")

    sp = add("tcf", cmd_tcf, help="time-coupling envelope")
    sp.add_argument("--gamma", type=float, default=None)
    sp.add_argument("--theta", type=float, default=None)
    sp.add_argument("--eps", type=float, default=None)
    sp.add_argument("--max-iter", type=int, default=None)

    sp = add("cost", cmd_cost, help="piecewise-linear cost curves")
    sp.add_argument("--gamma", type=float, default=None)
    sp.add_argument("--samples", type=int, default=None)
    sp.add_argument("--partitions", type=int, default=None)
    sp.add_argument("--periods", default=None)

    sp = add("mc-verify", cmd_mc_verify, help="Monte-Carlo check of the confidence surface")
    sp.add_argument("--grid", type=int, default=None)
    sp.add_argument("--scenarios", type=int, default=None)
    sp.add_argument("--period", type=int, default=None)

    add("export-flex", cmd_export_flex, help="bundle polygons, envelope and cost curves")

    sp = add("demo", cmd_demo, help="run every stage on a case")
    sp.add_argument("--mc", action="store_true", help="include a small Monte-Carlo check")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CaseError as exc:
        print(f"error: input: {exc}", file=sys.stderr)
        return 2
    except (tcf.TcfNotConverged, ccopf.InfeasiblePeriod, pfr.UnachievableLevel) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
