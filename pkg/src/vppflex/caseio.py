"""Case bundles: JSON network/fleet/profile files, CSV error history, run config."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import derfleet, netmodel, uncert
from .ccopf import VppModel
from .costagg import DerCostModel

FORMAT_VERSION = 1
DATA_DIR = Path(__file__).parent / "data"


class CaseError(ValueError):
    """Parse or validation failure; the message cites file, line and field."""


@dataclass(frozen=True)
class RunConfig:
    gamma_grid: tuple[float, ...] = (0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95, 0.99)
    angles: int = 32
    partitions: int = 16
    restarts: int = 10
    exterior: str = "hinge"
    gamma: float = 0.8
    theta: float = 0.9
    eps: float = 1e-4
    max_iter: int = 60
    horizon: int | None = None
    period: int = 0
    seed: int = 0
    n_sides: int = 8
    cost_samples: int = 41
    cost_partitions: int = 5
    chp_segments: int = 10
    max_components: int = 5
    components: int | None = None
    linearization: str = "jacobian"
    mc_grid: int = 40
    mc_scenarios: int = 500
    mc_margin: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "gamma_grid", tuple(float(g) for g in self.gamma_grid))
        checks = [
            (all(0.5 < g < 1 for g in self.gamma_grid) and len(self.gamma_grid) >= 4,
             "gamma_grid", "needs >= 4 levels in (0.5, 1)"),
            (self.angles >= 8, "angles", "must be >= 8"),
            (self.partitions >= 1 and self.cost_partitions >= 1, "partitions", "must be >= 1"),
            (0.5 < self.gamma < 1, "gamma", "must lie in (0.5, 1)"),
            (0.5 < self.theta <= 1, "theta", "must lie in (0.5, 1]"),
            (self.eps > 0, "eps", "must be positive"),
            (self.n_sides >= 4, "n_sides", "must be >= 4"),
            (self.mc_scenarios >= 100, "mc_scenarios", "must be >= 100"),
            (self.exterior in ("exclude", "hinge"), "exterior", "must be exclude or hinge"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise CaseError(f"config: field {name}: {msg}")


@dataclass(frozen=True)
class CaseBundle:
    root: Path
    name: str
    network_path: Path
    fleet_path: Path
    profiles_path: Path
    history_path: Path | None
    config: RunConfig = field(default_factory=RunConfig)


def _line_of(text: str, key: str) -> int:
    for i, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return i
    return 1


def read_json(path: Path) -> tuple[dict, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CaseError(f"{path}:0: cannot read file: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise CaseError(f"{path}:1: top level must be an object")
    ver = data.get("format_version")
    if ver != FORMAT_VERSION:
        raise CaseError(f"{path}:{_line_of(text, 'format_version')}: field format_version: expected {FORMAT_VERSION}, got {ver}")
    return data, text


class _Fields:
    """Field access that turns missing/invalid entries into located errors."""

    def __init__(self, path, text):
        self.path, self.text = path, text

    def fail(self, key, msg):
        raise CaseError(f"{self.path}:{_line_of(self.text, key)}: field {key}: {msg}")

    def get(self, obj, key, conv=None, default=...):
        if key not in obj:
            if default is ...:
                self.fail(key, "missing")
            return default
        try:
            return obj[key] if conv is None else conv(obj[key])
        except (TypeError, ValueError) as exc:
            self.fail(key, str(exc))


def load_case(path) -> CaseBundle:
    path = Path(path)
    if path.is_dir():
        path = path / "case.json"
    data, text = read_json(path)
    f = _Fields(path, text)
    root = path.parent
    cfg = dict(f.get(data, "config", dict, {}))
    names = {fl.name for fl in fields(RunConfig)}
    for k in cfg:
        if k not in names:
            f.fail(k, "unknown configuration key")
    if "gamma_grid" in cfg:
        cfg["gamma_grid"] = tuple(cfg["gamma_grid"])
    try:
        config = RunConfig(**cfg)
    except CaseError as exc:
        key = str(exc).split("field ")[1].split(":")[0]
        raise CaseError(f"{path}:{_line_of(text, key)}: {exc}") from None
    except TypeError as exc:
        raise CaseError(f"{path}:{_line_of(text, 'config')}: field config: {exc}") from None
    hist = f.get(data, "history", str, None)
    return CaseBundle(
        root,
        f.get(data, "name", str, path.parent.name),
        root / f.get(data, "network", str),
        root / f.get(data, "fleet", str),
        root / f.get(data, "profiles", str),
        None if hist is None else root / hist,
        config,
    )


def bundled_case(name: str) -> CaseBundle:
    p = DATA_DIR / name
    if not p.exists():
        raise CaseError(f"{p}:0: no bundled case named {name!r}")
    return load_case(p)


def load_network(path) -> netmodel.MultiphaseNetwork:
    data, text = read_json(path)
    try:
        return netmodel.network_from_dict(data)
    except KeyError as exc:
        key = exc.args[0]
        raise CaseError(f"{path}:{_line_of(text, key)}: field {key}: missing") from None
    except (ValueError, TypeError) as exc:
        raise CaseError(f"{path}:1: field network: {exc}") from None


def _unit_from_dict(u: dict, f: _Fields, n_sides: int) -> derfleet.DerUnit:
    phases = tuple(f.get(u, "phases", list))
    chart = f.get(u, "chart")
    charts = chart if isinstance(chart, list) else [chart] * len(phases)
    polys = []
    for ch in charts:
        ch = dict(ch)
        kind = ch.pop("type", None)
        if kind is None:
            f.fail("type", "chart type missing")
        sides = int(ch.pop("n_sides", n_sides))
        try:
            polys.append(derfleet.polygonize_chart(kind, ch, sides))
        except (derfleet.CapabilityError, KeyError) as exc:
            f.fail("chart", f"unit {u.get('name')}: {exc}")
    ess = u.get("ess")
    cost = u.get("cost")
    try:
        return derfleet.DerUnit(
            str(f.get(u, "name")),
            str(f.get(u, "kind")),
            str(f.get(u, "bus")),
            phases,
            tuple(polys),
            f.get(u, "ramp", float, None),
            f.get(u, "p0", float, None),
            None if ess is None else derfleet.EssRecord(**ess),
            None if cost is None else DerCostModel(**cost),
            bool(u.get("equal_share", False)),
        )
    except (derfleet.CapabilityError, TypeError, ValueError) as exc:
        f.fail("units", f"unit {u.get('name')}: {exc}")


def load_fleet(path, n_sides: int = 8) -> derfleet.Fleet:
    data, text = read_json(path)
    f = _Fields(path, text)
    units = [_unit_from_dict(u, f, n_sides) for u in f.get(data, "units", list)]
    try:
        return derfleet.Fleet(tuple(units))
    except derfleet.CapabilityError as exc:
        f.fail("units", str(exc))


def load_profiles(path):
    """``(loads, forecasts, dt)`` from the profile file."""
    data, text = read_json(path)
    f = _Fields(path, text)
    loads = []
    for ld in f.get(data, "loads", list):
        try:
            loads.append(derfleet.Load(str(ld["bus"]), str(ld["phase"]), np.array(ld["p"], float), float(ld.get("phi", 0.0))))
        except KeyError as exc:
            f.fail(exc.args[0], "missing in load entry")
        except derfleet.CapabilityError as exc:
            f.fail("phi", str(exc))
    fc = {}
    for unit, per_phase in f.get(data, "forecasts", dict, {}).items():
        for ph, series in per_phase.items():
            fc[(unit, ph)] = series
    try:
        forecasts = derfleet.ForecastSeries(fc) if fc else None
    except derfleet.CapabilityError as exc:
        f.fail("forecasts", str(exc))
    return tuple(loads), forecasts, f.get(data, "dt", float, 1.0)


def read_history(path, labels) -> tuple[np.ndarray, np.ndarray]:
    """``(period, samples)`` from a CSV whose header is ``period`` plus error labels."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise CaseError(f"{path}:0: cannot read file: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "period":
            raise CaseError(f"{path}:1: field period: first column must be 'period'")
        missing = [lab for lab in labels if lab not in header]
        if missing:
            raise CaseError(f"{path}:1: field {missing[0]}: error column missing")
        cols = [header.index(lab) for lab in labels]
        periods, rows = [], []
        for lineno, row in enumerate(reader, 2):
            try:
                periods.append(int(row[0]))
                rows.append([float(row[c]) for c in cols])
            except (ValueError, IndexError):
                raise CaseError(f"{path}:{lineno}: field {header[min(len(row), len(header)) - 1]}: not a number") from None
    return np.array(periods, dtype=int), np.array(rows, dtype=float).reshape(-1, len(labels))


def fit_period_gmms(periods, samples, horizon, config: RunConfig) -> tuple[uncert.Gmm, ...]:
    out = []
    for t in range(horizon):
        X = samples[periods == t]
        if len(X) == 0:
            raise CaseError(f"history: no samples for period {t}")
        if config.components is None:
            out.append(uncert.fit_auto(X, config.max_components, seed=config.seed))
        else:
            out.append(uncert.fit_em(X, config.components, seed=config.seed))
    return tuple(out)


# fitted mixtures per (history file state, horizon, fit settings)
_GMM_CACHE: dict = {}


def _history_gmms(path: Path, labels, horizon, cfg: RunConfig):
    try:
        st = Path(path).stat()
        key = (str(Path(path).resolve()), st.st_mtime_ns, st.st_size, tuple(labels), horizon,
               cfg.components, cfg.max_components, cfg.seed)
    except OSError:
        key = None
    if key is None or key not in _GMM_CACHE:
        periods, X = read_history(path, labels)
        gmms = fit_period_gmms(periods, X, horizon, cfg)
        if key is None:
            return gmms
        _GMM_CACHE[key] = gmms
    return _GMM_CACHE[key]


def base_injections(net, fleet, loads, forecasts, horizon) -> np.ndarray:
    """Linearisation point: mean load plus every DER at the centre of its reachable box."""
    n = fleet.n_vars
    x = np.zeros(n)
    for k, (ui, ph, var) in enumerate(fleet.columns):
        u = fleet.units[ui]
        p_lo, p_hi, q_lo, q_hi = u.charts[u.phases.index(ph)].extent()
        if u.kind in derfleet.RENEWABLE:
            p_hi = min(p_hi, float(np.mean([forecasts.at(u.name, ph, t) for t in range(horizon)])))
            p_lo = max(p_lo, 0.0)
        x[k] = 0.5 * (p_lo + p_hi) if var == "P" else 0.5 * (q_lo + q_hi)
    mean_loads = [derfleet.Load(ld.bus, ld.phase, np.array([ld.p[:horizon].mean()]), ld.phi) for ld in loads]
    return derfleet.build_injection_map(fleet, mean_loads, net, 0)(x)


def assemble(
    net, fleet, loads, forecasts, gmms, dt=1.0, method="jacobian", horizon=None, name="vpp", monitor=None
) -> VppModel:
    """Linearise the network around the central operating point and bundle a model."""
    T = horizon or (min(len(ld.p) for ld in loads) if loads else 1)
    loads = tuple(derfleet.Load(ld.bus, ld.phase, ld.p[:T], ld.phi) for ld in loads)
    if forecasts is not None:
        forecasts = derfleet.ForecastSeries({k: v[:T] for k, v in forecasts.p_max.items()})
    x0 = base_injections(net, fleet, loads, forecasts, T)
    lin = netmodel.linearize(net, x0, method=method)
    return VppModel(net, lin, fleet, tuple(loads), forecasts, tuple(gmms), dt, monitor, name)


def build_model(bundle: CaseBundle) -> VppModel:
    cfg = bundle.config
    net = load_network(bundle.network_path)
    fleet = load_fleet(bundle.fleet_path, cfg.n_sides)
    loads, forecasts, dt = load_profiles(bundle.profiles_path)
    T = cfg.horizon or min(len(ld.p) for ld in loads)
    labels = derfleet.error_layout(fleet, loads)
    if bundle.history_path is None:
        gmms = (uncert.Gmm.point_mass(len(labels)),)
    else:
        gmms = _history_gmms(bundle.history_path, labels, T, cfg)
    try:
        return assemble(net, fleet, loads, forecasts, gmms, dt, cfg.linearization, T, bundle.name)
    except (netmodel.NetworkError, derfleet.CapabilityError) as exc:
        raise CaseError(f"{bundle.root / 'case.json'}:1: field case: {exc}") from None


def config_dict(cfg: RunConfig) -> dict[str, Any]:
    d = asdict(cfg)
    d["gamma_grid"] = list(cfg.gamma_grid)
    return d


def with_config(bundle: CaseBundle, **overrides) -> CaseBundle:
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(bundle, config=replace(bundle.config, **overrides))
