"""DER units, polygonal capability charts, time coupling and bus injections."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .netmodel import PAIRS, MultiphaseNetwork, NetworkError

KINDS = ("CHP", "PV", "ESS", "WT")
RENEWABLE = ("PV", "WT")


class CapabilityError(ValueError):
    pass


class CouplingError(ValueError):
    pass


@dataclass(frozen=True)
class CapabilityPolygon:
    """``{(P, Q) : A @ [P, Q] <= b}``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        if A.shape[1] != 2 or A.shape[0] != len(b):
            raise CapabilityError("polygon rows must be (k, 2) with k right-hand sides")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    def contains(self, p, q, tol: float = 1e-12) -> np.ndarray:
        pts = np.column_stack([np.ravel(p), np.ravel(q)])
        return np.all(pts @ self.A.T <= self.b + tol, axis=1)

    def vertices(self) -> np.ndarray:
        return clip_polygon(self.A, self.b)

    def extent(self) -> tuple[float, float, float, float]:
        v = self.vertices()
        if len(v) == 0:
            raise CapabilityError("empty capability polygon")
        return v[:, 0].min(), v[:, 0].max(), v[:, 1].min(), v[:, 1].max()


def clip_polygon(A: np.ndarray, b: np.ndarray, box: float = 1e6) -> np.ndarray:
    """Vertices of ``{z : A z <= b}`` in counter-clockwise order.

    Clips a large square by each half-plane in turn.  Vertices that sit on
    the square mark an unbounded region.
    """
    poly = np.array([[-box, -box], [box, -box], [box, box], [-box, box]], dtype=float)
    for a, rhs in zip(np.asarray(A, float), np.asarray(b, float)):
        if len(poly) == 0:
            break
        val = poly @ a - rhs
        out = []
        n = len(poly)
        for i in range(n):
            cur, nxt = poly[i], poly[(i + 1) % n]
            vc, vn = val[i], val[(i + 1) % n]
            if vc <= 0:
                out.append(cur)
            if (vc < 0 < vn) or (vn < 0 < vc):
                s = vc / (vc - vn)
                out.append(cur + s * (nxt - cur))
        poly = np.array(out) if out else np.zeros((0, 2))
    if len(poly) == 0:
        return poly
    # drop consecutive duplicates
    keep = [0]
    for i in range(1, len(poly)):
        if np.linalg.norm(poly[i] - poly[keep[-1]]) > 1e-12:
            keep.append(i)
    poly = poly[keep]
    if len(poly) > 1 and np.linalg.norm(poly[0] - poly[-1]) <= 1e-12:
        poly = poly[:-1]
    return poly


def polygon_area(vertices: np.ndarray) -> float:
    if len(vertices) < 3:
        return 0.0
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _circle_rows(s_max: float, n_sides: int):
    k = np.arange(n_sides)
    theta = 2.0 * np.pi * (k + 0.5) / n_sides
    A = np.column_stack([np.cos(theta), np.sin(theta)])
    b = np.full(n_sides, s_max * math.cos(math.pi / n_sides))
    return A, b


def _box_rows(p_min, p_max, q_min, q_max):
    rows, rhs = [], []
    if p_max is not None:
        rows.append([1.0, 0.0]); rhs.append(p_max)
    if p_min is not None:
        rows.append([-1.0, 0.0]); rhs.append(-p_min)
    if q_max is not None:
        rows.append([0.0, 1.0]); rhs.append(q_max)
    if q_min is not None:
        rows.append([0.0, -1.0]); rhs.append(-q_min)
    return np.array(rows, dtype=float).reshape(-1, 2), np.array(rhs, dtype=float)


def polygonize_chart(kind: str, params: Mapping[str, float], n_sides: int = 8) -> CapabilityPolygon:
    """Inscribed polygon of a capability chart.

    ``kind`` is the chart shape: ``box`` (rectangular ESS chart), ``inverter``
    (apparent-power circle, optionally cut by P/Q limits), ``chp`` (stator
    circle with prime-mover P limits and excitation Q limits) or ``dfig``
    (stator circle with a reactive band that narrows linearly with P).
    """
    if n_sides < 4:
        raise CapabilityError("n_sides must be at least 4")
    g = params.get
    if kind == "box":
        A, b = _box_rows(g("p_min"), g("p_max"), g("q_min"), g("q_max"))
        if len(b) != 4:
            raise CapabilityError("box chart needs p_min, p_max, q_min and q_max")
    elif kind in ("inverter", "chp", "dfig"):
        s = float(params["s_max"])
        if s <= 0:
            raise CapabilityError("empty capability chart (zero apparent-power radius)")
        A, b = _circle_rows(s, n_sides)
        A2, b2 = _box_rows(g("p_min"), g("p_max"), g("q_min"), g("q_max"))
        A, b = np.vstack([A, A2]), np.concatenate([b, b2])
        if kind == "dfig":
            # Q limits shrink from q_over/q_under at P=0 by `taper` at P=s_max
            taper = float(g("taper", 0.5))
            q_over, q_under = float(params["q_over"]), float(params["q_under"])
            A = np.vstack([A, [[taper * q_over / s, 1.0], [taper * q_under / s, -1.0]]])
            b = np.concatenate([b, [q_over, q_under]])
    else:
        raise CapabilityError(f"unknown chart kind {kind!r}")
    poly = CapabilityPolygon(A, b)
    v = poly.vertices()
    if len(v) < 3 or polygon_area(v) <= 0.0:
        # a segment or point is allowed only for degenerate boxes
        if kind != "box" or len(v) == 0:
            raise CapabilityError("empty capability chart")
    if np.abs(v).max() >= 1e5:
        raise CapabilityError("capability chart is unbounded")
    return poly


@dataclass(frozen=True)
class EssRecord:
    alpha: float
    e_min: float
    e_max: float
    e0: float

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise CapabilityError("ESS self-discharge factor must lie in (0, 1]")
        if not self.e_min <= self.e0 <= self.e_max:
            raise CapabilityError("ESS energies must satisfy e_min <= e0 <= e_max")


@dataclass(frozen=True)
class DerUnit:
    name: str
    kind: str
    bus: str
    phases: tuple[str, ...]
    charts: tuple[CapabilityPolygon, ...]  # one per phase
    ramp: float | None = None  # CHP, p.u. per period on the total output
    p0: float | None = None  # total output before the first period (ramp anchor)
    ess: EssRecord | None = None
    cost: Any = None  # costagg.DerCostModel
    equal_share: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CapabilityError(f"unit {self.name}: unknown kind {self.kind!r}")
        if len(self.charts) != len(self.phases):
            raise CapabilityError(f"unit {self.name}: one chart per phase required")
        if self.kind == "ESS" and self.ess is None:
            raise CapabilityError(f"unit {self.name}: ESS record missing")
        if self.ramp is not None and self.ramp < 0:
            raise CapabilityError(f"unit {self.name}: ramp rate must be nonnegative")

    @property
    def is_delta(self) -> bool:
        return all(p in PAIRS for p in self.phases)


@dataclass(frozen=True)
class Load:
    bus: str
    phase: str  # phase for wye buses, pair for delta buses
    p: np.ndarray  # forecast per period
    phi: float = 0.0  # power-factor angle, Q = P tan(phi)

    def __post_init__(self):
        if not abs(self.phi) < math.pi / 2:
            raise CapabilityError("load power-factor angle must satisfy |phi| < pi/2")
        object.__setattr__(self, "p", np.atleast_1d(np.asarray(self.p, dtype=float)))


@dataclass(frozen=True)
class ForecastSeries:
    """Expected maximum output of renewable units, keyed by ``(unit, phase)``."""

    p_max: Mapping[tuple[str, str], np.ndarray]

    def __post_init__(self):
        fixed = {}
        for k, v in dict(self.p_max).items():
            arr = np.atleast_1d(np.asarray(v, dtype=float))
            if np.any(arr < 0):
                raise CapabilityError(f"negative renewable forecast for {k}")
            fixed[tuple(k)] = arr
        object.__setattr__(self, "p_max", fixed)

    def at(self, unit: str, phase: str, t: int) -> float:
        try:
            return float(self.p_max[(unit, phase)][t])
        except KeyError:
            raise CapabilityError(f"no forecast for renewable unit {unit} phase {phase}") from None


@dataclass(frozen=True)
class Fleet:
    """Units plus the decision-vector ordering: P then Q blocks per kind."""

    units: tuple[DerUnit, ...]
    columns: tuple[tuple[int, str, str], ...] = field(init=False)

    def __post_init__(self):
        names = [u.name for u in self.units]
        if len(set(names)) != len(names):
            raise CapabilityError("duplicate unit names")
        cols = []
        for kind in KINDS:
            members = [(i, u) for i, u in enumerate(self.units) if u.kind == kind]
            for var in ("P", "Q"):
                for i, u in members:
                    for ph in u.phases:
                        cols.append((i, ph, var))
        object.__setattr__(self, "columns", tuple(cols))
        object.__setattr__(self, "_index", {c: k for k, c in enumerate(cols)})

    @property
    def n_vars(self) -> int:
        return len(self.columns)

    def unit(self, name: str) -> DerUnit:
        for u in self.units:
            if u.name == name:
                return u
        raise KeyError(name)

    def unit_index(self, name: str) -> int:
        return [u.name for u in self.units].index(name)

    def col(self, unit_idx: int, phase: str, var: str) -> int:
        return self._index[(unit_idx, phase, var)]

    def p_cols(self, unit_idx: int) -> list[int]:
        u = self.units[unit_idx]
        return [self.col(unit_idx, ph, "P") for ph in u.phases]

    def labels(self) -> list[str]:
        return [f"{var}:{self.units[i].name}.{ph}" for i, ph, var in self.columns]

    def renewable_slots(self, kind: str) -> list[tuple[str, str]]:
        return [(u.name, ph) for u in self.units if u.kind == kind for ph in u.phases]


def _unit_period_rows(fleet: Fleet, ui: int, t: int, forecasts: ForecastSeries | None):
    u = fleet.units[ui]
    n = fleet.n_vars
    rows, rhs = [], []
    for ph, chart in zip(u.phases, u.charts):
        cp, cq = fleet.col(ui, ph, "P"), fleet.col(ui, ph, "Q")
        for a, bb in zip(chart.A, chart.b):
            r = np.zeros(n)
            r[cp], r[cq] = a
            rows.append(r)
            rhs.append(bb)
        if u.kind in RENEWABLE:
            if forecasts is None:
                raise CapabilityError(f"renewable unit {u.name} needs a forecast")
            pmax = forecasts.at(u.name, ph, t)
            r = np.zeros(n); r[cp] = 1.0
            rows.append(r); rhs.append(pmax)
            r = np.zeros(n); r[cp] = -1.0
            rows.append(r); rhs.append(0.0)
    if u.equal_share and len(u.phases) > 1:
        for var in ("P", "Q"):
            c0 = fleet.col(ui, u.phases[0], var)
            for ph in u.phases[1:]:
                r = np.zeros(n); r[c0] = 1.0; r[fleet.col(ui, ph, var)] = -1.0
                rows.append(r); rhs.append(0.0)
                rows.append(-r); rhs.append(0.0)
    return np.array(rows).reshape(-1, n), np.array(rhs, dtype=float)


def period_rows(fleet: Fleet, t: int, forecasts: ForecastSeries | None):
    """All time-decoupled rows (charts and curtailment boxes) for period ``t``."""
    blocks = [_unit_period_rows(fleet, i, t, forecasts) for i in range(len(fleet.units))]
    if not blocks:
        return np.zeros((0, fleet.n_vars)), np.zeros(0)
    return np.vstack([b[0] for b in blocks]), np.concatenate([b[1] for b in blocks])


def _coupling_rows(fleet: Fleet, ui: int, t: int, horizon: int, dt: float):
    """Ramp rows linking ``t-1, t`` and ESS energy rows for ``E^t`` (0-based t)."""
    u = fleet.units[ui]
    n = fleet.n_vars
    N = n * horizon
    pc = fleet.p_cols(ui)
    rows, rhs = [], []
    if u.kind == "CHP" and u.ramp is not None:
        if t > 0:
            r = np.zeros(N)
            r[[t * n + c for c in pc]] = 1.0
            r[[(t - 1) * n + c for c in pc]] = -1.0
            rows += [r, -r]
            rhs += [u.ramp, u.ramp]
        elif u.p0 is not None:
            r = np.zeros(N)
            r[pc] = 1.0
            rows += [r, -r]
            rhs += [u.ramp + u.p0, u.ramp - u.p0]
    if u.kind == "ESS":
        e = u.ess
        # E^t = alpha^(t+1) E0 - dt * sum_tau alpha^(t-tau) P^tau
        r = np.zeros(N)
        for tau in range(t + 1):
            r[[tau * n + c for c in pc]] = -dt * e.alpha ** (t - tau)
        const = e.alpha ** (t + 1) * e.e0
        rows += [r, -r]
        rhs += [e.e_max - const, const - e.e_min]
    return np.array(rows).reshape(-1, N), np.array(rhs, dtype=float)


def build_unit_constraints(
    fleet: Fleet,
    unit: str,
    t: int,
    forecasts: ForecastSeries | None,
    horizon: int | None = None,
    dt: float = 1.0,
):
    """Rows ``A z <= b`` for one unit at (0-based) period ``t``.

    Without ``horizon`` the columns are one period's decision vector and only
    the chart and curtailment rows are emitted.  With ``horizon`` the columns
    are the stacked vectors of periods ``0..horizon-1`` and the ramp and
    storage-energy rows that end at ``t`` are added.
    """
    ui = fleet.unit_index(unit)
    A, b = _unit_period_rows(fleet, ui, t, forecasts)
    if horizon is None:
        return A, b
    if not 0 <= t < horizon:
        raise CouplingError(f"period {t} outside horizon of {horizon} periods; previous-period variables unavailable")
    n = fleet.n_vars
    Ah = np.zeros((A.shape[0], n * horizon))
    Ah[:, t * n:(t + 1) * n] = A
    Ac, bc = _coupling_rows(fleet, ui, t, horizon, dt)
    return np.vstack([Ah, Ac]), np.concatenate([b, bc])


def horizon_rows(fleet: Fleet, horizon: int, forecasts: ForecastSeries | None, dt: float = 1.0):
    """Every unit's rows over the stacked horizon."""
    blocks = [
        build_unit_constraints(fleet, u.name, t, forecasts, horizon, dt)
        for t in range(horizon)
        for u in fleet.units
    ]
    N = fleet.n_vars * horizon
    if not blocks:
        return np.zeros((0, N)), np.zeros(0)
    return np.vstack([b[0] for b in blocks]), np.concatenate([b[1] for b in blocks])


def ess_energy(unit: DerUnit, p_total: Sequence[float], dt: float) -> np.ndarray:
    """Replay the storage recursion for a sequence of total outputs."""
    e = unit.ess.e0
    out = []
    for p in p_total:
        e = unit.ess.alpha * e - dt * p
        out.append(e)
    return np.array(out)


@dataclass(frozen=True)
class InjectionMap:
    """Affine map ``(x_der, e) -> x_net`` for one period.

    ``x_net = D @ x_der + const + E @ e`` where ``e`` stacks PV, WT and load
    forecast errors.  Renewable errors do not move the injection (the
    scheduled output is a decision); they enter only the capability row.
    """

    D: np.ndarray
    const: np.ndarray
    E: np.ndarray
    error_labels: tuple[str, ...]

    def __call__(self, x_der, e=None) -> np.ndarray:
        out = self.D @ np.asarray(x_der, dtype=float) + self.const
        if e is not None:
            out = out + self.E @ np.asarray(e, dtype=float)
        return out


def error_layout(fleet: Fleet, loads: Sequence[Load]) -> list[str]:
    pv = [f"PV:{u}.{p}" for u, p in fleet.renewable_slots("PV")]
    wt = [f"WT:{u}.{p}" for u, p in fleet.renewable_slots("WT")]
    ld = [f"load:{ld.bus}.{ld.phase}" for ld in loads]
    return pv + wt + ld


def _slot_index(net: MultiphaseNetwork, bus: str, phase: str) -> tuple[int, int]:
    """(p column, q column) of a bus slot in the injection vector."""
    b = net.bus(bus)
    nw, nd = len(net.wye_slots), len(net.delta_slots)
    if b.connection == "Y":
        if phase not in b.phases:
            raise NetworkError(f"phase {phase} absent at wye bus {bus}")
        k = net.wye_slots.index((bus, phase))
        return k, nw + k
    if phase not in b.pairs:
        raise NetworkError(f"phase pair {phase} absent at delta bus {bus}")
    k = net.delta_slots.index((bus, phase))
    return 2 * nw + k, 2 * nw + nd + k


def build_injection_map(fleet: Fleet, loads: Sequence[Load], net: MultiphaseNetwork, t: int) -> InjectionMap:
    n_inj = net.n_inj
    D = np.zeros((n_inj, fleet.n_vars))
    for k, (ui, ph, var) in enumerate(fleet.columns):
        u = fleet.units[ui]
        bus = net.bus(u.bus)
        if (bus.connection == "D") != (ph in PAIRS):
            raise NetworkError(f"unit {u.name}: connection mismatch with bus {u.bus}")
        cp, cq = _slot_index(net, u.bus, ph)
        D[cp if var == "P" else cq, k] += 1.0
    labels = error_layout(fleet, loads)
    n_ren = len(fleet.renewable_slots("PV")) + len(fleet.renewable_slots("WT"))
    E = np.zeros((n_inj, len(labels)))
    const = np.zeros(n_inj)
    for j, ld in enumerate(loads):
        cp, cq = _slot_index(net, ld.bus, ld.phase)
        tanphi = math.tan(ld.phi)
        const[cp] -= ld.p[t]
        const[cq] -= ld.p[t] * tanphi
        E[cp, n_ren + j] -= 1.0
        E[cq, n_ren + j] -= tanphi
    return InjectionMap(D, const, E, tuple(labels))
