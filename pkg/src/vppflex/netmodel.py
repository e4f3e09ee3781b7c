"""Multiphase unbalanced network: load flow and the linear sensitivity model.

Nodes are bus-phases ordered bus by bus, phases in ``a, b, c`` order.  The
injection vector follows the ordering ``x = [p^Y; q^Y; p^D; q^D]`` where the
wye slots are the phases of every wye bus and the delta slots are the phase
pairs (``ab, bc, ca``) of every delta bus.

All quantities are per unit.  The PCC power reported by the model is the
power *exported* by the VPP network to the upstream grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

PHASES = ("a", "b", "c")
PAIRS = ("ab", "bc", "ca")
_SHIFT = {"a": 0.0, "b": -2.0 * np.pi / 3.0, "c": 2.0 * np.pi / 3.0}


class NetworkError(ValueError):
    """Structural problem with a network description or injection vector."""


class LoadFlowDivergence(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(f"load flow did not converge after {iterations} iterations (residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[str, ...] = PHASES
    connection: str = "Y"
    v_min: float = 0.95
    v_max: float = 1.05

    def __post_init__(self):
        if self.connection not in ("Y", "D"):
            raise NetworkError(f"bus {self.id}: connection must be 'Y' or 'D'")
        if not self.phases or any(p not in PHASES for p in self.phases):
            raise NetworkError(f"bus {self.id}: bad phase set {self.phases}")
        if tuple(sorted(self.phases)) != tuple(self.phases):
            raise NetworkError(f"bus {self.id}: phases must be listed in a, b, c order")
        if not self.v_min < self.v_max:
            raise NetworkError(f"bus {self.id}: v_min must be below v_max")
        if self.connection == "D" and len(self.phases) < 2:
            raise NetworkError(f"bus {self.id}: delta connection needs two or more phases")

    @property
    def pairs(self) -> tuple[str, ...]:
        return tuple(p for p in PAIRS if p[0] in self.phases and p[1] in self.phases)


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    phases: tuple[str, ...]
    y_series: np.ndarray  # complex (k, k), k = len(phases)
    i_max: float

    def __post_init__(self):
        k = len(self.phases)
        if self.y_series.shape != (k, k):
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus}: admittance shape mismatch")
        if not np.allclose(self.y_series, self.y_series.T, atol=1e-12):
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus}: admittance must be symmetric")
        if self.i_max <= 0:
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus}: current limit must be positive")

    @property
    def name(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"

    @classmethod
    def from_impedance(cls, from_bus, to_bus, phases, z, i_max):
        z = np.atleast_2d(np.asarray(z, dtype=complex))
        return cls(from_bus, to_bus, tuple(phases), np.linalg.inv(z), float(i_max))


@dataclass(frozen=True)
class MultiphaseNetwork:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    pcc: str
    slack_voltage: np.ndarray | None = None  # complex per PCC phase
    base_mva: float = 1.0
    base_kv: float = 1.0

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate bus ids")
        if self.pcc not in ids:
            raise NetworkError(f"PCC bus {self.pcc!r} not in network")
        by_id = {b.id: b for b in self.buses}
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in by_id:
                    raise NetworkError(f"branch {br.name}: unknown bus {end!r}")
                if any(p not in by_id[end].phases for p in br.phases):
                    raise NetworkError(f"branch {br.name}: phase absent at bus {end}")
        # connectivity by breadth-first search from the PCC
        adj = {i: set() for i in ids}
        for br in self.branches:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
        seen, stack = {self.pcc}, [self.pcc]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if seen != set(ids):
            raise NetworkError(f"buses not connected to the PCC: {sorted(set(ids) - seen)}")
        if self.slack_voltage is None:
            phases = by_id[self.pcc].phases
            object.__setattr__(self, "slack_voltage", np.array([np.exp(1j * _SHIFT[p]) for p in phases]))

    def bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise NetworkError(f"unknown bus {bus_id!r}")

    # --- orderings -------------------------------------------------------
    @property
    def nodes(self) -> list[tuple[str, str]]:
        return [(b.id, p) for b in self.buses for p in b.phases]

    @property
    def wye_slots(self) -> list[tuple[str, str]]:
        return [(b.id, p) for b in self.buses if b.connection == "Y" for p in b.phases]

    @property
    def delta_slots(self) -> list[tuple[str, str]]:
        return [(b.id, pr) for b in self.buses if b.connection == "D" for pr in b.pairs]

    @property
    def n_inj(self) -> int:
        return 2 * (len(self.wye_slots) + len(self.delta_slots))

    def injection_labels(self) -> list[str]:
        w = [f"{b}.{p}" for b, p in self.wye_slots]
        d = [f"{b}.{p}" for b, p in self.delta_slots]
        return [f"p:{s}" for s in w] + [f"q:{s}" for s in w] + [f"p:{s}" for s in d] + [f"q:{s}" for s in d]

    def branch_labels(self) -> list[tuple[str, str]]:
        return [(br.name, p) for br in self.branches for p in br.phases]

    # --- matrices --------------------------------------------------------
    def ybus(self) -> np.ndarray:
        idx = {n: k for k, n in enumerate(self.nodes)}
        Y = np.zeros((len(idx), len(idx)), dtype=complex)
        for br in self.branches:
            fi = [idx[(br.from_bus, p)] for p in br.phases]
            ti = [idx[(br.to_bus, p)] for p in br.phases]
            Y[np.ix_(fi, fi)] += br.y_series
            Y[np.ix_(ti, ti)] += br.y_series
            Y[np.ix_(fi, ti)] -= br.y_series
            Y[np.ix_(ti, fi)] -= br.y_series
        return Y

    def delta_matrix(self) -> np.ndarray:
        """Rows map node voltages to line-to-line voltages of the delta slots."""
        idx = {n: k for k, n in enumerate(self.nodes)}
        H = np.zeros((len(self.delta_slots), len(idx)))
        for r, (b, pr) in enumerate(self.delta_slots):
            H[r, idx[(b, pr[0])]] = 1.0
            H[r, idx[(b, pr[1])]] = -1.0
        return H

    def wye_matrix(self) -> np.ndarray:
        idx = {n: k for k, n in enumerate(self.nodes)}
        W = np.zeros((len(self.wye_slots), len(idx)))
        for r, slot in enumerate(self.wye_slots):
            W[r, idx[slot]] = 1.0
        return W

    def slack_mask(self) -> np.ndarray:
        return np.array([b == self.pcc for b, _ in self.nodes])

    def split_injections(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_inj,):
            raise NetworkError(f"injection vector has shape {x.shape}, expected ({self.n_inj},)")
        nw, nd = len(self.wye_slots), len(self.delta_slots)
        sY = x[:nw] + 1j * x[nw:2 * nw]
        sD = x[2 * nw:2 * nw + nd] + 1j * x[2 * nw + nd:]
        return sY, sD

    def injection_vector(self, wye: Mapping | None = None, delta: Mapping | None = None) -> np.ndarray:
        """Assemble ``x`` from ``{(bus, phase): complex}`` dictionaries."""
        wye = dict(wye or {})
        delta = dict(delta or {})
        ws, ds = self.wye_slots, self.delta_slots
        for key in wye:
            if key not in ws:
                raise NetworkError(f"wye injection on absent slot {key}")
        for key in delta:
            if key not in ds:
                raise NetworkError(f"delta injection on absent slot {key}")
        sY = np.array([complex(wye.get(s, 0.0)) for s in ws], dtype=complex)
        sD = np.array([complex(delta.get(s, 0.0)) for s in ds], dtype=complex)
        return np.concatenate([sY.real, sY.imag, sD.real, sD.imag])


@dataclass(frozen=True)
class PhasorState:
    voltages: np.ndarray  # complex per node
    currents: np.ndarray  # complex per branch-phase, from -> to
    s0: complex  # power injected into the network by the upstream grid (sum over PCC phases)
    export: complex  # power delivered by the VPP to the upstream grid
    residual: float
    iterations: int

    def magnitudes(self) -> np.ndarray:
        return np.abs(self.voltages)


def _branch_currents(net: MultiphaseNetwork, V: np.ndarray) -> np.ndarray:
    idx = {n: k for k, n in enumerate(net.nodes)}
    out = []
    for br in net.branches:
        vf = V[[idx[(br.from_bus, p)] for p in br.phases]]
        vt = V[[idx[(br.to_bus, p)] for p in br.phases]]
        out.append(br.y_series @ (vf - vt))
    return np.concatenate(out) if out else np.zeros(0, dtype=complex)


def _nodal_injection_current(net, V, sY, sD, W, H):
    I = np.zeros(len(V), dtype=complex)
    if len(sY):
        I += W.T @ np.conj(sY / (W @ V))
    if len(sD):
        I += H.T @ np.conj(sD / (H @ V))
    return I


def _pcc_local_power(net, sY, sD) -> complex:
    s = 0.0j
    for k, (b, _) in enumerate(net.wye_slots):
        if b == net.pcc:
            s += sY[k]
    for k, (b, _) in enumerate(net.delta_slots):
        if b == net.pcc:
            s += sD[k]
    return s


def solve_load_flow(
    net: MultiphaseNetwork,
    x: np.ndarray,
    tol: float = 1e-9,
    max_iter: int = 200,
    damping: float = 1.0,
) -> PhasorState:
    """Fixed-point (implicit Z-bus) load flow for injections ``x``."""
    sY, sD = net.split_injections(x)
    Y = net.ybus()
    W, H = net.wye_matrix(), net.delta_matrix()
    slack = net.slack_mask()
    L = ~slack
    V = np.zeros(len(slack), dtype=complex)
    V[slack] = net.slack_voltage
    if L.any():
        Y_LL = Y[np.ix_(L, L)]
        Z = np.linalg.inv(Y_LL)
        w = -Z @ (Y[np.ix_(L, slack)] @ V[slack])
        V[L] = w
    residual, it = 0.0, 0
    for it in range(1, max_iter + 1):
        I_inj = _nodal_injection_current(net, V, sY, sD, W, H)
        mismatch = (Y @ V - I_inj)[L]
        residual = float(np.max(np.abs(mismatch), initial=0.0))
        if residual <= tol:
            break
        V_new = w + Z @ I_inj[L]
        V[L] = (1 - damping) * V[L] + damping * V_new
    else:
        I_inj = _nodal_injection_current(net, V, sY, sD, W, H)
        residual = float(np.max(np.abs((Y @ V - I_inj)[L]), initial=0.0))
        if residual > tol:
            raise LoadFlowDivergence(max_iter, residual)
    s_node = V * np.conj(Y @ V)
    local = _pcc_local_power(net, sY, sD)
    s_slack_nodes = s_node[slack].sum()
    # node balance at the PCC: grid + local = network draw
    s0 = complex(s_slack_nodes - local)
    return PhasorState(V, _branch_currents(net, V), s0, -s0, residual, it)


@dataclass(frozen=True)
class LinearNetworkModel:
    """Affine maps from the injection vector to monitored quantities.

    ``V = K x + b`` (voltage magnitudes per node, PCC nodes included with zero
    rows), ``I = J x + d`` (signed branch currents projected on the base
    current direction), ``P = m x + g_const`` and ``Q = h x + l`` (PCC export).
    """

    labels: tuple[str, ...]
    nodes: tuple[tuple[str, str], ...]
    branch_phases: tuple[tuple[str, str], ...]
    K: np.ndarray
    b: np.ndarray
    J: np.ndarray
    d: np.ndarray
    m: np.ndarray
    g_const: float
    h: np.ndarray
    l: float
    x_base: np.ndarray
    current_direction: np.ndarray = field(repr=False, default=None)
    method: str = "jacobian"

    def eval_state(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        if x.shape != (len(self.labels),):
            raise NetworkError(f"injection vector has shape {x.shape}, expected ({len(self.labels)},)")
        return self.K @ x + self.b, self.J @ x + self.d, float(self.m @ x + self.g_const), float(self.h @ x + self.l)


def _voltage_sensitivity(net, V, sY, sD, method):
    """Complex dV_L/dx (n_L x n_inj) at the solved voltages ``V``."""
    Y = net.ybus()
    W, H = net.wye_matrix(), net.delta_matrix()
    slack = net.slack_mask()
    L = ~slack
    nL = int(L.sum())
    nw, nd = len(net.wye_slots), len(net.delta_slots)
    if nL == 0:
        return np.zeros((0, net.n_inj), dtype=complex)
    Z = np.linalg.inv(Y[np.ix_(L, L)])
    cV = np.conj(V)
    # forcing: d(conj(s)/conj(V)) for unit p and q on each slot
    F = np.zeros((len(V), net.n_inj), dtype=complex)
    if nw:
        inv = 1.0 / (W @ cV)
        F[:, :nw] = W.T * inv
        F[:, nw:2 * nw] = W.T * (-1j * inv)
    if nd:
        inv = 1.0 / (H @ cV)
        F[:, 2 * nw:2 * nw + nd] = H.T * inv
        F[:, 2 * nw + nd:] = H.T * (-1j * inv)
    rhs = Z @ F[L]
    if method == "fixed-point":
        return rhs
    if method != "jacobian":
        raise ValueError(f"unknown linearization method {method!r}")
    # implicit differentiation: dV - Z B conj(dV) = rhs
    Bm = np.zeros((len(V), len(V)), dtype=complex)
    if nw:
        alpha = -np.conj(sY) / (W @ cV) ** 2
        Bm += W.T @ np.diag(alpha) @ W
    if nd:
        beta = -np.conj(sD) / (H @ cV) ** 2
        Bm += H.T @ np.diag(beta) @ H
    M1 = Z @ Bm[np.ix_(L, L)]
    I = np.eye(nL)
    big = np.block([[I - M1.real, -M1.imag], [-M1.imag, I + M1.real]])
    sol = np.linalg.solve(big, np.vstack([rhs.real, rhs.imag]))
    return sol[:nL] + 1j * sol[nL:]


def linearize(net: MultiphaseNetwork, x_base: np.ndarray, method: str = "jacobian", **lf_opts) -> LinearNetworkModel:
    """Build the affine model, exact at ``x_base``.

    ``method="jacobian"`` differentiates the fixed-point load-flow map at the
    base solution; ``method="fixed-point"`` freezes the base voltages in the
    denominators, which makes the complex voltage model exact at both the
    zero-load and the base solutions.
    """
    x_base = np.asarray(x_base, dtype=float)
    solve_load_flow(net, np.zeros(net.n_inj), **lf_opts)  # zero-load anchor must exist
    st = solve_load_flow(net, x_base, **lf_opts)
    sY, sD = net.split_injections(x_base)
    V = st.voltages
    slack = net.slack_mask()
    L = ~slack
    dV_L = _voltage_sensitivity(net, V, sY, sD, method)
    dV = np.zeros((len(V), net.n_inj), dtype=complex)
    dV[L] = dV_L
    Vabs = np.abs(V)
    K = np.real((np.conj(V) / Vabs)[:, None] * dV)
    b = Vabs - K @ x_base

    idx = {n: k for k, n in enumerate(net.nodes)}
    dI_rows, I_base = [], []
    for br in net.branches:
        fi = [idx[(br.from_bus, p)] for p in br.phases]
        ti = [idx[(br.to_bus, p)] for p in br.phases]
        dI_rows.append(br.y_series @ (dV[fi] - dV[ti]))
        I_base.append(br.y_series @ (V[fi] - V[ti]))
    if dI_rows:
        dI = np.vstack(dI_rows)
        Ib = np.concatenate(I_base)
        mag = np.abs(Ib)
        u = np.where(mag > 1e-9, Ib / np.where(mag > 1e-9, mag, 1.0), 1.0 + 0j)
        J = np.real(np.conj(u)[:, None] * dI)
        d = np.real(np.conj(u) * Ib) - J @ x_base
    else:
        J = np.zeros((0, net.n_inj))
        d = np.zeros(0)
        u = np.zeros(0, dtype=complex)

    # export = local PCC injections - sum_{pcc nodes} V conj(Y V)
    Y = net.ybus()
    dS = -(V[slack][:, None] * np.conj(Y[slack] @ dV)).sum(axis=0)
    nw, nd = len(net.wye_slots), len(net.delta_slots)
    for k, (bus, _) in enumerate(net.wye_slots):
        if bus == net.pcc:
            dS[k] += 1.0
            dS[nw + k] += 1j
    for k, (bus, _) in enumerate(net.delta_slots):
        if bus == net.pcc:
            dS[2 * nw + k] += 1.0
            dS[2 * nw + nd + k] += 1j
    m, h = dS.real.copy(), dS.imag.copy()
    g_const = st.export.real - m @ x_base
    l = st.export.imag - h @ x_base
    return LinearNetworkModel(
        tuple(net.injection_labels()),
        tuple(net.nodes),
        tuple(net.branch_labels()),
        K,
        b,
        J,
        d,
        m,
        float(g_const),
        h,
        float(l),
        x_base.copy(),
        u,
        method,
    )


def eval_state(model: LinearNetworkModel, x: np.ndarray):
    """``(voltage magnitudes, branch currents, P_PCC, Q_PCC)`` under ``model``."""
    return model.eval_state(x)


def voltage_error(model: LinearNetworkModel, net: MultiphaseNetwork, xs) -> np.ndarray:
    """Largest relative voltage-magnitude error of the linear model per injection row."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    out = np.empty(len(xs))
    load = ~net.slack_mask()
    for k, x in enumerate(xs):
        V = solve_load_flow(net, x).magnitudes()
        Vl = model.K @ x + model.b
        out[k] = float(np.max(np.abs(Vl - V)[load] / V[load], initial=0.0))
    return out


def signed_currents(model: LinearNetworkModel, state: PhasorState) -> np.ndarray:
    """Nonlinear branch currents projected on the model's base direction."""
    return np.real(np.conj(model.current_direction) * state.currents)


def network_from_dict(data: Mapping) -> MultiphaseNetwork:
    """Build a network from the JSON case layout (impedances in p.u.)."""
    buses = []
    for b in data["buses"]:
        buses.append(
            Bus(
                str(b["id"]),
                tuple(b.get("phases", PHASES)),
                b.get("connection", "Y"),
                float(b.get("v_min", 0.95)),
                float(b.get("v_max", 1.05)),
            )
        )
    branches = []
    for br in data.get("branches", []):
        phases = tuple(br["phases"])
        zr = np.asarray(br["z_real"], dtype=float)
        zi = np.asarray(br["z_imag"], dtype=float)
        z = np.atleast_2d(zr + 1j * zi)
        branches.append(Branch.from_impedance(str(br["from"]), str(br["to"]), phases, z, br["i_max"]))
    slack = data.get("slack_voltage")
    if slack is not None:
        slack = np.asarray(slack["real"], float) + 1j * np.asarray(slack["imag"], float)
    return MultiphaseNetwork(
        tuple(buses),
        tuple(branches),
        str(data["pcc"]),
        slack,
        float(data.get("base_mva", 1.0)),
        float(data.get("base_kv", 1.0)),
    )


def line_impedance(z_self: complex, z_mutual: complex, phases: Sequence[str]) -> np.ndarray:
    """Phase impedance matrix with equal self and mutual terms."""
    k = len(phases)
    z = np.full((k, k), z_mutual, dtype=complex)
    np.fill_diagonal(z, z_self)
    return z
