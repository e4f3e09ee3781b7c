"""Regenerate the bundled cases under src/vppflex/data (deterministic)."""

import csv
import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "vppflex" / "data"
FMT = {"format_version": 1}


def zmat(z_self, z_mut, k):
    z = np.full((k, k), z_mut, dtype=complex)
    np.fill_diagonal(z, z_self)
    return {"z_real": z.real.tolist(), "z_imag": z.imag.tolist()}


def dump(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({**FMT, **obj}, indent=1) + "\n")


def history(path, labels, periods, draw, n, seed):
    rng = np.random.default_rng(seed)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["period", *labels])
        for t in range(periods):
            for row in draw(rng, t, n):
                w.writerow([t, *(f"{v:.8f}" for v in row)])


def mixture_draw(pv_fc, load_p, pv_rho=0.8, load_rho=0.3, load_sd=0.06, sep=0.035):
    """Two-regime renewable error (skewed) plus Gaussian load error."""
    n_pv, n_ld = pv_fc.shape[0], load_p.shape[0]

    def draw(rng, t, n):
        fc, ld = pv_fc[:, t], load_p[:, t]
        C_pv = pv_rho + (1 - pv_rho) * np.eye(n_pv) if n_pv else np.zeros((0, 0))
        C_ld = load_rho + (1 - load_rho) * np.eye(n_ld)
        regime = rng.random(n) < 0.7
        z_pv = rng.multivariate_normal(np.zeros(n_pv), C_pv, n) if n_pv else np.zeros((n, 0))
        pv = np.where(regime[:, None], 0.3 * sep + 0.05 * fc * z_pv, -0.7 * sep + 0.08 * fc * z_pv)
        lde = load_sd * ld * rng.multivariate_normal(np.zeros(n_ld), C_ld, n)
        return np.hstack([pv, lde])

    return draw


def desk4():
    root = OUT / "desk4"
    T = 6
    dump(root / "network.json", {
        "base_mva": 1.0, "base_kv": 11.0, "pcc": "0",
        "buses": [
            {"id": "0", "phases": "abc"},
            {"id": "1", "phases": "abc", "v_min": 0.98, "v_max": 1.01},
            {"id": "2", "phases": "abc", "v_min": 0.98, "v_max": 1.01},
            {"id": "3", "phases": "ab", "v_min": 0.98, "v_max": 1.01},
        ],
        "branches": [
            {"from": "0", "to": "1", "phases": "abc", **zmat(0.03 + 0.06j, 0.01 + 0.02j, 3), "i_max": 0.25},
            {"from": "1", "to": "2", "phases": "abc", **zmat(0.05 + 0.05j, 0.012 + 0.015j, 3), "i_max": 0.42},
            {"from": "1", "to": "3", "phases": "ab", **zmat(0.05 + 0.05j, 0.01 + 0.01j, 2), "i_max": 0.3},
        ],
    })
    dump(root / "fleet.json", {"units": [
        {"name": "CHP1", "kind": "CHP", "bus": "1", "phases": ["a", "b", "c"],
         "chart": {"type": "chp", "s_max": 0.2, "p_min": 0.03, "p_max": 0.18, "q_min": -0.08, "q_max": 0.15},
         "ramp": 0.15, "p0": 0.3, "equal_share": True, "cost": {"a": 3.0, "b": 2.0, "c": 0.05}},
        {"name": "PV1", "kind": "PV", "bus": "2", "phases": ["a", "b", "c"],
         "chart": {"type": "inverter", "s_max": 0.2}},
        {"name": "ESS1", "kind": "ESS", "bus": "3", "phases": ["a", "b"],
         "chart": {"type": "box", "p_min": -0.08, "p_max": 0.08, "q_min": -0.05, "q_max": 0.05},
         "ess": {"alpha": 0.995, "e_min": 0.01, "e_max": 0.08, "e0": 0.04},
         "cost": {"k_ch": 0.3, "k_dis": 0.5}},
    ]})
    shape = np.array([0.9, 1.0, 1.1, 1.15, 1.05, 0.95])
    loads = [("1", "a", 0.10), ("1", "b", 0.12), ("1", "c", 0.08),
             ("2", "a", 0.08), ("2", "b", 0.06), ("2", "c", 0.10),
             ("3", "a", 0.07), ("3", "b", 0.09)]
    pv_shape = np.array([0.10, 0.13, 0.16, 0.17, 0.15, 0.12])
    pv = {"a": pv_shape, "b": 0.95 * pv_shape, "c": 1.05 * pv_shape}
    dump(root / "profiles.json", {
        "dt": 0.25,
        "loads": [{"bus": b, "phase": p, "p": np.round(v * shape, 6).tolist(), "phi": 0.25} for b, p, v in loads],
        "forecasts": {"PV1": {ph: np.round(s, 6).tolist() for ph, s in pv.items()}},
    })
    labels = [f"PV:PV1.{p}" for p in "abc"] + [f"load:{b}.{p}" for b, p, _ in loads]
    pv_fc = np.array([np.round(pv[p], 6) for p in "abc"])
    load_p = np.array([np.round(v * shape, 6) for _, _, v in loads])
    history(root / "history.csv", labels, T, mixture_draw(pv_fc, load_p), 1500, 404)
    dump(root / "case.json", {
        "name": "desk4", "network": "network.json", "fleet": "fleet.json",
        "profiles": "profiles.json", "history": "history.csv",
        "config": {"horizon": T, "gamma": 0.8, "period": 2, "seed": 0},
    })


def bus2():
    root = OUT / "bus2"
    T = 2
    dump(root / "network.json", {
        "base_mva": 1.0, "base_kv": 0.4, "pcc": "0",
        "buses": [
            {"id": "0", "phases": "abc"},
            {"id": "1", "phases": "abc", "connection": "D", "v_min": 0.94, "v_max": 1.06},
        ],
        "branches": [
            {"from": "0", "to": "1", "phases": "abc", **zmat(0.02 + 0.04j, 0.005 + 0.01j, 3), "i_max": 0.5},
        ],
    })
    dump(root / "fleet.json", {"units": [
        {"name": "PV1", "kind": "PV", "bus": "1", "phases": ["ab", "bc", "ca"],
         "chart": {"type": "inverter", "s_max": 0.15}},
    ]})
    loads = [("1", "ab", 0.08), ("1", "bc", 0.1), ("1", "ca", 0.06)]
    shape = np.array([1.0, 1.2])
    fc = np.array([0.1, 0.12])
    dump(root / "profiles.json", {
        "dt": 1.0,
        "loads": [{"bus": b, "phase": p, "p": np.round(v * shape, 6).tolist(), "phi": 0.3} for b, p, v in loads],
        "forecasts": {"PV1": {p: fc.tolist() for p in ("ab", "bc", "ca")}},
    })
    labels = [f"PV:PV1.{p}" for p in ("ab", "bc", "ca")] + [f"load:{b}.{p}" for b, p, _ in loads]
    draw = mixture_draw(np.tile(fc, (3, 1)), np.array([v * shape for _, _, v in loads]))
    history(root / "history.csv", labels, T, draw, 1000, 202)
    dump(root / "case.json", {
        "name": "bus2", "network": "network.json", "fleet": "fleet.json",
        "profiles": "profiles.json", "history": "history.csv", "config": {"horizon": T},
    })


def bus1():
    root = OUT / "bus1"
    T = 2
    dump(root / "network.json", {"base_mva": 1.0, "base_kv": 0.4, "pcc": "0",
                                 "buses": [{"id": "0", "phases": "abc"}], "branches": []})
    dump(root / "fleet.json", {"units": [
        {"name": "CHP1", "kind": "CHP", "bus": "0", "phases": ["a", "b", "c"],
         "chart": {"type": "chp", "s_max": 0.1, "p_min": 0.02, "p_max": 0.09, "q_min": -0.05, "q_max": 0.06},
         "ramp": 0.1, "p0": 0.15, "cost": {"a": 2.0, "b": 1.5, "c": 0.02}},
        {"name": "PV1", "kind": "PV", "bus": "0", "phases": ["a", "b", "c"],
         "chart": {"type": "inverter", "s_max": 0.12}},
    ]})
    loads = [("0", p, v) for p, v in zip("abc", (0.05, 0.06, 0.04))]
    shape = np.array([1.0, 1.1])
    fc = np.array([0.09, 0.1])
    dump(root / "profiles.json", {
        "dt": 1.0,
        "loads": [{"bus": b, "phase": p, "p": np.round(v * shape, 6).tolist(), "phi": 0.2} for b, p, v in loads],
        "forecasts": {"PV1": {p: fc.tolist() for p in "abc"}},
    })
    labels = [f"PV:PV1.{p}" for p in "abc"] + [f"load:0.{p}" for p in "abc"]
    draw = mixture_draw(np.tile(fc, (3, 1)), np.array([v * shape for _, _, v in loads]))
    history(root / "history.csv", labels, T, draw, 1000, 101)
    dump(root / "case.json", {
        "name": "bus1", "network": "network.json", "fleet": "fleet.json",
        "profiles": "profiles.json", "history": "history.csv", "config": {"horizon": T},
    })


if __name__ == "__main__":
    desk4()
    bus2()
    bus1()
