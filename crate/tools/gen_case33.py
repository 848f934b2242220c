#!/usr/bin/env python3
"""Generate the 33-bus radial feeder dataset under data/.

Outputs:
  data/case33.json     native case (full loads; scale at solve time)
  data/case33.m        same network in MATPOWER format
  data/case33.dgs.json droop sidecar for the .m file
  data/errors33.csv    wind forecast-error draws for GMM fitting

Network data is the standard 12.66 kV radial test feeder (32 branches,
3715 kW / 2300 kvar total load). Impedances are converted to per-unit on
10 MVA. Droop DGs sit at buses 1, 7, 11, 14, 21, 23, 32 and wind units at
buses 5, 16, 22, 25, 28.

Forecast errors are drawn per-unit-of-forecast from a correlated bimodal
mixture, clipped to +/-5% of the forecast, at the 20%-load operating
point the solver is intended to run at.
"""

import json
import pathlib

import numpy as np

HERE = pathlib.Path(__file__).resolve().parent
DATA = HERE.parent / "data"
DATA.mkdir(exist_ok=True)

BASE_MVA = 10.0
V_BASE_KV = 12.66
Z_BASE = V_BASE_KV**2 / BASE_MVA

# from-bus, to-bus, R (ohm), X (ohm)
BRANCHES = [
    (1, 2, 0.0922, 0.0470), (2, 3, 0.4930, 0.2511), (3, 4, 0.3660, 0.1864),
    (4, 5, 0.3811, 0.1941), (5, 6, 0.8190, 0.7070), (6, 7, 0.1872, 0.6188),
    (7, 8, 0.7114, 0.2351), (8, 9, 1.0300, 0.7400), (9, 10, 1.0440, 0.7400),
    (10, 11, 0.1966, 0.0650), (11, 12, 0.3744, 0.1238), (12, 13, 1.4680, 1.1550),
    (13, 14, 0.5416, 0.7129), (14, 15, 0.5910, 0.5260), (15, 16, 0.7463, 0.5450),
    (16, 17, 1.2890, 1.7210), (17, 18, 0.7320, 0.5740), (2, 19, 0.1640, 0.1565),
    (19, 20, 1.5042, 1.3554), (20, 21, 0.4095, 0.4784), (21, 22, 0.7089, 0.9373),
    (3, 23, 0.4512, 0.3083), (23, 24, 0.8980, 0.7091), (24, 25, 0.8960, 0.7011),
    (6, 26, 0.2030, 0.1034), (26, 27, 0.2842, 0.1447), (27, 28, 1.0590, 0.9337),
    (28, 29, 0.8042, 0.7006), (29, 30, 0.5075, 0.2585), (30, 31, 0.9744, 0.9630),
    (31, 32, 0.3105, 0.3619), (32, 33, 0.3410, 0.5302),
]

# bus 2..33: P (kW), Q (kvar)
LOADS = [
    (100, 60), (90, 40), (120, 80), (60, 30), (60, 20), (200, 100),
    (200, 100), (60, 20), (60, 20), (45, 30), (60, 35), (60, 35),
    (120, 80), (60, 10), (60, 20), (60, 20), (90, 40), (90, 40),
    (90, 40), (90, 40), (90, 40), (90, 50), (420, 200), (420, 200),
    (60, 25), (60, 25), (60, 20), (120, 70), (200, 600), (150, 70),
    (210, 100), (60, 40),
]

DG_BUSES = [1, 7, 11, 14, 21, 23, 32]
WT_BUSES = [5, 16, 22, 25, 28]

WT_FORECAST = 0.04  # p.u. per unit at full load; scales with load factor
WT_Q_RATIO = 0.2
LOAD_SCALE = 0.2  # the operating point the errors are drawn at

# quadratic fuel costs, varied so the dispatch is not symmetric
DG_COSTS = [
    (120.0, 18.0), (80.0, 25.0), (150.0, 14.0), (95.0, 22.0),
    (110.0, 20.0), (70.0, 28.0), (135.0, 16.0),
]


# droop slopes in field units, converted to per-unit below
KP_HZ_PER_MW = 1.3
KQ_V_PER_MVAR = 7.8
F_HZ = 60.0
KP_PU = KP_HZ_PER_MW * BASE_MVA / F_HZ
KQ_PU = KQ_V_PER_MVAR * BASE_MVA / (V_BASE_KV * 1000.0)


def dg_entry(bus, a2, a1):
    return {
        "bus": bus,
        "kp": KP_PU,
        "kq": KQ_PU,
        "fp": 20.0,
        "fq": 20.0,
        "p_set": 0.005,
        "q_set": 0.0055,
        "v_set": 1.0,
        "p_min": 0.0,
        "p_max": 0.08,
        "q_min": -0.05,
        "q_max": 0.05,
        "cost": {"a2": a2, "a1": a1, "a0": 0.0},
    }


def build_case():
    buses = []
    for i in range(1, 34):
        if i == 1:
            p, q = 0.0, 0.0
        else:
            p, q = LOADS[i - 2]
        buses.append({
            "id": i,
            "kind": "dg" if i in DG_BUSES else "load",
            "load_p": p / 1000.0 / BASE_MVA,
            "load_q": q / 1000.0 / BASE_MVA,
            "v_min": 0.9,
            "v_max": 1.1,
        })
    branches = [
        {"from": f, "to": t, "r": r / Z_BASE, "x": x / Z_BASE, "b_sh": 0.0, "status": True}
        for f, t, r, x in BRANCHES
    ]
    dgs = [dg_entry(b, a2, a1) for b, (a2, a1) in zip(DG_BUSES, DG_COSTS)]
    res = [{"bus": b, "p_forecast": WT_FORECAST, "q_ratio": WT_Q_RATIO} for b in WT_BUSES]
    return {
        "s_base": BASE_MVA,
        "omega_base": 120.0 * np.pi,
        "omega_set": 1.0,
        "buses": buses,
        "branches": branches,
        "dgs": dgs,
        "res": res,
    }


def write_matpower(case):
    lines = [
        "function mpc = case33",
        "mpc.version = '2';",
        f"mpc.baseMVA = {BASE_MVA};",
        "",
        "%% bus data",
        "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin",
        "mpc.bus = [",
    ]
    for b in case["buses"]:
        pd = b["load_p"] * BASE_MVA
        qd = b["load_q"] * BASE_MVA
        btype = 3 if b["id"] == 1 else 1
        lines.append(
            f"\t{b['id']}\t{btype}\t{pd:.4f}\t{qd:.4f}\t0\t0\t1\t1\t0\t{V_BASE_KV}\t1\t1.1\t0.9;"
        )
    lines += ["];", "", "%% branch data",
              "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus",
              "mpc.branch = ["]
    for br in case["branches"]:
        lines.append(
            f"\t{br['from']}\t{br['to']}\t{br['r']:.6f}\t{br['x']:.6f}\t0\t0\t0\t0\t0\t0\t1;"
        )
    lines += ["];", ""]
    (DATA / "case33.m").write_text("\n".join(lines))

    sidecar = {
        "omega_base": case["omega_base"],
        "omega_set": case["omega_set"],
        "dgs": case["dgs"],
        "res": case["res"],
        "v_band": [0.9, 1.1],
    }
    (DATA / "case33.dgs.json").write_text(json.dumps(sidecar, indent=2) + "\n")


def write_errors(seed=20260823, n=3000):
    rng = np.random.default_rng(seed)
    forecast = WT_FORECAST * LOAD_SCALE
    k = len(WT_BUSES)
    # shared regime flag makes the units correlated; per-unit ratios are
    # bimodal around +/-2.5% with sub-1.5% spread, clipped at 5%
    mode = np.where(rng.random(n) < 0.55, 1.0, -1.0)
    common = rng.normal(size=n)
    local = rng.normal(size=(n, k))
    ratio = mode[:, None] * 0.025 + 0.012 * (0.6 * common[:, None] + 0.8 * local)
    ratio = np.clip(ratio, -0.05, 0.05)
    eps = ratio * forecast
    header = ",".join(f"wt{b}" for b in WT_BUSES)
    body = "\n".join(",".join(f"{v:.10e}" for v in row) for row in eps)
    (DATA / "errors33.csv").write_text(header + "\n" + body + "\n")


def write_solve_config():
    cfg = {
        "eta_bar": -0.15,
        "beta": 0.01,
        "beta_eta": 0.05,
        "trust_pq": 0.02,
        "trust_v": 0.0001,
        "cost_tol": 1e-6,
        "max_iter": 60,
        "load_scale": LOAD_SCALE,
    }
    (DATA / "solve33.json").write_text(json.dumps(cfg, indent=2) + "\n")


def main():
    case = build_case()
    (DATA / "case33.json").write_text(json.dumps(case, indent=2) + "\n")
    write_matpower(case)
    write_errors()
    write_solve_config()
    total_p = sum(b["load_p"] for b in case["buses"]) * BASE_MVA * 1000
    total_q = sum(b["load_q"] for b in case["buses"]) * BASE_MVA * 1000
    print(f"total load {total_p:.0f} kW / {total_q:.0f} kvar")


if __name__ == "__main__":
    main()
