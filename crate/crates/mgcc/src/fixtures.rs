//! Small built-in test systems, shared by unit tests, integration tests,
//! and examples.

use crate::case::{Branch, Bus, BusKind, CostCoeffs, DroopDg, MicrogridCase, ResUnit};

fn bus(id: usize, kind: BusKind, load_p: f64, load_q: f64) -> Bus {
    Bus {
        id,
        kind,
        load_p,
        load_q,
        v_min: 0.9,
        v_max: 1.1,
    }
}

fn dg(bus: usize, p_set: f64, q_set: f64, a2: f64, a1: f64) -> DroopDg {
    DroopDg {
        bus,
        kp: 1.3,
        kq: 7.8,
        fp: 20.0,
        fq: 20.0,
        p_set,
        q_set,
        v_set: 1.0,
        p_min: -1.0,
        p_max: 1.0,
        q_min: -1.0,
        q_max: 1.0,
        cost: CostCoeffs { a2, a1, a0: 0.0 },
    }
}

/// One droop DG, no network, no load: the no-flow fixed point.
pub fn single_dg_case() -> MicrogridCase {
    MicrogridCase {
        s_base: 1.0,
        omega_base: 120.0 * std::f64::consts::PI,
        omega_set: 1.0,
        reference_bus: None,
        buses: vec![bus(1, BusKind::Dg, 0.0, 0.0), bus(2, BusKind::Load, 0.0, 0.0)],
        branches: vec![Branch {
            from: 1,
            to: 2,
            r: 0.01,
            x: 0.05,
            b_sh: 0.0,
            status: true,
        }],
        dgs: vec![dg(1, 0.0, 0.0, 10.0, 1.0)],
        res: vec![],
    }
}

/// One DG feeding a single load bus over one line.
pub fn two_bus_case() -> MicrogridCase {
    MicrogridCase {
        s_base: 1.0,
        omega_base: 120.0 * std::f64::consts::PI,
        omega_set: 1.0,
        reference_bus: None,
        buses: vec![bus(1, BusKind::Dg, 0.0, 0.0), bus(2, BusKind::Load, 0.1, 0.05)],
        branches: vec![Branch {
            from: 1,
            to: 2,
            r: 0.02,
            x: 0.1,
            b_sh: 0.0,
            status: true,
        }],
        dgs: vec![dg(1, 0.1, 0.05, 10.0, 1.0)],
        res: vec![],
    }
}

/// Two DGs, two load buses, one RES unit; small enough for brute-force
/// oracles but with every term of the model active.
pub fn five_bus_case() -> MicrogridCase {
    MicrogridCase {
        s_base: 1.0,
        omega_base: 120.0 * std::f64::consts::PI,
        omega_set: 1.0,
        reference_bus: None,
        buses: vec![
            bus(1, BusKind::Dg, 0.0, 0.0),
            bus(2, BusKind::Load, 0.08, 0.03),
            bus(3, BusKind::Dg, 0.02, 0.01),
            bus(4, BusKind::Load, 0.06, 0.02),
            bus(5, BusKind::Load, 0.04, 0.015),
        ],
        branches: vec![
            Branch { from: 1, to: 2, r: 0.02, x: 0.08, b_sh: 0.0, status: true },
            Branch { from: 2, to: 3, r: 0.03, x: 0.1, b_sh: 0.0, status: true },
            Branch { from: 3, to: 4, r: 0.025, x: 0.09, b_sh: 0.0, status: true },
            Branch { from: 2, to: 5, r: 0.04, x: 0.12, b_sh: 0.0, status: true },
        ],
        dgs: vec![dg(1, 0.1, 0.04, 15.0, 1.2), dg(3, 0.08, 0.03, 25.0, 0.8)],
        res: vec![ResUnit {
            bus: 5,
            p_forecast: 0.02,
            q_ratio: 0.2,
        }],
    }
}

/// Lossless variant of the five-bus system (all branch resistances zero).
pub fn five_bus_lossless_case() -> MicrogridCase {
    let mut c = five_bus_case();
    for br in &mut c.branches {
        br.r = 0.0;
    }
    c
}
