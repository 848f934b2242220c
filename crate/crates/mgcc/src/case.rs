//! Microgrid problem instances: ingestion, validation, and the bus
//! admittance matrix.
//!
//! The native format is JSON (`case.json`) with everything in per-unit on
//! `s_base`. Angles are radians. Frequency quantities (`omega_set`, droop
//! gains) are per-unit on `omega_base`; `omega_base` itself is rad/s and
//! converts per-unit frequency deviations into angle rates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Dg,
    Load,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    #[serde(default)]
    pub load_p: f64,
    #[serde(default)]
    pub load_q: f64,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b_sh: f64,
    #[serde(default = "default_true")]
    pub status: bool,
}

fn default_true() -> bool {
    true
}

/// Quadratic fuel-cost coefficients (a2, a1, a0).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CostCoeffs {
    pub a2: f64,
    pub a1: f64,
    pub a0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DroopDg {
    pub bus: usize,
    /// Frequency droop gain, p.u. frequency per p.u. active power.
    pub kp: f64,
    /// Voltage droop gain, p.u. voltage per p.u. reactive power.
    pub kq: f64,
    /// Active-power measurement filter corner, rad/s.
    pub fp: f64,
    /// Reactive-power measurement filter corner, rad/s.
    pub fq: f64,
    pub p_set: f64,
    pub q_set: f64,
    pub v_set: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost: CostCoeffs,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResUnit {
    pub bus: usize,
    /// Forecast active output, per-unit.
    pub p_forecast: f64,
    /// Constant reactive/active power ratio.
    pub q_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MicrogridCase {
    pub s_base: f64,
    /// Base angular frequency, rad/s.
    pub omega_base: f64,
    /// Frequency set-point, per-unit on `omega_base`.
    pub omega_set: f64,
    /// Optional bus to use as the angle reference; the case is re-indexed
    /// on load so that this bus becomes bus 1. Defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_bus: Option<usize>,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub dgs: Vec<DroopDg>,
    pub res: Vec<ResUnit>,
}

/// Dense bus admittance decomposed into conductance `g` and susceptance `b`.
#[derive(Debug, Clone)]
pub struct AdmittanceMatrix {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseFormat {
    NativeJson,
    MatpowerM,
}

impl MicrogridCase {
    pub fn n(&self) -> usize {
        self.buses.len()
    }

    pub fn g(&self) -> usize {
        self.dgs.len()
    }

    pub fn d(&self) -> usize {
        self.n() - self.g()
    }

    /// DG bus ids in ascending order. Bus 1 (the reference) is first.
    pub fn dg_buses(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.dgs.iter().map(|d| d.bus).collect();
        v.sort_unstable();
        v
    }

    /// Non-DG bus ids in ascending order.
    pub fn load_buses(&self) -> Vec<usize> {
        let dg: HashSet<usize> = self.dgs.iter().map(|d| d.bus).collect();
        (1..=self.n()).filter(|i| !dg.contains(i)).collect()
    }

    /// RES bus ids in declaration order.
    pub fn res_buses(&self) -> Vec<usize> {
        self.res.iter().map(|r| r.bus).collect()
    }

    /// DGs sorted by bus id (the canonical ordering for `z` and outputs).
    pub fn dgs_sorted(&self) -> Vec<&DroopDg> {
        let mut v: Vec<&DroopDg> = self.dgs.iter().collect();
        v.sort_by_key(|d| d.bus);
        v
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.dgs.is_empty() {
            return Err(Error::InvalidCase("case has no DGs".into()));
        }
        if !(self.omega_base > 0.0) {
            return Err(Error::InvalidCase("omega_base must be positive".into()));
        }
        if !(self.s_base > 0.0) {
            return Err(Error::InvalidCase("s_base must be positive".into()));
        }
        let mut seen = HashSet::new();
        for b in &self.buses {
            if b.id == 0 || b.id > n {
                return Err(Error::InvalidCase(format!(
                    "bus ids must be contiguous 1..{n}, found {}",
                    b.id
                )));
            }
            if !seen.insert(b.id) {
                return Err(Error::InvalidCase(format!("duplicate bus id {}", b.id)));
            }
            if !(b.v_min < b.v_max) {
                return Err(Error::InvalidCase(format!(
                    "bus {}: v_min must be below v_max",
                    b.id
                )));
            }
            if !b.load_p.is_finite() || !b.load_q.is_finite() {
                return Err(Error::InvalidCase(format!("bus {}: non-finite load", b.id)));
            }
        }
        for (k, br) in self.branches.iter().enumerate() {
            if br.from == br.to {
                return Err(Error::InvalidCase(format!(
                    "branch {k} connects bus {} to itself",
                    br.from
                )));
            }
            for end in [br.from, br.to] {
                if end == 0 || end > n {
                    return Err(Error::InvalidCase(format!(
                        "branch {k} references nonexistent bus {end}"
                    )));
                }
            }
            if br.r < 0.0 || (br.r == 0.0 && br.x == 0.0) {
                return Err(Error::InvalidCase(format!(
                    "branch {k} ({}-{}): invalid impedance r={}, x={}",
                    br.from, br.to, br.r, br.x
                )));
            }
        }
        let mut dg_seen = HashSet::new();
        for d in &self.dgs {
            if d.bus == 0 || d.bus > n {
                return Err(Error::InvalidCase(format!(
                    "DG references nonexistent bus {}",
                    d.bus
                )));
            }
            if !dg_seen.insert(d.bus) {
                return Err(Error::InvalidCase(format!("duplicate DG at bus {}", d.bus)));
            }
            if !(d.kp > 0.0 && d.kq > 0.0 && d.fp > 0.0 && d.fq > 0.0) {
                return Err(Error::InvalidCase(format!(
                    "DG at bus {}: droop gains and filter corners must be positive",
                    d.bus
                )));
            }
            if !(d.p_min < d.p_max) || !(d.q_min < d.q_max) {
                return Err(Error::InvalidCase(format!(
                    "DG at bus {}: output limits must satisfy min < max",
                    d.bus
                )));
            }
            if d.cost.a2 < 0.0 {
                return Err(Error::InvalidCase(format!(
                    "DG at bus {}: a2 must be nonnegative",
                    d.bus
                )));
            }
            if self.buses.iter().any(|b| b.id == d.bus && b.kind != BusKind::Dg) {
                return Err(Error::InvalidCase(format!(
                    "bus {} hosts a DG but is not marked as a DG bus",
                    d.bus
                )));
            }
        }
        for r in &self.res {
            if r.bus == 0 || r.bus > n {
                return Err(Error::InvalidCase(format!(
                    "RES unit references nonexistent bus {}",
                    r.bus
                )));
            }
            if r.p_forecast < 0.0 || !r.q_ratio.is_finite() {
                return Err(Error::InvalidCase(format!(
                    "RES at bus {}: forecast must be nonnegative and q_ratio finite",
                    r.bus
                )));
            }
        }
        if !dg_seen.contains(&1) {
            return Err(Error::InvalidCase(
                "the reference bus (bus 1) must host a DG; set reference_bus to re-index".into(),
            ));
        }
        self.check_connected()?;
        Ok(())
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.n();
        let mut adj = vec![Vec::new(); n + 1];
        for br in self.branches.iter().filter(|b| b.status) {
            adj[br.from].push(br.to);
            adj[br.to].push(br.from);
        }
        let mut seen = vec![false; n + 1];
        let mut stack = vec![1usize];
        seen[1] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        match (1..=n).find(|&i| !seen[i]) {
            Some(i) => Err(Error::InvalidCase(format!(
                "network is disconnected: bus {i} unreachable from bus 1"
            ))),
            None => Ok(()),
        }
    }

    /// Scale all loads and RES forecasts by `factor`.
    pub fn scale_loads(&self, factor: f64) -> Result<MicrogridCase> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::InvalidInput(format!(
                "load scale factor must be finite and positive, got {factor}"
            )));
        }
        let mut c = self.clone();
        for b in &mut c.buses {
            b.load_p *= factor;
            b.load_q *= factor;
        }
        for r in &mut c.res {
            r.p_forecast *= factor;
        }
        Ok(c)
    }

    /// Relabel buses by the permutation `perm`, where `perm[old-1] = new`.
    pub fn permute(&self, perm: &[usize]) -> Result<MicrogridCase> {
        let n = self.n();
        if perm.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "permutation length {} for {n} buses",
                perm.len()
            )));
        }
        let mut c = self.clone();
        c.reference_bus = None;
        for b in &mut c.buses {
            b.id = perm[b.id - 1];
        }
        c.buses.sort_by_key(|b| b.id);
        for br in &mut c.branches {
            br.from = perm[br.from - 1];
            br.to = perm[br.to - 1];
        }
        for d in &mut c.dgs {
            d.bus = perm[d.bus - 1];
        }
        for r in &mut c.res {
            r.bus = perm[r.bus - 1];
        }
        Ok(c)
    }

    /// Apply `reference_bus` (if set) by swapping labels so it becomes bus 1.
    fn apply_reference(mut self) -> Result<MicrogridCase> {
        if let Some(rb) = self.reference_bus.take() {
            if rb == 0 || rb > self.n() {
                return Err(Error::InvalidCase(format!(
                    "reference_bus {rb} does not exist"
                )));
            }
            if rb != 1 {
                let mut perm: Vec<usize> = (1..=self.n()).collect();
                perm.swap(0, rb - 1);
                return self.permute(&perm);
            }
        }
        Ok(self)
    }
}

/// Load and validate a case from disk.
pub fn load_case<P: AsRef<Path>>(path: P, format: CaseFormat) -> Result<MicrogridCase> {
    let path = path.as_ref();
    let case = match format {
        CaseFormat::NativeJson => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<MicrogridCase>(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?
        }
        CaseFormat::MatpowerM => load_matpower(path)?,
    };
    let case = case.apply_reference()?;
    case.validate()?;
    Ok(case)
}

/// Write a case in the native JSON format.
pub fn write_case<P: AsRef<Path>>(case: &MicrogridCase, path: P) -> Result<()> {
    let text = serde_json::to_string_pretty(case).expect("case serializes");
    std::fs::write(path, text)?;
    Ok(())
}

/// Droop sidecar for MATPOWER import (`<case>.dgs.json` next to the `.m`
/// file). MATPOWER has no droop fields, so DGs and RES must be declared
/// separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DroopSidecar {
    pub omega_base: f64,
    pub omega_set: f64,
    #[serde(default)]
    pub reference_bus: Option<usize>,
    pub dgs: Vec<DroopDg>,
    pub res: Vec<ResUnit>,
    /// Voltage band applied to every bus (MATPOWER VMIN/VMAX are kept when
    /// present; this is the fallback).
    #[serde(default)]
    pub v_band: Option<(f64, f64)>,
}

fn load_matpower(path: &Path) -> Result<MicrogridCase> {
    let text = std::fs::read_to_string(path)?;
    let perr = |msg: String| Error::Parse {
        path: path.display().to_string(),
        msg,
    };

    let base_mva = {
        let needle = "baseMVA";
        let idx = text
            .find(needle)
            .ok_or_else(|| perr("missing baseMVA".into()))?;
        let rest = &text[idx..];
        let eq = rest.find('=').ok_or_else(|| perr("malformed baseMVA".into()))?;
        let end = rest.find(';').ok_or_else(|| perr("malformed baseMVA".into()))?;
        rest[eq + 1..end]
            .trim()
            .parse::<f64>()
            .map_err(|e| perr(format!("baseMVA: {e}")))?
    };

    let bus_rows = matpower_table(&text, "bus").ok_or_else(|| perr("missing bus table".into()))?;
    let branch_rows =
        matpower_table(&text, "branch").ok_or_else(|| perr("missing branch table".into()))?;

    let sidecar_path = path.with_extension("dgs.json");
    if !sidecar_path.exists() {
        return Err(perr(format!(
            "matpower import requires droop sidecar {}",
            sidecar_path.display()
        )));
    }
    let sidecar: DroopSidecar = serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)
        .map_err(|e| Error::Parse {
            path: sidecar_path.display().to_string(),
            msg: e.to_string(),
        })?;

    let dg_buses: HashSet<usize> = sidecar.dgs.iter().map(|d| d.bus).collect();
    let (vmin_def, vmax_def) = sidecar.v_band.unwrap_or((0.9, 1.1));

    let mut buses = Vec::new();
    for row in &bus_rows {
        if row.len() < 4 {
            return Err(perr("bus row too short".into()));
        }
        let id = row[0] as usize;
        // MATPOWER columns: BUS_I TYPE PD QD GS BS AREA VM VA BASEKV ZONE VMAX VMIN
        let (vmax, vmin) = if row.len() >= 13 && row[11] > 0.0 && row[12] > 0.0 {
            (row[11], row[12])
        } else {
            (vmax_def, vmin_def)
        };
        buses.push(Bus {
            id,
            kind: if dg_buses.contains(&id) {
                BusKind::Dg
            } else {
                BusKind::Load
            },
            load_p: row[2] / base_mva,
            load_q: row[3] / base_mva,
            v_min: vmin,
            v_max: vmax,
        });
    }
    buses.sort_by_key(|b| b.id);

    let mut branches = Vec::new();
    for row in &branch_rows {
        if row.len() < 5 {
            return Err(perr("branch row too short".into()));
        }
        branches.push(Branch {
            from: row[0] as usize,
            to: row[1] as usize,
            r: row[2],
            x: row[3],
            b_sh: row[4],
            status: if row.len() >= 11 { row[10] != 0.0 } else { true },
        });
    }

    Ok(MicrogridCase {
        s_base: base_mva,
        omega_base: sidecar.omega_base,
        omega_set: sidecar.omega_set,
        reference_bus: sidecar.reference_bus,
        buses,
        branches,
        dgs: sidecar.dgs,
        res: sidecar.res,
    })
}

/// Extract the numeric rows of `mpc.<name> = [ ... ];`.
fn matpower_table(text: &str, name: &str) -> Option<Vec<Vec<f64>>> {
    let needle = format!("mpc.{name}");
    let mut idx = 0;
    let start = loop {
        let found = text[idx..].find(&needle)? + idx;
        let after = &text[found + needle.len()..];
        // skip e.g. mpc.bus_name when looking for mpc.bus
        if after.starts_with(char::is_alphanumeric) || after.starts_with('_') {
            idx = found + needle.len();
            continue;
        }
        break found;
    };
    let open = text[start..].find('[')? + start;
    let close = text[open..].find(']')? + open;
    let body = &text[open + 1..close];
    let mut rows = Vec::new();
    for line in body.split(';') {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        // strip trailing comments
        let line = line.split('%').next().unwrap_or("");
        let vals: Vec<f64> = line
            .split_whitespace()
            .filter_map(|t| t.parse::<f64>().ok())
            .collect();
        if !vals.is_empty() {
            rows.push(vals);
        }
    }
    Some(rows)
}

/// Standard bus-admittance construction; out-of-service branches excluded.
pub fn build_admittance(case: &MicrogridCase) -> AdmittanceMatrix {
    let n = case.n();
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for br in case.branches.iter().filter(|b| b.status) {
        let (f, t) = (br.from - 1, br.to - 1);
        let den = br.r * br.r + br.x * br.x;
        let y_re = br.r / den;
        let y_im = -br.x / den;
        g[(f, f)] += y_re;
        g[(t, t)] += y_re;
        b[(f, f)] += y_im + br.b_sh / 2.0;
        b[(t, t)] += y_im + br.b_sh / 2.0;
        g[(f, t)] -= y_re;
        g[(t, f)] -= y_re;
        b[(f, t)] -= y_im;
        b[(t, f)] -= y_im;
    }
    AdmittanceMatrix { g, b }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::two_bus_case;
    use approx::assert_abs_diff_eq;

    #[test]
    fn minimal_two_bus_is_valid() {
        let c = two_bus_case();
        c.validate().unwrap();
        assert_eq!(c.n(), 2);
        assert_eq!(c.g(), 1);
        assert_eq!(c.d(), 1);
    }

    #[test]
    fn branch_to_nonexistent_bus_is_rejected() {
        let mut c = two_bus_case();
        c.branches.push(Branch {
            from: 2,
            to: 99,
            r: 0.01,
            x: 0.01,
            b_sh: 0.0,
            status: true,
        });
        let err = c.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("99") && msg.contains("branch"), "{msg}");
    }

    #[test]
    fn disconnected_network_is_rejected() {
        let mut c = two_bus_case();
        c.branches[0].status = false;
        assert!(c.validate().is_err());
    }

    #[test]
    fn admittance_single_reactive_branch() {
        let mut c = two_bus_case();
        c.branches[0].r = 0.0;
        c.branches[0].x = 0.1;
        let y = build_admittance(&c);
        assert_abs_diff_eq!(y.b[(0, 1)], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.b[(0, 0)], -10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.g[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn out_of_service_branch_contributes_nothing() {
        let mut c = two_bus_case();
        c.branches[0].status = false;
        let y = build_admittance(&c);
        assert_eq!(y.b[(0, 1)], 0.0);
        assert_eq!(y.g[(0, 0)], 0.0);
    }

    #[test]
    fn scale_loads_identity_and_composition() {
        let c = two_bus_case();
        let same = c.scale_loads(1.0).unwrap();
        assert_eq!(c, same);
        let a = c.scale_loads(0.2).unwrap().scale_loads(3.0).unwrap();
        let b = c.scale_loads(0.6).unwrap();
        for (x, y) in a.buses.iter().zip(&b.buses) {
            assert_abs_diff_eq!(x.load_p, y.load_p, epsilon = 1e-15);
            assert_abs_diff_eq!(x.load_q, y.load_q, epsilon = 1e-15);
        }
        assert!(c.scale_loads(0.0).is_err());
        assert!(c.scale_loads(-1.0).is_err());
    }

    #[test]
    fn native_round_trip() {
        let c = two_bus_case();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("case.json");
        write_case(&c, &p).unwrap();
        let back = load_case(&p, CaseFormat::NativeJson).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn admittance_is_permutation_equivariant() {
        // 4-bus ring with distinct impedances
        let mut c = two_bus_case();
        c.buses = vec![
            Bus { id: 1, kind: BusKind::Dg, load_p: 0.0, load_q: 0.0, v_min: 0.9, v_max: 1.1 },
            Bus { id: 2, kind: BusKind::Load, load_p: 0.1, load_q: 0.0, v_min: 0.9, v_max: 1.1 },
            Bus { id: 3, kind: BusKind::Load, load_p: 0.2, load_q: 0.1, v_min: 0.9, v_max: 1.1 },
            Bus { id: 4, kind: BusKind::Load, load_p: 0.05, load_q: 0.0, v_min: 0.9, v_max: 1.1 },
        ];
        c.branches = vec![
            Branch { from: 1, to: 2, r: 0.01, x: 0.05, b_sh: 0.02, status: true },
            Branch { from: 2, to: 3, r: 0.02, x: 0.08, b_sh: 0.0, status: true },
            Branch { from: 3, to: 4, r: 0.015, x: 0.06, b_sh: 0.01, status: true },
            Branch { from: 4, to: 1, r: 0.03, x: 0.09, b_sh: 0.0, status: true },
        ];
        let perm = vec![1usize, 3, 4, 2]; // old -> new labels, reference kept
        let cp = c.permute(&perm).unwrap();
        let y = build_admittance(&c);
        let yp = build_admittance(&cp);
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(y.g[(i, j)], yp.g[(perm[i] - 1, perm[j] - 1)], epsilon = 1e-15);
                assert_abs_diff_eq!(y.b[(i, j)], yp.b[(perm[i] - 1, perm[j] - 1)], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn admittance_matches_independent_builder() {
        let mut c = two_bus_case();
        c.buses.push(Bus { id: 3, kind: BusKind::Load, load_p: 0.05, load_q: 0.02, v_min: 0.9, v_max: 1.1 });
        c.branches.push(Branch { from: 2, to: 3, r: 0.05, x: 0.2, b_sh: 0.04, status: true });
        let y = build_admittance(&c);
        // independent oracle: complex accumulation per branch
        let n = c.n();
        let mut yc = vec![vec![(0.0f64, 0.0f64); n]; n];
        for br in &c.branches {
            if !br.status {
                continue;
            }
            let d = br.r * br.r + br.x * br.x;
            let y_br = (br.r / d, -br.x / d);
            let sh = (0.0, br.b_sh / 2.0);
            let (f, t) = (br.from - 1, br.to - 1);
            yc[f][f] = (yc[f][f].0 + y_br.0 + sh.0, yc[f][f].1 + y_br.1 + sh.1);
            yc[t][t] = (yc[t][t].0 + y_br.0 + sh.0, yc[t][t].1 + y_br.1 + sh.1);
            yc[f][t] = (yc[f][t].0 - y_br.0, yc[f][t].1 - y_br.1);
            yc[t][f] = (yc[t][f].0 - y_br.0, yc[t][f].1 - y_br.1);
        }
        for i in 0..n {
            for j in 0..n {
                assert_abs_diff_eq!(y.g[(i, j)], yc[i][j].0, epsilon = 1e-12);
                assert_abs_diff_eq!(y.b[(i, j)], yc[i][j].1, epsilon = 1e-12);
            }
        }
    }
}
