//! Gaussian-mixture modelling of renewable forecast errors: EM fitting of
//! historical error samples, exact linear projection onto scalar mixtures,
//! and deterministic sampling.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::{Error, Result};

const WEIGHT_PRUNE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GmmOptions {
    pub n_components: usize,
    pub max_iter: usize,
    /// Stop when the mean log-likelihood improves by less than this.
    pub tol: f64,
    pub seed: u64,
    /// Lower bound added to covariance diagonals.
    pub cov_floor: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            n_components: 10,
            max_iter: 500,
            tol: 1e-9,
            seed: 0,
            cov_floor: 1e-9,
        }
    }
}

/// Multivariate Gaussian mixture over the joint forecast-error vector.
#[derive(Debug, Clone)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

#[derive(Serialize, Deserialize)]
struct GmmJson {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
    log_likelihood: f64,
}

impl GmmModel {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Mean vector of the mixture.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m += *w * mu;
        }
        m
    }

    /// Covariance of the mixture.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let d = self.dim();
        let mut c = DMatrix::zeros(d, d);
        for ((w, mu), sig) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            let dm = mu - &m;
            c += *w * (sig + &dm * dm.transpose());
        }
        c
    }

    /// Exact law of aᵀε: same weights, projected means and variances.
    pub fn project(&self, a: &DVector<f64>) -> Result<ScalarMixture> {
        if a.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "projection vector has {} entries, mixture dimension is {}",
                a.len(),
                self.dim()
            )));
        }
        let means = self.means.iter().map(|mu| a.dot(mu)).collect();
        let variances = self
            .covariances
            .iter()
            .map(|sig| (a.transpose() * sig * a)[(0, 0)].max(1e-18))
            .collect();
        Ok(ScalarMixture {
            weights: self.weights.clone(),
            means,
            variances,
        })
    }

    /// Deterministic sampling: component choice and Gaussian draw both come
    /// from the seeded stream.
    pub fn sample(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with(&self, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let d = self.dim();
        let chols: Vec<DMatrix<f64>> = self
            .covariances
            .iter()
            .map(|sig| {
                Cholesky::new(sig.clone())
                    .unwrap_or_else(|| {
                        Cholesky::new(sig + DMatrix::identity(d, d) * 1e-12).unwrap()
                    })
                    .l()
            })
            .collect();
        let pick = WeightedIndex::new(&self.weights).unwrap();
        let mut out = DMatrix::zeros(n, d);
        for i in 0..n {
            let k = pick.sample(rng);
            let z = DVector::from_fn(d, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let x = &self.means[k] + &chols[k] * z;
            out.row_mut(i).copy_from(&x.transpose());
        }
        out
    }

    pub fn to_json(&self) -> String {
        let j = GmmJson {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: self
                .covariances
                .iter()
                .map(|c| {
                    (0..c.nrows())
                        .map(|r| c.row(r).iter().copied().collect())
                        .collect()
                })
                .collect(),
            log_likelihood: self.log_likelihood,
        };
        serde_json::to_string_pretty(&j).expect("gmm serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: GmmJson = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<gmm json>".into(),
            msg: e.to_string(),
        })?;
        let means: Vec<DVector<f64>> = j.means.iter().map(|m| DVector::from_vec(m.clone())).collect();
        let covariances = j
            .covariances
            .iter()
            .map(|c| {
                let r = c.len();
                DMatrix::from_fn(r, r, |i, k| c[i][k])
            })
            .collect();
        Ok(GmmModel {
            weights: j.weights,
            means,
            covariances,
            log_likelihood: j.log_likelihood,
        })
    }
}

/// One-dimensional Gaussian mixture: the law of any linear functional of
/// the joint error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalarMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl ScalarMixture {
    pub fn normal(mean: f64, variance: f64) -> Self {
        ScalarMixture {
            weights: vec![1.0],
            means: vec![mean],
            variances: vec![variance],
        }
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w * m)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, mu), v)| w * (v + mu * mu))
            .sum::<f64>()
            - m * m
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.components()
            .map(|(w, n)| w * n.pdf(x))
            .sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components()
            .map(|(w, n)| w * n.cdf(x))
            .sum()
    }

    /// Quantile by bisection; the cdf is strictly increasing so the root
    /// is unique.
    pub fn inverse_cdf(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) || p == 0.0 || p == 1.0 {
            return Err(Error::InvalidInput(format!(
                "quantile level {p} outside (0, 1)"
            )));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (m, v) in self.means.iter().zip(&self.variances) {
            let s = v.sqrt();
            lo = lo.min(m - 12.0 * s - 1e-12);
            hi = hi.max(m + 12.0 * s + 1e-12);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-10 * (1.0 + mid.abs()) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pick = WeightedIndex::new(&self.weights).unwrap();
        (0..n)
            .map(|_| {
                let k = pick.sample(&mut rng);
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                self.means[k] + self.variances[k].sqrt() * z
            })
            .collect()
    }

    fn components(&self) -> impl Iterator<Item = (f64, Normal)> + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((&w, &m), &v)| (w, Normal::new(m, v.sqrt().max(1e-12)).unwrap()))
    }
}

/// Read an error-sample matrix from CSV: one row per historical sample,
/// one column per renewable unit. A non-numeric first row is treated as a
/// header.
pub fn read_errors_csv(path: &std::path::Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    parse_errors_csv(&text).map_err(|msg| Error::Parse {
        path: path.display().to_string(),
        msg,
    })
}

pub fn parse_errors_csv(text: &str) -> std::result::Result<DMatrix<f64>, String> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(text.as_bytes());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let parsed: std::result::Result<Vec<f64>, _> =
            rec.iter().map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(e) if i == 0 => {
                // header row
                let _ = e;
            }
            Err(e) => return Err(format!("row {}: {e}", i + 1)),
        }
    }
    if rows.is_empty() {
        return Err("no numeric rows".into());
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err("ragged rows".into());
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

/// Fit a mixture by EM with k-means++ initialization. Components whose
/// weight collapses are pruned.
pub fn fit_gmm(data: &DMatrix<f64>, opts: &GmmOptions) -> Result<GmmModel> {
    let n = data.nrows();
    let d = data.ncols();
    if n == 0 || d == 0 {
        return Err(Error::InvalidInput("empty sample matrix".into()));
    }
    let k = opts.n_components.min(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut means = kmeanspp_centers(data, k, &mut rng);
    let pooled = pooled_covariance(data, opts.cov_floor);
    let mut covs = vec![pooled; k];
    let mut weights = vec![1.0 / k as f64; k];

    let mut last_ll = f64::NEG_INFINITY;
    let mut resp = DMatrix::zeros(n, k);
    for _ in 0..opts.max_iter {
        // E step via log-sum-exp
        let logpdfs: Vec<GaussLogPdf> = covs
            .iter()
            .map(|c| GaussLogPdf::new(c, opts.cov_floor))
            .collect();
        let mut ll = 0.0;
        for i in 0..n {
            let x = data.row(i).transpose();
            let mut lw = vec![0.0; weights.len()];
            for (j, lp) in logpdfs.iter().enumerate() {
                lw[j] = weights[j].ln() + lp.logpdf(&means[j], &x);
            }
            let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = lw.iter().map(|v| (v - mx).exp()).sum();
            ll += mx + sum.ln();
            for j in 0..weights.len() {
                resp[(i, j)] = (lw[j] - mx).exp() / sum;
            }
        }
        ll /= n as f64;

        // M step
        for j in 0..weights.len() {
            let nj: f64 = resp.column(j).sum();
            weights[j] = nj / n as f64;
            if nj < WEIGHT_PRUNE * n as f64 {
                continue;
            }
            let mut mu = DVector::zeros(d);
            for i in 0..n {
                mu += resp[(i, j)] * data.row(i).transpose();
            }
            mu /= nj;
            let mut sig = DMatrix::zeros(d, d);
            for i in 0..n {
                let dm = data.row(i).transpose() - &mu;
                sig += resp[(i, j)] * &dm * dm.transpose();
            }
            sig /= nj;
            for q in 0..d {
                sig[(q, q)] += opts.cov_floor;
            }
            means[j] = mu;
            covs[j] = sig;
        }

        // prune dead components
        if weights.iter().any(|&w| w < WEIGHT_PRUNE) {
            let keep: Vec<usize> = (0..weights.len())
                .filter(|&j| weights[j] >= WEIGHT_PRUNE)
                .collect();
            weights = keep.iter().map(|&j| weights[j]).collect();
            means = keep.iter().map(|&j| means[j].clone()).collect();
            covs = keep.iter().map(|&j| covs[j].clone()).collect();
            let tot: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= tot;
            }
            resp = DMatrix::zeros(n, weights.len());
            last_ll = f64::NEG_INFINITY;
            continue;
        }

        if (ll - last_ll).abs() <= opts.tol {
            last_ll = ll;
            break;
        }
        last_ll = ll;
    }

    Ok(GmmModel {
        weights,
        means,
        covariances: covs,
        log_likelihood: last_ll,
    })
}

struct GaussLogPdf {
    chol: Cholesky<f64, nalgebra::Dyn>,
    log_norm: f64,
}

impl GaussLogPdf {
    fn new(cov: &DMatrix<f64>, floor: f64) -> Self {
        let d = cov.nrows();
        let mut jitter = floor.max(1e-12);
        let chol = loop {
            if let Some(c) = Cholesky::new(cov + DMatrix::identity(d, d) * jitter) {
                break c;
            }
            jitter *= 10.0;
        };
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        GaussLogPdf { chol, log_norm }
    }

    fn logpdf(&self, mean: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let dm = x - mean;
        let sol = self.chol.solve(&dm);
        self.log_norm - 0.5 * dm.dot(&sol)
    }
}

fn pooled_covariance(data: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let n = data.nrows();
    let d = data.ncols();
    let mean = data.row_mean().transpose();
    let mut sig = DMatrix::zeros(d, d);
    for i in 0..n {
        let dm = data.row(i).transpose() - &mean;
        sig += &dm * dm.transpose();
    }
    sig /= (n.max(2) - 1) as f64;
    for q in 0..d {
        sig[(q, q)] += floor.max(1e-12);
    }
    sig
}

fn kmeanspp_centers(data: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let n = data.nrows();
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(k);
    centers.push(data.row(rng.gen_range(0..n)).transpose());
    let mut d2 = vec![0.0f64; n];
    while centers.len() < k {
        let mut total = 0.0;
        for i in 0..n {
            let x = data.row(i).transpose();
            d2[i] = centers
                .iter()
                .map(|c| (&x - c).norm_squared())
                .fold(f64::INFINITY, f64::min);
            total += d2[i];
        }
        let idx = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                t -= w;
                if t <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centers.push(data.row(idx).transpose());
    }
    centers
}
