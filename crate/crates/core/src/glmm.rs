//! Random-intercept logistic regression over dimension scores, fitted by
//! maximizing the Laplace-approximated marginal likelihood, plus nested
//! forward selection, R² decomposition, cross-validated AUC and
//! specificity-calibrated decision cutoffs.
//!
//! The random intercept of cluster `j` is `σ·u_j` with `u_j ~ N(0, 1)`.
//! `σ` is optimized unconstrained (the likelihood is even in `σ`) and
//! reported as `|σ|`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

use crate::stats::{self, logistic};
use crate::util::rng_stream;

pub const FIT_VERSION: u32 = 1;
/// Linear predictors beyond this magnitude signal (quasi-)separation.
const ETA_LIMIT: f64 = 30.0;

#[derive(Debug, Error)]
pub enum GlmmError {
    #[error("invalid data: {0}")]
    Data(String),
    #[error("no convergence after {iterations} iterations; log-likelihood trace tail {trace:?}")]
    NonConvergence { iterations: usize, trace: Vec<f64> },
    #[error("cutoff calibration: {0}")]
    Calibration(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Decision-cutoff policy, named by the specificity it targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutoffMode {
    Conservative,
    Generous,
}

impl CutoffMode {
    pub const ALL: [CutoffMode; 2] = [CutoffMode::Conservative, CutoffMode::Generous];

    pub fn target_tnr(self) -> f64 {
        match self {
            CutoffMode::Conservative => 0.95,
            CutoffMode::Generous => 0.80,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CutoffMode::Conservative => "conservative",
            CutoffMode::Generous => "generous",
        }
    }
}

/// Scores, binary outcomes and cluster IDs.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmmData {
    pub scores: DMatrix<f64>,
    pub sold: Vec<bool>,
    pub cluster: Vec<u32>,
}

impl GlmmData {
    pub fn new(scores: DMatrix<f64>, sold: Vec<bool>, cluster: Vec<u32>) -> Result<Self, GlmmError> {
        if scores.nrows() != sold.len() || sold.len() != cluster.len() {
            return Err(GlmmError::Data("scores, labels and clusters differ in length".into()));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(GlmmError::Data("scores contain non-finite values".into()));
        }
        Ok(GlmmData { scores, sold, cluster })
    }

    pub fn len(&self) -> usize {
        self.sold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sold.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> GlmmData {
        GlmmData {
            scores: self.scores.select_rows(rows),
            sold: rows.iter().map(|&i| self.sold[i]).collect(),
            cluster: rows.iter().map(|&i| self.cluster[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmmOptions {
    pub max_iter: usize,
    /// Relative log-likelihood change that ends the optimization.
    pub tol: f64,
    /// Pin the random-intercept SD at zero (plain logistic regression).
    pub fix_sigma_zero: bool,
    pub sigma_start: f64,
}

impl Default for GlmmOptions {
    fn default() -> Self {
        GlmmOptions {
            max_iter: 200,
            tol: 1e-8,
            fix_sigma_zero: false,
            sigma_start: 0.5,
        }
    }
}

/// Rows grouped by cluster with the design restricted to chosen dimensions.
pub struct Design {
    q: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    groups: Vec<(usize, usize)>,
    cluster_ids: Vec<u32>,
    fix_sigma_zero: bool,
}

struct ClusterEval {
    ll: f64,
    grad: Vec<f64>,
    hess: Option<Vec<f64>>,
    mode: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Design {
    pub fn new(data: &GlmmData, dims: &[usize], fix_sigma_zero: bool) -> Result<Self, GlmmError> {
        if let Some(&d) = dims.iter().find(|&&d| d >= data.scores.ncols()) {
            return Err(GlmmError::Schema(format!("dimension {} not in a {}-column score table", d + 1, data.scores.ncols())));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.sort_by_key(|&i| (data.cluster[i], i));
        let q = dims.len() + 1;
        let mut x = Vec::with_capacity(order.len() * q);
        let mut y = Vec::with_capacity(order.len());
        let mut groups = Vec::new();
        let mut cluster_ids = Vec::new();
        for (k, &i) in order.iter().enumerate() {
            if cluster_ids.last() != Some(&data.cluster[i]) {
                if let Some(g) = groups.last_mut() {
                    let g: &mut (usize, usize) = g;
                    g.1 = k;
                }
                groups.push((k, order.len()));
                cluster_ids.push(data.cluster[i]);
            }
            x.push(1.0);
            x.extend(dims.iter().map(|&d| data.scores[(i, d)]));
            y.push(if data.sold[i] { 1.0 } else { 0.0 });
        }
        Ok(Design {
            q,
            x,
            y,
            groups,
            cluster_ids,
            fix_sigma_zero,
        })
    }

    pub fn n_params(&self) -> usize {
        self.q + usize::from(!self.fix_sigma_zero)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.q..(i + 1) * self.q]
    }

    fn eta(&self, i: usize, beta: &[f64]) -> f64 {
        self.row(i).iter().zip(beta).map(|(a, b)| a * b).sum()
    }

    fn cluster_mode(&self, (s, e): (usize, usize), eta: &[f64], sigma: f64) -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        let h = |u: f64| -> f64 {
            (s..e)
                .map(|i| {
                    let z = eta[i - s] + sigma * u;
                    self.y[i] * z - softplus(z)
                })
                .sum::<f64>()
                - 0.5 * u * u
        };
        let newton = |u: f64| -> f64 {
            let (mut g, mut sw) = (-u, 0.0);
            for i in s..e {
                let p = logistic(eta[i - s] + sigma * u);
                g += sigma * (self.y[i] - p);
                sw += p * (1.0 - p);
            }
            g / (sigma * sigma * sw + 1.0)
        };
        let mut u = 0.0;
        for _ in 0..100 {
            let step = newton(u);
            if step.abs() > 0.5 {
                // long steps can overshoot: backtrack on the objective
                let hu = h(u);
                let mut t = 1.0;
                while h(u + t * step) < hu && t > 1e-10 {
                    t *= 0.5;
                }
                u += t * step;
            } else {
                u += step;
                if step.abs() < 1e-10 * (1.0 + u.abs()) {
                    break;
                }
            }
        }
        // one more full step lands on the mode to machine precision
        u + newton(u)
    }

    fn eval_cluster(&self, g: (usize, usize), beta: &[f64], sigma: f64, want_grad: bool, want_hess: bool) -> ClusterEval {
        let (s, e) = g;
        let q = self.q;
        let np = self.n_params();
        let eta: Vec<f64> = (s..e).map(|i| self.eta(i, beta)).collect();
        let u = self.cluster_mode(g, &eta, sigma);
        let mut ll = -0.5 * u * u;
        let (mut sum_r, mut sw, mut sa) = (0.0, 0.0, 0.0);
        let mut rx = vec![0.0; q];
        let mut wx = vec![0.0; q];
        let mut ax = vec![0.0; q];
        let mut hess = want_hess.then(|| vec![0.0; np * np]);
        for i in s..e {
            let z = eta[i - s] + sigma * u;
            ll += self.y[i] * z - softplus(z);
            let p = logistic(z);
            let w = p * (1.0 - p);
            sw += w;
            if !(want_grad || want_hess) {
                continue;
            }
            let r = self.y[i] - p;
            let a = w * (1.0 - 2.0 * p);
            sum_r += r;
            sa += a;
            let x = self.row(i);
            for k in 0..q {
                rx[k] += r * x[k];
                wx[k] += w * x[k];
                ax[k] += a * x[k];
            }
            if let Some(h) = hess.as_mut() {
                for k in 0..q {
                    for l in 0..=k {
                        h[k * np + l] -= w * x[k] * x[l];
                    }
                }
            }
        }
        let d = 1.0 + sigma * sigma * sw;
        ll -= 0.5 * d.ln();
        let mut grad = Vec::new();
        if want_grad {
            grad = vec![0.0; np];
            let s_u = sigma * sa;
            for k in 0..q {
                let du = -sigma * wx[k] / d;
                let ds = ax[k] + s_u * du;
                grad[k] = rx[k] - 0.5 * sigma * sigma * ds / d;
            }
            if !self.fix_sigma_zero {
                let du = (sum_r - sigma * sw * u) / d;
                let ds = sa * u + s_u * du;
                grad[q] = sum_r * u - 0.5 * (2.0 * sigma * sw + sigma * sigma * ds) / d;
            }
        }
        if let Some(h) = hess.as_mut() {
            // envelope term h_θu h_uθ / D, with the log-determinant curvature left out
            let mut hu = vec![0.0; np];
            for k in 0..q {
                hu[k] = -sigma * wx[k];
            }
            if !self.fix_sigma_zero {
                hu[q] = sum_r - sigma * sw * u;
                for k in 0..q {
                    h[q * np + k] -= wx[k] * u;
                }
                h[q * np + q] -= sw * u * u;
            }
            for k in 0..np {
                for l in 0..=k {
                    h[k * np + l] += hu[k] * hu[l] / d;
                }
            }
        }
        ClusterEval { ll, grad, hess, mode: u }
    }

    fn split<'a>(&self, theta: &'a [f64]) -> (&'a [f64], f64) {
        let sigma = if self.fix_sigma_zero { 0.0 } else { theta[self.q] };
        (&theta[..self.q], sigma)
    }

    fn evaluate(&self, theta: &[f64], want_grad: bool, want_hess: bool) -> (f64, Vec<f64>, Option<DMatrix<f64>>, Vec<f64>) {
        let (beta, sigma) = self.split(theta);
        let parts: Vec<ClusterEval> = self
            .groups
            .par_iter()
            .map(|&g| self.eval_cluster(g, beta, sigma, want_grad, want_hess))
            .collect();
        let np = self.n_params();
        let mut ll = 0.0;
        let mut grad = vec![0.0; if want_grad { np } else { 0 }];
        let mut hess = want_hess.then(|| DMatrix::zeros(np, np));
        let mut modes = Vec::with_capacity(parts.len());
        for p in parts {
            ll += p.ll;
            for (a, b) in grad.iter_mut().zip(&p.grad) {
                *a += b;
            }
            if let (Some(h), Some(ph)) = (hess.as_mut(), &p.hess) {
                for k in 0..np {
                    for l in 0..=k {
                        h[(k, l)] += ph[k * np + l];
                    }
                }
            }
            modes.push(p.mode);
        }
        if let Some(h) = hess.as_mut() {
            for k in 0..np {
                for l in 0..k {
                    h[(l, k)] = h[(k, l)];
                }
            }
        }
        (ll, grad, hess, modes)
    }

    /// Laplace-approximated marginal log-likelihood.
    pub fn loglik(&self, theta: &[f64]) -> f64 {
        self.evaluate(theta, false, false).0
    }

    pub fn loglik_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (ll, g, _, _) = self.evaluate(theta, true, false);
        (ll, g)
    }

    /// Marginal log-likelihood by adaptive Gauss-Hermite quadrature
    /// centered at each cluster's mode.
    pub fn loglik_agq(&self, theta: &[f64], nodes: usize) -> f64 {
        let (beta, sigma) = self.split(theta);
        let (xs, ws) = gauss_hermite(nodes);
        let mut total = 0.0;
        for &g in &self.groups {
            let (s, e) = g;
            let eta: Vec<f64> = (s..e).map(|i| self.eta(i, beta)).collect();
            let h = |u: f64| -> f64 {
                (s..e)
                    .map(|i| {
                        let z = eta[i - s] + sigma * u;
                        self.y[i] * z - softplus(z)
                    })
                    .sum::<f64>()
                    - 0.5 * u * u
            };
            if sigma == 0.0 {
                total += h(0.0);
                continue;
            }
            let u0 = self.cluster_mode(g, &eta, sigma);
            let sw: f64 = (s..e).map(|i| {
                let p = logistic(eta[i - s] + sigma * u0);
                p * (1.0 - p)
            }).sum();
            let scale = (2.0f64).sqrt() / (1.0 + sigma * sigma * sw).sqrt();
            let terms: Vec<f64> = xs
                .iter()
                .zip(&ws)
                .map(|(x, w)| w.ln() + x * x + h(u0 + scale * x))
                .collect();
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
            total += lse + scale.ln() - 0.5 * (2.0 * PI).ln();
        }
        total
    }

    /// Replace the σ row and column of an approximate Hessian by central
    /// differences of the analytic gradient; the log-determinant term
    /// matters most in that direction.
    fn exact_sigma_curvature(&self, theta: &[f64], h: &mut DMatrix<f64>) {
        if self.fix_sigma_zero {
            return;
        }
        let q = self.q;
        let step = 1e-5 * theta[q].abs().max(1.0);
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[q] += step;
        tm[q] -= step;
        let (_, gp) = self.loglik_grad(&tp);
        let (_, gm) = self.loglik_grad(&tm);
        for k in 0..=q {
            let v = (gp[k] - gm[k]) / (2.0 * step);
            h[(k, q)] = v;
            h[(q, k)] = v;
        }
    }

    fn fd_hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let np = theta.len();
        let mut h = DMatrix::zeros(np, np);
        for k in 0..np {
            let step = 1e-5 * theta[k].abs().max(1.0);
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[k] += step;
            tm[k] -= step;
            let (_, gp) = self.loglik_grad(&tp);
            let (_, gm) = self.loglik_grad(&tm);
            for l in 0..np {
                h[(l, k)] = (gp[l] - gm[l]) / (2.0 * step);
            }
        }
        (&h + h.transpose()) * 0.5
    }
}

/// Gauss-Hermite nodes and weights for the weight `exp(-x²)`, from the
/// eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], PI.sqrt() * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    /// `None` for the intercept, otherwise the 0-based score column.
    pub dim: Option<usize>,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

impl Coefficient {
    pub fn term(&self) -> String {
        self.dim.map_or("(Intercept)".to_string(), |d| format!("Dim.{}", d + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmFit {
    pub version: u32,
    /// Score columns in model order.
    pub dims: Vec<usize>,
    /// Intercept first, then one per entry of `dims`.
    pub coefficients: Vec<Coefficient>,
    pub sigma: f64,
    pub sigma_se: Option<f64>,
    /// Covariance of the intercept and coefficients, when estimable.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub r2_marginal: f64,
    pub r2_conditional: f64,
    /// Increase of the marginal R² when each entry of `dims` was added.
    pub delta_r2: Vec<f64>,
    pub n_obs: usize,
    pub n_clusters: usize,
    /// Conditional random intercept per cluster.
    pub random_effects: BTreeMap<u32, f64>,
    pub iterations: usize,
    pub separation: bool,
    /// Parameters that were still running away when separation stopped the fit.
    pub diverging: Vec<usize>,
    pub trace: Vec<f64>,
}

impl GlmmFit {
    pub fn intercept(&self) -> f64 {
        self.coefficients[0].estimate
    }

    pub fn beta(&self) -> Vec<f64> {
        self.coefficients[1..].iter().map(|c| c.estimate).collect()
    }

    fn theta(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.coefficients.iter().map(|c| c.estimate).collect();
        t.push(self.sigma);
        t
    }

    /// Linear predictor for one score row, optionally with the cluster's
    /// random intercept (zero for unseen clusters).
    pub fn linear_predictor(&self, scores: &[f64], cluster: Option<u32>) -> f64 {
        let mut eta = self.intercept();
        for (c, &d) in self.coefficients[1..].iter().zip(&self.dims) {
            eta += c.estimate * scores[d];
        }
        if let Some(b) = cluster.and_then(|c| self.random_effects.get(&c)) {
            eta += b;
        }
        eta
    }

    pub fn probabilities(&self, scores: &DMatrix<f64>, clusters: Option<&[u32]>) -> Result<Vec<f64>, GlmmError> {
        if let Some(&d) = self.dims.iter().find(|&&d| d >= scores.ncols()) {
            return Err(GlmmError::Schema(format!("fit uses Dim.{} but scores have {} columns", d + 1, scores.ncols())));
        }
        Ok((0..scores.nrows())
            .map(|i| {
                let row: Vec<f64> = scores.row(i).iter().copied().collect();
                logistic(self.linear_predictor(&row, clusters.map(|c| c[i])))
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable fit")
    }

    /// Coefficient table: one row per term, then model diagnostics.
    pub fn write_coefficients_csv<W: Write>(&self, w: W) -> Result<(), GlmmError> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["term", "estimate", "se", "z", "p_value", "signif"])?;
        for c in &self.coefficients {
            w.write_record([
                c.term(),
                format!("{:.4}", c.estimate),
                format!("{:.4}", c.se),
                format!("{:.3}", c.z),
                format!("{:.3e}", c.p_value),
                stars(c.p_value).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Latent-scale R² from variance components.
pub fn r2_from_components(var_fixed: f64, var_random: f64) -> (f64, f64) {
    let total = var_fixed + var_random + PI * PI / 3.0;
    (var_fixed / total, (var_fixed + var_random) / total)
}

pub fn r2_components(fit: &GlmmFit, data: &GlmmData) -> (f64, f64) {
    let beta = fit.beta();
    let fixed: Vec<f64> = (0..data.len())
        .map(|i| beta.iter().zip(&fit.dims).map(|(b, &d)| b * data.scores[(i, d)]).sum())
        .collect();
    let vf = if fixed.len() > 1 { stats::variance(&fixed) } else { 0.0 };
    r2_from_components(vf, fit.sigma * fit.sigma)
}

fn start_theta(design: &Design, data: &GlmmData, start: Option<&[f64]>, options: &GlmmOptions) -> Vec<f64> {
    let np = design.n_params();
    if let Some(s) = start {
        if s.len() == np {
            return s.to_vec();
        }
    }
    let mut theta = vec![0.0; np];
    let rate = data.sold.iter().filter(|s| **s).count() as f64 / data.len() as f64;
    theta[0] = (rate / (1.0 - rate)).ln();
    if !design.fix_sigma_zero {
        theta[design.q] = options.sigma_start;
    }
    theta
}

/// Fit the model on the chosen score columns.
pub fn fit(data: &GlmmData, dims: &[usize], options: &GlmmOptions) -> Result<GlmmFit, GlmmError> {
    fit_from(data, dims, options, None)
}

/// Fit starting from `start` (intercept, coefficients, σ) when it has the
/// right length.
pub fn fit_from(data: &GlmmData, dims: &[usize], options: &GlmmOptions, start: Option<&[f64]>) -> Result<GlmmFit, GlmmError> {
    fit_inner(data, dims, options, start, true)
}

/// Point estimates only; standard errors are left as NaN.
fn fit_inner(data: &GlmmData, dims: &[usize], options: &GlmmOptions, start: Option<&[f64]>, with_se: bool) -> Result<GlmmFit, GlmmError> {
    if data.is_empty() {
        return Err(GlmmError::Data("no observations".into()));
    }
    let design = Design::new(data, dims, options.fix_sigma_zero)?;
    if design.groups.len() < 2 && !options.fix_sigma_zero {
        return Err(GlmmError::Data("need at least two clusters".into()));
    }
    let np = design.n_params();
    let positives = data.sold.iter().filter(|s| **s).count();
    if positives == 0 || positives == data.len() {
        // every label equal: the intercept runs off to infinity
        let mut theta = vec![0.0; np];
        theta[0] = if positives == 0 { -ETA_LIMIT } else { ETA_LIMIT };
        return Ok(finish(&design, data, dims, theta, 0, true, vec![0], Vec::new(), false));
    }

    let mut theta = start_theta(&design, data, start, options);
    let (mut ll, mut grad, mut hess, _) = design.evaluate(&theta, true, true);
    let mut trace = vec![ll];
    for it in 1..=options.max_iter {
        let mut h = hess.take().expect("requested");
        design.exact_sigma_curvature(&theta, &mut h);
        let g = DVector::from_vec(grad.clone());
        let neg = -h;
        let mut lambda = 0.0;
        let scale = neg.diagonal().iter().fold(1e-12f64, |a, b| a.max(b.abs()));
        let step = loop {
            let mut m = neg.clone();
            for k in 0..np {
                m[(k, k)] += lambda;
            }
            if let Some(ch) = m.cholesky() {
                break ch.solve(&g);
            }
            lambda = if lambda == 0.0 { 1e-8 * scale } else { lambda * 10.0 };
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            let l = design.loglik(&cand);
            if l.is_finite() && l >= ll {
                accepted = Some((cand, l));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, new_ll)) = accepted else {
            // no ascent along the Newton direction: at the optimum to machine precision
            return Ok(finish(&design, data, dims, theta, it, false, Vec::new(), trace, with_se));
        };
        let change = (new_ll - ll).abs() / (ll.abs() + 1e-10);
        let moved = theta.iter().zip(&cand).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        theta = cand;
        ll = new_ll;
        trace.push(ll);
        let max_eta = (0..design.y.len()).map(|i| design.eta(i, &theta[..design.q]).abs()).fold(0.0, f64::max);
        if max_eta > ETA_LIMIT {
            let diverging = (0..design.q).filter(|&k| theta[k].abs() > 10.0).collect();
            return Ok(finish(&design, data, dims, theta, it, true, diverging, trace, false));
        }
        // the likelihood test alone stops early on flat ridges; also require a tiny step
        if change < options.tol && moved < 1e-9 {
            return Ok(finish(&design, data, dims, theta, it, false, Vec::new(), trace, with_se));
        }
        let (_, g2, h2, _) = design.evaluate(&theta, true, true);
        grad = g2;
        hess = h2;
    }
    let tail = trace[trace.len().saturating_sub(5)..].to_vec();
    Err(GlmmError::NonConvergence {
        iterations: options.max_iter,
        trace: tail,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish(
    design: &Design,
    data: &GlmmData,
    dims: &[usize],
    theta: Vec<f64>,
    iterations: usize,
    separation: bool,
    diverging: Vec<usize>,
    trace: Vec<f64>,
    with_se: bool,
) -> GlmmFit {
    let np = design.n_params();
    let (ll, _, _, modes) = design.evaluate(&theta, false, false);
    let mut ses = vec![f64::NAN; np];
    let mut covariance = None;
    if with_se {
        let neg = -design.fd_hessian(&theta);
        let inv = neg.clone().cholesky().map(|c| c.inverse()).or_else(|| {
            // σ on the zero boundary: invert the fixed-effect block alone
            let q = design.q;
            neg.view((0, 0), (q, q)).into_owned().cholesky().map(|c| {
                let mut full = DMatrix::from_element(np, np, f64::NAN);
                full.view_mut((0, 0), (q, q)).copy_from(&c.inverse());
                full
            })
        });
        if let Some(inv) = inv {
            for k in 0..np {
                ses[k] = inv[(k, k)].max(0.0).sqrt();
            }
            let q = design.q;
            covariance = Some((0..q).map(|k| (0..q).map(|l| inv[(k, l)]).collect()).collect());
        }
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let coefficients: Vec<Coefficient> = (0..design.q)
        .map(|k| {
            let z = theta[k] / ses[k];
            Coefficient {
                dim: (k > 0).then(|| dims[k - 1]),
                estimate: theta[k],
                se: ses[k],
                z,
                p_value: if z.is_finite() { 2.0 * (1.0 - normal.cdf(z.abs())) } else { f64::NAN },
            }
        })
        .collect();
    let sigma = if design.fix_sigma_zero { 0.0 } else { theta[design.q].abs() };
    let sigma_se = (!design.fix_sigma_zero && ses[design.q].is_finite()).then(|| ses[design.q]);
    let k = np as f64;
    let n = data.len() as f64;
    let random_effects = design
        .cluster_ids
        .iter()
        .zip(&modes)
        .map(|(&c, &u)| (c, if design.fix_sigma_zero { 0.0 } else { theta[design.q] * u }))
        .collect();
    let mut fit = GlmmFit {
        version: FIT_VERSION,
        dims: dims.to_vec(),
        coefficients,
        sigma,
        sigma_se,
        covariance,
        loglik: ll,
        aic: -2.0 * ll + 2.0 * k,
        bic: -2.0 * ll + k * n.ln(),
        r2_marginal: 0.0,
        r2_conditional: 0.0,
        delta_r2: Vec::new(),
        n_obs: data.len(),
        n_clusters: design.groups.len(),
        random_effects,
        iterations,
        separation,
        diverging,
        trace,
    };
    let (m, c) = r2_components(&fit, data);
    fit.r2_marginal = m;
    fit.r2_conditional = c;
    fit
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub dim: usize,
    pub delta_r2: f64,
    pub lrt_statistic: f64,
    pub p_value: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub fit: GlmmFit,
    pub steps: Vec<SelectionStep>,
}

/// Forward selection: at each step the remaining candidate raising the
/// marginal R² the most is tested against the current model by a
/// likelihood-ratio test and kept iff `p < alpha` (and it raises R²).
/// Rejected candidates leave the pool.
pub fn nested_selection(data: &GlmmData, candidates: &[usize], alpha: f64, options: &GlmmOptions) -> Result<Selection, GlmmError> {
    let chi = ChiSquared::new(1.0).expect("df > 0");
    let mut current = fit_inner(data, &[], options, None, false)?;
    let mut pool: Vec<usize> = candidates.to_vec();
    let mut steps = Vec::new();
    let mut deltas = Vec::new();
    while !pool.is_empty() {
        let base = current.theta();
        let trials: Vec<Result<GlmmFit, GlmmError>> = pool
            .iter()
            .map(|&d| {
                let mut dims = current.dims.clone();
                dims.push(d);
                let mut start = base.clone();
                start.insert(dims.len(), 0.0);
                fit_inner(data, &dims, options, Some(&start), false)
            })
            .collect();
        let mut best: Option<(usize, GlmmFit)> = None;
        for (k, t) in trials.into_iter().enumerate() {
            let t = t?;
            if best.as_ref().map_or(true, |(_, b)| t.r2_marginal > b.r2_marginal) {
                best = Some((k, t));
            }
        }
        let (k, cand) = best.expect("pool not empty");
        let dim = pool.remove(k);
        let delta = cand.r2_marginal - current.r2_marginal;
        let stat = (2.0 * (cand.loglik - current.loglik)).max(0.0);
        let p = 1.0 - chi.cdf(stat);
        let accepted = p < alpha && delta > 0.0;
        steps.push(SelectionStep {
            dim,
            delta_r2: delta,
            lrt_statistic: stat,
            p_value: p,
            accepted,
        });
        if accepted {
            deltas.push(delta);
            current = cand;
        }
    }
    let mut fit = fit_from(data, &current.dims, options, Some(&current.theta()))?;
    fit.delta_r2 = deltas;
    Ok(Selection { fit, steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub median: f64,
    /// Central 68.2% interval of the replication AUCs.
    pub lower: f64,
    pub upper: f64,
    pub used: usize,
    /// Replications whose holdout had a single class, or whose fit failed.
    pub skipped: usize,
    pub aucs: Vec<f64>,
}

/// Repeated random train/holdout splits; each replication refits the model
/// on the training rows and scores the holdout with cluster intercepts.
pub fn cross_validate_auc(
    data: &GlmmData,
    dims: &[usize],
    options: &GlmmOptions,
    replications: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<CvSummary, GlmmError> {
    let n = data.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train < 2 || n_train >= n {
        return Err(GlmmError::Data(format!("cannot split {n} rows at fraction {train_fraction}")));
    }
    let warm = fit_inner(data, dims, options, None, false).ok().map(|f| f.theta());
    let results: Vec<Option<f64>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_stream(seed, r as u64);
            let mut rows: Vec<usize> = (0..n).collect();
            rows.shuffle(&mut rng);
            let (train, test) = rows.split_at(n_train);
            let train_data = data.subset(train);
            let test_data = data.subset(test);
            let f = fit_inner(&train_data, dims, options, warm.as_deref(), false).ok()?;
            let probs = f.probabilities(&test_data.scores, Some(&test_data.cluster)).ok()?;
            stats::roc_auc(&probs, &test_data.sold).ok().map(|r| r.auc)
        })
        .collect();
    let aucs: Vec<f64> = results.iter().flatten().copied().collect();
    let skipped = replications - aucs.len();
    if aucs.is_empty() {
        return Err(GlmmError::Data("every replication was degenerate".into()));
    }
    let (lower, upper) = stats::percentile_interval(&aucs, 0.682);
    Ok(CvSummary {
        median: stats::median(&aucs),
        lower,
        upper,
        used: aucs.len(),
        skipped,
        aucs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub target_tnr: f64,
    pub cutoff: f64,
    pub achieved_tnr: f64,
    pub sensitivity: f64,
}

/// Smallest cutoff whose specificity on `(probabilities, labels)` reaches
/// `target_tnr`, placed midway between the last negative kept below it
/// and the next larger score.
pub fn calibrate_scores(probabilities: &[f64], labels: &[bool], target_tnr: f64) -> Result<ThresholdCalibration, GlmmError> {
    if !(0.0..=1.0).contains(&target_tnr) {
        return Err(GlmmError::Calibration(format!("target {target_tnr} outside [0, 1]")));
    }
    let mut neg: Vec<f64> = probabilities.iter().zip(labels).filter(|(_, l)| !**l).map(|(p, _)| *p).collect();
    let pos: Vec<f64> = probabilities.iter().zip(labels).filter(|(_, l)| **l).map(|(p, _)| *p).collect();
    if neg.is_empty() {
        return Err(GlmmError::Calibration("no negative examples".into()));
    }
    if probabilities.iter().all(|&p| p == probabilities[0]) {
        return Err(GlmmError::Calibration("all scores are identical".into()));
    }
    neg.sort_by(f64::total_cmp);
    let k = (target_tnr * neg.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let cutoff = if k == 0 {
        neg[0]
    } else {
        let below = neg[k - 1];
        let above = probabilities
            .iter()
            .copied()
            .filter(|&p| p > below)
            .fold(f64::INFINITY, f64::min);
        if above.is_finite() {
            0.5 * (below + above)
        } else if k == neg.len() && below < 1.0 {
            // nothing scores above the largest negative
            0.5 * (below + 1.0)
        } else {
            return Err(GlmmError::Calibration("scores do not separate at the target specificity".into()));
        }
    };
    let achieved_tnr = neg.iter().filter(|&&p| p < cutoff).count() as f64 / neg.len() as f64;
    if achieved_tnr + 1e-12 < target_tnr {
        return Err(GlmmError::Calibration("target specificity unattainable with tied scores".into()));
    }
    let sensitivity = if pos.is_empty() {
        f64::NAN
    } else {
        pos.iter().filter(|&&p| p >= cutoff).count() as f64 / pos.len() as f64
    };
    Ok(ThresholdCalibration {
        target_tnr,
        cutoff,
        achieved_tnr,
        sensitivity,
    })
}

/// Calibrate on `data` using conditional probabilities of the fit.
pub fn calibrate_threshold(fit: &GlmmFit, data: &GlmmData, target_tnr: f64) -> Result<ThresholdCalibration, GlmmError> {
    let probs = fit.probabilities(&data.scores, Some(&data.cluster))?;
    calibrate_scores(&probs, &data.sold, target_tnr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub sold: Vec<bool>,
}

impl Prediction {
    pub fn sold_count(&self) -> usize {
        self.sold.iter().filter(|s| **s).count()
    }
}

/// Population-level prediction (random intercept at its mean).
pub fn predict(fit: &GlmmFit, scores: &DMatrix<f64>, calibration: &ThresholdCalibration) -> Result<Prediction, GlmmError> {
    let probabilities = fit.probabilities(scores, None)?;
    let sold = probabilities.iter().map(|&p| p >= calibration.cutoff).collect();
    Ok(Prediction { probabilities, sold })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Scores with unit variance, outcomes from the random-intercept model.
    pub(crate) fn simulate(seed: u64, n: usize, clusters: u32, c: f64, beta: &[f64], sd: &[f64], sigma: f64) -> GlmmData {
        let mut rng = rng_stream(seed, 0);
        let effects: Vec<f64> = (0..clusters).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let k = beta.len();
        let mut scores = DMatrix::zeros(n, k);
        let mut sold = Vec::with_capacity(n);
        let mut cluster = Vec::with_capacity(n);
        for i in 0..n {
            let j = (i as u32) % clusters;
            let mut eta = c + effects[j as usize];
            for d in 0..k {
                let x = sd[d] * rng.sample::<f64, _>(StandardNormal);
                scores[(i, d)] = x;
                eta += beta[d] * x;
            }
            sold.push(rng.gen::<f64>() < logistic(eta));
            cluster.push(j);
        }
        GlmmData::new(scores, sold, cluster).unwrap()
    }

    /// Iteratively reweighted least squares for plain logistic regression.
    fn irls(data: &GlmmData, dims: &[usize]) -> Vec<f64> {
        let n = data.len();
        let q = dims.len() + 1;
        let x = DMatrix::from_fn(n, q, |i, k| if k == 0 { 1.0 } else { data.scores[(i, dims[k - 1])] });
        let y = DVector::from_iterator(n, data.sold.iter().map(|&s| f64::from(u8::from(s))));
        let mut b = DVector::zeros(q);
        for _ in 0..100 {
            let eta = &x * &b;
            let p = eta.map(logistic);
            let w = p.map(|v| v * (1.0 - v));
            let xtw = DMatrix::from_fn(q, n, |k, i| x[(i, k)] * w[i]);
            let step = (&xtw * &x).lu().solve(&(x.transpose() * (&y - &p))).unwrap();
            b += &step;
            if step.norm() < 1e-14 {
                break;
            }
        }
        b.iter().copied().collect()
    }

    #[test]
    fn sigma_zero_reduces_to_logistic_regression() {
        let d = simulate(1, 800, 8, -1.0, &[0.8, -0.5], &[1.0, 1.0], 0.0);
        let f = fit(&d, &[0, 1], &GlmmOptions { fix_sigma_zero: true, ..GlmmOptions::default() }).unwrap();
        let oracle = irls(&d, &[0, 1]);
        for (c, o) in f.coefficients.iter().zip(&oracle) {
            assert!((c.estimate - o).abs() < 1e-6, "{} vs {}", c.estimate, o);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = simulate(2, 600, 6, -1.5, &[0.6, 0.3, -0.2], &[1.0, 0.7, 1.3], 0.4);
        let design = Design::new(&d, &[0, 1, 2], false).unwrap();
        let mut rng = rng_stream(9, 9);
        for _ in 0..10 {
            let theta: Vec<f64> = (0..5).map(|k| if k == 4 { rng.gen_range(0.1..1.0) } else { rng.gen_range(-1.0..1.0) }).collect();
            let (_, g) = design.loglik_grad(&theta);
            for k in 0..5 {
                let h = 1e-5;
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[k] += h;
                tm[k] -= h;
                let fd = (design.loglik(&tp) - design.loglik(&tm)) / (2.0 * h);
                assert!((g[k] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "k={k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn laplace_is_close_to_quadrature() {
        let d = simulate(3, 200, 2, -1.0, &[0.7], &[1.0], 0.5);
        let design = Design::new(&d, &[0], false).unwrap();
        let theta = [-1.0, 0.7, 0.5];
        let agq = design.loglik_agq(&theta, 51);
        let agq_lo = design.loglik_agq(&theta, 31);
        assert!((agq - agq_lo).abs() < 1e-10);
        let lap = design.loglik(&theta);
        assert!((lap - agq).abs() < 1e-4 * agq.abs(), "{lap} vs {agq}");
    }

    #[test]
    fn gauss_hermite_integrates_polynomials() {
        let (x, w) = gauss_hermite(20);
        let m0: f64 = w.iter().sum();
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| x * x * w).sum();
        assert!((m0 - PI.sqrt()).abs() < 1e-12);
        assert!((m2 - PI.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_parameters_and_ascends() {
        let d = simulate(4, 6000, 40, -2.0, &[0.6, -0.4], &[1.0, 1.0], 0.5);
        let f = fit(&d, &[0, 1], &GlmmOptions::default()).unwrap();
        for w in f.trace.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let truth = [-2.0, 0.6, -0.4];
        for (c, t) in f.coefficients.iter().zip(truth) {
            assert!((c.estimate - t).abs() < 4.0 * c.se, "{c:?} vs {t}");
        }
        assert!((f.sigma - 0.5).abs() < 4.0 * f.sigma_se.unwrap());
        assert!(f.r2_marginal <= f.r2_conditional);
        assert!((f.bic - f.aic - 4.0 * ((6000f64).ln() - 2.0)).abs() < 1e-9);
    }

    #[test]
    fn degenerate_labels_flag_separation() {
        let mut d = simulate(5, 300, 3, -1.0, &[0.5], &[1.0], 0.2);
        d.sold.iter_mut().for_each(|s| *s = false);
        let f = fit(&d, &[0], &GlmmOptions::default()).unwrap();
        assert!(f.separation);
        let p = f.probabilities(&d.scores, None).unwrap();
        assert!(p.iter().all(|&v| v <= 1e-6));
    }

    #[test]
    fn r2_closed_form() {
        assert_eq!(r2_from_components(0.0, 0.0), (0.0, 0.0));
        let (m, c) = r2_from_components(PI * PI / 3.0, 0.0);
        assert!((m - 0.5).abs() < 1e-15 && (c - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shifting_a_dimension_moves_only_the_intercept() {
        let d = simulate(6, 2000, 10, -1.2, &[0.5, 0.3], &[1.0, 1.0], 0.3);
        let f = fit(&d, &[0, 1], &GlmmOptions::default()).unwrap();
        let mut shifted = d.clone();
        shifted.scores.column_mut(1).add_scalar_mut(3.0);
        let g = fit(&shifted, &[0, 1], &GlmmOptions::default()).unwrap();
        assert!((g.beta()[1] - f.beta()[1]).abs() < 1e-5);
        let pf = f.probabilities(&d.scores, Some(&d.cluster)).unwrap();
        let pg = g.probabilities(&shifted.scores, Some(&shifted.cluster)).unwrap();
        let worst = pf.iter().zip(&pg).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn permuted_copy_is_rejected() {
        let mut rejected = 0;
        for seed in 0..20 {
            let mut d = simulate(100 + seed, 1500, 10, -1.0, &[1.0, 0.0], &[1.0, 1.0], 0.2);
            let mut rng = rng_stream(seed, 1);
            let mut col: Vec<f64> = d.scores.column(0).iter().copied().collect();
            col.shuffle(&mut rng);
            d.scores.set_column(1, &DVector::from_vec(col));
            let s = nested_selection(&d, &[0, 1], 0.05, &GlmmOptions::default()).unwrap();
            assert_eq!(s.fit.dims[0], 0);
            if !s.fit.dims.contains(&1) {
                rejected += 1;
            }
        }
        assert!(rejected >= 17, "{rejected}");
    }

    #[test]
    fn calibration_edges() {
        let probs = [0.1, 0.2, 0.3, 0.4, 0.9, 0.8];
        let labels = [false, false, false, false, true, true];
        let c = calibrate_scores(&probs, &labels, 1.0).unwrap();
        assert!(c.cutoff > 0.4 && c.cutoff < 0.8);
        assert_eq!(c.sensitivity, 1.0);
        assert!(calibrate_scores(&[0.5; 4], &[false, false, true, false], 0.9).is_err());
    }

    #[test]
    fn gaussian_cutoff_matches_quantile() {
        let mut rng = rng_stream(7, 0);
        let neg: Vec<f64> = (0..50_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let pos: Vec<f64> = (0..5_000).map(|_| 1.5 + rng.sample::<f64, _>(StandardNormal)).collect();
        let scores: Vec<f64> = neg.iter().chain(&pos).copied().collect();
        let labels: Vec<bool> = (0..scores.len()).map(|i| i >= neg.len()).collect();
        let c = calibrate_scores(&scores, &labels, 0.95).unwrap();
        assert!((c.cutoff - 1.644_853_6).abs() < 0.01, "{}", c.cutoff);
        let sens = 1.0 - Normal::new(1.5, 1.0).unwrap().cdf(1.644_853_6);
        assert!((c.sensitivity - sens).abs() < 0.02);
    }

    #[test]
    fn prediction_edges() {
        let d = simulate(8, 400, 4, -1.0, &[0.5], &[1.0], 0.2);
        let f = fit(&d, &[0], &GlmmOptions::default()).unwrap();
        let cal = calibrate_threshold(&f, &d, 0.8).unwrap();
        let empty = predict(&f, &DMatrix::zeros(0, 1), &cal).unwrap();
        assert!(empty.sold.is_empty());
        let zeros = predict(&f, &DMatrix::zeros(3, 1), &cal).unwrap();
        for p in &zeros.probabilities {
            assert!((p - logistic(f.intercept())).abs() < 1e-15);
        }
        assert!(matches!(predict(&f, &DMatrix::zeros(3, 0), &cal), Err(GlmmError::Schema(_))));
    }

    #[test]
    fn auc_is_rank_invariant() {
        let d = simulate(9, 500, 5, -0.5, &[1.0], &[1.0], 0.0);
        let f = fit(&d, &[0], &GlmmOptions::default()).unwrap();
        let p = f.probabilities(&d.scores, None).unwrap();
        let a = stats::roc_auc(&p, &d.sold).unwrap().auc;
        let t: Vec<f64> = p.iter().map(|v| (v * 7.0).exp()).collect();
        assert_eq!(a, stats::roc_auc(&t, &d.sold).unwrap().auc);
    }
}
