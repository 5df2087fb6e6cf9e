//! Discrete Schrödinger-bridge chain: schedule, Gaussian bridge sampling,
//! chain construction, and an entropic OT solver used as a reference.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::networks::Generator;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    /// Number of chain steps M.
    pub steps: usize,
    /// Bridge diffusion variance.
    pub tau: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self { steps: 5, tau: 0.01 }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("bridge needs at least one step".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// `t_i = i / M`.
    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }
}

/// Draws from `N(s X_1 + (1-s) X_t0, s (1-s) tau (1-t0) I)` with
/// `s = (t - t0) / (1 - t0)`. Exact (no draw) at both endpoints.
pub fn interpolate<R: Rng + ?Sized>(
    x_t0: &Tensor,
    x_1: &Tensor,
    t0: f64,
    t: f64,
    tau: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if !(t0 < 1.0) || !(t0 <= t) || !(t <= 1.0) {
        return Err(Error::Schedule(format!(
            "need t0 <= t <= 1 and t0 < 1, got t0={t0}, t={t}"
        )));
    }
    if x_t0.shape() != x_1.shape() {
        return Err(Error::Shape(format!(
            "bridge endpoints differ in shape: {:?} vs {:?}",
            x_t0.shape(),
            x_1.shape()
        )));
    }
    if t == t0 {
        return Ok(x_t0.clone());
    }
    if t == 1.0 {
        return Ok(x_1.clone());
    }
    let s = (t - t0) / (1.0 - t0);
    let std = (s * (1.0 - s) * tau * (1.0 - t0)).sqrt();
    let data = x_t0
        .data()
        .iter()
        .zip(x_1.data())
        .map(|(&a, &b)| {
            let n: f64 = StandardNormal.sample(rng);
            a + s * (b - a) + std * n
        })
        .collect();
    Ok(Tensor::new(x_t0.shape(), data))
}

/// Anything that maps `(X_t, step, z)` to a target-domain prediction.
pub trait EndpointPredictor {
    fn latent_dim(&self) -> usize;
    fn predict(&self, x_t: &Tensor, t_i: usize, z: &Tensor) -> Result<Tensor>;
}

impl EndpointPredictor for Generator {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn predict(&self, x_t: &Tensor, t_i: usize, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let p = self.bind(&tape, false);
        let out = self.generate(&p, tape.constant(x_t.clone()), t_i, tape.constant(z.clone()))?;
        let x1 = (*out.x1.value()).clone();
        Ok(x1)
    }
}

pub fn sample_latent<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[dim], 1.0, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeState {
    pub x: Tensor,
    pub step: usize,
    /// Generator predictions made while building the chain, one per step.
    pub history: Vec<Tensor>,
}

/// Builds `X_{t_i}` from `x_source` by alternating prediction and bridge
/// sampling. Runs without gradient tracking.
pub fn sample_chain<G: EndpointPredictor + ?Sized, R: Rng + ?Sized>(
    gen: &G,
    x_source: &Tensor,
    target_step: usize,
    cfg: &BridgeConfig,
    rng: &mut R,
) -> Result<BridgeState> {
    if target_step >= cfg.steps {
        return Err(Error::Schedule(format!(
            "target step {target_step} outside 0..{}",
            cfg.steps
        )));
    }
    let mut x = x_source.clone();
    let mut history = Vec::with_capacity(target_step);
    for j in 0..target_step {
        let z = sample_latent(gen.latent_dim(), rng);
        let x1 = gen.predict(&x, j, &z)?;
        x = interpolate(&x, &x1, cfg.time(j), cfg.time(j + 1), cfg.tau, rng)?;
        history.push(x1);
    }
    Ok(BridgeState {
        x,
        step: target_step,
        history,
    })
}

/// Runs the whole chain and returns the last prediction.
pub fn run_full_chain<G: EndpointPredictor + ?Sized, R: Rng + ?Sized>(
    gen: &G,
    x_source: &Tensor,
    cfg: &BridgeConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let last = cfg.steps - 1;
    let state = sample_chain(gen, x_source, last, cfg, rng)?;
    let z = sample_latent(gen.latent_dim(), rng);
    gen.predict(&state.x, last, &z)
}

#[derive(Clone, Debug)]
pub struct SinkhornResult {
    pub plan: DMatrix<f64>,
    pub iterations: usize,
    pub row_residual: f64,
    pub col_residual: f64,
}

fn check_distribution(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() || v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Config(format!("{name} must be non-empty and non-negative")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

fn log_sum_exp(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic OT between histograms `a` and `b`: minimises
/// `<P, C> - epsilon * H(P)` over couplings, in the log domain.
pub fn sinkhorn_plan(
    a: &[f64],
    b: &[f64],
    cost: &DMatrix<f64>,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornResult> {
    check_distribution("a", a)?;
    check_distribution("b", b)?;
    if cost.nrows() != a.len() || cost.ncols() != b.len() {
        return Err(Error::Shape(format!(
            "cost is {}x{}, marginals are {} and {}",
            cost.nrows(),
            cost.ncols(),
            a.len(),
            b.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let (n, m) = (a.len(), b.len());
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let plan_of = |f: &[f64], g: &[f64]| {
        DMatrix::from_fn(n, m, |i, j| {
            let v = (f[i] + g[j] - cost[(i, j)]) / epsilon;
            if v.is_nan() { 0.0 } else { v.exp() }
        })
    };
    let residuals = |p: &DMatrix<f64>| {
        let row: f64 = (0..n).map(|i| (p.row(i).sum() - a[i]).abs()).sum();
        let col: f64 = (0..m).map(|j| (p.column(j).sum() - b[j]).abs()).sum();
        (row, col)
    };
    let mut last = (f64::INFINITY, f64::INFINITY);
    for it in 1..=max_iter {
        for i in 0..n {
            f[i] = if a[i] == 0.0 {
                f64::NEG_INFINITY
            } else {
                epsilon * (log_a[i] - log_sum_exp((0..m).map(|j| (g[j] - cost[(i, j)]) / epsilon)))
            };
        }
        for j in 0..m {
            g[j] = if b[j] == 0.0 {
                f64::NEG_INFINITY
            } else {
                epsilon * (log_b[j] - log_sum_exp((0..n).map(|i| (f[i] - cost[(i, j)]) / epsilon)))
            };
        }
        let plan = plan_of(&f, &g);
        last = residuals(&plan);
        if last.0 <= tol && last.1 <= tol {
            return Ok(SinkhornResult {
                plan,
                iterations: it,
                row_residual: last.0,
                col_residual: last.1,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        row_residual: last.0,
        col_residual: last.1,
    })
}

/// `<P, C> - epsilon * H(P)` with `H(P) = -sum P log P`.
pub fn entropic_objective(plan: &DMatrix<f64>, cost: &DMatrix<f64>, epsilon: f64) -> f64 {
    plan.iter()
        .zip(cost.iter())
        .map(|(&p, &c)| p * c + if p > 0.0 { epsilon * p * p.ln() } else { 0.0 })
        .sum()
}
