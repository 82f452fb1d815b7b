//! Analytic self-checks of the inference-gap and flow-decomposition results.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{deflow_decomposition_check, inference_gap_kl, inference_gap_l1_bound, DeFlowToyInstance};

pub const IDENTITY_TOLERANCE: f64 = 1e-12;
pub const DEFLOW_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub shift_norm: f64,
    pub kl: f64,
    pub l1_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub checks: Vec<Check>,
    pub sweep: Vec<SweepRow>,
}

impl DiagnoseReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnoseConfig {
    pub seed: u64,
    pub identity_cases: usize,
    pub l1_cases: usize,
    pub deflow_cases: usize,
    /// Noise levels of the diagonal sweep.
    pub sweep_sigmas: Vec<f64>,
    pub sweep_shift: f64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            identity_cases: 100,
            l1_cases: 50,
            deflow_cases: 100,
            sweep_sigmas: vec![0.5, 1.0, 2.0, 5.0, 10.0, 15.0, 25.0, 50.0, 100.0, 1e3, 1e6],
            sweep_shift: 1.0,
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Random well-conditioned affine-flow instance of dimension `k`.
pub fn random_deflow_instance<R: Rng + ?Sized>(k: usize, rng: &mut R) -> DeFlowToyInstance {
    let a = DMatrix::from_fn(k, k, |i, j| f64::from(u8::from(i == j)) + 0.3 * normal(rng));
    let b = DMatrix::from_fn(k, k, |_, _| normal(rng));
    let sigma = &b * b.transpose() + DMatrix::identity(k, k) * 0.5;
    let v = |rng: &mut R| DVector::from_fn(k, |_, _| normal(rng));
    DeFlowToyInstance { flow_matrix: a, flow_offset: v(rng), mu_u: v(rng), sigma_u: sigma, x: v(rng), y: v(rng) }
}

fn gauss_pdf(v: f64, mean: f64, sd: f64) -> f64 {
    let z = (v - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// `∫ |N(v; n, σy²) − N(v; 0, σx²)| dv` by composite Simpson over ±14 standard deviations.
pub fn l1_distance_1d(sigma_x: f64, sigma_y: f64, n: f64) -> f64 {
    let s = sigma_x.max(sigma_y);
    let (lo, hi) = ((-14.0 * s).min(n - 14.0 * s), (14.0 * s).max(n + 14.0 * s));
    let m = 200_000;
    let h = (hi - lo) / m as f64;
    let f = |v: f64| (gauss_pdf(v, n, sigma_y) - gauss_pdf(v, 0.0, sigma_x)).abs();
    let mut acc = f(lo) + f(hi);
    for i in 1..m {
        acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.into(), passed, detail }
}

pub fn run_diagnostics(cfg: &DiagnoseConfig) -> Result<DiagnoseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..cfg.identity_cases {
        let k = rng.random_range(1..=8);
        let sigma = rng.random_range(0.1..100.0);
        let n: Vec<f64> = (0..k).map(|_| normal(&mut rng) * sigma).collect();
        let expect = n.iter().map(|v| v * v).sum::<f64>() / (2.0 * sigma * sigma);
        let got = inference_gap_kl(sigma, sigma, &n, k)?;
        let rel = if expect == 0.0 { got.abs() } else { ((got - expect) / expect).abs() };
        worst = worst.max(rel);
    }
    checks.push(check(
        "gap KL at equal levels equals |n|^2/(2 sigma^2)",
        worst <= IDENTITY_TOLERANCE,
        format!("max relative error {worst:.3e} over {} cases", cfg.identity_cases),
    ));

    let mut sweep = Vec::new();
    for &s in &cfg.sweep_sigmas {
        let kl = inference_gap_kl(s, s, &[cfg.sweep_shift], 1)?;
        sweep.push(SweepRow {
            sigma_x: s,
            sigma_y: s,
            shift_norm: cfg.sweep_shift,
            kl,
            l1_bound: inference_gap_l1_bound(kl)?,
        });
    }
    let monotone = sweep.windows(2).all(|w| w[1].kl < w[0].kl);
    checks.push(check(
        "gap KL decreases along the diagonal",
        monotone,
        format!("{} levels, shift {}", sweep.len(), cfg.sweep_shift),
    ));
    let last = sweep.last().map_or(f64::INFINITY, |r| r.kl);
    checks.push(check(
        "gap KL vanishes as the level grows",
        last < 1e-9,
        format!("value {last:.3e} at the largest level"),
    ));

    let mut min_margin = f64::INFINITY;
    for _ in 0..cfg.l1_cases {
        let sx = rng.random_range(0.2..5.0);
        let sy = rng.random_range(0.2..5.0);
        let n = normal(&mut rng) * 2.0;
        let bound = inference_gap_l1_bound(inference_gap_kl(sx, sy, &[n], 1)?)?;
        min_margin = min_margin.min(bound - l1_distance_1d(sx, sy, n));
    }
    checks.push(check(
        "L1 bound dominates the integrated L1 distance",
        min_margin >= 0.0,
        format!("smallest margin {min_margin:.3e} over {} cases", cfg.l1_cases),
    ));

    let (mut max_res, mut cross_ok) = (0.0f64, true);
    for _ in 0..cfg.deflow_cases {
        let k = rng.random_range(1..=4);
        let inst = random_deflow_instance(k, &mut rng);
        let r = deflow_decomposition_check(&inst)?;
        max_res = max_res.max(r.residual.abs());
        cross_ok &= r.cross_term != 0.0;
    }
    checks.push(check(
        "flow joint equals its decomposition",
        max_res <= DEFLOW_TOLERANCE,
        format!("max residual {max_res:.3e} over {} instances", cfg.deflow_cases),
    ));
    checks.push(check("pairing cross term is nonzero", cross_ok, format!("{} instances", cfg.deflow_cases)));
    Ok(DiagnoseReport { checks, sweep })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_of_identical_gaussians_is_zero_and_disjoint_is_two() {
        assert!(l1_distance_1d(1.0, 1.0, 0.0) < 1e-12);
        assert!((l1_distance_1d(0.5, 0.5, 40.0) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn default_battery_passes() {
        let r = run_diagnostics(&DiagnoseConfig { l1_cases: 5, ..Default::default() }).unwrap();
        assert!(r.all_passed(), "{:?}", r.checks);
    }
}
