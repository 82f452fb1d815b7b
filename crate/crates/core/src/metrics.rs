//! Image metrics, noise-distribution distances, two-sample tests and the
//! closed-form diagnostics of the inference-invariance argument.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use uvae_autograd::Scalar;

use crate::error::{CoreError, Result};
use crate::image::ImageTensor;
use crate::model::Model;
use crate::preprocess::{inject_gaussian, SigmaSpec};
use crate::rng::{derived_rng, derived_u64};

/// `10 log10(peak² / MSE)`; identical images give `+inf`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut t = [0.0; SSIM_WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM with an 11x11 Gaussian window (σ = 1.5), `C1 = (0.01 peak)²`,
/// `C2 = (0.03 peak)²`, computed per channel over valid windows and averaged.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::Dimension(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let taps = ssim_taps();
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data()[i * c + ch] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data()[i * c + ch] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let (ma, ..) = filter_valid(&pa, h, w, &taps);
        let (mb, ..) = filter_valid(&pb, h, w, &taps);
        let (saa, ..) = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let (sbb, ..) = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let (sab, ..) = filter_valid(&prod(&pa, &pb), h, w, &taps);
        let mut acc = 0.0;
        for i in 0..ma.len() {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cov = sab[i] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += acc / ma.len() as f64;
    }
    Ok(total / c as f64)
}

pub const AKLD_RANGE: f64 = 1.0;
pub const AKLD_SMOOTHING: f64 = 1e-8;

/// Smoothed histogram of values over `[-AKLD_RANGE, AKLD_RANGE]`; values
/// outside fall into the edge bins.
pub fn residual_histogram(values: impl Iterator<Item = f64>, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let width = 2.0 * AKLD_RANGE / bins as f64;
    for v in values {
        let i = ((v + AKLD_RANGE) / width).floor();
        let i = if i.is_nan() { 0 } else { (i.max(0.0) as usize).min(bins - 1) };
        h[i] += 1.0;
    }
    let total: f64 = h.iter().map(|c| c + AKLD_SMOOTHING).sum();
    h.iter().map(|c| (c + AKLD_SMOOTHING) / total).collect()
}

/// Discrete `KL(p ‖ q)` in nats.
pub fn discrete_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b).ln()).sum()
}

/// Average over images of `KL(real residual ‖ synthetic residual)`, where
/// residuals are taken against the shared clean reference and histogrammed
/// with `num_bins` bins.
pub fn akld(real: &[ImageTensor], synth: &[ImageTensor], clean: &[ImageTensor], num_bins: usize) -> Result<f64> {
    if real.is_empty() {
        return Err(CoreError::Argument("AKLD needs at least one image".into()));
    }
    if real.len() != synth.len() || real.len() != clean.len() {
        return Err(CoreError::Dimension(format!(
            "AKLD set sizes differ: {} real, {} synthetic, {} clean",
            real.len(),
            synth.len(),
            clean.len()
        )));
    }
    if num_bins == 0 {
        return Err(CoreError::Argument("AKLD needs at least one bin".into()));
    }
    Ok(akld_per_image(real, synth, clean, num_bins)?.iter().sum::<f64>() / real.len() as f64)
}

/// Per-image terms of [`akld`].
pub fn akld_per_image(
    real: &[ImageTensor],
    synth: &[ImageTensor],
    clean: &[ImageTensor],
    num_bins: usize,
) -> Result<Vec<f64>> {
    real.iter()
        .zip(synth)
        .zip(clean)
        .map(|((r, s), x)| {
            r.check_same_shape(x)?;
            s.check_same_shape(x)?;
            let resid = |img: &ImageTensor| {
                img.data().iter().zip(x.data()).map(|(&a, &b)| a as f64 - b as f64).collect::<Vec<_>>()
            };
            let p = residual_histogram(resid(r).into_iter(), num_bins);
            let q = residual_histogram(resid(s).into_iter(), num_bins);
            Ok(discrete_kl(&p, &q))
        })
        .collect()
}

/// Squared MMD estimate and the bandwidth it used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdValue {
    pub value: f64,
    pub bandwidth: f64,
    /// True when the median heuristic was degenerate and 1.0 was used.
    pub fallback: bool,
}

/// Pairwise squared distances and Gaussian-kernel matrix of a pooled sample.
struct PooledKernel {
    k: Vec<f64>,
    n: usize,
    bandwidth: f64,
    fallback: bool,
}

impl PooledKernel {
    fn new(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(CoreError::Argument("MMD needs non-empty sample sets".into()));
        }
        let dim = a[0].len();
        if a.iter().chain(b).any(|v| v.len() != dim) {
            return Err(CoreError::Dimension("MMD samples differ in feature dimension".into()));
        }
        let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
        let n = pooled.len();
        let mut d2 = vec![0.0; n * n];
        let mut dists = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let s: f64 = pooled[i].iter().zip(pooled[j]).map(|(x, y)| (x - y).powi(2)).sum();
                d2[i * n + j] = s;
                d2[j * n + i] = s;
                dists.push(s.sqrt());
            }
        }
        let median = median(&mut dists);
        let (bandwidth, fallback) = if median > 0.0 && median.is_finite() { (median, false) } else { (1.0, true) };
        let k = d2.iter().map(|&s| (-s / (2.0 * bandwidth * bandwidth)).exp()).collect();
        Ok(Self { k, n, bandwidth, fallback })
    }

    /// Biased MMD² for the split `first` (indices of set A) vs the rest.
    fn mmd(&self, in_a: &[bool]) -> f64 {
        let (mut kaa, mut kbb, mut kab) = (0.0, 0.0, 0.0);
        let na = in_a.iter().filter(|&&x| x).count() as f64;
        let nb = self.n as f64 - na;
        for i in 0..self.n {
            for j in 0..self.n {
                let v = self.k[i * self.n + j];
                match (in_a[i], in_a[j]) {
                    (true, true) => kaa += v,
                    (false, false) => kbb += v,
                    _ => kab += v,
                }
            }
        }
        // kab counted both (a, b) and (b, a)
        kaa / (na * na) + kbb / (nb * nb) - kab / (na * nb)
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Biased squared MMD with a Gaussian kernel whose bandwidth is the median
/// pairwise distance of the pooled sample.
pub fn mmd_gaussian(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<MmdValue> {
    let pk = PooledKernel::new(a, b)?;
    let split: Vec<bool> = (0..pk.n).map(|i| i < a.len()).collect();
    Ok(MmdValue { value: pk.mmd(&split), bandwidth: pk.bandwidth, fallback: pk.fallback })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: MmdValue,
    /// `(1 − alpha)` quantile of the permutation null.
    pub threshold: f64,
    pub p_value: f64,
    pub permutations: usize,
}

impl PermutationTest {
    pub fn rejects(&self) -> bool {
        self.statistic.value > self.threshold
    }
}

/// MMD permutation test. The pooled bandwidth is invariant to relabeling, so
/// the kernel matrix is computed once.
pub fn mmd_permutation_test(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    permutations: usize,
    alpha: f64,
    seed: u64,
) -> Result<PermutationTest> {
    if permutations == 0 || !(0.0..1.0).contains(&alpha) {
        return Err(CoreError::Argument("permutation test needs permutations > 0 and alpha in (0, 1)".into()));
    }
    let pk = PooledKernel::new(a, b)?;
    let split: Vec<bool> = (0..pk.n).map(|i| i < a.len()).collect();
    let stat = pk.mmd(&split);
    let mut rng = derived_rng(seed, "mmd_permutation", 0);
    let mut labels = split.clone();
    let mut null: Vec<f64> = (0..permutations)
        .map(|_| {
            labels.shuffle(&mut rng);
            pk.mmd(&labels)
        })
        .collect();
    let exceed = null.iter().filter(|&&v| v >= stat).count();
    null.sort_by(f64::total_cmp);
    let idx = (((1.0 - alpha) * permutations as f64).ceil() as usize).clamp(1, permutations) - 1;
    Ok(PermutationTest {
        statistic: MmdValue { value: stat, bandwidth: pk.bandwidth, fallback: pk.fallback },
        threshold: null[idx],
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceConfig {
    pub crop: usize,
    pub draws: usize,
    pub sigma_x: SigmaSpec,
    pub sigma_y: SigmaSpec,
    pub permutations: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            crop: 128,
            draws: 10,
            sigma_x: SigmaSpec::Fixed(15.0),
            sigma_y: SigmaSpec::Fixed(10.0),
            permutations: 500,
            alpha: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub per_image: Vec<PermutationTest>,
    pub mean_mmd: f64,
    /// Mean of the per-image permutation thresholds: the MMD expected when
    /// both code sets come from one distribution.
    pub mean_baseline: f64,
}

impl InvarianceReport {
    pub fn exceeds_baseline(&self) -> bool {
        self.mean_mmd > self.mean_baseline
    }
}

/// Content-code invariance between paired clean and corrupted images.
///
/// For each pair, both images are center-cropped, `draws` codes `z^N` are
/// drawn from `encode_content(h(x))` and from `encode_content(h(y))` with
/// fresh pre-processing noise, and their MMD is compared with its
/// permutation null.
pub fn invariance_mmd_protocol<T: Scalar>(
    model: &Model<T>,
    pairs: &[(ImageTensor, ImageTensor)],
    cfg: &InvarianceConfig,
) -> Result<InvarianceReport> {
    if pairs.is_empty() {
        return Err(CoreError::Argument("invariance protocol needs at least one pair".into()));
    }
    if cfg.draws == 0 {
        return Err(CoreError::Argument("draws must be at least 1".into()));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    for (i, (x, y)) in pairs.iter().enumerate() {
        x.check_same_shape(y)?;
        let (xc, yc) = (x.center_crop(cfg.crop)?, y.center_crop(cfg.crop)?);
        let mut rng = derived_rng(cfg.seed, "invariance", i as u64);
        let mut codes = |img: &ImageTensor, sigma: &SigmaSpec| -> Result<Vec<Vec<f64>>> {
            (0..cfg.draws)
                .map(|_| {
                    let s = sigma.sample(&mut rng);
                    let h = inject_gaussian(img, s, &mut rng)?;
                    let z = model.encode_content(&h)?;
                    Ok(z.top().data().iter().map(|v| v.as_f64()).collect())
                })
                .collect()
        };
        let zx = codes(&xc, &cfg.sigma_x)?;
        let zy = codes(&yc, &cfg.sigma_y)?;
        let perm_seed = derived_u64(cfg.seed, "invariance_perm", i as u64);
        per_image.push(mmd_permutation_test(&zx, &zy, cfg.permutations, cfg.alpha, perm_seed)?);
    }
    let n = per_image.len() as f64;
    let mean_mmd = per_image.iter().map(|t| t.statistic.value).sum::<f64>() / n;
    let mean_baseline = per_image.iter().map(|t| t.threshold).sum::<f64>() / n;
    Ok(InvarianceReport { per_image, mean_mmd, mean_baseline })
}

/// `KL(N(n, σy² I_K) ‖ N(0, σx² I_K))`
/// `= K ln(σx/σy) − K/2 + K σy²/(2σx²) + ‖n‖²/(2σx²)`.
pub fn inference_gap_kl(sigma_x: f64, sigma_y: f64, n: &[f64], k: usize) -> Result<f64> {
    if !(sigma_x > 0.0 && sigma_y > 0.0) {
        return Err(CoreError::Argument(format!("sigmas must be positive, got {sigma_x}, {sigma_y}")));
    }
    if k == 0 || n.len() != k {
        return Err(CoreError::Dimension(format!("shift has {} entries for K = {k}", n.len())));
    }
    let kf = k as f64;
    let n2: f64 = n.iter().map(|v| v * v).sum();
    let r2 = (sigma_y / sigma_x).powi(2);
    // K ln(σx/σy) − K/2 + K r²/2, written as K/2 (r² − 1 − ln r²) to stay exact at r = 1
    let shape = 0.5 * kf * (r2 - 1.0 - r2.ln());
    Ok(shape.max(0.0) + n2 / (2.0 * sigma_x * sigma_x))
}

/// L1 bound `sqrt(2 ln 2 · D)` from a KL given in nats.
///
/// The inequality holds with `D` in bits, so the nats value is converted
/// first; the result equals `sqrt(2 · kl)`.
pub fn inference_gap_l1_bound(kl: f64) -> Result<f64> {
    if !(kl >= 0.0) {
        return Err(CoreError::Argument(format!("KL must be >= 0, got {kl}")));
    }
    let ln2 = std::f64::consts::LN_2;
    let kl_bits = kl / ln2;
    Ok((2.0 * ln2 * kl_bits).sqrt())
}

/// Flow-based joint model with an affine flow `f(v) = A v + c`:
/// `f(x) ~ N(0, I)` and `f(y) = f(x) + u`, `u ~ N(mu_u, Sigma_u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeFlowToyInstance {
    pub flow_matrix: DMatrix<f64>,
    pub flow_offset: DVector<f64>,
    pub mu_u: DVector<f64>,
    pub sigma_u: DMatrix<f64>,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

impl DeFlowToyInstance {
    /// Identity flow.
    pub fn identity(mu_u: DVector<f64>, sigma_u: DMatrix<f64>, x: DVector<f64>, y: DVector<f64>) -> Self {
        let k = mu_u.len();
        Self { flow_matrix: DMatrix::identity(k, k), flow_offset: DVector::zeros(k), mu_u, sigma_u, x, y }
    }

    fn dim(&self) -> usize {
        self.mu_u.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dim();
        let sizes = [self.flow_offset.len(), self.x.len(), self.y.len()];
        if k == 0
            || self.flow_matrix.shape() != (k, k)
            || self.sigma_u.shape() != (k, k)
            || sizes.iter().any(|&s| s != k)
        {
            return Err(CoreError::Dimension(format!("inconsistent dimensions for K = {k}")));
        }
        if (&self.sigma_u - self.sigma_u.transpose()).amax() > 1e-12 * self.sigma_u.amax().max(1.0) {
            return Err(CoreError::Argument("Sigma_u must be symmetric".into()));
        }
        if self.sigma_u.clone().cholesky().is_none() {
            return Err(CoreError::Argument("Sigma_u must be positive definite".into()));
        }
        if self.flow_matrix.determinant().abs() < 1e-300 {
            return Err(CoreError::Argument("flow matrix must be invertible".into()));
        }
        Ok(())
    }
}

/// Terms of the joint log-likelihood of a [`DeFlowToyInstance`].
///
/// With `a = f(x)`, `b = f(y)` and `L = log|det A|`, the exact identity is
/// `joint = [log N(a; 0, I) + L] + [log N(b; μ, Σ) + L] + log N(a; −μ, Σ)
///  + aᵀΣ⁻¹b + ½ log((2π)^K det Σ) + ½ μᵀΣ⁻¹μ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeFlowReport {
    /// Direct `2K`-dimensional Gaussian density with the Jacobian factor.
    pub joint: f64,
    pub x_marginal: f64,
    pub y_term: f64,
    pub x_shift_term: f64,
    /// `aᵀ Σ⁻¹ b`, the term that needs paired samples.
    pub cross_term: f64,
    pub constant: f64,
    pub decomposition_sum: f64,
    pub residual: f64,
    /// True marginal `log p(y) = log N(b; μ, I + Σ) + L`.
    pub y_marginal: f64,
    /// `log p(x) + log p(y)`, all a marginal-only objective can see.
    pub marginal_only: f64,
    /// `joint − marginal_only`, the pairing-dependent remainder.
    pub pairing_term: f64,
    /// The same terms with `log N(b; μ, I + Σ)` in place of `log N(b; μ, Σ)`
    /// and `−½ μᵀΣ⁻¹μ` in place of `+½ μᵀΣ⁻¹μ`. Not an identity in general.
    pub marginal_variant_sum: f64,
}

fn log_normal(v: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cov.clone().cholesky().ok_or_else(|| CoreError::Argument("covariance not positive definite".into()))?;
    let d = v - mean;
    let sol = chol.solve(&d);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let k = v.len() as f64;
    Ok(-0.5 * (d.dot(&sol) + logdet + k * (2.0 * std::f64::consts::PI).ln()))
}

pub fn deflow_decomposition_check(inst: &DeFlowToyInstance) -> Result<DeFlowReport> {
    inst.validate()?;
    let k = inst.dim();
    let a = &inst.flow_matrix * &inst.x + &inst.flow_offset;
    let b = &inst.flow_matrix * &inst.y + &inst.flow_offset;
    let ld = inst.flow_matrix.determinant().abs().ln();
    let (mu, sigma) = (&inst.mu_u, &inst.sigma_u);
    let eye = DMatrix::<f64>::identity(k, k);

    let mut joint_mean = DVector::zeros(2 * k);
    joint_mean.rows_mut(k, k).copy_from(mu);
    let mut joint_cov = DMatrix::zeros(2 * k, 2 * k);
    joint_cov.view_mut((0, 0), (k, k)).copy_from(&eye);
    joint_cov.view_mut((0, k), (k, k)).copy_from(&eye);
    joint_cov.view_mut((k, 0), (k, k)).copy_from(&eye);
    joint_cov.view_mut((k, k), (k, k)).copy_from(&(&eye + sigma));
    let mut ab = DVector::zeros(2 * k);
    ab.rows_mut(0, k).copy_from(&a);
    ab.rows_mut(k, k).copy_from(&b);
    let joint = log_normal(&ab, &joint_mean, &joint_cov)? + 2.0 * ld;

    let chol = sigma.clone().cholesky().ok_or_else(|| CoreError::Argument("Sigma_u not positive definite".into()))?;
    let sinv_b = chol.solve(&b);
    let sinv_mu = chol.solve(mu);
    let logdet_sigma: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let zeros = DVector::zeros(k);

    let x_marginal = log_normal(&a, &zeros, &eye)? + ld;
    let y_term = log_normal(&b, mu, sigma)? + ld;
    let x_shift_term = log_normal(&a, &(-mu), sigma)?;
    let cross_term = a.dot(&sinv_b);
    let half_log_norm = 0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + logdet_sigma);
    let mu_quad = mu.dot(&sinv_mu);
    let constant = half_log_norm + 0.5 * mu_quad;
    let decomposition_sum = x_marginal + y_term + x_shift_term + cross_term + constant;

    let y_marginal = log_normal(&b, mu, &(&eye + sigma))? + ld;
    let marginal_only = x_marginal + y_marginal;
    let marginal_variant_sum = x_marginal + y_marginal + x_shift_term + cross_term + half_log_norm - 0.5 * mu_quad;
    Ok(DeFlowReport {
        joint,
        x_marginal,
        y_term,
        x_shift_term,
        cross_term,
        constant,
        decomposition_sum,
        residual: joint - decomposition_sum,
        y_marginal,
        marginal_only,
        pairing_term: joint - marginal_only,
        marginal_variant_sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = ImageTensor::filled(4, 4, 3, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn ssim_identity_and_negative() {
        let a = ImageTensor::from_fn(16, 16, 1, |y, x, _| if (y / 4 + x / 4) % 2 == 0 { 0.9 } else { 0.1 });
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &a.map(|v| 1.0 - v), 1.0).unwrap() < 0.0);
        assert!(ssim(&ImageTensor::filled(8, 8, 1, 0.0), &ImageTensor::filled(8, 8, 1, 0.0), 1.0).is_err());
    }

    #[test]
    fn akld_self_is_zero() {
        let x = ImageTensor::filled(8, 8, 1, 0.5);
        let y = ImageTensor::from_fn(8, 8, 1, |i, j, _| 0.5 + ((i * 8 + j) % 5) as f32 * 0.01);
        assert!(akld(&[y.clone()], &[y], &[x], 256).unwrap() < 1e-6);
    }

    #[test]
    fn mmd_identical_sets() {
        let a: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 0.5 * i as f64]).collect();
        let m = mmd_gaussian(&a, &a).unwrap();
        assert!(m.value.abs() < 1e-12);
        let same: Vec<Vec<f64>> = vec![vec![1.0]; 3];
        assert!(mmd_gaussian(&same, &same).unwrap().fallback);
    }

    #[test]
    fn gap_kl_examples() {
        assert_eq!(inference_gap_kl(3.0, 3.0, &[0.0, 0.0], 2).unwrap(), 0.0);
        let v = inference_gap_kl(2.0, 1.0, &[0.0], 1).unwrap();
        assert!((v - (2f64.ln() - 0.5 + 0.125)).abs() < 1e-12);
        assert!(inference_gap_kl(0.0, 1.0, &[0.0], 1).is_err());
        assert_eq!(inference_gap_l1_bound(0.0).unwrap(), 0.0);
        assert!(inference_gap_l1_bound(-1.0).is_err());
    }

    #[test]
    fn deflow_unit_case() {
        let one = DVector::from_element(1, 0.0);
        let inst = DeFlowToyInstance::identity(one.clone(), DMatrix::identity(1, 1), one.clone(), one);
        let r = deflow_decomposition_check(&inst).unwrap();
        assert!((r.joint + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!(r.residual.abs() < 1e-12);
        assert_eq!(r.cross_term, 0.0);
    }

    #[test]
    fn deflow_rejects_non_pd() {
        let z = DVector::from_element(1, 0.0);
        let inst = DeFlowToyInstance::identity(z.clone(), DMatrix::from_element(1, 1, -1.0), z.clone(), z);
        assert!(deflow_decomposition_check(&inst).is_err());
    }
}
