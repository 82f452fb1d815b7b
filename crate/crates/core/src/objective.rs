//! Training objective: the negated sum of the clean and corrupted ELBOs.
//!
//! The content posterior is a delta and its prior uniform, so the content KL
//! is a constant `c` recorded as zero. What remains is two Gaussian
//! reconstruction terms and the hierarchical KL of the degradation latents,
//! the latter weighted by a linear warm-up.

use rand::Rng;
use serde::{Deserialize, Serialize};
use uvae_autograd::{kl_element, Gradients, Graph, Scalar, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Pixel values are multiplied by this before the unit-variance Gaussian
    /// likelihood is applied. 255 gives unit variance on the 8-bit scale.
    pub likelihood_scale: f64,
    /// Iterations over which the degradation KL weight ramps from 0 to 1.
    pub warmup: u64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { likelihood_scale: 255.0, warmup: 10_000 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.likelihood_scale > 0.0 && self.likelihood_scale.is_finite()) {
            return Err(CoreError::Config(format!("likelihood_scale must be positive, got {}", self.likelihood_scale)));
        }
        Ok(())
    }
}

/// Per-image loss components (batch means of per-image sums).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_clean: f64,
    pub recon_noisy: f64,
    pub kl_zn_per_layer: Vec<f64>,
    pub anneal_weight: f64,
    /// Content-path KL constant `c`; zero by convention, never differentiated.
    pub content_kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Assembles a breakdown with `total` computed from its parts.
    pub fn from_parts(recon_clean: f64, recon_noisy: f64, kl_zn_per_layer: Vec<f64>, anneal_weight: f64) -> Self {
        let mut b = Self { recon_clean, recon_noisy, kl_zn_per_layer, anneal_weight, content_kl: 0.0, total: 0.0 };
        b.total = b.recomputed_total();
        b
    }

    pub fn kl_total(&self) -> f64 {
        self.kl_zn_per_layer.iter().sum()
    }

    /// `½ recon_clean + ½ recon_noisy + β Σ kl`.
    pub fn recomputed_total(&self) -> f64 {
        0.5 * self.recon_clean + 0.5 * self.recon_noisy + self.anneal_weight * self.kl_total()
    }
}

/// One domain batch as seen by the objective.
///
/// `target` is the original image, `content_input` has been through the
/// pre-processor `h`, and `degradation_input` is what the degradation encoder
/// observes (raw by default).
#[derive(Clone, Debug)]
pub struct DomainInput<T> {
    pub target: Tensor<T>,
    pub content_input: Tensor<T>,
    pub degradation_input: Tensor<T>,
}

impl<T: Scalar> DomainInput<T> {
    /// No pre-processing: every path sees the same tensor.
    pub fn identity(batch: Tensor<T>) -> Self {
        Self { target: batch.clone(), content_input: batch.clone(), degradation_input: batch }
    }

    pub fn batch_size(&self) -> usize {
        self.target.shape()[0]
    }
}

/// Summed closed-form `KL(N(mu_q, σ_q²) ‖ N(mu_p, σ_p²))` over all elements,
/// with `σ = exp(log_sigma)`.
pub fn kl_gaussian_diag<T: Scalar>(
    mu_q: &Tensor<T>,
    log_sigma_q: &Tensor<T>,
    mu_p: &Tensor<T>,
    log_sigma_p: &Tensor<T>,
) -> Result<f64> {
    for t in [log_sigma_q, mu_p, log_sigma_p] {
        mu_q.check_same_shape(t)?;
    }
    let mut total = 0.0;
    for i in 0..mu_q.numel() {
        let args = [mu_q.data()[i], log_sigma_q.data()[i], mu_p.data()[i], log_sigma_p.data()[i]].map(T::as_f64);
        if args.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric { stage: "kl_gaussian_diag input", layer: 0 });
        }
        total += kl_element(args[0], args[1], args[2], args[3]);
    }
    if !total.is_finite() {
        return Err(CoreError::Numeric { stage: "kl_gaussian_diag", layer: 0 });
    }
    Ok(total)
}

/// Linear KL warm-up `min(1, iteration / warmup)`; `warmup = 0` disables it.
pub fn anneal_weight(iteration: i64, warmup: u64) -> Result<f64> {
    if iteration < 0 {
        return Err(CoreError::Argument(format!("iteration must be >= 0, got {iteration}")));
    }
    if warmup == 0 {
        return Ok(1.0);
    }
    Ok((iteration as f64 / warmup as f64).min(1.0))
}

/// `scale² ‖decoded − target‖²` summed over every element.
pub fn reconstruction_error<T: Scalar>(decoded: &Tensor<T>, target: &Tensor<T>, scale: f64) -> Result<f64> {
    decoded.check_same_shape(target)?;
    let sse: f64 = decoded
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(scale * scale * sse)
}

fn check_batch<T: Scalar>(input: &DomainInput<T>) -> Result<usize> {
    let b = input.target.dims4()?.0;
    input.target.check_same_shape(&input.content_input)?;
    input.target.check_same_shape(&input.degradation_input)?;
    if b == 0 {
        return Err(CoreError::Argument("empty batch".into()));
    }
    Ok(b)
}

/// Graph nodes of the clean-domain term: summed scaled squared error.
pub fn elbo_clean_graph<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, x: &DomainInput<T>, scale: f64) -> Result<Var> {
    let input = g.constant(x.content_input.clone());
    let z = model.content_graph(g, input)?;
    let decoded = model.decode_graph(g, *z.last().expect("at least one layer"), None)?;
    let sse = g.squared_error(decoded, &x.target)?;
    Ok(g.scale(sse, scale * scale))
}

/// Graph nodes of the corrupted-domain term: scaled squared error and one
/// summed KL per degradation layer.
pub fn elbo_noisy_graph<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    model: &Model<T>,
    y: &DomainInput<T>,
    scale: f64,
    rng: &mut R,
) -> Result<(Var, Vec<Var>)> {
    let content_in = g.constant(y.content_input.clone());
    let z = model.content_graph(g, content_in)?;
    let degr_in = g.constant(y.degradation_input.clone());
    let layers = model.posterior_graph(g, degr_in, rng)?;
    let mut kls = Vec::with_capacity(layers.len());
    for layer in &layers {
        let mq = layer.mu_q.expect("posterior statistics");
        let lq = layer.log_sigma_q.expect("posterior statistics");
        kls.push(g.kl_diag_gaussian(mq, lq, layer.mu_p, layer.log_sigma_p)?);
    }
    let zn = layers.last().expect("at least one layer").sample;
    let decoded = model.decode_graph(g, *z.last().expect("at least one layer"), Some(zn))?;
    let sse = g.squared_error(decoded, &y.target)?;
    Ok((g.scale(sse, scale * scale), kls))
}

fn scalar<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

/// Clean-domain fragment: only `recon_clean` is set; `total = ½ recon_clean`.
pub fn elbo_clean<T: Scalar>(model: &Model<T>, x: &DomainInput<T>, cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    let b = check_batch(x)? as f64;
    let mut g = Graph::new();
    let rc = elbo_clean_graph(&mut g, model, x, cfg.likelihood_scale)?;
    Ok(LossBreakdown::from_parts(scalar(&g, rc) / b, 0.0, Vec::new(), 0.0))
}

/// Corrupted-domain fragment with unit KL weight.
pub fn elbo_noisy<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    y: &DomainInput<T>,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let b = check_batch(y)? as f64;
    let mut g = Graph::new();
    let (rn, kls) = elbo_noisy_graph(&mut g, model, y, cfg.likelihood_scale, rng)?;
    let kls = kls.iter().map(|&k| scalar(&g, k) / b).collect();
    Ok(LossBreakdown::from_parts(0.0, scalar(&g, rn) / b, kls, 1.0))
}

/// Differentiable total loss together with its recorded graph.
pub struct LossGraph<T: Scalar> {
    pub graph: Graph<T>,
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

impl<T: Scalar> LossGraph<T> {
    pub fn gradients(&self) -> Result<Gradients<T>> {
        Ok(self.graph.backward(self.loss)?)
    }
}

/// `−(ELBO_x + ELBO_y)` for independent clean and corrupted batches, averaged
/// over the batch. The only randomness consumed is one standard normal draw
/// per degradation latent element, layer by layer.
pub fn total_loss<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    x: &DomainInput<T>,
    y: &DomainInput<T>,
    iteration: i64,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<LossGraph<T>> {
    let bx = check_batch(x)? as f64;
    let by = check_batch(y)? as f64;
    let beta = anneal_weight(iteration, cfg.warmup)?;
    let scale = cfg.likelihood_scale;

    let mut g = Graph::new();
    let rc = elbo_clean_graph(&mut g, model, x, scale)?;
    let (rn, kls) = elbo_noisy_graph(&mut g, model, y, scale, rng)?;

    let mut loss = g.scale(rc, 0.5 / bx);
    let rn_term = g.scale(rn, 0.5 / by);
    loss = g.add(loss, rn_term)?;
    for &k in &kls {
        let term = g.scale(k, beta / by);
        loss = g.add(loss, term)?;
    }

    let breakdown = LossBreakdown {
        recon_clean: scalar(&g, rc) / bx,
        recon_noisy: scalar(&g, rn) / by,
        kl_zn_per_layer: kls.iter().map(|&k| scalar(&g, k) / by).collect(),
        anneal_weight: beta,
        content_kl: 0.0,
        total: scalar(&g, loss),
    };
    if !breakdown.total.is_finite() {
        return Err(CoreError::Numeric { stage: "total loss", layer: 0 });
    }
    Ok(LossGraph { graph: g, loss, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        let z = Tensor::<f64>::zeros(&[1]);
        let one = Tensor::<f64>::full(&[1], 1.0);
        assert_eq!(kl_gaussian_diag(&one, &z, &one, &z).unwrap(), 0.0);
        assert!((kl_gaussian_diag(&one, &z, &z, &z).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_non_finite() {
        let z = Tensor::<f64>::zeros(&[2]);
        let bad = Tensor::from_vec(&[2], vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(kl_gaussian_diag(&bad, &z, &z, &z), Err(CoreError::Numeric { .. })));
    }

    #[test]
    fn anneal_examples() {
        assert_eq!(anneal_weight(0, 10_000).unwrap(), 0.0);
        assert_eq!(anneal_weight(5_000, 10_000).unwrap(), 0.5);
        assert_eq!(anneal_weight(10_000, 10_000).unwrap(), 1.0);
        assert_eq!(anneal_weight(1_000_000, 10_000).unwrap(), 1.0);
        assert!(anneal_weight(-1, 10_000).is_err());
    }

    #[test]
    fn recon_example_two_by_two() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let d = x.map(|v| v + 0.1);
        assert!((reconstruction_error(&d, &x, 1.0).unwrap() - 0.04).abs() < 1e-12);
        assert_eq!(reconstruction_error(&x, &x, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn recon_gradient_is_twice_residual() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let d = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![0.5, -0.2, 0.3, 1.0]).unwrap();
        let mut g = Graph::new();
        let dv = g.variable(d.clone());
        let l = g.squared_error(dv, &x).unwrap();
        let grads = g.backward(l).unwrap();
        let gd = grads.var(dv).unwrap();
        for i in 0..4 {
            assert!((gd.data()[i] - 2.0 * (d.data()[i] - x.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn breakdown_parts() {
        let b = LossBreakdown::from_parts(0.0, 0.0, vec![0.0, 0.0], 0.3);
        assert_eq!(b.total, 0.0);
        let b = LossBreakdown::from_parts(2.0, 4.0, vec![1.0, 3.0], 0.5);
        assert_eq!(b.total, 1.0 + 2.0 + 2.0);
        let b = LossBreakdown::from_parts(0.0, 1.5, vec![0.0, 0.0, 0.0], 1.0);
        assert!(b.kl_zn_per_layer.iter().all(|&k| k == 0.0) && b.total > 0.0);
    }
}
