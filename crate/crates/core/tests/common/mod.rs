//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uvae_autograd::Tensor;
use uvae_core::model::{ConvBlock, Model, ModelConfig};
use uvae_core::objective::{total_loss, DomainInput, ObjectiveConfig};

/// The miniature model used for gradient checks: two layers on 8x8 inputs.
pub fn mini_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        input_channels: 3,
        base_channels: 4,
        channel_growth: 1,
        latent_channels_per_layer: vec![2, 3],
        conv_block: ConvBlock { kernel: 3, count: 1 },
        ..Default::default()
    }
}

pub struct GradientCheck {
    pub scalars: usize,
    pub worst_relative: f64,
    pub worst_name: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Central finite differences against reverse-mode gradients of
/// `total_loss`, over every scalar of every parameter, in `f64`.
///
/// Parameters are perturbed away from their initial values first so that
/// zero-initialized heads also carry gradient to the layers below them.
/// The step is near the cube root of machine epsilon, which balances the
/// truncation error of central differences against rounding in the loss.
pub fn finite_difference_check(seed: u64) -> GradientCheck {
    finite_difference_check_with(seed, 1e-5)
}

pub fn finite_difference_check_with(seed: u64, h: f64) -> GradientCheck {
    let mut model: Model<f64> = Model::new(mini_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = model.params().ids().collect();
    for &id in &ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let batch = |rng: &mut ChaCha8Rng| Tensor::<f64>::from_fn(&[2, 3, 8, 8], |_| rng.random_range(0.0..1.0));
    let x = DomainInput::identity(batch(&mut rng));
    let mut y = DomainInput::identity(batch(&mut rng));
    y.content_input = y.content_input.map(|v| v + 0.05);
    let cfg = ObjectiveConfig { likelihood_scale: 4.0, warmup: 10 };
    let loss = |m: &Model<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        total_loss(m, &x, &y, 5, &cfg, &mut r).unwrap()
    };
    let lg = loss(&model);
    let grads = lg.gradients().unwrap();
    let (mut worst, mut worst_name, mut scalars) = (0.0f64, String::new(), 0);
    let (mut worst_analytic, mut worst_numeric) = (0.0, 0.0);
    for &id in &ids {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(model.params().get(id).shape()));
        for i in 0..analytic.numel() {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = loss(&model).breakdown.total;
            model.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = loss(&model).breakdown.total;
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            if rel > worst {
                worst = rel;
                worst_name = format!("{}[{i}]", model.params().name(id));
                (worst_analytic, worst_numeric) = (a, numeric);
            }
            scalars += 1;
        }
    }
    GradientCheck { scalars, worst_relative: worst, worst_name, worst_analytic, worst_numeric }
}
