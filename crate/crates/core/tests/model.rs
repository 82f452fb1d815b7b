mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uvae_autograd::Tensor;
use uvae_core::model::{ConvBlock, Model, ModelConfig};
use uvae_core::ImageTensor;

fn config(n: usize) -> ModelConfig {
    ModelConfig {
        num_layers: n,
        input_channels: 3,
        base_channels: 4,
        channel_growth: 1,
        latent_channels_per_layer: (1..=n).map(|l| l + 1).collect(),
        conv_block: ConvBlock { kernel: 3, count: 1 },
        ..Default::default()
    }
}

fn image(rng: &mut ChaCha8Rng, size: usize) -> ImageTensor {
    ImageTensor::from_fn(size, size, 3, |_, _, _| rng.random_range(0.0..1.0))
}

#[test]
fn shape_algebra_for_one_to_five_layers() {
    for n in 1..=5 {
        let model: Model<f32> = Model::new(config(n), 1).unwrap();
        let d = 1 << (n - 1);
        let (h, w) = (2 * d, 3 * d);
        let x = ImageTensor::filled(h, w, 3, 0.5);
        let z = model.encode_content(&x).unwrap();
        let zn = model.encode_degradation(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = model.sample_degradation_prior(h, w, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(z.layers.len(), n);
        assert_eq!(zn.layers.len(), n);
        for l in 1..=n {
            let expect = [1, l + 1, h >> (l - 1), w >> (l - 1)];
            assert_eq!(z.layers[l - 1].shape(), expect);
            assert_eq!(zn.layers[l - 1].sample.shape(), expect);
            assert_eq!(zn.layers[l - 1].mu_p.shape(), expect);
            assert_eq!(p.layers[l - 1].sample.shape(), expect);
        }
        assert_eq!(model.decode_clean(&z).unwrap().shape(), (h, w, 3));
        assert_eq!(model.decode_noisy(&z, &p).unwrap().shape(), (h, w, 3));
        if n > 1 {
            assert!(model.encode_content(&ImageTensor::filled(d + 1, d, 3, 0.5)).is_err());
        }
    }
}

#[test]
fn three_layers_on_64_pixels_give_64_32_16() {
    let model: Model<f32> = Model::new(ModelConfig { base_channels: 4, ..config(3) }, 2).unwrap();
    let z = model.encode_content(&ImageTensor::filled(64, 64, 3, 0.3)).unwrap();
    let sizes: Vec<usize> = z.layers.iter().map(|t| t.shape()[2]).collect();
    assert_eq!(sizes, [64, 32, 16]);
    for size in [64, 128] {
        let z = model.encode_content(&ImageTensor::filled(size, size, 3, 0.3)).unwrap();
        assert_eq!(model.decode_clean(&z).unwrap().shape(), (size, size, 3));
    }
}

#[test]
fn content_code_and_decoders_are_deterministic() {
    let model: Model<f32> = Model::new(config(3), 3).unwrap();
    let x = image(&mut ChaCha8Rng::seed_from_u64(1), 16);
    let a = model.encode_content(&x).unwrap();
    let b = model.encode_content(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(model.decode_clean(&a).unwrap(), model.decode_clean(&b).unwrap());
    let zn = model.encode_degradation(&x, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(model.decode_noisy(&a, &zn).unwrap(), model.decode_noisy(&a, &zn).unwrap());
}

#[test]
fn zero_parameters_give_zero_codes() {
    let model: Model<f64> = Model::zeros(config(3)).unwrap();
    let x = image(&mut ChaCha8Rng::seed_from_u64(2), 8);
    let z = model.encode_content(&x).unwrap();
    assert!(z.layers.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(model.decode_clean(&z).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn degradation_sampling_is_seeded() {
    let model: Model<f32> = Model::new(config(2), 5).unwrap();
    let x = image(&mut ChaCha8Rng::seed_from_u64(3), 8);
    let a = model.encode_degradation(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = model.encode_degradation(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let c = model.encode_degradation(&x, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.top_sample(), c.top_sample());
    let p = |s| model.sample_degradation_prior(8, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
    assert_eq!(p(7), p(7));
    assert_ne!(p(7).top_sample(), p(8).top_sample());
}

#[test]
fn clamped_log_sigma_collapses_sample_onto_mean() {
    let mut model: Model<f64> = Model::new(config(1), 6).unwrap();
    let id = model.params().lookup("posterior.log_sigma1.b").unwrap();
    let w = model.params().lookup("posterior.log_sigma1.w").unwrap();
    model.params_mut().get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = -1e3);
    let x = image(&mut ChaCha8Rng::seed_from_u64(4), 8);
    let d = model.encode_degradation(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let l = &d.layers[0];
    let mu = l.mu_q.as_ref().unwrap();
    assert!(l.log_sigma_q.as_ref().unwrap().data().iter().all(|&v| v == -10.0));
    for ((s, m), e) in l.sample.data().iter().zip(mu.data()).zip(l.eps.data()) {
        assert!((s - m).abs() <= (-10.0f64).exp() * e.abs() + 1e-15);
    }
}

#[test]
fn posterior_samples_match_their_moments() {
    let model: Model<f64> = Model::new(config(1), 7).unwrap();
    let x = image(&mut ChaCha8Rng::seed_from_u64(5), 2);
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let first = model.encode_degradation(&x, &mut rng).unwrap();
    let l = &first.layers[0];
    let (mu, ls) = (l.mu_q.clone().unwrap(), l.log_sigma_q.clone().unwrap());
    let n = mu.numel();
    let (mut s, mut s2) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..draws {
        let d = model.encode_degradation(&x, &mut rng).unwrap();
        for (i, &v) in d.layers[0].sample.data().iter().enumerate() {
            s[i] += v;
            s2[i] += v * v;
        }
    }
    for i in 0..n {
        let m = s[i] / draws as f64;
        let var = s2[i] / draws as f64 - m * m;
        let sigma = ls.data()[i].exp();
        assert!((m - mu.data()[i]).abs() < 3.0 * sigma / (draws as f64).sqrt(), "mean {i}");
        // Var of the sample variance of a Gaussian is 2σ⁴/(n−1).
        let se_var = sigma * sigma * (2.0 / (draws as f64 - 1.0)).sqrt();
        assert!((var - sigma * sigma).abs() < 3.0 * se_var, "variance {i}");
    }
}

#[test]
fn prior_at_temperature_zero_is_its_mean() {
    let model: Model<f64> = Model::new(config(3), 8).unwrap();
    let p = model.sample_degradation_prior(8, 8, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(p.layers[0].sample.data().iter().all(|&v| v == 0.0));
    for l in &p.layers {
        assert_eq!(l.sample, l.mu_p);
    }
}

#[test]
fn untrained_prior_is_standard_normal() {
    let model: Model<f64> = Model::new(config(2), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut per_layer = vec![(0.0f64, 0usize); 2];
    while per_layer[1].1 < 100_000 {
        let p = model.sample_prior_batch(16, 16, 16, 1.0, &mut rng).unwrap();
        for (acc, l) in per_layer.iter_mut().zip(&p.layers) {
            acc.0 += l.sample.data().iter().map(|v| v * v).sum::<f64>();
            acc.1 += l.sample.numel();
        }
    }
    for (ss, n) in per_layer {
        let std = (ss / n as f64).sqrt();
        assert!((std - 1.0).abs() < 0.01, "std {std} over {n} draws");
    }
}

#[test]
fn zero_prior_heads_at_temperature_zero_give_a_fixed_bias_path() {
    let model: Model<f32> = Model::new(config(2), 10).unwrap();
    let x = image(&mut ChaCha8Rng::seed_from_u64(6), 8);
    let z = model.encode_content(&x).unwrap();
    let a = model.sample_degradation_prior(8, 8, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = model.sample_degradation_prior(8, 8, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(model.decode_noisy(&z, &a).unwrap(), model.decode_noisy(&z, &b).unwrap());
}

#[test]
fn clean_and_noisy_paths_share_the_decoder() {
    let model: Model<f32> = Model::new(config(3), 11).unwrap();
    let clean = model.decode_clean_params();
    let noisy = model.decode_noisy_params();
    assert!(clean.is_subset(&noisy));
    let extra: Vec<&str> = noisy.difference(&clean).map(|&id| model.params().name(id)).collect();
    assert_eq!(extra, ["decoder.in_noise.w"]);
    assert!(model.content_encoder_params().is_disjoint(&model.degradation_encoder_params()));
    assert!(model.prior_params().is_subset(&model.degradation_encoder_params()));
    let all: usize = model.params().len();
    let used = clean
        .union(&noisy)
        .chain(model.content_encoder_params().iter())
        .chain(model.degradation_encoder_params().iter())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    assert_eq!(used, all);
}

#[test]
fn gradients_match_finite_differences() {
    let r = common::finite_difference_check(1);
    assert!(r.scalars > 500);
    assert!(r.worst_relative < 1e-3, "{} at {}", r.worst_relative, r.worst_name);
}

#[test]
fn batch_and_image_paths_agree() {
    let model: Model<f64> = Model::new(config(2), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let imgs = [image(&mut rng, 8), image(&mut rng, 8)];
    let t: Tensor<f64> = ImageTensor::batch_to_tensor(&imgs).unwrap();
    let zb = model.encode_content_batch(&t).unwrap();
    for (i, img) in imgs.iter().enumerate() {
        let z = model.encode_content(img).unwrap();
        assert_eq!(z.top(), &zb.top().batch_item(i).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn decoded_shape_matches_input(n in 1usize..4, a in 1usize..4, b in 1usize..4, seed in any::<u64>()) {
        let model: Model<f32> = Model::new(config(n), seed).unwrap();
        let d = 1 << (n - 1);
        let x = ImageTensor::filled(a * d, b * d, 3, 0.5);
        let z = model.encode_content(&x).unwrap();
        prop_assert_eq!(model.decode_clean(&z).unwrap().shape(), (a * d, b * d, 3));
    }
}
