//! Training loop, checkpoints, synthesis and evaluation on tiny on-disk data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uvae_core::checkpoint::Checkpoint;
use uvae_core::config::{DataConfig, RunConfig};
use uvae_core::data::batch_at;
use uvae_core::data::{DatasetItem, UnpairedDataset};
use uvae_core::evaluate::{evaluate_model, evaluate_synthetic, load_paired_folder, load_pairs};
use uvae_core::model::{ConvBlock, Model, ModelConfig};
use uvae_core::objective::ObjectiveConfig;
use uvae_core::optim::{Adam, OptimizerConfig};
use uvae_core::preprocess::{SigmaSpec, TaskConfig};
use uvae_core::synthesis::{build_paired_dataset, generate_c2n, Method, OutputFormat, SynthesisConfig};
use uvae_core::toy::{write_toy_dataset, NoiseModel};
use uvae_core::train::{
    final_checkpoint_path, metrics_path, read_metrics, run_training, train_step, StepConfig, TrainOptions,
};
use uvae_core::{CoreError, ImageTensor};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        input_channels: 3,
        base_channels: 4,
        channel_growth: 1,
        latent_channels_per_layer: vec![2, 2],
        conv_block: ConvBlock { kernel: 3, count: 1 },
        ..Default::default()
    }
}

fn toy_config(root: &Path, iters: u64) -> RunConfig {
    write_toy_dataset(root, 3, 6, 3, 16, 3, NoiseModel::Gaussian { sigma: 25.0 }).unwrap();
    RunConfig {
        model: tiny_model(),
        task: TaskConfig::default(),
        objective: ObjectiveConfig { likelihood_scale: 255.0, warmup: 10 },
        data: DataConfig {
            clean: root.join("clean"),
            corrupted: root.join("noisy"),
            crop: 8,
            batch: 2,
            workers: 2,
            prefetch: 2,
        },
        optimizer: OptimizerConfig { halve_at: vec![5], total_iters: iters, ..Default::default() },
        seed: 9,
        checkpoint_every: 3,
        eval_every: 2,
    }
}

fn strict(out: &Path) -> TrainOptions {
    TrainOptions { out_dir: out.to_path_buf(), strict_determinism: true, resume: None }
}

#[test]
fn smoke_run_logs_schedule_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(&tmp.path().join("data"), 10);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_training::<f32>(&cfg, &strict(&a), |_| {}).unwrap();
    run_training::<f32>(&cfg, &strict(&b), |_| {}).unwrap();
    let log = read_metrics(&metrics_path(&a)).unwrap();
    assert_eq!(log.len(), 10);
    for (i, r) in log.iter().enumerate() {
        assert_eq!(r.iteration, i as u64);
        assert_eq!(r.lr, if i < 5 { 1e-4 } else { 5e-5 });
        assert_eq!(r.anneal_weight, i as f64 / 10.0);
        assert!(
            (r.recon_clean / 2.0 + r.recon_noisy / 2.0 + r.anneal_weight * r.kl_total - r.total).abs() < 1e-3 * r.total
        );
    }
    assert_eq!(std::fs::read(metrics_path(&a)).unwrap(), std::fs::read(metrics_path(&b)).unwrap());
    assert_eq!(std::fs::read(final_checkpoint_path(&a)).unwrap(), std::fs::read(final_checkpoint_path(&b)).unwrap());
    for name in ["iter_00000003.ckpt", "iter_00000006.ckpt", "iter_00000009.ckpt"] {
        assert!(a.join("checkpoints").join(name).is_file(), "{name}");
    }
    assert_eq!(std::fs::read_to_string(a.join("eval.jsonl")).unwrap().lines().count(), 5);
}

#[test]
fn resuming_continues_the_same_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(&tmp.path().join("data"), 6);
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    run_training::<f32>(&cfg, &strict(&full), |_| {}).unwrap();
    run_training::<f32>(
        &RunConfig { optimizer: OptimizerConfig { total_iters: 3, ..cfg.optimizer.clone() }, ..cfg.clone() },
        &strict(&part),
        |_| {},
    )
    .unwrap();
    let resume = part.join("checkpoints/iter_00000003.ckpt");
    let outcome = run_training::<f32>(&cfg, &TrainOptions { resume: Some(resume), ..strict(&part) }, |_| {}).unwrap();
    assert_eq!(outcome.start_iteration, 3);
    let (x, y) = (
        Checkpoint::<f32>::load(&final_checkpoint_path(&full)).unwrap(),
        Checkpoint::<f32>::load(&final_checkpoint_path(&part)).unwrap(),
    );
    assert_eq!(
        x.params.iter().map(|p| p.2.clone()).collect::<Vec<_>>(),
        y.params.iter().map(|p| p.2.clone()).collect::<Vec<_>>()
    );
    // The resumed run appends to the existing log.
    let log = read_metrics(&metrics_path(&part)).unwrap();
    assert_eq!(log.iter().map(|r| r.iteration).collect::<Vec<_>>(), [0, 1, 2, 3, 4, 5]);
    assert_eq!(log, read_metrics(&metrics_path(&full)).unwrap());
    // Resuming from an earlier checkpoint replaces the records it will redo.
    let before = std::fs::read(metrics_path(&full)).unwrap();
    let again = TrainOptions { resume: Some(full.join("checkpoints/iter_00000003.ckpt")), ..strict(&full) };
    run_training::<f32>(&cfg, &again, |_| {}).unwrap();
    assert_eq!(std::fs::read(metrics_path(&full)).unwrap(), before);
}

#[test]
fn resuming_with_a_different_architecture_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(&tmp.path().join("data"), 3);
    let out = tmp.path().join("run");
    run_training::<f32>(&cfg, &strict(&out), |_| {}).unwrap();
    let mut other = cfg.clone();
    other.model.base_channels = 8;
    let opts = TrainOptions { resume: Some(final_checkpoint_path(&out)), ..strict(&tmp.path().join("again")) };
    assert!(matches!(run_training::<f32>(&other, &opts, |_| {}), Err(CoreError::Incompatible(_))));
}

#[test]
fn non_finite_loss_leaves_state_untouched() {
    let mut model: Model<f32> = Model::new(tiny_model(), 1).unwrap();
    let id = model.params().lookup("decoder.out.b").unwrap();
    model.params_mut().get_mut(id).data_mut()[0] = f32::INFINITY;
    let mut adam = Adam::new(model.params());
    let items = |tag: &str| {
        (0..2).map(|i| DatasetItem { name: format!("{tag}{i}"), image: ImageTensor::filled(8, 8, 3, 0.5) }).collect()
    };
    let ds = UnpairedDataset::new(items("a"), items("b"), 8, 2, 2).unwrap();
    let (task, obj, opt) = (TaskConfig::default(), ObjectiveConfig::default(), OptimizerConfig::default());
    let sc = StepConfig { task: &task, objective: &obj, optimizer: &opt, seed: 0 };
    let before = model.params().clone();
    let r = train_step(&mut model, &mut adam, &batch_at(&ds, 0, 0).unwrap(), 0, &sc);
    assert!(matches!(r, Err(CoreError::Numeric { .. })));
    assert_eq!(
        before.iter().map(|p| p.2.clone()).collect::<Vec<_>>(),
        model.params().iter().map(|p| p.2.clone()).collect::<Vec<_>>()
    );
}

#[test]
fn learning_rate_is_halved_after_the_boundary() {
    let opt = OptimizerConfig::default();
    assert_eq!(opt.lr_at(0), 1e-4);
    assert_eq!(opt.lr_at(99_999), 1e-4);
    assert_eq!(opt.lr_at(100_000), 5e-5);
    assert_eq!(opt.lr_at(150_000), 5e-5);
}

fn sample_checkpoint() -> Checkpoint<f32> {
    let model: Model<f32> = Model::new(tiny_model(), 4).unwrap();
    let cfg = RunConfig::from_toml_str("[data]\nclean = \"a\"\ncorrupted = \"b\"\n").unwrap();
    let cfg = RunConfig { model: tiny_model(), ..cfg };
    Checkpoint::new(&model, &Adam::new(model.params()), 7, &cfg, None)
}

#[test]
fn checkpoint_save_load_save_is_byte_identical_and_hash_is_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let (p1, p2) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    sample_checkpoint().save(&p1).unwrap();
    Checkpoint::<f32>::load(&p1).unwrap().save(&p2).unwrap();
    let bytes = std::fs::read(&p1).unwrap();
    assert_eq!(bytes, std::fs::read(&p2).unwrap());
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 1;
    std::fs::write(&p2, &bad).unwrap();
    assert!(matches!(Checkpoint::<f32>::load(&p2), Err(CoreError::Checkpoint(_))));
    assert!(matches!(Checkpoint::<f64>::load(&p1), Err(CoreError::Incompatible(_))));
}

fn write_images(dir: &Path, count: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let img = ImageTensor::from_fn(size, size, 3, |_, _, _| rng.random_range(0.2..0.8));
            img.save_png8(&dir.join(format!("img{i:03}.png"))).unwrap();
            ImageTensor::load(&dir.join(format!("img{i:03}.png"))).unwrap()
        })
        .collect()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn paired_dataset_is_complete_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    write_images(&tmp.path().join("in"), 5, 12, 1);
    let model: Model<f32> = Model::new(tiny_model(), 2).unwrap();
    let cfg = SynthesisConfig { sigma_x: SigmaSpec::Fixed(15.0), seed: 3, ..Default::default() };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let recs = build_paired_dataset(&tmp.path().join("in"), &a, &model, &cfg, None).unwrap();
    build_paired_dataset(&tmp.path().join("in"), &b, &model, &cfg, None).unwrap();
    assert_eq!(recs.len(), 5);
    assert_eq!(std::fs::read_to_string(a.join("manifest.jsonl")).unwrap().lines().count(), 5);
    let names = |d: &Path| files(d).into_iter().map(|f| f.0).collect::<Vec<_>>();
    assert_eq!(names(&a.join("clean")), names(&a.join("degraded")));
    assert_eq!(files(&a.join("degraded")), files(&b.join("degraded")));
    assert_eq!(std::fs::read(a.join("manifest.jsonl")).unwrap(), std::fs::read(b.join("manifest.jsonl")).unwrap());
    let other = build_paired_dataset(
        &tmp.path().join("in"),
        &tmp.path().join("c"),
        &model,
        &SynthesisConfig { seed: 4, ..cfg.clone() },
        None,
    );
    other.unwrap();
    assert_ne!(files(&a.join("degraded")), files(&tmp.path().join("c/degraded")));
    assert_eq!(files(&a.join("clean")), files(&tmp.path().join("c/clean")));
    let n2c = SynthesisConfig { method: Method::N2C, output_format: OutputFormat::Npy, ..cfg };
    let recs = build_paired_dataset(&tmp.path().join("in"), &tmp.path().join("n"), &model, &n2c, None).unwrap();
    assert!(recs.iter().all(|r| r.filename.ends_with(".npy") && r.method == Method::N2C));
}

#[test]
fn per_file_levels_follow_the_configured_range() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(tmp.path().join("in")).unwrap();
    for i in 0..400 {
        ImageTensor::filled(2, 2, 3, 0.5).save_png8(&tmp.path().join(format!("in/{i:04}.png"))).unwrap();
    }
    let model: Model<f32> = Model::new(tiny_model(), 2).unwrap();
    let cfg = SynthesisConfig { sigma_x: SigmaSpec::Range([30.0, 70.0]), seed: 5, ..Default::default() };
    let recs = build_paired_dataset(&tmp.path().join("in"), &tmp.path().join("out"), &model, &cfg, None).unwrap();
    let mut s: Vec<f64> = recs.iter().map(|r| r.sigma_x).collect();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = (v - 30.0) / 40.0;
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(d < 1.628 / n.sqrt(), "KS distance {d}");
}

#[test]
fn c2n_at_temperature_zero_depends_only_on_the_preprocess_seed() {
    let mut model: Model<f32> = Model::new(tiny_model(), 2).unwrap();
    // The noise injection weight starts at zero; open it so the prior sample matters.
    let id = model.params().lookup("decoder.in_noise.w").unwrap();
    model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.1);
    let x = ImageTensor::filled(8, 8, 3, 0.4);
    let cfg = SynthesisConfig { temperature: 0.0, ..Default::default() };
    let a = generate_c2n(&x, &model, &cfg, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().0;
    let b = generate_c2n(&x, &model, &cfg, None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().0;
    assert_eq!(a, b);
    let warm = SynthesisConfig { temperature: 1.0, ..cfg };
    let c = generate_c2n(&x, &model, &warm, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().0;
    let d = generate_c2n(&x, &model, &warm, None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().0;
    assert_ne!(c, d);
}

#[test]
fn evaluation_of_real_pairs_and_unmatched_files() {
    let tmp = tempfile::tempdir().unwrap();
    write_images(&tmp.path().join("clean"), 3, 16, 1);
    let noisy = write_images(&tmp.path().join("noisy"), 3, 16, 2);
    let set = load_paired_folder(tmp.path()).unwrap();
    let report = evaluate_synthetic(&set, &noisy).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.akld < 1e-6);
    assert!(report.rows.iter().all(|r| r.psnr == f64::INFINITY));
    assert_eq!(report.unavailable, ["FID", "LPIPS"]);

    let model: Model<f32> = Model::new(tiny_model(), 5).unwrap();
    let cfg = SynthesisConfig { sigma_x: SigmaSpec::Fixed(15.0), seed: 1, ..Default::default() };
    let r1 = evaluate_model(&set, &model, &cfg, None, None).unwrap();
    let r2 = evaluate_model(&set, &model, &cfg, None, None).unwrap();
    assert_eq!(r1, r2);

    ImageTensor::filled(16, 16, 3, 0.5).save_png8(&tmp.path().join("noisy/extra.png")).unwrap();
    match load_pairs(&tmp.path().join("clean"), &tmp.path().join("noisy")) {
        Err(CoreError::Argument(m)) => assert!(m.contains("extra.png"), "{m}"),
        other => panic!("expected an unmatched-file error, got {other:?}"),
    }
}
