//! Synthetic pair generation from a trained model.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use uvae_autograd::{parallel_enabled, Scalar};

use crate::data::list_images;
use crate::error::{CoreError, Result};
use crate::image::ImageTensor;
use crate::model::Model;
use crate::preprocess::{inject_gaussian, ChannelNormalization, SigmaSpec};
use crate::rng::file_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Clean to noisy: content of `h(x)`, degradation from the prior.
    C2N,
    /// Noisy to clean: the clean decoder applied to the content of `h(y)`.
    N2C,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Png8,
    /// Little-endian `float32` `.npy`, lossless and unclamped.
    Npy,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Png8 => "png",
            OutputFormat::Npy => "npy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub method: Method,
    pub temperature: f64,
    /// Pre-process level applied to the generation input. For N2C this is
    /// the corrupted-domain level used in training.
    pub sigma_x: SigmaSpec,
    pub output_format: OutputFormat,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            method: Method::C2N,
            temperature: 1.0,
            sigma_x: SigmaSpec::default(),
            output_format: OutputFormat::Png8,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(CoreError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        self.sigma_x.validate("sigma_x")
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub filename: String,
    pub sigma_x: f64,
    pub temperature: f64,
    pub seed: u64,
    pub method: Method,
}

fn check_model<T: Scalar>(model: &Model<T>) -> Result<()> {
    if !model.params().all_finite() {
        return Err(CoreError::ModelState("model parameters contain NaN or infinity".into()));
    }
    Ok(())
}

/// Edge-replicates `img` up to the next multiple of `d` in both dimensions.
fn pad_to_multiple(img: &ImageTensor, d: usize) -> ImageTensor {
    let (h, w, c) = img.shape();
    let (ph, pw) = (h.div_ceil(d) * d, w.div_ceil(d) * d);
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    ImageTensor::from_fn(ph, pw, c, |y, x, ch| img.get(y.min(h - 1), x.min(w - 1), ch))
}

fn check_channels<T: Scalar>(model: &Model<T>, img: &ImageTensor) -> Result<()> {
    if img.channels() != model.config().input_channels {
        return Err(CoreError::Dimension(format!(
            "image has {} channels, model expects {}",
            img.channels(),
            model.config().input_channels
        )));
    }
    Ok(())
}

/// C2N sample for one clean image. Draws the pre-process level, the
/// pre-process noise and then the prior noise from `rng`. Returns the
/// unclamped output and the level used.
pub fn generate_c2n<T: Scalar, R: Rng + ?Sized>(
    x: &ImageTensor,
    model: &Model<T>,
    config: &SynthesisConfig,
    normalization: Option<&ChannelNormalization>,
    rng: &mut R,
) -> Result<(ImageTensor, f64)> {
    config.validate()?;
    check_model(model)?;
    check_channels(model, x)?;
    let (h, w, _) = x.shape();
    let padded = pad_to_multiple(x, model.config().divisor());
    let sigma = config.sigma_x.sample(rng);
    let hx = inject_gaussian(&padded, sigma, rng)?;
    let z = model.encode_content(&hx)?;
    let zn = model.sample_degradation_prior(padded.height(), padded.width(), config.temperature, rng)?;
    let mut y = model.decode_noisy(&z, &zn)?.crop(0, 0, h, w)?;
    if let Some(n) = normalization {
        y = n.denormalize(&y)?;
    }
    Ok((y, sigma))
}

/// N2C estimate for one corrupted image; random only through the pre-process.
pub fn generate_n2c<T: Scalar, R: Rng + ?Sized>(
    y: &ImageTensor,
    model: &Model<T>,
    config: &SynthesisConfig,
    normalization: Option<&ChannelNormalization>,
    rng: &mut R,
) -> Result<(ImageTensor, f64)> {
    config.validate()?;
    check_model(model)?;
    check_channels(model, y)?;
    let (h, w, _) = y.shape();
    let input = match normalization {
        Some(n) => n.normalize(y)?,
        None => y.clone(),
    };
    let padded = pad_to_multiple(&input, model.config().divisor());
    let sigma = config.sigma_x.sample(rng);
    let hy = inject_gaussian(&padded, sigma, rng)?;
    let z = model.encode_content(&hy)?;
    Ok((model.decode_clean(&z)?.crop(0, 0, h, w)?, sigma))
}

/// Runs the configured method with the per-file stream for `name`.
pub fn generate_for_file<T: Scalar>(
    name: &str,
    input: &ImageTensor,
    model: &Model<T>,
    config: &SynthesisConfig,
    normalization: Option<&ChannelNormalization>,
) -> Result<(ImageTensor, ManifestRecord)> {
    let seed = file_seed(config.seed, name);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (out, sigma) = match config.method {
        Method::C2N => generate_c2n(input, model, config, normalization, &mut rng)?,
        Method::N2C => generate_n2c(input, model, config, normalization, &mut rng)?,
    };
    let rec = ManifestRecord {
        filename: name.into(),
        sigma_x: sigma,
        temperature: config.temperature,
        seed,
        method: config.method,
    };
    Ok((out, rec))
}

fn save(img: &ImageTensor, path: &Path, format: OutputFormat) -> Result<()> {
    match format {
        OutputFormat::Png8 => img.save_png8(path),
        OutputFormat::Npy => img.save_npy(path),
    }
}

/// Generates a paired dataset from every image in `input_folder`.
///
/// Outputs go to `out_dir/clean/<stem>.<ext>` and `out_dir/degraded/<stem>.<ext>`;
/// the input is re-exported on its side of the pair (clean for C2N, degraded
/// for N2C). `out_dir/manifest.jsonl` holds one record per file, in name
/// order. Each file's randomness depends only on the master seed and its
/// output name, so the result does not depend on parallelism.
pub fn build_paired_dataset<T: Scalar>(
    input_folder: &Path,
    out_dir: &Path,
    model: &Model<T>,
    config: &SynthesisConfig,
    normalization: Option<&ChannelNormalization>,
) -> Result<Vec<ManifestRecord>> {
    config.validate()?;
    check_model(model)?;
    let ext = config.output_format.extension();
    let mut names: BTreeMap<String, std::path::PathBuf> = BTreeMap::new();
    for path in list_images(input_folder)? {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let name = format!("{stem}.{ext}");
        if let Some(prev) = names.insert(name.clone(), path.clone()) {
            return Err(CoreError::Argument(format!(
                "filename collision: {} and {} both map to {name}",
                prev.display(),
                path.display()
            )));
        }
    }

    let (clean_dir, degraded_dir) = (out_dir.join("clean"), out_dir.join("degraded"));
    for d in [&clean_dir, &degraded_dir] {
        std::fs::create_dir_all(d).map_err(|e| CoreError::io(d, e))?;
    }

    let job = |(name, path): (&String, &std::path::PathBuf)| -> Result<ManifestRecord> {
        let input = ImageTensor::load(path)?;
        let (out, rec) = generate_for_file(name, &input, model, config, normalization)?;
        let (clean, degraded) = match config.method {
            Method::C2N => (&input, &out),
            Method::N2C => (&out, &input),
        };
        save(clean, &clean_dir.join(name), config.output_format)?;
        save(degraded, &degraded_dir.join(name), config.output_format)?;
        Ok(rec)
    };
    let records: Vec<ManifestRecord> = if parallel_enabled() {
        names.par_iter().map(job).collect::<Result<_>>()?
    } else {
        names.iter().map(job).collect::<Result<_>>()?
    };

    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).map_err(|e| CoreError::Config(e.to_string()))?);
        text.push('\n');
    }
    let manifest = out_dir.join("manifest.jsonl");
    std::fs::write(&manifest, text).map_err(|e| CoreError::io(&manifest, e))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvBlock, ModelConfig};

    fn tiny() -> Model<f32> {
        let cfg = ModelConfig {
            num_layers: 2,
            input_channels: 1,
            base_channels: 4,
            latent_channels_per_layer: vec![2, 2],
            conv_block: ConvBlock { kernel: 3, count: 1 },
            ..Default::default()
        };
        Model::new(cfg, 0).unwrap()
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped_back() {
        let m = tiny();
        let x = ImageTensor::filled(7, 5, 1, 0.5);
        let cfg = SynthesisConfig::default();
        let (y, _) = generate_c2n(&x, &m, &cfg, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(y.shape(), (7, 5, 1));
        let (xr, _) = generate_n2c(&x, &m, &cfg, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(xr.shape(), (7, 5, 1));
    }

    #[test]
    fn nan_parameters_are_refused() {
        let mut m = tiny();
        let id = m.params().ids().next().unwrap();
        m.params_mut().get_mut(id).data_mut()[0] = f32::NAN;
        let x = ImageTensor::filled(4, 4, 1, 0.5);
        let r = generate_c2n(&x, &m, &SynthesisConfig::default(), None, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(r, Err(CoreError::ModelState(_))));
    }

    #[test]
    fn negative_temperature_is_rejected() {
        let cfg = SynthesisConfig { temperature: -1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
