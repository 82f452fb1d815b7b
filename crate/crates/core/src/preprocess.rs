//! The pre-processor `h` and the per-task operators that build the two
//! training domains.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use uvae_autograd::{Scalar, Tensor};

use crate::data::{ingest_folder, DatasetItem, IngestionRecord};
use crate::error::{CoreError, Result};
use crate::image::ImageTensor;
use crate::objective::DomainInput;
use crate::rng::derived_rng;

/// A noise level on the `[0, 255]` scale: fixed, or uniform over a range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Fixed(f64),
    Range([f64; 2]),
}

impl Default for SigmaSpec {
    fn default() -> Self {
        SigmaSpec::Fixed(0.0)
    }
}

impl SigmaSpec {
    pub fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            SigmaSpec::Fixed(s) => s >= 0.0 && s.is_finite(),
            SigmaSpec::Range([lo, hi]) => lo >= 0.0 && lo <= hi && hi.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::Config(format!("{what} must be >= 0 with lo <= hi, got {self:?}")))
        }
    }

    /// Draws a level; fixed levels consume no randomness.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            SigmaSpec::Fixed(s) => s,
            SigmaSpec::Range([lo, hi]) if lo == hi => lo,
            SigmaSpec::Range([lo, hi]) => rng.random_range(lo..=hi),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Denoise,
    SuperResolution,
    LowLight,
}

/// Which image the degradation encoder observes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationInput {
    /// The corrupted image as loaded.
    Raw,
    /// The corrupted image after `h`, the same tensor the content encoder sees.
    Preprocessed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub task: Task,
    pub sigma_x: SigmaSpec,
    pub sigma_y: SigmaSpec,
    pub sr_scale: usize,
    pub gamma_range: [f64; 2],
    pub c_range: [f64; 2],
    pub normalize_channels: bool,
    pub degradation_input: DegradationInput,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            task: Task::Denoise,
            sigma_x: SigmaSpec::Fixed(15.0),
            sigma_y: SigmaSpec::Fixed(10.0),
            sr_scale: 4,
            gamma_range: [1.5, 2.5],
            c_range: [0.15, 0.4],
            normalize_channels: false,
            degradation_input: DegradationInput::Raw,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        self.sigma_x.validate("sigma_x")?;
        self.sigma_y.validate("sigma_y")?;
        if self.task == Task::SuperResolution && self.sr_scale < 2 {
            return Err(CoreError::Config(format!("sr_scale must be >= 2, got {}", self.sr_scale)));
        }
        for (name, [lo, hi]) in [("gamma_range", self.gamma_range), ("c_range", self.c_range)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(CoreError::Config(format!("{name} must satisfy 0 < lo <= hi, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Argument(format!("noise level must be >= 0, got {sigma}")))
    }
}

/// `h(image) = image + n`, `n ~ N(0, (sigma/255)²)` per element, unclamped.
pub fn inject_gaussian<R: Rng + ?Sized>(image: &ImageTensor, sigma: f64, rng: &mut R) -> Result<ImageTensor> {
    check_sigma(sigma)?;
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let s = sigma / 255.0;
    let mut out = image.clone();
    for v in out.data_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = (*v as f64 + s * n) as f32;
    }
    Ok(out)
}

/// In-place noise on a batch tensor, one level per image.
pub fn inject_gaussian_batch<T: Scalar, R: Rng + ?Sized>(
    batch: &mut Tensor<T>,
    sigmas: &[f64],
    rng: &mut R,
) -> Result<()> {
    let (b, c, h, w) = batch.dims4()?;
    if sigmas.len() != b {
        return Err(CoreError::Argument(format!("{} noise levels for a batch of {b}", sigmas.len())));
    }
    let len = c * h * w;
    for (i, &sigma) in sigmas.iter().enumerate() {
        check_sigma(sigma)?;
        if sigma == 0.0 {
            continue;
        }
        let s = sigma / 255.0;
        for v in &mut batch.data_mut()[i * len..(i + 1) * len] {
            let n: f64 = StandardNormal.sample(rng);
            *v = T::from_f64(v.as_f64() + s * n);
        }
    }
    Ok(())
}

/// Builds the objective input for one domain: levels are drawn per image
/// first, then the noise, image by image.
pub fn prepare_domain_input<T: Scalar, R: Rng + ?Sized>(
    images: &[ImageTensor],
    sigma: &SigmaSpec,
    degradation: DegradationInput,
    rng: &mut R,
) -> Result<DomainInput<T>> {
    let target: Tensor<T> = ImageTensor::batch_to_tensor(images)?;
    let sigmas: Vec<f64> = images.iter().map(|_| sigma.sample(rng)).collect();
    let mut content_input = target.clone();
    inject_gaussian_batch(&mut content_input, &sigmas, rng)?;
    let degradation_input = match degradation {
        DegradationInput::Raw => target.clone(),
        DegradationInput::Preprocessed => content_input.clone(),
    };
    Ok(DomainInput { target, content_input, degradation_input })
}

/// Keys cubic convolution kernel with `a = −0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Symmetric (edge-repeating) reflection of an index into `0..n`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Taps `(source index, weight)` for each output sample of a 1-D
/// antialiased bicubic downsample by an integer factor.
pub fn bicubic_weights(len: usize, scale: usize) -> Vec<Vec<(usize, f64)>> {
    let s = scale as f64;
    let support = 2.0 * s;
    (0..len / scale)
        .map(|i| {
            let center = (i as f64 + 0.5) * s - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let w = cubic((center - j as f64) / s);
                if w != 0.0 {
                    taps.push((reflect(j, len), w));
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Antialiased bicubic downsample by an integer factor.
pub fn bicubic_downsample(image: &ImageTensor, scale: usize) -> Result<ImageTensor> {
    let (h, w, c) = image.shape();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(CoreError::Dimension(format!("{h}x{w} image is not divisible by scale {scale}")));
    }
    let wy = bicubic_weights(h, scale);
    let wx = bicubic_weights(w, scale);
    let (oh, ow) = (h / scale, w / scale);
    // Rows first, in double precision.
    let mut tmp = vec![0.0f64; h * ow * c];
    for y in 0..h {
        for (ox, taps) in wx.iter().enumerate() {
            for ch in 0..c {
                tmp[(y * ow + ox) * c + ch] = taps.iter().map(|&(j, wt)| wt * image.get(y, j, ch) as f64).sum();
            }
        }
    }
    Ok(ImageTensor::from_fn(oh, ow, c, |oy, ox, ch| {
        wy[oy].iter().map(|&(j, wt)| wt * tmp[(j * ow + ox) * c + ch]).sum::<f64>() as f32
    }))
}

/// `c · image^gamma`.
pub fn gamma_correct(image: &ImageTensor, c: f64, gamma: f64) -> Result<ImageTensor> {
    if !(c > 0.0 && gamma > 0.0) {
        return Err(CoreError::Argument(format!(
            "gamma correction needs c > 0 and gamma > 0, got c={c}, gamma={gamma}"
        )));
    }
    if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CoreError::Argument("gamma correction input must lie in [0, 1]".into()));
    }
    Ok(image.map(|v| (c * (v as f64).powf(gamma)) as f32))
}

/// Per-channel mean and standard deviation over a whole domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute(images: &[&ImageTensor]) -> Result<Self> {
        let c =
            images.first().ok_or_else(|| CoreError::Argument("no images for channel statistics".into()))?.channels();
        let mut sum = vec![0.0f64; c];
        let mut count = 0usize;
        for img in images {
            if img.channels() != c {
                return Err(CoreError::Dimension("channel count differs across the domain".into()));
            }
            for px in img.data().chunks_exact(c) {
                for (s, &v) in sum.iter_mut().zip(px) {
                    *s += v as f64;
                }
            }
            count += img.height() * img.width();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0f64; c];
        for img in images {
            for px in img.data().chunks_exact(c) {
                for ((s, &v), m) in sq.iter_mut().zip(px).zip(&mean) {
                    *s += (v as f64 - m).powi(2);
                }
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }
}

/// Affine per-channel map taking `from` statistics to `to` statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNormalization {
    pub from: ChannelStats,
    pub to: ChannelStats,
}

impl ChannelNormalization {
    pub fn new(from: ChannelStats, to: ChannelStats) -> Result<Self> {
        if from.mean.len() != to.mean.len() {
            return Err(CoreError::Dimension("channel statistics differ in length".into()));
        }
        for (i, (&a, &b)) in from.std.iter().zip(&to.std).enumerate() {
            if !(a > 0.0 && b > 0.0) {
                return Err(CoreError::DegenerateStats(format!("channel {i} has zero standard deviation")));
            }
        }
        Ok(Self { from, to })
    }

    fn map(&self, image: &ImageTensor, inverse: bool) -> Result<ImageTensor> {
        let c = self.from.mean.len();
        if image.channels() != c {
            return Err(CoreError::Dimension(format!("expected {c} channels, got {}", image.channels())));
        }
        let (a, b) = if inverse { (&self.to, &self.from) } else { (&self.from, &self.to) };
        Ok(ImageTensor::from_fn(image.height(), image.width(), c, |y, x, ch| {
            let v = image.get(y, x, ch) as f64;
            ((v - a.mean[ch]) / a.std[ch] * b.std[ch] + b.mean[ch]) as f32
        }))
    }

    /// `(v − mean_from) / std_from · std_to + mean_to`, per channel.
    pub fn normalize(&self, image: &ImageTensor) -> Result<ImageTensor> {
        self.map(image, false)
    }

    pub fn denormalize(&self, image: &ImageTensor) -> Result<ImageTensor> {
        self.map(image, true)
    }

    /// Same maps on `f64` values, for lossless round trips.
    pub fn normalize_value(&self, ch: usize, v: f64) -> f64 {
        (v - self.from.mean[ch]) / self.from.std[ch] * self.to.std[ch] + self.to.mean[ch]
    }

    pub fn denormalize_value(&self, ch: usize, v: f64) -> f64 {
        (v - self.to.mean[ch]) / self.to.std[ch] * self.from.std[ch] + self.from.mean[ch]
    }
}

/// Sidecar record of the per-image operator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub path: PathBuf,
    pub domain: String,
    pub task: Task,
    pub c: Option<f64>,
    pub gamma: Option<f64>,
    pub sr_scale: Option<usize>,
    pub seed: u64,
}

/// Both training domains after the task operator.
#[derive(Clone, Debug)]
pub struct PreparedDomains {
    pub source: Vec<DatasetItem>,
    pub target: Vec<DatasetItem>,
    pub normalization: Option<ChannelNormalization>,
    pub sidecar: Vec<SidecarRecord>,
    pub ingestion: Vec<IngestionRecord>,
}

/// Loads and transforms both folders for the configured task.
///
/// Low-light parameters are drawn from a stream derived from `seed` and the
/// image index, so repeated calls give identical domains.
pub fn prepare_domains(
    clean_folder: &Path,
    corrupted_folder: &Path,
    task: &TaskConfig,
    min_size: usize,
    seed: u64,
) -> Result<PreparedDomains> {
    task.validate()?;
    let clean_min = if task.task == Task::SuperResolution { min_size * task.sr_scale } else { min_size };
    let (clean, mut ingestion) = ingest_folder(clean_folder, clean_min)?;
    let (mut target, rec_t) = ingest_folder(corrupted_folder, min_size)?;
    ingestion.extend(rec_t);
    if clean.is_empty() || target.is_empty() {
        return Err(CoreError::Ingestion {
            path: if clean.is_empty() { clean_folder } else { corrupted_folder }.to_path_buf(),
            reason: "no usable images after size filtering".into(),
        });
    }

    let mut sidecar = Vec::new();
    let mut source = Vec::with_capacity(clean.len());
    for (i, item) in clean.into_iter().enumerate() {
        let path = clean_folder.join(&item.name);
        let mut rec = SidecarRecord {
            path,
            domain: "source".into(),
            task: task.task,
            c: None,
            gamma: None,
            sr_scale: None,
            seed,
        };
        let image = match task.task {
            Task::Denoise => item.image,
            Task::SuperResolution => {
                let (h, w, _) = item.image.shape();
                let s = task.sr_scale;
                let cropped = item.image.crop(0, 0, h - h % s, w - w % s)?;
                rec.sr_scale = Some(s);
                bicubic_downsample(&cropped, s)?
            }
            Task::LowLight => {
                let mut rng = derived_rng(seed, "low_light", i as u64);
                let c = rng.random_range(task.c_range[0]..=task.c_range[1]);
                let gamma = rng.random_range(task.gamma_range[0]..=task.gamma_range[1]);
                rec.c = Some(c);
                rec.gamma = Some(gamma);
                gamma_correct(&item.image.clamped(), c, gamma)?
            }
        };
        sidecar.push(rec);
        source.push(DatasetItem { name: item.name, image });
    }

    let normalization = if task.normalize_channels {
        let from = ChannelStats::compute(&target.iter().map(|t| &t.image).collect::<Vec<_>>())?;
        let to = ChannelStats::compute(&source.iter().map(|t| &t.image).collect::<Vec<_>>())?;
        let norm = ChannelNormalization::new(from, to)?;
        for item in &mut target {
            item.image = norm.normalize(&item.image)?;
        }
        Some(norm)
    } else {
        None
    };
    Ok(PreparedDomains { source, target, normalization, sidecar, ingestion })
}

/// Writes sidecar records as JSON lines.
pub fn write_sidecar(path: &Path, records: &[SidecarRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| CoreError::Config(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}
