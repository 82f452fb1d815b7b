//! Unpaired ingestion, two-domain batch sampling and dihedral augmentation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::ImageTensor;
use crate::rng::derived_rng;

const EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

/// Image files in `folder` with a supported extension, sorted by name.
pub fn list_images(folder: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(folder).map_err(|e| CoreError::io(folder, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CoreError::io(folder, e))?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if ok && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestionRecord {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// `None` when accepted, otherwise the rejection reason.
    pub rejected: Option<String>,
}

impl fmt::Display for IngestionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match &self.rejected {
            None => "accepted".to_string(),
            Some(r) => format!("rejected: {r}"),
        };
        write!(f, "{}\t{}\t{}\t{}\t{}", self.path.display(), self.width, self.height, self.channels, status)
    }
}

/// A decoded image together with its file name (no directory).
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub name: String,
    pub image: ImageTensor,
}

/// Decodes every image in `folder`. Images with a side shorter than
/// `min_size` are rejected and listed, never padded. Undecodable files are
/// an error.
pub fn ingest_folder(folder: &Path, min_size: usize) -> Result<(Vec<DatasetItem>, Vec<IngestionRecord>)> {
    let paths = list_images(folder)?;
    if paths.is_empty() {
        return Err(CoreError::Ingestion { path: folder.to_path_buf(), reason: "no png/jpg/tif images found".into() });
    }
    let mut items = Vec::new();
    let mut records = Vec::new();
    for path in paths {
        let image = ImageTensor::load(&path)?;
        let (height, width, channels) = image.shape();
        let rejected = (height < min_size || width < min_size)
            .then(|| format!("{height}x{width} is smaller than crop size {min_size}"));
        records.push(IngestionRecord { path: path.clone(), width, height, channels, rejected: rejected.clone() });
        if rejected.is_none() {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            items.push(DatasetItem { name, image });
        }
    }
    Ok((items, records))
}

/// Writes the ingestion report as tab-separated text.
pub fn write_ingestion_manifest(path: &Path, records: &[IngestionRecord]) -> Result<()> {
    let mut text = String::from("path\twidth\theight\tchannels\tstatus\n");
    for r in records {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

/// The eight symmetries of the square: `rot` quarter turns counter-clockwise
/// applied after an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dihedral {
    pub flip: bool,
    pub rot: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { flip: false, rot: 0 };

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Dihedral { flip: i >= 4, rot: (i % 4) as u8 })
    }

    pub fn index(self) -> usize {
        self.flip as usize * 4 + self.rot as usize
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::all()[rng.random_range(0..8)]
    }

    /// Applies the transform to a square image.
    pub fn apply(self, img: &ImageTensor) -> Result<ImageTensor> {
        let (h, w, c) = img.shape();
        if h != w {
            return Err(CoreError::Argument(format!("dihedral transforms need a square crop, got {h}x{w}")));
        }
        let n = h;
        Ok(ImageTensor::from_fn(n, n, c, |y, x, ch| {
            // Source coordinates of output pixel (y, x): undo rotation, then flip.
            let (mut sy, mut sx) = (y, x);
            for _ in 0..self.rot {
                // inverse of a counter-clockwise quarter turn
                let (ny, nx) = (sx, n - 1 - sy);
                sy = ny;
                sx = nx;
            }
            if self.flip {
                sx = n - 1 - sx;
            }
            img.get(sy, sx, ch)
        }))
    }
}

/// Random dihedral transform, uniform over the eight.
pub fn augment<R: Rng + ?Sized>(crop: &ImageTensor, rng: &mut R) -> Result<(ImageTensor, Dihedral)> {
    let t = Dihedral::random(rng);
    Ok((t.apply(crop)?, t))
}

/// Two independent image collections sampled with replacement.
#[derive(Clone, Debug)]
pub struct UnpairedDataset {
    pub source: Vec<DatasetItem>,
    pub target: Vec<DatasetItem>,
    pub crop_size: usize,
    pub batch_size: usize,
}

impl UnpairedDataset {
    /// `divisor` is the model's required spatial multiple, `2^(N-1)`.
    pub fn new(
        source: Vec<DatasetItem>,
        target: Vec<DatasetItem>,
        crop_size: usize,
        batch_size: usize,
        divisor: usize,
    ) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(CoreError::Argument("both domains need at least one image".into()));
        }
        if crop_size == 0 || crop_size % divisor != 0 {
            return Err(CoreError::Dimension(format!(
                "crop size {crop_size} must be a positive multiple of {divisor}"
            )));
        }
        if batch_size == 0 {
            return Err(CoreError::Argument("batch size must be at least 1".into()));
        }
        let channels = source[0].image.channels();
        for item in source.iter().chain(&target) {
            let (h, w, c) = item.image.shape();
            if h < crop_size || w < crop_size {
                return Err(CoreError::Dimension(format!("{} is {h}x{w}, smaller than crop {crop_size}", item.name)));
            }
            if c != channels {
                return Err(CoreError::Dimension(format!("{} has {c} channels, expected {channels}", item.name)));
            }
        }
        Ok(Self { source, target, crop_size, batch_size })
    }

    pub fn channels(&self) -> usize {
        self.source[0].image.channels()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub clean: Vec<ImageTensor>,
    pub corrupted: Vec<ImageTensor>,
    pub clean_indices: Vec<usize>,
    pub corrupted_indices: Vec<usize>,
}

fn random_crop<R: Rng + ?Sized>(img: &ImageTensor, size: usize, rng: &mut R) -> Result<ImageTensor> {
    let top = rng.random_range(0..=img.height() - size);
    let left = rng.random_range(0..=img.width() - size);
    img.crop(top, left, size, size)
}

fn sample_domain<R: Rng + ?Sized>(
    items: &[DatasetItem],
    n: usize,
    size: usize,
    rng: &mut R,
) -> Result<(Vec<ImageTensor>, Vec<usize>)> {
    let mut crops = Vec::with_capacity(n);
    let mut idx = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.random_range(0..items.len());
        let crop = random_crop(&items[i].image, size, rng)?;
        crops.push(augment(&crop, rng)?.0);
        idx.push(i);
    }
    Ok((crops, idx))
}

/// Draws `batch_size` augmented crops from each domain, independently and
/// uniformly with replacement. The clean domain is drawn first.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &UnpairedDataset, rng: &mut R) -> Result<Batch> {
    let (clean, clean_indices) = sample_domain(&dataset.source, dataset.batch_size, dataset.crop_size, rng)?;
    let (corrupted, corrupted_indices) = sample_domain(&dataset.target, dataset.batch_size, dataset.crop_size, rng)?;
    Ok(Batch { clean, corrupted, clean_indices, corrupted_indices })
}

/// Batch `index` of the stream identified by `seed`.
pub fn batch_at(dataset: &UnpairedDataset, seed: u64, index: u64) -> Result<Batch> {
    sample_batch(dataset, &mut derived_rng(seed, "batch", index))
}

/// Background batch producer.
///
/// Batch `k` is always drawn from its own derived stream, so the delivered
/// sequence is identical for any number of workers. Results are reordered
/// before delivery.
pub struct Prefetcher {
    rx: Receiver<(u64, Result<Batch>)>,
    pending: BTreeMap<u64, Result<Batch>>,
    next: u64,
    workers: Vec<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn new(dataset: Arc<UnpairedDataset>, seed: u64, start: u64, workers: usize, depth: usize) -> Self {
        let workers = workers.max(1);
        let (tx, rx) = sync_channel(depth.max(1));
        let handles = (0..workers)
            .map(|w| {
                let tx = tx.clone();
                let ds = Arc::clone(&dataset);
                std::thread::spawn(move || {
                    let mut k = start + w as u64;
                    loop {
                        let b = batch_at(&ds, seed, k);
                        if tx.send((k, b)).is_err() {
                            return;
                        }
                        k += workers as u64;
                    }
                })
            })
            .collect();
        Self { rx, pending: BTreeMap::new(), next: start, workers: handles }
    }

    /// Next batch in index order, with its index.
    pub fn next_batch(&mut self) -> Result<(u64, Batch)> {
        loop {
            if let Some(b) = self.pending.remove(&self.next) {
                let k = self.next;
                self.next += 1;
                return b.map(|b| (k, b));
            }
            let (k, b) = self.rx.recv().map_err(|_| CoreError::ModelState("prefetch workers stopped".into()))?;
            self.pending.insert(k, b);
        }
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Dropping the receiver makes every blocked `send` fail and the workers exit.
        let (_, dummy) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dummy));
        for h in self.workers.drain(..) {
            let _ = h.join();
        }
    }
}
