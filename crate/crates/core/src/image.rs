//! Channel-last floating point images and their file formats.

use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};
use uvae_autograd::{Scalar, Tensor};

use crate::error::{CoreError, Result};

/// `H x W x C` image, nominally in `[0, 1]`, stored channel-last.
///
/// Values are not clamped: noise injection and decoder outputs may leave the
/// unit interval. Clamping happens only at 8-bit export.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height * width * channels != data.len() {
            return Err(CoreError::Dimension(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if channels == 0 {
            return Err(CoreError::Dimension("image has no channels".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(CoreError::Dimension(format!(
                "image shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self { data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(), ..self.clone() })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(CoreError::Dimension(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, self.channels, |y, x, c| self.get(top + y, left + x, c)))
    }

    /// Largest centered `size x size` crop; errors when the image is smaller.
    pub fn center_crop(&self, size: usize) -> Result<Self> {
        if size > self.height || size > self.width {
            return Err(CoreError::Dimension(format!(
                "center crop {size} exceeds {}x{} image",
                self.height, self.width
            )));
        }
        self.crop((self.height - size) / 2, (self.width - size) / 2, size, size)
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Self::batch_to_tensor(std::slice::from_ref(self)).expect("single image batch")
    }

    /// Stacks same-shaped images into an NCHW batch.
    pub fn batch_to_tensor<T: Scalar>(images: &[Self]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| CoreError::Argument("empty image batch".into()))?;
        let (h, w, c) = first.shape();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            first.check_same_shape(img)?;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(T::from_f64(img.get(y, x, ch) as f64));
                    }
                }
            }
        }
        Ok(Tensor::from_vec(&[images.len(), c, h, w], data)?)
    }

    /// Image `index` of an NCHW batch.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if index >= b {
            return Err(CoreError::Dimension(format!("batch index {index} out of range {b}")));
        }
        let base = index * c * h * w;
        let d = t.data();
        Ok(Self::from_fn(h, w, c, |y, x, ch| d[base + (ch * h + y) * w + x].as_f64() as f32))
    }

    pub fn batch_from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Self>> {
        let (b, ..) = t.dims4()?;
        (0..b).map(|i| Self::from_tensor(t, i)).collect()
    }

    /// Decodes PNG (8 or 16 bit), JPEG or TIFF into `[0, 1]` floats. Alpha is dropped.
    pub fn load(path: &Path) -> Result<Self> {
        let fail = |reason: String| CoreError::Ingestion { path: path.to_path_buf(), reason };
        let img = ImageReader::open(path)
            .map_err(|e| CoreError::io(path, e))?
            .with_guessed_format()
            .map_err(|e| CoreError::io(path, e))?
            .decode()
            .map_err(|e| fail(e.to_string()))?;
        Ok(Self::from_dynamic(&img))
    }

    fn from_dynamic(img: &DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let gray = matches!(
            img,
            DynamicImage::ImageLuma8(_)
                | DynamicImage::ImageLumaA8(_)
                | DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
        );
        if gray {
            let buf = img.to_luma16();
            let data = buf.pixels().map(|p| p.0[0] as f32 / 65535.0).collect();
            Self { height: h, width: w, channels: 1, data }
        } else {
            let buf = img.to_rgb32f();
            Self { height: h, width: w, channels: 3, data: buf.into_raw() }
        }
    }

    /// 8-bit quantization after clamping to `[0, 1]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Writes an 8-bit PNG. Single-channel images become grayscale.
    pub fn save_png8(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let raw = self.to_u8();
        let res = match self.channels {
            1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw).map(|b| b.save(path)),
            3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).map(|b| b.save(path)),
            c => return Err(CoreError::Argument(format!("cannot export {c}-channel image as PNG"))),
        };
        match res {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(CoreError::io(path, std::io::Error::other(e.to_string()))),
            None => Err(CoreError::Dimension("PNG buffer size mismatch".into())),
        }
    }

    /// Lossless float container in NumPy `.npy` format (`<f4`, shape `H, W, C`).
    pub fn save_npy(&self, path: &Path) -> Result<()> {
        let mut header = format!(
            "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
            self.height, self.width, self.channels
        );
        let unpadded = 10 + header.len() + 1;
        header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
        header.push('\n');
        let mut out = Vec::with_capacity(10 + header.len() + self.data.len() * 4);
        out.extend_from_slice(b"\x93NUMPY\x01\x00");
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(&out).map_err(|e| CoreError::io(path, e))
    }

    pub fn load_npy(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        let bad = |r: &str| CoreError::Ingestion { path: path.to_path_buf(), reason: r.to_string() };
        if bytes.len() < 10 || &bytes[..8] != b"\x93NUMPY\x01\x00" {
            return Err(bad("not a version 1.0 npy file"));
        }
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        let header = std::str::from_utf8(&bytes[10..10 + hlen]).map_err(|_| bad("header is not utf-8"))?;
        if !header.contains("'<f4'") {
            return Err(bad("expected little-endian f32 data"));
        }
        let inner =
            header.split("'shape': (").nth(1).and_then(|s| s.split(')').next()).ok_or_else(|| bad("missing shape"))?;
        let dims: Vec<usize> = inner.split(',').filter_map(|s| s.trim().parse().ok()).collect();
        if dims.len() != 3 {
            return Err(bad("expected a rank-3 array"));
        }
        let data: Vec<f32> =
            bytes[10 + hlen..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::new(dims[0], dims[1], dims[2], data)
    }
}
