//! Synthetic clustered images, the `SOPD` binary format and multi-crop
//! augmentation.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::Images;
use crate::numerics::Scalar;
use crate::seed;

pub const MAGIC: &[u8; 4] = b"SOPD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("not a dataset file (bad magic bytes)")]
    BadMagic,
    #[error("dataset file is truncated")]
    TruncatedFile,
    #[error("unsupported dataset version {0}")]
    VersionUnsupported(u32),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// 8-bit images with integer labels, HWC per image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageDataset {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u32>,
}

impl ImageDataset {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.pixels.len() != self.n * self.image_len() {
            return Err(DataError::Invalid(format!(
                "pixel buffer has {} bytes, expected {}",
                self.pixels.len(),
                self.n * self.image_len()
            )));
        }
        if self.labels.len() != self.n {
            return Err(DataError::Invalid(format!(
                "{} labels for {} images",
                self.labels.len(),
                self.n
            )));
        }
        if let Some(&l) = self
            .labels
            .iter()
            .find(|&&l| l as usize >= self.num_classes)
        {
            return Err(DataError::Invalid(format!(
                "label {l} outside [0, {})",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            n: indices.len(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            num_classes: self.num_classes,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Seeded shuffle split; the first part holds `round(frac * n)` images.
    pub fn split(&self, frac: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut seed::rng_for(seed, "split", &[]));
        let cut = ((frac.clamp(0.0, 1.0) * self.n as f64).round() as usize).min(self.n);
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }

    /// Unaugmented, normalized images.
    pub fn to_images<T: Scalar>(&self, indices: &[usize]) -> Images<T> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(
                self.image(i)
                    .iter()
                    .map(|&p| normalize_pixel::<T>(f64::from(p))),
            );
        }
        Images::new(indices.len(), self.height, self.width, self.channels, data)
    }

    pub fn all_images<T: Scalar>(&self) -> Images<T> {
        self.to_images(&(0..self.n).collect::<Vec<_>>())
    }

    /// SHA-256 of the serialized file, hex encoded.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + self.pixels.len() + 4 * self.n);
        out.extend_from_slice(MAGIC);
        for v in [
            FORMAT_VERSION,
            self.n as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
            self.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(DataError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(DataError::VersionUnsupported(version));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let [n, height, width, channels, num_classes] = dims;
        let len = n
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| DataError::Invalid("dimensions overflow".into()))?;
        if r.len() < len {
            return Err(DataError::TruncatedFile);
        }
        let (pix, rest) = r.split_at(len);
        r = rest;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(read_u32(&mut r)?);
        }
        if !r.is_empty() {
            return Err(DataError::Invalid(format!("{} trailing bytes", r.len())));
        }
        let ds = Self {
            n,
            height,
            width,
            channels,
            num_classes,
            pixels: pix.to_vec(),
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|_| DataError::TruncatedFile)
}

fn read_u32(r: &mut &[u8]) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_dataset(ds: &ImageDataset, path: &Path) -> Result<(), DataError> {
    ds.validate()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&ds.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<ImageDataset, DataError> {
    ImageDataset::from_bytes(&fs::read(path)?)
}

/// `(pixel / 255 - 0.5) / 0.25`.
pub fn normalize_pixel<T: Scalar>(p: f64) -> T {
    T::lit((p / 255.0 - 0.5) / 0.25)
}

struct Rect {
    top: usize,
    left: usize,
    h: usize,
    w: usize,
    colour: [f64; 3],
}

/// Class templates on a triangle-wave textured background with 2 to 4
/// coloured rectangles; every sample adds Gaussian pixel noise.
///
/// Images are ordered class-major. Only integer arithmetic and the seeded
/// generator feed the templates, so output is stable for a fixed seed.
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    size: usize,
    noise_std: f64,
    seed: u64,
) -> Result<ImageDataset, DataError> {
    if num_classes < 2 {
        return Err(DataError::Invalid(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    if size < 4 {
        return Err(DataError::Invalid(format!(
            "image size must be >= 4, got {size}"
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(DataError::Invalid(format!(
            "noise_std must be >= 0, got {noise_std}"
        )));
    }
    let c = 3;
    let mut pixels = Vec::with_capacity(num_classes * per_class * size * size * c);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let template = class_template(class, size, seed);
        for j in 0..per_class {
            let mut rng = seed::rng_for(seed, "synthetic-noise", &[class as u64, j as u64]);
            if noise_std == 0.0 {
                pixels.extend(template.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
            } else {
                let noise = Normal::new(0.0, noise_std).expect("finite std");
                pixels.extend(
                    template
                        .iter()
                        .map(|&v| (v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8),
                );
            }
            labels.push(class as u32);
        }
    }
    Ok(ImageDataset {
        n: num_classes * per_class,
        height: size,
        width: size,
        channels: c,
        num_classes,
        pixels,
        labels,
    })
}

fn class_template(class: usize, size: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng_for(seed, "synthetic-template", &[class as u64]);
    let mut colour = || -> [f64; 3] { [0, 1, 2].map(|_| f64::from(rng.random_range(0u8..=255))) };
    let base = colour();
    let mut rng = seed::rng_for(seed, "synthetic-layout", &[class as u64]);
    let amp = rng.random_range(20.0..60.0);
    let (fx, fy) = (rng.random_range(0..4usize), rng.random_range(1..4usize));
    let period = rng.random_range(4..12usize);
    let min_side = (size / 6).max(2);
    let rects: Vec<Rect> = (0..rng.random_range(2..=4))
        .map(|_| {
            let h = rng.random_range(min_side..=size / 2);
            let w = rng.random_range(min_side..=size / 2);
            Rect {
                top: rng.random_range(0..=size - h),
                left: rng.random_range(0..=size - w),
                h,
                w,
                colour: [0, 1, 2].map(|_| f64::from(rng.random_range(0u8..=255))),
            }
        })
        .collect();

    let mut out = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let phase = (x * fx + y * fy) % period;
            let tri = (2 * phase).abs_diff(period) as f64 / period as f64;
            let mut px = base.map(|b| (b + amp * (tri - 0.5)).clamp(0.0, 255.0));
            for r in &rects {
                if (r.top..r.top + r.h).contains(&y) && (r.left..r.left + r.w).contains(&x) {
                    px = r.colour;
                }
            }
            out[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&px);
        }
    }
    out
}

/// Geometry and photometry applied to one view.
#[derive(Clone, Debug, PartialEq)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub flipped: bool,
    pub brightness: f64,
}

impl CropParams {
    /// Crop area over source area.
    pub fn area_fraction(&self, src_h: usize, src_w: usize) -> f64 {
        (self.height * self.width) as f64 / (src_h * src_w) as f64
    }
}

/// Views of one image; each view is normalized HWC data.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch<T> {
    pub global_views: Vec<Vec<T>>,
    pub local_views: Vec<Vec<T>>,
    pub global_params: Vec<CropParams>,
    pub local_params: Vec<CropParams>,
}

/// Sizes and ranges of the augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct CropConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub brightness: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            global_size: 32,
            local_size: 16,
            global_scale: (0.6, 1.0),
            local_scale: (0.15, 0.5),
            brightness: 0.2,
        }
    }
}

fn sample_crop<R: Rng + ?Sized>(
    src_h: usize,
    src_w: usize,
    scale: (f64, f64),
    brightness: f64,
    rng: &mut R,
) -> CropParams {
    let area = (src_h * src_w) as f64;
    let (ln_lo, ln_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let mut rect = None;
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = rng.random_range(ln_lo..=ln_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        let frac = (h * w) as f64 / area;
        if (1..=src_h).contains(&h)
            && (1..=src_w).contains(&w)
            && frac >= scale.0
            && frac <= scale.1
        {
            rect = Some((h, w));
            break;
        }
    }
    // central crop at the upper scale bound when sampling keeps failing
    let (h, w) = rect.unwrap_or_else(|| {
        let side = scale.1.sqrt();
        (
            ((src_h as f64 * side).round() as usize).clamp(1, src_h),
            ((src_w as f64 * side).round() as usize).clamp(1, src_w),
        )
    });
    let top = rng.random_range(0..=src_h - h);
    let left = rng.random_range(0..=src_w - w);
    let flipped = rng.random_bool(0.5);
    let brightness = 1.0 + rng.random_range(-brightness..=brightness);
    CropParams {
        top,
        left,
        height: h,
        width: w,
        flipped,
        brightness,
    }
}

/// Crops, resizes (bilinear, half-pixel centers), flips and scales
/// brightness, then normalizes.
pub fn render_view<T: Scalar>(
    image: &[u8],
    src_w: usize,
    channels: usize,
    p: &CropParams,
    out_size: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(out_size * out_size * channels);
    let sy = p.height as f64 / out_size as f64;
    let sx = p.width as f64 / out_size as f64;
    let px = |y: usize, x: usize, c: usize| f64::from(image[(y * src_w + x) * channels + c]);
    for oy in 0..out_size {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (p.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(p.height - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_size {
            let ox_src = if p.flipped { out_size - 1 - ox } else { ox };
            let fx = ((ox_src as f64 + 0.5) * sx - 0.5).clamp(0.0, (p.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(p.width - 1);
            let wx = fx - x0 as f64;
            for c in 0..channels {
                let (ty, lx) = (p.top, p.left);
                let v = (1.0 - wy)
                    * ((1.0 - wx) * px(ty + y0, lx + x0, c) + wx * px(ty + y0, lx + x1, c))
                    + wy * ((1.0 - wx) * px(ty + y1, lx + x0, c) + wx * px(ty + y1, lx + x1, c));
                let v = (v * p.brightness).clamp(0.0, 255.0);
                out.push(normalize_pixel(v));
            }
        }
    }
    out
}

/// Two global and `v_local` local views of one image.
pub fn multicrop<T: Scalar, R: Rng + ?Sized>(
    image: &[u8],
    src_h: usize,
    src_w: usize,
    channels: usize,
    v_local: usize,
    cfg: &CropConfig,
    rng: &mut R,
) -> ViewBatch<T> {
    let mut batch = ViewBatch {
        global_views: Vec::with_capacity(2),
        local_views: Vec::with_capacity(v_local),
        global_params: Vec::with_capacity(2),
        local_params: Vec::with_capacity(v_local),
    };
    for _ in 0..2 {
        let p = sample_crop(src_h, src_w, cfg.global_scale, cfg.brightness, rng);
        batch
            .global_views
            .push(render_view(image, src_w, channels, &p, cfg.global_size));
        batch.global_params.push(p);
    }
    for _ in 0..v_local {
        let p = sample_crop(src_h, src_w, cfg.local_scale, cfg.brightness, rng);
        batch
            .local_views
            .push(render_view(image, src_w, channels, &p, cfg.local_size));
        batch.local_params.push(p);
    }
    batch
}

/// Augments `indices` and groups the views view-major: element `v` holds
/// view `v` of every image. Each image draws from its own stream keyed by
/// `(seed, step, position in batch)`.
pub fn multicrop_batch<T: Scalar>(
    ds: &ImageDataset,
    indices: &[usize],
    v_local: usize,
    cfg: &CropConfig,
    seed: u64,
    step: u64,
) -> Vec<Images<T>> {
    let views = 2 + v_local;
    let mut data: Vec<Vec<T>> = vec![Vec::new(); views];
    for (pos, &i) in indices.iter().enumerate() {
        let mut rng = seed::rng_for(seed, "multicrop", &[step, pos as u64]);
        let vb = multicrop::<T, _>(
            ds.image(i),
            ds.height,
            ds.width,
            ds.channels,
            v_local,
            cfg,
            &mut rng,
        );
        for (v, view) in vb
            .global_views
            .into_iter()
            .chain(vb.local_views)
            .enumerate()
        {
            data[v].extend(view);
        }
    }
    data.into_iter()
        .enumerate()
        .map(|(v, d)| {
            let s = if v < 2 {
                cfg.global_size
            } else {
                cfg.local_size
            };
            Images::new(indices.len(), s, s, ds.channels, d)
        })
        .collect()
}
