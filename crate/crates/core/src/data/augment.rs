//! Per-image augmentation and preprocessing on `[h, w, c]` images.
//!
//! Geometric transforms resample bilinearly; coordinates that land outside
//! the image are clamped to the nearest edge pixel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel means subtracted by Caffe-style preprocessing, in BGR order.
pub const CAFFE_BGR_MEANS: [f32; 3] = [103.939, 116.779, 123.68];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocess {
    Caffe,
    #[default]
    None,
}

/// Augmentation ranges. `Default` is the full training recipe; use
/// [`AugmentConfig::disabled`] for the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    /// Zoom factor drawn from `[1 - zoom_frac, 1 + zoom_frac]`.
    pub zoom_frac: f64,
    /// Angle drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub width_shift_frac: f64,
    pub height_shift_frac: f64,
    /// Additive shift drawn per channel from `[-channel_shift, channel_shift]`.
    pub channel_shift: f64,
    /// Multiplicative brightness factor range; `[1, 1]` leaves brightness alone.
    pub brightness_range: [f64; 2],
    pub preprocess: Preprocess,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip: true,
            vflip: true,
            zoom_frac: 0.20,
            rotation_deg: 360.0,
            width_shift_frac: 0.10,
            height_shift_frac: 0.10,
            channel_shift: 50.0,
            brightness_range: [0.0, 1.2],
            preprocess: Preprocess::Caffe,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            hflip: false,
            vflip: false,
            zoom_frac: 0.0,
            rotation_deg: 0.0,
            width_shift_frac: 0.0,
            height_shift_frac: 0.0,
            channel_shift: 0.0,
            brightness_range: [1.0, 1.0],
            preprocess: Preprocess::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("zoom_frac", self.zoom_frac),
            ("width_shift_frac", self.width_shift_frac),
            ("height_shift_frac", self.height_shift_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.rotation_deg < 0.0 || self.channel_shift < 0.0 {
            return Err(Error::config("rotation and channel shift ranges must be ≥ 0"));
        }
        let [lo, hi] = self.brightness_range;
        if lo < 0.0 || hi < lo {
            return Err(Error::config(format!("brightness range [{lo}, {hi}] invalid")));
        }
        Ok(())
    }

    fn geometric(&self) -> bool {
        self.zoom_frac > 0.0 || self.rotation_deg > 0.0 || self.width_shift_frac > 0.0 || self.height_shift_frac > 0.0
    }
}

fn hwc(img: &Tensor<f32>) -> Result<[usize; 3]> {
    match *img.dims() {
        [h, w, c] => Ok([h, w, c]),
        _ => Err(Error::shape(format!("image must be [h, w, c], got {}", img.shape()))),
    }
}

pub fn hflip(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [h, w, c] = hwc(img)?;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for i in 0..h {
        for j in (0..w).rev() {
            let p = (i * w + j) * c;
            out.extend_from_slice(&src[p..p + c]);
        }
    }
    Tensor::new([h, w, c], out)
}

pub fn vflip(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [h, w, c] = hwc(img)?;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for i in (0..h).rev() {
        out.extend_from_slice(&src[i * w * c..(i + 1) * w * c]);
    }
    Tensor::new([h, w, c], out)
}

/// Bilinear sample at fractional `(y, x)`, clamped to the image.
fn sample(src: &[f32], h: usize, w: usize, c: usize, y: f64, x: f64, out: &mut [f32]) {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    for ch in 0..c {
        let at = |i: usize, j: usize| src[(i * w + j) * c + ch] as f64;
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        out[ch] = (top * (1.0 - fy) + bottom * fy) as f32;
    }
}

/// Resize with half-pixel-centre bilinear sampling. Same-size resizes are exact.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let [h, w, c] = hwc(img)?;
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = vec![0.0f32; out_h * out_w * c];
    for i in 0..out_h {
        for j in 0..out_w {
            let y = (i as f64 + 0.5) * sy - 0.5;
            let x = (j as f64 + 0.5) * sx - 0.5;
            let o = (i * out_w + j) * c;
            sample(img.data(), h, w, c, y, x, &mut out[o..o + c]);
        }
    }
    Tensor::new([out_h, out_w, c], out)
}

/// Rotate about the image centre, then magnify by `zoom`, then translate by
/// `(shift_y, shift_x)` pixels. Implemented as an inverse map per output pixel.
fn affine(img: &Tensor<f32>, degrees: f64, zoom: f64, shift_y: f64, shift_x: f64) -> Result<Tensor<f32>> {
    let [h, w, c] = hwc(img)?;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f32; img.len()];
    for i in 0..h {
        for j in 0..w {
            let dy = (i as f64 - cy - shift_y) / zoom;
            let dx = (j as f64 - cx - shift_x) / zoom;
            let y = cos * dy + sin * dx + cy;
            let x = -sin * dy + cos * dx + cx;
            let o = (i * w + j) * c;
            sample(img.data(), h, w, c, y, x, &mut out[o..o + c]);
        }
    }
    Tensor::new([h, w, c], out)
}

pub fn rotate(img: &Tensor<f32>, degrees: f64) -> Result<Tensor<f32>> {
    affine(img, degrees, 1.0, 0.0, 0.0)
}

/// RGB (0–255) → BGR with the per-channel means removed. No scaling.
pub fn caffe_preprocess(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [h, w, c] = hwc(img)?;
    if c != 3 {
        return Err(Error::shape(format!("caffe preprocessing needs 3 channels, got {c}")));
    }
    let mut out = Vec::with_capacity(img.len());
    for px in img.data().chunks(3) {
        for (ch, mean) in CAFFE_BGR_MEANS.iter().enumerate() {
            out.push(px[2 - ch] - mean);
        }
    }
    Tensor::new([h, w, 3], out)
}

pub fn preprocess(img: &Tensor<f32>, mode: Preprocess) -> Result<Tensor<f32>> {
    match mode {
        Preprocess::Caffe => caffe_preprocess(img),
        Preprocess::None => Ok(img.clone()),
    }
}

/// Apply a freshly sampled augmentation, then preprocessing.
pub fn augment<R: Rng + ?Sized>(img: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor<f32>> {
    let [h, w, c] = hwc(img)?;
    let mut out = img.clone();
    if cfg.hflip && rng.random_bool(0.5) {
        out = hflip(&out)?;
    }
    if cfg.vflip && rng.random_bool(0.5) {
        out = vflip(&out)?;
    }
    if cfg.geometric() {
        let sym = |rng: &mut R, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let degrees = sym(rng, cfg.rotation_deg);
        let zoom = 1.0 + sym(rng, cfg.zoom_frac);
        let shift_y = sym(rng, cfg.height_shift_frac) * h as f64;
        let shift_x = sym(rng, cfg.width_shift_frac) * w as f64;
        out = affine(&out, degrees, zoom, shift_y, shift_x)?;
    }
    if cfg.channel_shift > 0.0 {
        let r = cfg.channel_shift;
        let shifts: Vec<f32> = (0..c).map(|_| rng.random_range(-r..=r) as f32).collect();
        for px in out.data_mut().chunks_mut(c) {
            for (v, s) in px.iter_mut().zip(&shifts) {
                *v += s;
            }
        }
    }
    let [lo, hi] = cfg.brightness_range;
    if [lo, hi] != [1.0, 1.0] {
        let factor = if hi > lo { rng.random_range(lo..=hi) } else { lo } as f32;
        for v in out.data_mut() {
            *v *= factor;
        }
    }
    preprocess(&out, cfg.preprocess)
}
