//! Grad-CAM heatmaps over the feature map that feeds the head.

use std::path::Path;

use crate::data::write_pnm;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    /// `[h, w]`, every value ≥ 0.
    pub values: Tensor<f64>,
    pub normalized: bool,
    pub class: usize,
}

impl HeatMap {
    pub fn dims(&self) -> (usize, usize) {
        let d = self.values.dims();
        (d[0], d[1])
    }

    /// Divide by the maximum; an all-zero map stays zero.
    pub fn normalize(mut self) -> Self {
        let max = self.values.max_value();
        if max > 0.0 {
            for v in self.values.data_mut() {
                *v /= max;
            }
        }
        self.normalized = true;
        self
    }
}

/// `relu(Σₖ αₖ Aᵏ)` with `αₖ` the spatial mean of `grad` on channel `k`.
///
/// `feature_map` and `grad` are both `[1, h, w, c]`.
pub fn grad_cam<T: Scalar>(
    feature_map: &Tensor<T>,
    grad: &Tensor<T>,
    class: usize,
    normalize: bool,
) -> Result<HeatMap> {
    let &[1, h, w, c] = feature_map.dims() else {
        return Err(Error::shape(format!(
            "grad-cam needs a single [1, h, w, c] feature map, got {}",
            feature_map.shape()
        )));
    };
    if grad.shape() != feature_map.shape() {
        return Err(Error::shape(format!(
            "gradient {} does not match feature map {}",
            grad.shape(),
            feature_map.shape()
        )));
    }
    let a = feature_map.to_f64_vec();
    let gr = grad.to_f64_vec();
    let mut alpha = vec![0.0f64; c];
    for px in gr.chunks(c) {
        for (al, g) in alpha.iter_mut().zip(px) {
            *al += g;
        }
    }
    let inv = 1.0 / (h * w) as f64;
    for al in &mut alpha {
        *al *= inv;
    }
    let values: Vec<f64> = a
        .chunks(c)
        .map(|px| px.iter().zip(&alpha).map(|(v, al)| v * al).sum::<f64>().max(0.0))
        .collect();
    let hm = HeatMap {
        values: Tensor::new([h, w], values)?,
        normalized: false,
        class,
    };
    Ok(if normalize { hm.normalize() } else { hm })
}

/// 8-bit pixels `⌊255 v⌋` of the normalized map, each cell replicated into an
/// `upscale × upscale` block.
pub fn heatmap_pixels(hm: &HeatMap, upscale: usize) -> Result<(usize, usize, Vec<u8>)> {
    if upscale == 0 {
        return Err(Error::config("upscale factor must be ≥ 1"));
    }
    if let Some(v) = hm.values.data().iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(Error::contract(format!("heatmap value {v} is negative or NaN")));
    }
    let normalized = if hm.normalized {
        hm.clone()
    } else {
        hm.clone().normalize()
    };
    let (h, w) = hm.dims();
    let (oh, ow) = (h * upscale, w * upscale);
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let v = normalized.values.data()[(i / upscale) * w + j / upscale];
            out.push((255.0 * v.min(1.0)).floor() as u8);
        }
    }
    Ok((oh, ow, out))
}

/// Write the map as a binary PGM (`P5`).
pub fn export_heatmap(hm: &HeatMap, path: &Path, upscale: usize) -> Result<()> {
    let (h, w, px) = heatmap_pixels(hm, upscale)?;
    write_pnm(path, w, h, 1, &px)
}

/// `<image>_<head>_<class>.pgm`
pub fn heatmap_file_name(image_stem: &str, head: &str, class: usize) -> String {
    format!("{image_stem}_{head}_{class}.pgm")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: [usize; 4], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_gives_zero_map() {
        let a = t([1, 2, 2, 1], &[1., -2., 3., 4.]);
        let z = t([1, 2, 2, 1], &[0.; 4]);
        let hm = grad_cam(&a, &z, 0, true).unwrap();
        assert!(hm.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_gradient_is_relu() {
        let a = t([1, 2, 2, 1], &[1., -2., 3., 4.]);
        let one = t([1, 2, 2, 1], &[1.; 4]);
        let hm = grad_cam(&a, &one, 0, false).unwrap();
        assert_eq!(hm.values.data(), &[1., 0., 3., 4.]);
        assert_eq!(hm.dims(), (2, 2));
    }

    #[test]
    fn opposite_weights_cancel() {
        let a = t([1, 1, 2, 2], &[0.7, 0.7, -1.2, -1.2]);
        let g = t([1, 1, 2, 2], &[1., -1., 1., -1.]);
        let hm = grad_cam(&a, &g, 0, true).unwrap();
        assert!(hm.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixel_quantization() {
        let hm = HeatMap {
            values: Tensor::new([2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap(),
            normalized: true,
            class: 0,
        };
        assert_eq!(heatmap_pixels(&hm, 1).unwrap().2, vec![0, 255, 127, 63]);
        let (h, w, px) = heatmap_pixels(&hm, 3).unwrap();
        assert_eq!((h, w), (6, 6));
        assert_eq!(&px[..6], &[0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn upscale_seven_to_224() {
        let hm = HeatMap {
            values: Tensor::new([7, 7], (0..49).map(f64::from).collect()).unwrap(),
            normalized: false,
            class: 2,
        };
        let (h, w, px) = heatmap_pixels(&hm, 32).unwrap();
        assert_eq!((h, w, px.len()), (224, 224, 224 * 224));
        assert_eq!(px[0], 0);
        assert_eq!(px[224 * 224 - 1], 255);
    }

    #[test]
    fn negative_values_refused() {
        let hm = HeatMap {
            values: Tensor::new([1, 1], vec![-0.5]).unwrap(),
            normalized: false,
            class: 0,
        };
        assert!(matches!(heatmap_pixels(&hm, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn mismatched_shapes() {
        let a = t([1, 2, 2, 1], &[0.; 4]);
        let g = t([1, 1, 4, 1], &[0.; 4]);
        assert!(matches!(grad_cam(&a, &g, 0, false), Err(Error::Shape(_))));
    }
}
