//! Datasets laid out as `root/<class_name>/<image files>`, plus batching.

mod augment;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

pub use augment::{
    augment, caffe_preprocess, hflip, preprocess, resize_bilinear, rotate, vflip, AugmentConfig, Preprocess,
    CAFFE_BGR_MEANS,
};
pub use synth::{synth_position_dataset, SynthTask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[h, w, c]`, decoded and resized.
    pub image: Tensor<f32>,
    pub label: usize,
    pub source: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `[h, w, c]` of the first sample.
    pub fn image_dims(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.dims())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if let Some(bad) = self.samples.iter().find(|s| s.label >= k) {
            return Err(Error::data(format!(
                "sample label {} out of range for {k} classes",
                bad.label
            )));
        }
        if let Some(dims) = self.image_dims() {
            if let Some(bad) = self.samples.iter().find(|s| s.image.dims() != dims) {
                return Err(Error::data(format!(
                    "mixed image shapes {:?} and {:?}",
                    dims,
                    bad.image.dims()
                )));
            }
        }
        Ok(())
    }

    /// Stack the given samples into an `[n, h, w, c]` batch.
    pub fn stack<T: Scalar>(
        &self,
        indices: &[usize],
        mut transform: impl FnMut(usize, &Tensor<f32>) -> Result<Tensor<f32>>,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            images.push(transform(i, &s.image)?.cast::<T>());
            labels.push(s.label);
        }
        Ok((Tensor::stack(&images)?, labels))
    }

    /// Write every sample as PGM (1 channel) or PPM (3 channels), pixel value
    /// `round(v · scale)` clamped to 0..=255.
    pub fn write_to_dir(&self, root: &Path, scale: f32) -> Result<()> {
        for name in &self.class_names {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (i, s) in self.samples.iter().enumerate() {
            let &[h, w, c] = s.image.dims() else {
                return Err(Error::shape("sample image must be [h, w, c]"));
            };
            let ext = match c {
                1 => "pgm",
                3 => "ppm",
                _ => return Err(Error::data(format!("cannot write {c}-channel image"))),
            };
            let path = root.join(&self.class_names[s.label]).join(format!("{i:05}.{ext}"));
            let bytes: Vec<u8> = s
                .image
                .data()
                .iter()
                .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
                .collect();
            write_pnm(&path, w, h, c, &bytes)?;
        }
        Ok(())
    }
}

/// Binary PGM (`P5`) or PPM (`P6`) with maxval 255.
pub fn write_pnm(path: &Path, width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<()> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::data(format!("PNM cannot hold {channels} channels"))),
    };
    if pixels.len() != width * height * channels {
        return Err(Error::shape("pixel buffer does not match PNM geometry"));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Decode an image to `[h, w, c]` with values in 0–255. Grayscale files give
/// one channel, everything else three (RGB).
pub fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::data(format!("cannot decode {}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    if gray {
        let buf = img.to_luma32f();
        let data = buf.into_raw().into_iter().map(|v| v * 255.0).collect();
        Tensor::new([h, w, 1], data)
    } else {
        let buf = img.to_rgb32f();
        let data = buf.into_raw().into_iter().map(|v| v * 255.0).collect();
        Tensor::new([h, w, 3], data)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

/// Load `root/<class>/<image>`; classes are sorted by directory name and every
/// image is resized to `image_side`² (bilinear) and multiplied by `scale`.
pub fn load_dataset(root: &Path, image_side: usize, scale: f32, split: Split) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::data(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    if image_side == 0 {
        return Err(Error::config("image side must be ≥ 1"));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::data(format!("no class directories under {}", root.display())));
    }
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::data(format!("class directory {} is empty", dir.display())));
        }
        for path in files {
            let raw = decode_image(&path)?;
            let resized = resize_bilinear(&raw, image_side, image_side)?;
            let image = if scale == 1.0 { resized } else { resized.scale(scale)? };
            samples.push(Sample {
                image,
                label,
                source: Some(path),
            });
        }
    }
    let ds = Dataset {
        samples,
        class_names,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

/// Epoch-wise shuffled mini-batches of sample indices; the last batch may be
/// short. The order depends only on `(shuffle_seed, epoch)`.
pub fn batches(len: usize, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be ≥ 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = seed::stream(shuffle_seed, &[seed::PURPOSE_SHUFFLE, epoch as u64]);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// In-order mini-batches, used for evaluation.
pub fn sequential_batches(len: usize, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be ≥ 1"));
    }
    let order: Vec<usize> = (0..len).collect();
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_and_coverage() {
        let b = batches(6, 4, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn batches_are_seeded() {
        assert_eq!(batches(50, 70, 3, 2).unwrap(), batches(50, 70, 3, 2).unwrap());
        assert_ne!(batches(50, 7, 3, 2).unwrap(), batches(50, 7, 3, 3).unwrap());
        assert_eq!(batches(200, 70, 0, 0).unwrap().len(), 3);
        assert!(batches(5, 0, 0, 0).is_err());
    }

    #[test]
    fn missing_root_is_data_error() {
        let err = load_dataset(Path::new("/definitely/not/here"), 8, 1.0, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
