//! Position-coded synthetic feature maps.
//!
//! Each sample is a `[grid, grid, 1]` map with a single hot cell (value 1)
//! plus optional Gaussian noise. The class depends only on *where* the cell
//! is, so the spatial mean of every noiseless sample is the same `1/grid²`:
//! a head that averages space away cannot tell the classes apart.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    /// One class per cell, `grid²` classes.
    PerCell,
    /// Class = quadrant of the hot cell, 4 classes. Rows and columns split at
    /// `⌈grid/2⌉`, so for odd grids the top/left halves are one cell larger.
    Quadrant,
}

impl SynthTask {
    pub fn classes(self, grid: usize) -> usize {
        match self {
            SynthTask::PerCell => grid * grid,
            SynthTask::Quadrant => 4,
        }
    }

    /// Class of cell `(row, col)`.
    pub fn class_of(self, grid: usize, row: usize, col: usize) -> usize {
        match self {
            SynthTask::PerCell => row * grid + col,
            SynthTask::Quadrant => {
                let half = grid.div_ceil(2);
                usize::from(row >= half) * 2 + usize::from(col >= half)
            }
        }
    }
}

pub fn synth_position_dataset<R: Rng + ?Sized>(
    grid: usize,
    task: SynthTask,
    n_per_class: usize,
    noise_std: f64,
    split: Split,
    rng: &mut R,
) -> Result<Dataset> {
    if grid < 2 {
        return Err(Error::config(format!("synthetic grid {grid} must be ≥ 2")));
    }
    let noise = if noise_std > 0.0 {
        Some(Normal::new(0.0, noise_std).map_err(|e| Error::config(format!("noise: {e}")))?)
    } else if noise_std == 0.0 {
        None
    } else {
        return Err(Error::config("noise std must be ≥ 0"));
    };
    let k = task.classes(grid);
    let mut cells_by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for cell in 0..grid * grid {
        cells_by_class[task.class_of(grid, cell / grid, cell % grid)].push(cell);
    }
    let mut samples = Vec::with_capacity(k * n_per_class);
    for (label, cells) in cells_by_class.iter().enumerate() {
        for _ in 0..n_per_class {
            let cell = cells[rng.random_range(0..cells.len())];
            let mut data = vec![0.0f32; grid * grid];
            data[cell] = 1.0;
            if let Some(dist) = &noise {
                for v in &mut data {
                    *v += dist.sample(rng) as f32;
                }
            }
            samples.push(Sample {
                image: Tensor::new([grid, grid, 1], data)?,
                label,
                source: None,
            });
        }
    }
    let class_names = (0..k)
        .map(|i| match task {
            SynthTask::PerCell => format!("cell_{i:03}"),
            SynthTask::Quadrant => format!("quadrant_{i}"),
        })
        .collect();
    Ok(Dataset {
        samples,
        class_names,
        split,
    })
}
