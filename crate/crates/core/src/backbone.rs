//! Feature extractors.
//!
//! Named backbones exist only as accounting constants plus their output
//! geometry; the trainable [`SmallBackbone`] is a plain stack of strided
//! valid-padding conv + ReLU stages for desk-scale runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::heads::{glorot_uniform, FeatureMapSpec};
use crate::nn::{valid_out, Conv2dParams};
use crate::tensor::{Scalar, Tensor};

/// Every registered backbone downsamples its input by this factor.
pub const OUTPUT_STRIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneEntry {
    pub name: &'static str,
    /// Trainable parameters of the feature extractor with no head attached.
    pub base_params: u64,
    pub out_channels: usize,
    pub output_stride: usize,
}

/// Base-model constants. The first three are published directly; the others
/// are recovered by subtracting a GAP head (`c·K + K`) from a published total.
pub const REGISTRY: &[BackboneEntry] = &[
    BackboneEntry {
        name: "resnet50",
        base_params: 23_587_712,
        out_channels: 2048,
        output_stride: OUTPUT_STRIDE,
    },
    BackboneEntry {
        name: "xception",
        base_params: 20_861_480,
        out_channels: 2048,
        output_stride: OUTPUT_STRIDE,
    },
    BackboneEntry {
        name: "densenet121",
        base_params: 7_037_504,
        out_channels: 1024,
        output_stride: OUTPUT_STRIDE,
    },
    // 12,652,870 - (1664·6 + 6); also 12,754,435 - (1664·67 + 67)
    BackboneEntry {
        name: "densenet169",
        base_params: 12_642_880,
        out_channels: 1664,
        output_stride: OUTPUT_STRIDE,
    },
    // 23,702,083 - (2048·67 + 67)
    BackboneEntry {
        name: "resnet50v2",
        base_params: 23_564_800,
        out_channels: 2048,
        output_stride: OUTPUT_STRIDE,
    },
    // 18,450,691 - (1920·67 + 67)
    BackboneEntry {
        name: "densenet201",
        base_params: 18_321_984,
        out_channels: 1920,
        output_stride: OUTPUT_STRIDE,
    },
];

pub fn registry_lookup(name: &str) -> Result<BackboneEntry> {
    let key = name.trim().to_ascii_lowercase();
    REGISTRY
        .iter()
        .find(|e| e.name == key)
        .copied()
        .ok_or_else(|| Error::UnknownBackbone(name.to_string()))
}

/// Geometry of the final feature map for a square input.
pub fn feature_map_spec(entry: &BackboneEntry, input_side: usize) -> Result<FeatureMapSpec> {
    if input_side < entry.output_stride {
        return Err(Error::config(format!(
            "input side {input_side} is smaller than the output stride {}",
            entry.output_stride
        )));
    }
    let side = input_side / entry.output_stride;
    FeatureMapSpec::square(side, entry.out_channels)
}

/// One conv + ReLU stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// A stack of stages. An empty stack is the identity backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmallBackboneSpec {
    pub stages: Vec<Stage>,
    pub input_side: usize,
    pub input_channels: usize,
}

impl SmallBackboneSpec {
    /// Four 2x2 stride-2 stages; 64x64x3 in, 4x4x32 out.
    pub fn desk_default() -> Self {
        let stage = |filters| Stage {
            filters,
            kernel: 2,
            stride: 2,
        };
        SmallBackboneSpec {
            stages: vec![stage(8), stage(16), stage(32), stage(32)],
            input_side: 64,
            input_channels: 3,
        }
    }

    pub fn identity(side: usize, channels: usize) -> Self {
        SmallBackboneSpec {
            stages: Vec::new(),
            input_side: side,
            input_channels: channels,
        }
    }

    /// Output geometry, or a shape error if some stage's kernel no longer fits.
    pub fn output_spec(&self) -> Result<FeatureMapSpec> {
        let mut side = self.input_side;
        let mut channels = self.input_channels;
        for (i, s) in self.stages.iter().enumerate() {
            if s.filters == 0 {
                return Err(Error::config(format!("stage {i} has zero filters")));
            }
            side = valid_out(side, s.kernel, s.stride).ok_or_else(|| {
                Error::shape(format!(
                    "stage {i}: kernel {} stride {} does not fit side {side}",
                    s.kernel, s.stride
                ))
            })?;
            channels = s.filters;
        }
        FeatureMapSpec::square(side, channels)
    }

    pub fn param_count(&self) -> usize {
        let mut cin = self.input_channels;
        let mut total = 0;
        for s in &self.stages {
            total += s.kernel * s.kernel * cin * s.filters + s.filters;
            cin = s.filters;
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmallBackbone<T> {
    pub spec: SmallBackboneSpec,
    pub stages: Vec<Conv2dParams<T>>,
}

impl<T: Scalar> SmallBackbone<T> {
    /// Glorot-uniform kernels, zero bias.
    pub fn build(spec: &SmallBackboneSpec, seed: u64) -> Result<Self> {
        spec.output_spec()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = spec.input_channels;
        let mut stages = Vec::with_capacity(spec.stages.len());
        for s in &spec.stages {
            let fan_in = s.kernel * s.kernel * cin;
            let fan_out = s.kernel * s.kernel * s.filters;
            stages.push(Conv2dParams {
                kernel: glorot_uniform(fan_in, fan_out, vec![s.kernel, s.kernel, cin, s.filters], &mut rng)?,
                bias: Some(Tensor::zeros([s.filters])?),
                stride: s.stride,
            });
            cin = s.filters;
        }
        Ok(SmallBackbone {
            spec: spec.clone(),
            stages,
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("backbone.{i}.kernel"), &s.kernel));
            if let Some(b) = &s.bias {
                out.push((format!("backbone.{i}.bias"), b));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.kernel"), &mut s.kernel));
            if let Some(b) = &mut s.bias {
                out.push((format!("backbone.{i}.bias"), b));
            }
        }
        out
    }

    pub fn allocated_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn from_named(spec: &SmallBackboneSpec, mut take: impl FnMut(&str) -> Result<Tensor<T>>) -> Result<Self> {
        let stages = spec
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(Conv2dParams {
                    kernel: take(&format!("backbone.{i}.kernel"))?,
                    bias: Some(take(&format!("backbone.{i}.bias"))?),
                    stride: s.stride,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SmallBackbone {
            spec: spec.clone(),
            stages,
        })
    }

    /// Record the parameters as trainable leaves, in [`SmallBackbone::tensors`] order.
    pub fn register(&self, g: &mut Graph<T>) -> Result<Vec<NodeId>> {
        let mut ids = Vec::new();
        for s in &self.stages {
            ids.push(g.parameter(s.kernel.clone())?);
            if let Some(b) = &s.bias {
                ids.push(g.parameter(b.clone())?);
            }
        }
        Ok(ids)
    }

    /// Record conv + ReLU stages on `x`; `ids` come from [`SmallBackbone::register`].
    pub fn forward_graph(&self, g: &mut Graph<T>, x: NodeId, ids: &[NodeId]) -> Result<NodeId> {
        let mut h = x;
        let mut cursor = ids.iter();
        for s in &self.stages {
            let k = *cursor.next().ok_or_else(|| Error::contract("missing stage kernel"))?;
            let b = match s.bias {
                Some(_) => Some(*cursor.next().ok_or_else(|| Error::contract("missing stage bias"))?),
                None => None,
            };
            let y = g.conv2d(h, k, b, s.stride)?;
            h = g.relu(y)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xi = g.constant(x.clone())?;
        let ids = self.register(&mut g)?;
        let y = self.forward_graph(&mut g, xi, &ids)?;
        Ok(g.value(y).clone())
    }
}
