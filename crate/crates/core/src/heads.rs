//! Classification heads that connect a backbone feature map to the classifier.
//!
//! | kind                    | pipeline                                                        |
//! |-------------------------|-----------------------------------------------------------------|
//! | `gap`                   | global average pool → dense                                     |
//! | `gap_dropout`           | global average pool → dropout → dense                           |
//! | `flatten_fc`            | flatten → dense                                                 |
//! | `avg_flatten_fc`        | avg pool → flatten → dense                                      |
//! | `gwap`                  | shared `[h, w]` weighted spatial sum → dense                    |
//! | `dw`                    | full-extent depthwise conv → flatten → dense                    |
//! | `dw_nonneg`             | as `dw`, kernel clamped to ≥ 0 after every step                 |
//! | `avg_dw_nonneg`         | avg pool → non-negative full-extent depthwise conv → flatten → dense |
//! | `avg_dw_nonneg_dropout` | as `avg_dw_nonneg`, with dropout right before the dense layer   |
//!
//! The depthwise layers carry a bias and no activation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{Constraint, DepthwiseConv2dParams, Mode};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the spatial (depthwise / GWAP) kernel initializer.
pub const SPATIAL_INIT_STD: f64 = 0.01;

pub const DEFAULT_DROPOUT_RATE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMapSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureMapSpec {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::config(format!(
                "feature map {height}x{width}x{channels} has a zero extent"
            )));
        }
        Ok(FeatureMapSpec {
            height,
            width,
            channels,
        })
    }

    pub fn square(side: usize, channels: usize) -> Result<Self> {
        Self::new(side, side, channels)
    }
}

impl fmt::Display for FeatureMapSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Gap,
    GapDropout,
    FlattenFc,
    AvgFlattenFc,
    Gwap,
    Dw,
    DwNonneg,
    AvgDwNonneg,
    AvgDwNonnegDropout,
}

impl HeadKind {
    pub const ALL: [HeadKind; 9] = [
        HeadKind::Gap,
        HeadKind::GapDropout,
        HeadKind::FlattenFc,
        HeadKind::AvgFlattenFc,
        HeadKind::Gwap,
        HeadKind::Dw,
        HeadKind::DwNonneg,
        HeadKind::AvgDwNonneg,
        HeadKind::AvgDwNonnegDropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Gap => "gap",
            HeadKind::GapDropout => "gap_dropout",
            HeadKind::FlattenFc => "flatten_fc",
            HeadKind::AvgFlattenFc => "avg_flatten_fc",
            HeadKind::Gwap => "gwap",
            HeadKind::Dw => "dw",
            HeadKind::DwNonneg => "dw_nonneg",
            HeadKind::AvgDwNonneg => "avg_dw_nonneg",
            HeadKind::AvgDwNonnegDropout => "avg_dw_nonneg_dropout",
        }
    }

    pub fn uses_pool(self) -> bool {
        matches!(
            self,
            HeadKind::AvgFlattenFc | HeadKind::AvgDwNonneg | HeadKind::AvgDwNonnegDropout
        )
    }

    pub fn uses_dropout(self) -> bool {
        matches!(self, HeadKind::GapDropout | HeadKind::AvgDwNonnegDropout)
    }

    pub fn is_depthwise(self) -> bool {
        matches!(
            self,
            HeadKind::Dw | HeadKind::DwNonneg | HeadKind::AvgDwNonneg | HeadKind::AvgDwNonnegDropout
        )
    }

    pub fn is_nonneg(self) -> bool {
        matches!(
            self,
            HeadKind::DwNonneg | HeadKind::AvgDwNonneg | HeadKind::AvgDwNonnegDropout
        )
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        HeadKind::ALL.into_iter().find(|k| k.name() == key).ok_or_else(|| {
            let names: Vec<_> = HeadKind::ALL.iter().map(|k| k.name()).collect();
            Error::config(format!(
                "unknown head kind `{s}` (expected one of {})",
                names.join(", ")
            ))
        })
    }
}

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT_RATE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_kernel: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    pub classes: usize,
}

impl HeadSpec {
    pub fn new(kind: HeadKind, classes: usize) -> Self {
        HeadSpec {
            kind,
            pool_kernel: None,
            dropout_rate: DEFAULT_DROPOUT_RATE,
            classes,
        }
    }

    pub fn with_pool(mut self, k: usize) -> Self {
        self.pool_kernel = Some(k);
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_rate = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::config("head needs at least one class"));
        }
        match (self.kind.uses_pool(), self.pool_kernel) {
            (true, None) => return Err(Error::config(format!("head `{}` needs pool_kernel", self.kind))),
            (false, Some(_)) => return Err(Error::config(format!("head `{}` takes no pool_kernel", self.kind))),
            (true, Some(0)) => return Err(Error::config("pool_kernel must be ≥ 1")),
            _ => {}
        }
        if self.kind.uses_dropout() && !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Spatial size seen by the spatial stage, after optional pooling.
    pub fn pooled_spatial(&self, fm: &FeatureMapSpec) -> Result<(usize, usize)> {
        self.validate()?;
        match self.pool_kernel {
            None => Ok((fm.height, fm.width)),
            Some(k) if k > fm.height.min(fm.width) => Err(Error::config(format!(
                "pool kernel {k} larger than feature map {}x{}",
                fm.height, fm.width
            ))),
            Some(k) => Ok((fm.height / k, fm.width / k)),
        }
    }

    /// Width of the vector fed to the final dense layer.
    pub fn classifier_inputs(&self, fm: &FeatureMapSpec) -> Result<usize> {
        let (h, w) = self.pooled_spatial(fm)?;
        Ok(match self.kind {
            HeadKind::FlattenFc | HeadKind::AvgFlattenFc => h * w * fm.channels,
            _ => fm.channels,
        })
    }
}

impl fmt::Display for HeadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(k) = self.pool_kernel {
            write!(f, "(pool {k})")?;
        }
        Ok(())
    }
}

/// The spatial-aggregation stage of a head.
#[derive(Clone, Debug, PartialEq)]
pub enum SpatialParams<T> {
    None,
    Depthwise(DepthwiseConv2dParams<T>),
    /// One `[h, w]` weight set shared by all channels.
    Gwap(Tensor<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub spatial: SpatialParams<T>,
    /// `[d, classes]`
    pub fc_weight: Tensor<T>,
    /// `[classes]`
    pub fc_bias: Tensor<T>,
    pub init_seed: u64,
}

impl<T: Scalar> HeadParams<T> {
    /// Trainable tensors in a fixed order, with their snapshot names and
    /// projection rules.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>, Constraint)> {
        let mut out = Vec::new();
        match &self.spatial {
            SpatialParams::None => {}
            SpatialParams::Depthwise(dw) => {
                out.push(("head.dw.kernel", &dw.kernel, dw.constraint));
                if let Some(b) = &dw.bias {
                    out.push(("head.dw.bias", b, Constraint::None));
                }
            }
            SpatialParams::Gwap(k) => out.push(("head.gwap.kernel", k, Constraint::None)),
        }
        out.push(("head.fc.weight", &self.fc_weight, Constraint::None));
        out.push(("head.fc.bias", &self.fc_bias, Constraint::None));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>, Constraint)> {
        let mut out = Vec::new();
        match &mut self.spatial {
            SpatialParams::None => {}
            SpatialParams::Depthwise(dw) => {
                out.push(("head.dw.kernel", &mut dw.kernel, dw.constraint));
                if let Some(b) = &mut dw.bias {
                    out.push(("head.dw.bias", b, Constraint::None));
                }
            }
            SpatialParams::Gwap(k) => out.push(("head.gwap.kernel", k, Constraint::None)),
        }
        out.push(("head.fc.weight", &mut self.fc_weight, Constraint::None));
        out.push(("head.fc.bias", &mut self.fc_bias, Constraint::None));
        out
    }

    /// Number of allocated trainable elements.
    pub fn allocated_count(&self) -> usize {
        self.tensors().iter().map(|(_, t, _)| t.len()).sum()
    }

    /// Rebuild from named tensors (the inverse of [`HeadParams::tensors`]).
    pub fn from_named(spec: &HeadSpec, mut take: impl FnMut(&str) -> Result<Tensor<T>>) -> Result<Self> {
        let spatial = if spec.kind.is_depthwise() {
            SpatialParams::Depthwise(DepthwiseConv2dParams {
                kernel: take("head.dw.kernel")?,
                bias: Some(take("head.dw.bias")?),
                constraint: constraint_for(spec.kind),
            })
        } else if spec.kind == HeadKind::Gwap {
            SpatialParams::Gwap(take("head.gwap.kernel")?)
        } else {
            SpatialParams::None
        };
        Ok(HeadParams {
            spatial,
            fc_weight: take("head.fc.weight")?,
            fc_bias: take("head.fc.bias")?,
            init_seed: 0,
        })
    }
}

fn constraint_for(kind: HeadKind) -> Constraint {
    if kind.is_nonneg() {
        Constraint::NonNegative
    } else {
        Constraint::None
    }
}

/// Glorot-uniform `[fan_in, fan_out]` matrix.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    dims: Vec<usize>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).map_err(|e| Error::config(format!("uniform init: {e}")))?;
    let n: usize = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| T::of(dist.sample(rng))).collect())
}

pub(crate) fn normal_tensor<T: Scalar, R: Rng + ?Sized>(dims: Vec<usize>, std: f64, rng: &mut R) -> Result<Tensor<T>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::config(format!("normal init: {e}")))?;
    let n: usize = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| T::of(dist.sample(rng))).collect())
}

/// Allocate and initialize a head for the given feature map.
///
/// Spatial kernels are drawn from `Normal(0, 0.01)` with zero bias; the dense
/// layer is Glorot-uniform with zero bias. Deterministic in `seed`.
pub fn build_head<T: Scalar>(fm: &FeatureMapSpec, spec: &HeadSpec, seed: u64) -> Result<HeadParams<T>> {
    let (sh, sw) = spec.pooled_spatial(fm)?;
    let c = fm.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spatial = match spec.kind {
        k if k.is_depthwise() => SpatialParams::Depthwise(DepthwiseConv2dParams {
            kernel: normal_tensor(vec![sh, sw, c], SPATIAL_INIT_STD, &mut rng)?,
            bias: Some(Tensor::zeros([c])?),
            constraint: constraint_for(k),
        }),
        HeadKind::Gwap => SpatialParams::Gwap(normal_tensor(vec![sh, sw], SPATIAL_INIT_STD, &mut rng)?),
        _ => SpatialParams::None,
    };
    let d = spec.classifier_inputs(fm)?;
    let fc_weight = glorot_uniform(d, spec.classes, vec![d, spec.classes], &mut rng)?;
    Ok(HeadParams {
        spatial,
        fc_weight,
        fc_bias: Tensor::zeros([spec.classes])?,
        init_seed: seed,
    })
}

/// Exact trainable-parameter count, from the closed-form geometry alone.
pub fn head_param_count(fm: &FeatureMapSpec, spec: &HeadSpec) -> Result<u64> {
    let (sh, sw) = spec.pooled_spatial(fm)?;
    let (h, w, c, k) = (
        fm.height as u64,
        fm.width as u64,
        fm.channels as u64,
        spec.classes as u64,
    );
    let (sh, sw) = (sh as u64, sw as u64);
    Ok(match spec.kind {
        HeadKind::Gap | HeadKind::GapDropout => c * k + k,
        HeadKind::Dw | HeadKind::DwNonneg | HeadKind::AvgDwNonneg | HeadKind::AvgDwNonnegDropout => {
            sh * sw * c + c + c * k + k
        }
        HeadKind::FlattenFc => h * w * c * k + k,
        HeadKind::AvgFlattenFc => sh * sw * c * k + k,
        HeadKind::Gwap => h * w + c * k + k,
    })
}

/// Clamp the depthwise kernel of a non-negative head to ≥ 0. Bias untouched.
pub fn apply_constraint<T: Scalar>(mut params: HeadParams<T>, spec: &HeadSpec) -> Result<HeadParams<T>> {
    if !spec.kind.is_nonneg() {
        return Err(Error::contract(format!(
            "head `{}` has no non-negative constraint",
            spec.kind
        )));
    }
    match &mut params.spatial {
        SpatialParams::Depthwise(dw) => {
            Constraint::NonNegative.project(&mut dw.kernel);
        }
        _ => return Err(Error::contract("constrained head without a depthwise stage")),
    }
    Ok(params)
}

/// Node ids of a head's parameters inside a graph, in [`HeadParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct HeadNodes {
    spatial_kernel: Option<NodeId>,
    spatial_bias: Option<NodeId>,
    fc_weight: NodeId,
    fc_bias: NodeId,
}

impl HeadNodes {
    /// Reassemble from ids already registered in [`HeadParams::tensors`] order.
    pub fn from_ids<T: Scalar>(params: &HeadParams<T>, ids: &[NodeId]) -> Result<Self> {
        let expected = params.tensors().len();
        if ids.len() != expected {
            return Err(Error::contract(format!(
                "head needs {expected} node ids, got {}",
                ids.len()
            )));
        }
        let (spatial_kernel, spatial_bias, rest) = match &params.spatial {
            SpatialParams::None => (None, None, ids),
            SpatialParams::Depthwise(dw) if dw.bias.is_some() => (Some(ids[0]), Some(ids[1]), &ids[2..]),
            SpatialParams::Depthwise(_) | SpatialParams::Gwap(_) => (Some(ids[0]), None, &ids[1..]),
        };
        Ok(HeadNodes {
            spatial_kernel,
            spatial_bias,
            fc_weight: rest[0],
            fc_bias: rest[1],
        })
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.spatial_kernel
            .into_iter()
            .chain(self.spatial_bias)
            .chain([self.fc_weight, self.fc_bias])
            .collect()
    }
}

/// Record the head's parameters as trainable leaves.
pub fn register_head<T: Scalar>(g: &mut Graph<T>, params: &HeadParams<T>) -> Result<HeadNodes> {
    let (spatial_kernel, spatial_bias) = match &params.spatial {
        SpatialParams::None => (None, None),
        SpatialParams::Depthwise(dw) => (
            Some(g.parameter(dw.kernel.clone())?),
            dw.bias.as_ref().map(|b| g.parameter(b.clone())).transpose()?,
        ),
        SpatialParams::Gwap(k) => (Some(g.parameter(k.clone())?), None),
    };
    Ok(HeadNodes {
        spatial_kernel,
        spatial_bias,
        fc_weight: g.parameter(params.fc_weight.clone())?,
        fc_bias: g.parameter(params.fc_bias.clone())?,
    })
}

/// Record the head pipeline on top of the feature-map node `fm`; returns the
/// `[n, classes]` logits node.
pub fn head_forward_graph<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    fm: NodeId,
    nodes: &HeadNodes,
    spec: &HeadSpec,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId> {
    spec.validate()?;
    let x = match spec.pool_kernel {
        Some(k) => g.avg_pool2d(fm, k)?,
        None => fm,
    };
    let features = match spec.kind {
        HeadKind::Gap | HeadKind::GapDropout => g.global_avg_pool(x)?,
        HeadKind::FlattenFc | HeadKind::AvgFlattenFc => g.flatten(x)?,
        HeadKind::Gwap => {
            let k = nodes
                .spatial_kernel
                .ok_or_else(|| Error::contract("gwap head without kernel"))?;
            g.gwap(x, k)?
        }
        _ => {
            let k = nodes
                .spatial_kernel
                .ok_or_else(|| Error::contract("depthwise head without kernel"))?;
            let (kh, kw) = match g.value(k).dims() {
                &[kh, kw, _] => (kh, kw),
                _ => return Err(Error::contract("depthwise kernel rank")),
            };
            let xd = g.value(x).dims();
            if xd.len() != 4 || xd[1] != kh || xd[2] != kw {
                return Err(Error::shape(format!(
                    "depthwise kernel {kh}x{kw} must cover the whole map {}",
                    g.value(x).shape()
                )));
            }
            let y = g.depthwise_conv2d(x, k, nodes.spatial_bias)?;
            g.flatten(y)?
        }
    };
    let features = if spec.kind.uses_dropout() {
        g.dropout(features, spec.dropout_rate, mode, rng)?
    } else {
        features
    };
    g.dense(features, nodes.fc_weight, nodes.fc_bias)
}

/// Logits of a head applied to a `[n, h, w, c]` feature map.
pub fn head_forward<T: Scalar, R: Rng + ?Sized>(
    fm: &Tensor<T>,
    params: &HeadParams<T>,
    spec: &HeadSpec,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(fm.clone())?;
    let nodes = register_head(&mut g, params)?;
    let logits = head_forward_graph(&mut g, x, &nodes, spec, mode, rng)?;
    Ok(g.value(logits).clone())
}
