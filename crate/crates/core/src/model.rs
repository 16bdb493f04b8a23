//! A small backbone followed by a classification head.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{SmallBackbone, SmallBackboneSpec};
use crate::error::{Error, Result};
use crate::heads::{build_head, head_forward_graph, register_head, FeatureMapSpec, HeadParams, HeadSpec};
use crate::nn::{Constraint, Mode};
use crate::optim::ParamMut;
use crate::seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub backbone: SmallBackbone<T>,
    pub head: HeadParams<T>,
    pub head_spec: HeadSpec,
}

/// Nodes recorded by [`Model::forward_graph`].
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub params: Vec<NodeId>,
    pub feature_map: NodeId,
    pub logits: NodeId,
}

impl<T: Scalar> Model<T> {
    pub fn build(backbone: &SmallBackboneSpec, head_spec: &HeadSpec, init_seed: u64) -> Result<Self> {
        head_spec.validate()?;
        let bb = SmallBackbone::build(backbone, seed::derive(init_seed, &[seed::PURPOSE_BACKBONE]))?;
        let fm = backbone.output_spec()?;
        let head = build_head(&fm, head_spec, seed::derive(init_seed, &[seed::PURPOSE_HEAD]))?;
        Ok(Model {
            backbone: bb,
            head,
            head_spec: head_spec.clone(),
        })
    }

    pub fn feature_map_spec(&self) -> Result<FeatureMapSpec> {
        self.backbone.spec.output_spec()
    }

    pub fn classes(&self) -> usize {
        self.head_spec.classes
    }

    pub fn param_count(&self) -> usize {
        self.backbone.allocated_count() + self.head.allocated_count()
    }

    /// All trainable tensors with their snapshot names, backbone first.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.backbone.tensors();
        out.extend(self.head.tensors().into_iter().map(|(n, t, _)| (n.to_string(), t)));
        out
    }

    /// Mutable parameters in [`Model::named_tensors`] order, for the optimizer.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out: Vec<ParamMut<'_, T>> = self
            .backbone
            .tensors_mut()
            .into_iter()
            .map(|(_, value)| ParamMut {
                value,
                constraint: Constraint::None,
            })
            .collect();
        out.extend(
            self.head
                .tensors_mut()
                .into_iter()
                .map(|(_, value, constraint)| ParamMut { value, constraint }),
        );
        out
    }

    /// Record the full model on the `[n, h, w, c]` input node `x`.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardNodes> {
        let mut params = self.backbone.register(g)?;
        let feature_map = self.backbone.forward_graph(g, x, &params)?;
        let head_nodes = register_head(g, &self.head)?;
        params.extend(head_nodes.ids());
        let logits = head_forward_graph(g, feature_map, &head_nodes, &self.head_spec, mode, rng)?;
        Ok(ForwardNodes {
            params,
            feature_map,
            logits,
        })
    }

    /// Inference-mode logits `[n, classes]`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xi = g.constant(x.clone())?;
        let nodes = self.forward_graph(&mut g, xi, Mode::Infer, &mut seed::stream(0, &[]))?;
        Ok(g.value(nodes.logits).clone())
    }

    /// Feature map `A` of a single image `[1, h, w, c]` and `∂ logit_class / ∂A`,
    /// both `[1, fh, fw, fc]`.
    pub fn feature_map_gradient(&self, x: &Tensor<T>, class: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        if x.dims().first() != Some(&1) {
            return Err(Error::shape(format!(
                "expected one image [1, h, w, c], got {}",
                x.shape()
            )));
        }
        if class >= self.classes() {
            return Err(Error::data(format!(
                "class {class} out of range for {} classes",
                self.classes()
            )));
        }
        let fm = self.backbone.forward(x)?;
        let mut g = Graph::new();
        let a = g.tracked(fm.clone())?;
        let nodes = register_head(&mut g, &self.head)?;
        let logits = head_forward_graph(
            &mut g,
            a,
            &nodes,
            &self.head_spec,
            Mode::Infer,
            &mut seed::stream(0, &[]),
        )?;
        let picked = g.pick_column(logits, class)?;
        let score = g.sum(picked)?;
        let grads = g.gradients_for(score, &[a])?;
        Ok((fm, grads.expect(a)?.clone()))
    }

    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let named = self.named_tensors();
        let mut take = |name: &str| -> Result<Tensor<U>> {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.cast::<U>())
                .ok_or_else(|| Error::contract(format!("missing tensor {name}")))
        };
        let backbone = SmallBackbone::from_named(&self.backbone.spec, &mut take)?;
        let mut head = HeadParams::from_named(&self.head_spec, &mut take)?;
        head.init_seed = self.head.init_seed;
        Ok(Model {
            backbone,
            head,
            head_spec: self.head_spec.clone(),
        })
    }
}
