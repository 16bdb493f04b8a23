//! Fixed-seed gradient checks over every differentiable op, every head kind
//! and a two-stage backbone.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{grad_check, GradCheckReport};
use super::{Graph, NodeId, DIFFERENTIABLE_OPS};
use crate::backbone::{SmallBackbone, SmallBackboneSpec, Stage};
use crate::error::{Error, Result};
use crate::heads::{build_head, head_forward_graph, FeatureMapSpec, HeadKind, HeadNodes, HeadParams, HeadSpec};
use crate::nn::Mode;
use crate::tensor::Tensor;

pub const SUITE_STEP: f64 = 1e-3;
pub const SUITE_TOL: f64 = 1e-4;
const SEED: u64 = 0x5eed;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.report.pass)
    }

    pub fn worst(&self) -> Option<&SuiteEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
    }

    pub fn failures(&self) -> Vec<&SuiteEntry> {
        self.entries.iter().filter(|e| !e.report.pass).collect()
    }
}

/// Entries uniform in `±[0.2, 1]`, so nothing sits near a ReLU kink.
fn away_from_zero(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(dims.to_vec(), data).expect("valid dims")
}

/// Reduce `y` to a scalar through a fixed random weighting, so every output
/// coordinate contributes to the checked gradient.
fn probe(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = away_from_zero(g.value(y).dims(), &mut rng);
    let r = g.constant(r)?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

type Objective = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

struct Case {
    name: String,
    params: Vec<Tensor<f64>>,
    f: Objective,
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut t = |dims: &[usize]| away_from_zero(dims, rng);
    let case = |name: &str, params: Vec<Tensor<f64>>, f: Objective| Case {
        name: name.to_string(),
        params,
        f,
    };
    vec![
        case(
            "add",
            vec![t(&[2, 3]), t(&[2, 3])],
            Box::new(|g, p| {
                let y = g.add(p[0], p[1])?;
                probe(g, y, 1)
            }),
        ),
        case(
            "sub",
            vec![t(&[2, 3]), t(&[2, 3])],
            Box::new(|g, p| {
                let y = g.sub(p[0], p[1])?;
                probe(g, y, 2)
            }),
        ),
        case(
            "mul",
            vec![t(&[2, 3]), t(&[2, 3])],
            Box::new(|g, p| {
                let y = g.mul(p[0], p[1])?;
                probe(g, y, 3)
            }),
        ),
        case(
            "scale",
            vec![t(&[2, 3])],
            Box::new(|g, p| {
                let y = g.scale(p[0], 1.7)?;
                probe(g, y, 4)
            }),
        ),
        case(
            "relu",
            vec![t(&[3, 4])],
            Box::new(|g, p| {
                let y = g.relu(p[0])?;
                probe(g, y, 5)
            }),
        ),
        case(
            "max_scalar",
            vec![t(&[3, 4])],
            Box::new(|g, p| {
                let y = g.max_scalar(p[0], 0.1)?;
                probe(g, y, 6)
            }),
        ),
        case(
            "sum",
            vec![t(&[2, 3])],
            Box::new(|g, p| {
                let sq = g.mul(p[0], p[0])?;
                g.sum(sq)
            }),
        ),
        case(
            "reduce_mean",
            vec![t(&[2, 3, 4, 2])],
            Box::new(|g, p| {
                let y = g.reduce_mean(p[0], &[1, 2])?;
                probe(g, y, 7)
            }),
        ),
        case(
            "reshape",
            vec![t(&[2, 3])],
            Box::new(|g, p| {
                let y = g.reshape(p[0], [3, 2])?;
                probe(g, y, 8)
            }),
        ),
        case(
            "matmul",
            vec![t(&[2, 3]), t(&[3, 4])],
            Box::new(|g, p| {
                let y = g.matmul(p[0], p[1])?;
                probe(g, y, 9)
            }),
        ),
        case(
            "conv2d",
            vec![t(&[2, 5, 5, 2]), t(&[2, 2, 2, 3]), t(&[3])],
            Box::new(|g, p| {
                let y = g.conv2d(p[0], p[1], Some(p[2]), 2)?;
                probe(g, y, 10)
            }),
        ),
        case(
            "depthwise_conv2d",
            vec![t(&[2, 4, 4, 3]), t(&[3, 3, 3]), t(&[3])],
            Box::new(|g, p| {
                let y = g.depthwise_conv2d(p[0], p[1], Some(p[2]))?;
                probe(g, y, 11)
            }),
        ),
        case(
            "avg_pool2d",
            vec![t(&[2, 5, 5, 2])],
            Box::new(|g, p| {
                let y = g.avg_pool2d(p[0], 2)?;
                probe(g, y, 12)
            }),
        ),
        case(
            "global_avg_pool",
            vec![t(&[2, 3, 3, 2])],
            Box::new(|g, p| {
                let y = g.global_avg_pool(p[0])?;
                probe(g, y, 13)
            }),
        ),
        case(
            "gwap",
            vec![t(&[2, 3, 3, 2]), t(&[3, 3])],
            Box::new(|g, p| {
                let y = g.gwap(p[0], p[1])?;
                probe(g, y, 14)
            }),
        ),
        case(
            "dense",
            vec![t(&[2, 4]), t(&[4, 3]), t(&[3])],
            Box::new(|g, p| {
                let y = g.dense(p[0], p[1], p[2])?;
                probe(g, y, 15)
            }),
        ),
        case(
            "dropout",
            vec![t(&[3, 4])],
            Box::new(|g, p| {
                let mut rng = ChaCha8Rng::seed_from_u64(16);
                let y = g.dropout(p[0], 0.5, Mode::Train, &mut rng)?;
                probe(g, y, 16)
            }),
        ),
        case(
            "softmax_cross_entropy",
            vec![t(&[3, 4])],
            Box::new(|g, p| g.softmax_cross_entropy(p[0], &[0, 3, 1])),
        ),
        case(
            "pick_column",
            vec![t(&[3, 4])],
            Box::new(|g, p| {
                let sq = g.mul(p[0], p[0])?;
                g.pick_column(sq, 2)
            }),
        ),
    ]
}

/// Every head kind on a 4x4x3 map with 5 classes; the map itself is also a
/// checked input.
fn head_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let fm = FeatureMapSpec::new(4, 4, 3)?;
    let mut out = Vec::new();
    for kind in HeadKind::ALL {
        let mut spec = HeadSpec::new(kind, 5);
        if kind.uses_pool() {
            spec = spec.with_pool(2);
        }
        let mut head: HeadParams<f64> = build_head(&fm, &spec, 1)?;
        for (_, t, _) in head.tensors_mut() {
            *t = away_from_zero(t.dims(), rng);
        }
        let mut params = vec![away_from_zero(&[2, 4, 4, 3], rng)];
        params.extend(head.tensors().into_iter().map(|(_, t, _)| t.clone()));
        let f: Objective = Box::new(move |g, p| {
            let nodes = HeadNodes::from_ids(&head, &p[1..])?;
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let logits = head_forward_graph(g, p[0], &nodes, &spec, Mode::Train, &mut rng)?;
            g.softmax_cross_entropy(logits, &[1, 4])
        });
        out.push(Case {
            name: format!("head:{}", kind.name()),
            params,
            f,
        });
    }
    Ok(out)
}

fn backbone_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let spec = SmallBackboneSpec {
        stages: vec![
            Stage {
                filters: 3,
                kernel: 2,
                stride: 1,
            },
            Stage {
                filters: 2,
                kernel: 2,
                stride: 2,
            },
        ],
        input_side: 5,
        input_channels: 2,
    };
    let mut bb: SmallBackbone<f64> = SmallBackbone::build(&spec, 2)?;
    for (_, t) in bb.tensors_mut() {
        *t = away_from_zero(t.dims(), rng);
    }
    let mut params = vec![away_from_zero(&[2, 5, 5, 2], rng)];
    params.extend(bb.tensors().into_iter().map(|(_, t)| t.clone()));
    let f: Objective = Box::new(move |g, p| {
        let y = bb.forward_graph(g, p[0], &p[1..])?;
        probe(g, y, 18)
    });
    Ok(Case {
        name: "backbone:2-stage".into(),
        params,
        f,
    })
}

/// Run the whole suite. With `fault = Some(op)`, that op's adjoint is
/// deliberately corrupted in every graph, which must make the suite fail.
pub fn run_suite(fault: Option<&str>) -> Result<SuiteReport> {
    if let Some(op) = fault {
        if !DIFFERENTIABLE_OPS.contains(&op) {
            return Err(Error::config(format!("unknown op `{op}` for fault injection")));
        }
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut cases = op_cases(&mut rng);
    cases.extend(head_cases(&mut rng)?);
    cases.push(backbone_case(&mut rng)?);

    let mut entries = Vec::with_capacity(cases.len());
    for case in cases {
        let f = &case.f;
        let report = grad_check(
            |g, ids| {
                if let Some(op) = fault {
                    g.inject_adjoint_fault(op);
                }
                f(g, ids)
            },
            &case.params,
            SUITE_STEP,
            SUITE_TOL,
        )?;
        entries.push(SuiteEntry {
            name: case.name,
            report,
        });
    }
    Ok(SuiteReport {
        entries,
        elapsed: start.elapsed(),
    })
}
