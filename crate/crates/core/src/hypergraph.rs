//! Dynamic-static affinity, top-k hyperedge construction and the fully
//! connected dynamic graph used for self-completion.
//!
//! Node numbering in a [`Hypergraph`]: dynamic nodes are `0..D`, static
//! nodes are `D..D + S`. There is one hyperedge per dynamic node `d`,
//! containing `d` and its `k` selected static nodes.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax, Mat};

/// The two linear maps into the shared latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedProjection<T> {
    /// `[L, F]`
    pub dyn_weight: T,
    /// `[1, L]`
    pub dyn_bias: T,
    /// `[L, F]`
    pub stat_weight: T,
    /// `[1, L]`
    pub stat_bias: T,
}

impl<T> SharedProjection<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> SharedProjection<U> {
        SharedProjection {
            dyn_weight: f(&self.dyn_weight),
            dyn_bias: f(&self.dyn_bias),
            stat_weight: f(&self.stat_weight),
            stat_bias: f(&self.stat_bias),
        }
    }
}

/// Latents in the shared space. Static latents do not vary over time, so a
/// single `[S, L]` block stands for every step.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedLatents {
    pub steps: usize,
    /// `[T * D, L]`, step-major.
    pub dynamic: Mat,
    /// `[S, L]`
    pub statics: Mat,
}

impl SharedLatents {
    pub fn num_dynamic(&self) -> usize {
        self.dynamic.rows() / self.steps
    }

    pub fn dynamic_at(&self, t: usize, d: usize) -> &[f64] {
        self.dynamic.row(t * self.num_dynamic() + d)
    }

    pub fn static_at(&self, _t: usize, s: usize) -> &[f64] {
        self.statics.row(s)
    }
}

/// Dynamic-to-static affiliation for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityTensor {
    /// `[D, S]` time-averaged dot products.
    pub raw: Mat,
    /// `[D, S]`; row `d` is a softmax over static nodes.
    pub probs: Mat,
}

impl AffinityTensor {
    pub fn from_raw(raw: Mat) -> Self {
        let mut probs = Mat::zeros(raw.rows(), raw.cols());
        for d in 0..raw.rows() {
            probs.row_mut(d).copy_from_slice(&softmax(raw.row(d)));
        }
        Self { raw, probs }
    }

    pub fn num_dynamic(&self) -> usize {
        self.raw.rows()
    }

    pub fn num_static(&self) -> usize {
        self.raw.cols()
    }

    /// Distribution of dynamic node `d` over the static nodes.
    pub fn for_dynamic(&self, d: usize) -> &[f64] {
        self.probs.row(d)
    }
}

fn check_projection(shape_w: (usize, usize), shape_b: (usize, usize), width: usize, what: &str) -> Result<()> {
    if shape_w.1 != width || shape_b != (1, shape_w.0) {
        return Err(Error::shape(format!(
            "{what} projection {shape_w:?} + bias {shape_b:?} does not fit feature width {width}"
        )));
    }
    Ok(())
}

/// Maps node features into the shared latent space. Dynamic features are
/// `[T * D, F]` step-major, static features `[S, F]`.
pub fn project_shared(
    dynamic: &Mat,
    steps: usize,
    statics: &Mat,
    params: &SharedProjection<Mat>,
) -> Result<SharedLatents> {
    let mut tape = Tape::new();
    let d = tape.leaf(dynamic.clone());
    let s = tape.leaf(statics.clone());
    let p = params.map(|m| tape.leaf(m.clone()));
    let (zd, zs) = project_on_tape(&mut tape, d, s, &p)?;
    if steps == 0 || !dynamic.rows().is_multiple_of(steps) {
        return Err(Error::shape(format!(
            "{} dynamic rows do not split into {steps} steps",
            dynamic.rows()
        )));
    }
    Ok(SharedLatents {
        steps,
        dynamic: tape.value(zd).clone(),
        statics: tape.value(zs).clone(),
    })
}

fn project_on_tape(tape: &mut Tape, dynamic: Var, statics: Var, p: &SharedProjection<Var>) -> Result<(Var, Var)> {
    check_projection(
        tape.value(p.dyn_weight).shape(),
        tape.value(p.dyn_bias).shape(),
        tape.value(dynamic).cols(),
        "dynamic",
    )?;
    check_projection(
        tape.value(p.stat_weight).shape(),
        tape.value(p.stat_bias).shape(),
        tape.value(statics).cols(),
        "static",
    )?;
    if tape.value(p.dyn_weight).rows() != tape.value(p.stat_weight).rows() {
        return Err(Error::shape("dynamic and static latent widths differ"));
    }
    let zd = tape.linear(dynamic, p.dyn_weight, p.dyn_bias);
    let zs = tape.linear(statics, p.stat_weight, p.stat_bias);
    Ok((zd, zs))
}

/// Raw affinity `[D, S]` on the tape: dot products between dynamic and
/// static latents, averaged over time.
pub fn affinity_on_tape(
    tape: &mut Tape,
    dynamic: Var,
    statics: Var,
    steps: usize,
    p: &SharedProjection<Var>,
) -> Result<Var> {
    let (zd, zs) = project_on_tape(tape, dynamic, statics, p)?;
    let rows = tape.value(zd).rows();
    if steps == 0 || !rows.is_multiple_of(steps) {
        return Err(Error::shape(format!("{rows} dynamic rows do not split into {steps} steps")));
    }
    let nodes = rows / steps;
    let w = 1.0 / steps as f64;
    let mean = tape.row_mix(
        zd,
        (0..nodes)
            .map(|d| (0..steps).map(|t| (t * nodes + d, w)).collect())
            .collect(),
    );
    Ok(tape.matmul_nt(mean, zs))
}

pub fn compute_affinity(latents: &SharedLatents) -> Result<AffinityTensor> {
    if latents.dynamic.cols() != latents.statics.cols() {
        return Err(Error::shape("latent widths differ"));
    }
    let nodes = latents.num_dynamic();
    let mut raw = Mat::zeros(nodes, latents.statics.rows());
    for d in 0..nodes {
        for s in 0..latents.statics.rows() {
            let total: f64 = (0..latents.steps)
                .map(|t| crate::tensor::dot(latents.dynamic_at(t, d), latents.static_at(t, s)))
                .sum();
            raw[(d, s)] = total / latents.steps as f64;
        }
    }
    Ok(AffinityTensor::from_raw(raw))
}

/// How message weights inside a cross-modal hyperedge are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeGamma {
    /// Renormalized affinity between the owning dynamic node and its statics.
    Affinity,
    /// Equal weights.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    num_dynamic: usize,
    num_static: usize,
    k: usize,
    /// `edges[d]`: selected static indices (`0..S`) of dynamic node `d`.
    edges: Vec<Vec<usize>>,
    /// `edge_weights[d][i]`: affiliation of `edges[d][i]`.
    edge_weights: Vec<Vec<f64>>,
    gamma: EdgeGamma,
}

impl Hypergraph {
    pub fn num_dynamic(&self) -> usize {
        self.num_dynamic
    }

    pub fn num_static(&self) -> usize {
        self.num_static
    }

    pub fn num_nodes(&self) -> usize {
        self.num_dynamic + self.num_static
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn edges(&self) -> &[Vec<usize>] {
        &self.edges
    }

    pub fn edge_weights(&self) -> &[Vec<f64>] {
        &self.edge_weights
    }

    pub fn gamma(&self) -> EdgeGamma {
        self.gamma
    }

    /// Node ids (dynamic first, statics offset by `D`) of hyperedge `d`.
    pub fn members(&self, d: usize) -> Vec<usize> {
        std::iter::once(d)
            .chain(self.edges[d].iter().map(|s| self.num_dynamic + s))
            .collect()
    }

    /// Binary `[D + S, D]` node-by-hyperedge incidence.
    pub fn incidence(&self) -> Vec<Vec<u8>> {
        let mut h = vec![vec![0u8; self.num_dynamic]; self.num_nodes()];
        for d in 0..self.num_dynamic {
            for node in self.members(d) {
                h[node][d] = 1;
            }
        }
        h
    }
}

/// Connects each dynamic node to its `k` most affiliated static nodes;
/// ties go to the lower static index.
pub fn build_hyperedges(affinity: &AffinityTensor, k: usize) -> Result<Hypergraph> {
    let (nd, ns) = (affinity.num_dynamic(), affinity.num_static());
    if k == 0 || k > ns {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={ns}")));
    }
    let mut edges = Vec::with_capacity(nd);
    let mut edge_weights = Vec::with_capacity(nd);
    for d in 0..nd {
        let probs = affinity.for_dynamic(d);
        let mut order: Vec<usize> = (0..ns).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        order.truncate(k);
        edge_weights.push(order.iter().map(|&s| probs[s]).collect());
        edges.push(order);
    }
    Ok(Hypergraph {
        num_dynamic: nd,
        num_static: ns,
        k,
        edges,
        edge_weights,
        gamma: EdgeGamma::Affinity,
    })
}

/// Affinity-free hyperedges: dynamic node `d` takes statics
/// `d, d + 1, …, d + k - 1` (mod `S`) with equal weights.
pub fn fixed_hyperedges(num_dynamic: usize, num_static: usize, k: usize) -> Result<Hypergraph> {
    if k == 0 || k > num_static {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={num_static}")));
    }
    let edges: Vec<Vec<usize>> = (0..num_dynamic)
        .map(|d| (0..k).map(|j| (d + j) % num_static).collect())
        .collect();
    Ok(Hypergraph {
        num_dynamic,
        num_static,
        k,
        edge_weights: vec![vec![1.0 / k as f64; k]; num_dynamic],
        edges,
        gamma: EdgeGamma::Uniform,
    })
}

/// Fully connected graph over dynamic nodes, no self loops.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicGraph {
    pub adjacency: Mat,
}

impl DynamicGraph {
    pub fn num_nodes(&self) -> usize {
        self.adjacency.rows()
    }

    /// Each nonzero `G[target, source]` as a directed 2-node hyperedge.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.num_nodes();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency[(i, j)] != 0.0)
            .collect()
    }

    /// `[D, E]` incidence of the 2-node hyperedges.
    pub fn edge_incidence(&self) -> Vec<Vec<u8>> {
        let edges = self.edges();
        let mut h = vec![vec![0u8; edges.len()]; self.num_nodes()];
        for (e, &(i, j)) in edges.iter().enumerate() {
            h[i][e] = 1;
            h[j][e] = 1;
        }
        h
    }
}

pub fn build_dynamic_graph(num_nodes: usize) -> Result<DynamicGraph> {
    if num_nodes == 0 {
        return Err(Error::invalid("dynamic graph needs at least one node"));
    }
    let mut g = Mat::filled(num_nodes, num_nodes, 1.0);
    for i in 0..num_nodes {
        g[(i, i)] = 0.0;
    }
    Ok(DynamicGraph { adjacency: g })
}
