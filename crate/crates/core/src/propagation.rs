//! Attention-weighted hypergraph message passing.
//!
//! A message from source `s` to target `d` is `(γ_s + α_s) · ReLU(r_v x_s)`,
//! where `γ` is the hyperedge affiliation weight (softmax within one
//! hyperedge) and `α` is scaled dot-product attention of `W_Q x_d` against
//! `W_K x_s`, normalized over every incoming message of `d` and averaged
//! across heads. A target's new feature is the sum of its messages.
//!
//! Dynamic nodes marked inactive at a step send nothing at that step but
//! still receive. Static nodes are always active. Updates are synchronous:
//! every message reads pre-update features.

use crate::autodiff::{RowMix, Tape, Var};
use crate::error::{Error, Result};
use crate::event::ActivityMask;
use crate::hypergraph::{DynamicGraph, EdgeGamma, Hypergraph};
use crate::tensor::{dot, softmax, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct Propagation<T> {
    /// `[L, F]`, `L = heads * d_h`
    pub w_q: T,
    /// `[L, F]`
    pub w_k: T,
    /// `[F, F]`
    pub r_v: T,
}

impl<T> Propagation<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Propagation<U> {
        Propagation {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            r_v: f(&self.r_v),
        }
    }
}

fn check_params(w_q: (usize, usize), w_k: (usize, usize), r_v: (usize, usize), width: usize, heads: usize) -> Result<()> {
    if heads == 0 || !w_q.0.is_multiple_of(heads) {
        return Err(Error::shape(format!(
            "{heads} heads do not divide query width {}",
            w_q.0
        )));
    }
    if w_q != w_k || w_q.1 != width {
        return Err(Error::shape(format!(
            "W_Q {w_q:?} / W_K {w_k:?} do not match feature width {width}"
        )));
    }
    if r_v != (width, width) {
        return Err(Error::shape(format!("r_v must be [{width}, {width}], got {r_v:?}")));
    }
    Ok(())
}

/// Everything a target needs to weigh its incoming messages.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageContext {
    pub target: Vec<f64>,
    pub sources: Vec<Vec<f64>>,
    /// One weight per source; zero for inactive sources.
    pub gamma: Vec<f64>,
    pub active: Vec<bool>,
}

impl MessageContext {
    /// `gamma` from a softmax of `gamma_scores` over the active sources.
    pub fn new(target: Vec<f64>, sources: Vec<Vec<f64>>, gamma_scores: &[f64], active: Vec<bool>) -> Self {
        assert_eq!(sources.len(), gamma_scores.len(), "one γ score per source");
        assert_eq!(sources.len(), active.len(), "one activity flag per source");
        let live: Vec<f64> = gamma_scores
            .iter()
            .zip(&active)
            .filter(|(_, a)| **a)
            .map(|(s, _)| *s)
            .collect();
        let mut weights = softmax(&live).into_iter();
        let gamma = active
            .iter()
            .map(|&a| if a { weights.next().unwrap() } else { 0.0 })
            .collect();
        Self {
            target,
            sources,
            gamma,
            active,
        }
    }

    /// Per-source attention weight, averaged over heads; zero when inactive.
    pub fn alpha(&self, params: &Propagation<Mat>, heads: usize) -> Vec<f64> {
        let q = params.w_q.matmul_nt(&Mat::row_vector(&self.target));
        let dh = params.w_q.rows() / heads;
        let live: Vec<usize> = (0..self.sources.len()).filter(|&i| self.active[i]).collect();
        let keys: Vec<Mat> = live
            .iter()
            .map(|&i| params.w_k.matmul_nt(&Mat::row_vector(&self.sources[i])))
            .collect();
        let mut alpha = vec![0.0; self.sources.len()];
        for h in 0..heads {
            let qh = &q.data()[h * dh..(h + 1) * dh];
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| dot(qh, &k.data()[h * dh..(h + 1) * dh]) / (dh as f64).sqrt())
                .collect();
            for (&i, w) in live.iter().zip(softmax(&scores)) {
                alpha[i] += w / heads as f64;
            }
        }
        alpha
    }
}

/// The message from source `index` of `ctx` to its target.
pub fn message(ctx: &MessageContext, params: &Propagation<Mat>, heads: usize, index: usize) -> Vec<f64> {
    if !ctx.active[index] {
        return vec![0.0; params.r_v.rows()];
    }
    let alpha = ctx.alpha(params, heads)[index];
    let weight = ctx.gamma[index] + alpha;
    params
        .r_v
        .matmul_nt(&Mat::row_vector(&ctx.sources[index]))
        .data()
        .iter()
        .map(|v| weight * v.max(0.0))
        .collect()
}

/// Sum of messages; a target without messages keeps `input`.
pub fn aggregate(messages: &[Vec<f64>], input: &[f64]) -> Vec<f64> {
    if messages.is_empty() {
        return input.to_vec();
    }
    let mut out = vec![0.0; messages[0].len()];
    for m in messages {
        assert_eq!(m.len(), out.len(), "messages must share a width");
        for (o, v) in out.iter_mut().zip(m) {
            *o += v;
        }
    }
    out
}

/// One hyperedge: every listed target receives from every other member.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperedge {
    pub members: Vec<usize>,
    pub targets: Vec<usize>,
    /// Dynamic node whose messages from static members are affinity-weighted.
    pub anchor: Option<usize>,
}

/// Message-passing topology over `num_nodes` nodes, of which the first
/// `num_dynamic` obey the activity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub num_nodes: usize,
    pub num_dynamic: usize,
    pub edges: Vec<Hyperedge>,
}

impl Structure {
    /// Stage-1 topology: one directed 2-node hyperedge per nonzero entry.
    pub fn from_dynamic_graph(g: &DynamicGraph) -> Self {
        let edges = g
            .edges()
            .into_iter()
            .map(|(target, source)| Hyperedge {
                members: vec![target, source],
                targets: vec![target],
                anchor: None,
            })
            .collect();
        Self {
            num_nodes: g.num_nodes(),
            num_dynamic: g.num_nodes(),
            edges,
        }
    }

    /// Stage-2 topology: every member of every hyperedge is a target.
    pub fn from_hypergraph(hg: &Hypergraph) -> Self {
        let anchored = hg.gamma() == EdgeGamma::Affinity;
        let edges = (0..hg.num_dynamic())
            .map(|d| {
                let members = hg.members(d);
                Hyperedge {
                    targets: members.clone(),
                    members,
                    anchor: anchored.then_some(d),
                }
            })
            .collect();
        Self {
            num_nodes: hg.num_nodes(),
            num_dynamic: hg.num_dynamic(),
            edges,
        }
    }
}

/// Flattened message slots over all steps of one sample. Row `t * N + v`
/// is node `v` at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotPlan {
    pub rows: usize,
    pub targets: Vec<usize>,
    pub sources: Vec<usize>,
    /// Flat `[D, S]` affinity index used as the γ score, if affinity-weighted.
    pub gamma_index: Vec<Option<usize>>,
    /// Slots sharing one (hyperedge, target row); γ normalizes within each.
    pub gamma_groups: Vec<Vec<usize>>,
    /// Slots sharing one target row; α normalizes within each.
    pub alpha_groups: Vec<Vec<usize>>,
    /// Rows with no incoming slot; they keep their input.
    pub passthrough: Vec<usize>,
}

impl SlotPlan {
    pub fn new(structure: &Structure, mask: &ActivityMask, steps: usize) -> Result<Self> {
        if mask.steps() != steps || mask.nodes() != structure.num_dynamic {
            return Err(Error::shape(format!(
                "mask [{}, {}] does not cover {steps} steps of {} dynamic nodes",
                mask.steps(),
                mask.nodes(),
                structure.num_dynamic
            )));
        }
        for e in &structure.edges {
            if e.members.iter().any(|&m| m >= structure.num_nodes) {
                return Err(Error::shape("hyperedge member outside node range"));
            }
        }
        let n = structure.num_nodes;
        let nd = structure.num_dynamic;
        let ns = n - nd;
        let active = |t: usize, v: usize| v >= nd || mask.is_active(t, v);

        let mut plan = SlotPlan {
            rows: steps * n,
            targets: Vec::new(),
            sources: Vec::new(),
            gamma_index: Vec::new(),
            gamma_groups: Vec::new(),
            alpha_groups: vec![Vec::new(); steps * n],
            passthrough: Vec::new(),
        };
        for t in 0..steps {
            for e in &structure.edges {
                for &target in &e.targets {
                    let mut group = Vec::new();
                    for &source in &e.members {
                        if source == target || !active(t, source) {
                            continue;
                        }
                        let slot = plan.targets.len();
                        let row = t * n + target;
                        plan.targets.push(row);
                        plan.sources.push(t * n + source);
                        plan.gamma_index.push(match e.anchor {
                            Some(a) if a == target && source >= nd => Some(a * ns + (source - nd)),
                            _ => None,
                        });
                        plan.alpha_groups[row].push(slot);
                        group.push(slot);
                    }
                    if !group.is_empty() {
                        plan.gamma_groups.push(group);
                    }
                }
            }
        }
        plan.passthrough = (0..plan.rows)
            .filter(|&r| plan.alpha_groups[r].is_empty())
            .collect();
        plan.alpha_groups.retain(|g| !g.is_empty());
        Ok(plan)
    }

    pub fn num_slots(&self) -> usize {
        self.targets.len()
    }
}

/// One synchronous propagation round on the tape. `features` is
/// `[steps * num_nodes, F]`; `gamma_scores` is the raw `[D, S]` affinity.
pub fn propagate_on_tape(
    tape: &mut Tape,
    features: Var,
    plan: &SlotPlan,
    params: &Propagation<Var>,
    heads: usize,
    gamma_scores: Option<Var>,
) -> Result<Var> {
    let x = tape.value(features);
    if x.rows() != plan.rows {
        return Err(Error::shape(format!(
            "{} feature rows for a structure with {} node-steps",
            x.rows(),
            plan.rows
        )));
    }
    check_params(
        tape.value(params.w_q).shape(),
        tape.value(params.w_k).shape(),
        tape.value(params.r_v).shape(),
        x.cols(),
        heads,
    )?;
    if plan.num_slots() == 0 {
        return Ok(features);
    }
    if plan.gamma_index.iter().any(Option::is_some) && gamma_scores.is_none() {
        return Err(Error::invalid("affinity-weighted hyperedges need affinity scores"));
    }
    let dh = tape.value(params.w_q).rows() / heads;

    let q = tape.matmul_nt(features, params.w_q);
    let k = tape.matmul_nt(features, params.w_k);
    let v = tape.matmul_nt(features, params.r_v);
    let v = tape.relu(v);

    let qt = tape.gather_rows(q, &plan.targets);
    let ks = tape.gather_rows(k, &plan.sources);
    let vs = tape.gather_rows(v, &plan.sources);

    let scores = tape.headwise_dot(qt, ks, heads);
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let alpha = tape.segment_softmax(scores, plan.alpha_groups.clone());
    let alpha = tape.mean_cols(alpha);

    let gamma_raw = match gamma_scores {
        Some(e) => tape.flat_gather(e, plan.gamma_index.clone()),
        None => tape.leaf(Mat::zeros(plan.num_slots(), 1)),
    };
    let gamma = tape.segment_softmax(gamma_raw, plan.gamma_groups.clone());
    let weight = tape.add(gamma, alpha);
    let messages = tape.row_scale(vs, weight);

    let mut scatter: RowMix = vec![Vec::new(); plan.rows];
    for (slot, &row) in plan.targets.iter().enumerate() {
        scatter[row].push((slot, 1.0));
    }
    let summed = tape.row_mix(messages, scatter);
    if plan.passthrough.is_empty() {
        return Ok(summed);
    }
    let mut keep: RowMix = vec![Vec::new(); plan.rows];
    for &r in &plan.passthrough {
        keep[r].push((r, 1.0));
    }
    let kept = tape.row_mix(features, keep);
    Ok(tape.add(summed, kept))
}

/// Forward-only [`propagate_on_tape`] over plain matrices.
pub fn propagate(
    features: &Mat,
    steps: usize,
    structure: &Structure,
    params: &Propagation<Mat>,
    heads: usize,
    mask: &ActivityMask,
    gamma_scores: Option<&Mat>,
) -> Result<Mat> {
    let plan = SlotPlan::new(structure, mask, steps)?;
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let p = params.map(|m| tape.leaf(m.clone()));
    let g = gamma_scores.map(|m| tape.leaf(m.clone()));
    let out = propagate_on_tape(&mut tape, x, &plan, &p, heads, g)?;
    Ok(tape.value(out).clone())
}

/// Stage 1: dynamic nodes complete each other over the fully connected graph.
/// `dynamic` is `[steps * D, F]`.
pub fn stage1_self_completion(
    dynamic: &Mat,
    steps: usize,
    graph: &DynamicGraph,
    params: &Propagation<Mat>,
    heads: usize,
    mask: &ActivityMask,
) -> Result<Mat> {
    propagate(dynamic, steps, &Structure::from_dynamic_graph(graph), params, heads, mask, None)
}

/// Row mix interleaving `[steps * D]` dynamic rows with `[S]` static rows
/// (repeated each step) into `[steps * (D + S)]` step-major node rows.
pub fn interleave_mix(steps: usize, num_dynamic: usize, num_static: usize) -> RowMix {
    let mut mix = Vec::with_capacity(steps * (num_dynamic + num_static));
    for t in 0..steps {
        for d in 0..num_dynamic {
            mix.push(vec![(t * num_dynamic + d, 1.0)]);
        }
        for s in 0..num_static {
            mix.push(vec![(steps * num_dynamic + s, 1.0)]);
        }
    }
    mix
}

/// Rows of the dynamic (`want_static == false`) or static part of
/// step-major `[steps * (D + S)]` node rows.
pub fn split_rows(steps: usize, num_dynamic: usize, num_static: usize, want_static: bool) -> Vec<usize> {
    let n = num_dynamic + num_static;
    (0..steps)
        .flat_map(|t| {
            let range = if want_static {
                num_dynamic..n
            } else {
                0..num_dynamic
            };
            range.map(move |v| t * n + v)
        })
        .collect()
}

/// Stage 2 on the tape. Returns enhanced `[steps * D, F]` dynamic and
/// `[steps * S, F]` static features.
#[allow(clippy::too_many_arguments)]
pub fn stage2_on_tape(
    tape: &mut Tape,
    dynamic: Var,
    statics: Var,
    steps: usize,
    hypergraph: &Hypergraph,
    params: &Propagation<Var>,
    heads: usize,
    mask: &ActivityMask,
    gamma_scores: Option<Var>,
) -> Result<(Var, Var)> {
    let (nd, ns) = (hypergraph.num_dynamic(), hypergraph.num_static());
    if tape.value(dynamic).rows() != steps * nd || tape.value(statics).rows() != ns {
        return Err(Error::shape(format!(
            "stage 2 expects {} dynamic and {ns} static rows, got {} and {}",
            steps * nd,
            tape.value(dynamic).rows(),
            tape.value(statics).rows()
        )));
    }
    let stacked = tape.concat_rows(&[dynamic, statics]);
    let combined = tape.row_mix(stacked, interleave_mix(steps, nd, ns));
    let plan = SlotPlan::new(&Structure::from_hypergraph(hypergraph), mask, steps)?;
    let out = propagate_on_tape(tape, combined, &plan, params, heads, gamma_scores)?;
    let d_out = tape.gather_rows(out, &split_rows(steps, nd, ns, false));
    let s_out = tape.gather_rows(out, &split_rows(steps, nd, ns, true));
    Ok((d_out, s_out))
}

/// Stage 2: cross-modal enhancement over the hypergraph. `dynamic` is
/// `[steps * D, F]`, `statics` is `[S, F]`.
#[allow(clippy::too_many_arguments)]
pub fn stage2_cross_modal(
    dynamic: &Mat,
    statics: &Mat,
    steps: usize,
    hypergraph: &Hypergraph,
    params: &Propagation<Mat>,
    heads: usize,
    mask: &ActivityMask,
    gamma_scores: Option<&Mat>,
) -> Result<(Mat, Mat)> {
    let mut tape = Tape::new();
    let d = tape.leaf(dynamic.clone());
    let s = tape.leaf(statics.clone());
    let p = params.map(|m| tape.leaf(m.clone()));
    let g = gamma_scores.map(|m| tape.leaf(m.clone()));
    let (d_out, s_out) = stage2_on_tape(&mut tape, d, s, steps, hypergraph, &p, heads, mask, g)?;
    Ok((tape.value(d_out).clone(), tape.value(s_out).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::{build_dynamic_graph, build_hyperedges, AffinityTensor};

    fn identity_params(width: usize) -> Propagation<Mat> {
        Propagation {
            w_q: Mat::identity(width),
            w_k: Mat::identity(width),
            r_v: Mat::identity(width),
        }
    }

    #[test]
    fn single_source_message_doubles() {
        let ctx = MessageContext::new(vec![1.0, 0.0], vec![vec![1.0, 0.0]], &[0.3], vec![true]);
        assert_eq!(ctx.gamma, vec![1.0]);
        let m = message(&ctx, &identity_params(2), 1, 0);
        assert_eq!(m, vec![2.0, 0.0]);
    }

    #[test]
    fn relu_annihilates_negative_values() {
        let params = Propagation {
            r_v: Mat::identity(2).map(|v| -v),
            ..identity_params(2)
        };
        let ctx = MessageContext::new(vec![0.5, 0.5], vec![vec![1.0, 2.0], vec![3.0, 0.1]], &[1.0, -2.0], vec![true, true]);
        for i in 0..2 {
            assert_eq!(message(&ctx, &params, 1, i), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn inactive_source_sends_nothing() {
        let ctx = MessageContext::new(vec![1.0, 1.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0], vec![true, false]);
        assert_eq!(ctx.gamma, vec![1.0, 0.0]);
        assert_eq!(ctx.alpha(&identity_params(2), 2), vec![1.0, 0.0]);
        assert_eq!(message(&ctx, &identity_params(2), 2, 1), vec![0.0, 0.0]);
    }

    #[test]
    fn aggregate_sums_or_passes_through() {
        assert_eq!(aggregate(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[9.0, 9.0]), vec![1.0, 1.0]);
        assert_eq!(aggregate(&[], &[3.0, 4.0]), vec![3.0, 4.0]);
    }

    #[test]
    fn aggregate_is_order_independent() {
        let msgs: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos(), i as f64 / 7.0])
            .collect();
        let forward = aggregate(&msgs, &[0.0; 3]);
        let mut rev = msgs.clone();
        rev.reverse();
        let backward = aggregate(&rev, &[0.0; 3]);
        let mut sequential = [0.0; 3];
        for m in &msgs {
            for (s, v) in sequential.iter_mut().zip(m) {
                *s += v;
            }
        }
        for i in 0..3 {
            assert!((forward[i] - backward[i]).abs() <= 1e-12);
            assert!((forward[i] - sequential[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_features_stay_zero() {
        let g = build_dynamic_graph(3).unwrap();
        let out = stage1_self_completion(&Mat::zeros(6, 2), 2, &g, &identity_params(2), 1, &ActivityMask::all_active(2, 3)).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn two_node_graph_by_hand() {
        // Node 0 = [1, 2], node 1 = [3, -1]; W_Q = W_K = I, r_v = diag(1, 2).
        // Each target has one source, so γ = α = 1 and each message is
        // 2 * ReLU(r_v x_source).
        let params = Propagation {
            r_v: Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]),
            ..identity_params(2)
        };
        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]);
        let g = build_dynamic_graph(2).unwrap();
        let out = stage1_self_completion(&x, 1, &g, &params, 1, &ActivityMask::all_active(1, 2)).unwrap();
        assert_eq!(out.row(0), &[6.0, 0.0]);
        assert_eq!(out.row(1), &[2.0, 8.0]);
    }

    #[test]
    fn three_node_attention_by_hand() {
        // Width 1, W = I, one head. Target 0 receives from 1 and 2, each
        // its own hyperedge so γ = 1; α = softmax(q0·k1, q0·k2) = softmax(1, 2).
        let x = Mat::from_rows(&[vec![1.0], vec![1.0], vec![2.0]]);
        let g = build_dynamic_graph(3).unwrap();
        let out = stage1_self_completion(&x, 1, &g, &identity_params(1), 1, &ActivityMask::all_active(1, 3)).unwrap();
        let e = std::f64::consts::E;
        let a1 = e / (e + e * e);
        let a2 = 1.0 - a1;
        let expected0 = (1.0 + a1) * 1.0 + (1.0 + a2) * 2.0;
        assert!((out[(0, 0)] - expected0).abs() < 1e-12);
    }

    #[test]
    fn single_pair_stage2_exchanges_features() {
        // One dynamic and one static node, k = 1: each is the other's only
        // source, so γ = α = 1 and each receives 2 * ReLU(other).
        let a = AffinityTensor::from_raw(Mat::zeros(1, 1));
        let hg = build_hyperedges(&a, 1).unwrap();
        let d = Mat::row_vector(&[0.5, -1.0]);
        let s = Mat::row_vector(&[2.0, 3.0]);
        let (de, se) = stage2_cross_modal(&d, &s, 1, &hg, &identity_params(2), 1, &ActivityMask::all_active(1, 1), Some(&a.raw)).unwrap();
        assert_eq!(de.row(0), &[4.0, 6.0]);
        assert_eq!(se.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn node_count_mismatch_is_an_error() {
        let g = build_dynamic_graph(3).unwrap();
        let err = stage1_self_completion(&Mat::zeros(5, 2), 2, &g, &identity_params(2), 1, &ActivityMask::all_active(2, 3));
        assert!(err.is_err());
        let err = stage1_self_completion(&Mat::zeros(6, 2), 2, &g, &identity_params(2), 1, &ActivityMask::all_active(3, 3));
        assert!(err.is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let g = build_dynamic_graph(2).unwrap();
        let err = stage1_self_completion(&Mat::zeros(2, 3), 1, &g, &identity_params(3), 2, &ActivityMask::all_active(1, 2));
        assert!(matches!(err, Err(Error::Shape(_))));
    }
}
