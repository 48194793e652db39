//! Parameter layout and the end-to-end forward pass.
//!
//! Per sample: event and RGB frames are patch-embedded; RGB tokens average
//! into static node values, event tokens reduce to `[T, D]` dynamic node
//! values with an activity mask. Each node value scales a learned per-node
//! `d_ob` vector to form its propagation feature. Stage 1 propagates over
//! the dynamic graph, Stage 2 over the affinity hypergraph. Dynamic
//! features go through the temporal encoder, get concatenated with static
//! features per step, and the head fuses, mean-pools and classifies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::event::tokens::{embed_on_tape, reduce_dynamic_on_tape};
use crate::event::{ActivityMask, FrameTensor, PatchEmbed};
use crate::hypergraph::{
    affinity_on_tape, build_dynamic_graph, build_hyperedges, fixed_hyperedges, AffinityTensor,
    Hypergraph, SharedProjection,
};
use crate::propagation::{propagate_on_tape, stage2_on_tape, Propagation, SlotPlan, Structure};
use crate::temporal::{
    fuse_and_classify_on_tape, temporal_fuse_on_tape, ClassifierHead, EncoderBlock,
};
use crate::tensor::Mat;
use crate::training::config::{DataGeometry, Task, TrainConfig};

/// Everything needed to rebuild a model: hyperparameters plus data geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub train: TrainConfig,
    pub geometry: DataGeometry,
}

impl ModelSpec {
    pub fn new(train: TrainConfig, geometry: DataGeometry) -> Result<Self> {
        train.validate()?;
        geometry.validate_against(&train)?;
        Ok(Self { train, geometry })
    }

    pub fn num_patches(&self) -> usize {
        let p = self.train.patch_size;
        (self.geometry.sensor_width as usize / p) * (self.geometry.sensor_height as usize / p)
    }

    pub fn dynamic_width(&self) -> usize {
        self.train.dynamic_nodes * self.train.d_ob
    }

    pub fn fused_width(&self) -> usize {
        (self.train.dynamic_nodes + self.train.static_nodes) * self.train.d_ob
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Ones,
    Zeros,
}

/// Index of every named tensor, in checkpoint order.
#[derive(Debug, Clone)]
pub struct Layout {
    pub rgb_embed: PatchEmbed<usize>,
    pub event_embed: PatchEmbed<usize>,
    pub dyn_expand: usize,
    pub stat_expand: usize,
    pub shared: SharedProjection<usize>,
    pub stage1: Propagation<usize>,
    pub stage2: Propagation<usize>,
    pub temporal: Vec<EncoderBlock<usize>>,
    pub head: ClassifierHead<usize>,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    fn fan_in(fan: usize) -> Init {
        Init::Uniform(1.0 / (fan as f64).sqrt())
    }

    fn linear(&mut self, prefix: &str, out: usize, inp: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.weight"), out, inp, Self::fan_in(inp));
        let b = self.add(format!("{prefix}.bias"), 1, out, Self::fan_in(inp));
        (w, b)
    }

    fn embed(&mut self, prefix: &str, width: usize, inp: usize, patches: usize) -> PatchEmbed<usize> {
        let (weight, bias) = self.linear(&format!("{prefix}.proj"), width, inp);
        let pos = self.add(format!("{prefix}.pos"), patches, width, Self::fan_in(width));
        PatchEmbed { weight, bias, pos }
    }

    fn propagation(&mut self, prefix: &str, latent: usize, width: usize) -> Propagation<usize> {
        Propagation {
            w_q: self.add(format!("{prefix}.w_q"), latent, width, Self::fan_in(width)),
            w_k: self.add(format!("{prefix}.w_k"), latent, width, Self::fan_in(width)),
            r_v: self.add(format!("{prefix}.r_v"), width, width, Self::fan_in(width)),
        }
    }

    fn block(&mut self, prefix: &str, width: usize, hidden: usize) -> EncoderBlock<usize> {
        let ln1_gain = self.add(format!("{prefix}.ln1.gain"), 1, width, Init::Ones);
        let ln1_bias = self.add(format!("{prefix}.ln1.bias"), 1, width, Init::Zeros);
        let w_q = self.add(format!("{prefix}.attn.w_q"), width, width, Self::fan_in(width));
        let w_k = self.add(format!("{prefix}.attn.w_k"), width, width, Self::fan_in(width));
        let w_v = self.add(format!("{prefix}.attn.w_v"), width, width, Self::fan_in(width));
        let w_o = self.add(format!("{prefix}.attn.w_o"), width, width, Self::fan_in(width));
        let ln2_gain = self.add(format!("{prefix}.ln2.gain"), 1, width, Init::Ones);
        let ln2_bias = self.add(format!("{prefix}.ln2.bias"), 1, width, Init::Zeros);
        let (ff1_weight, ff1_bias) = self.linear(&format!("{prefix}.ff1"), hidden, width);
        let (ff2_weight, ff2_bias) = self.linear(&format!("{prefix}.ff2"), width, hidden);
        EncoderBlock {
            ln1_gain,
            ln1_bias,
            w_q,
            w_k,
            w_v,
            w_o,
            ln2_gain,
            ln2_bias,
            ff1_weight,
            ff1_bias,
            ff2_weight,
            ff2_bias,
        }
    }
}

impl Layout {
    pub fn new(spec: &ModelSpec) -> Self {
        let c = &spec.train;
        let p2 = c.patch_size * c.patch_size;
        let n = spec.num_patches();
        let mut b = LayoutBuilder {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
        };
        let rgb_embed = b.embed("rgb_embed", c.static_nodes, 3 * p2, n);
        let event_embed = b.embed("event_embed", c.dynamic_nodes, 2 * p2, n);
        let dyn_expand = b.add("dyn_expand".into(), c.dynamic_nodes, c.d_ob, Init::Uniform(1.0));
        let stat_expand = b.add("stat_expand".into(), c.static_nodes, c.d_ob, Init::Uniform(1.0));
        let (dyn_weight, dyn_bias) = b.linear("shared.dyn", c.latent, c.d_ob);
        let (stat_weight, stat_bias) = b.linear("shared.stat", c.latent, c.d_ob);
        let shared = SharedProjection {
            dyn_weight,
            dyn_bias,
            stat_weight,
            stat_bias,
        };
        let stage1 = b.propagation("stage1", c.latent, c.d_ob);
        let stage2 = b.propagation("stage2", c.latent, c.d_ob);
        let temporal = (0..c.nlayer)
            .map(|i| b.block(&format!("temporal.{i}"), spec.dynamic_width(), c.nhid))
            .collect();
        let fusion = b.block("head.fusion", spec.fused_width(), c.nhid);
        let (weight, bias) = b.linear("head.classifier", spec.geometry.num_classes, spec.fused_width());
        Layout {
            rgb_embed,
            event_embed,
            dyn_expand,
            stat_expand,
            shared,
            stage1,
            stage2,
            temporal,
            head: ClassifierHead {
                fusion,
                weight,
                bias,
            },
            names: b.names,
            shapes: b.shapes,
            inits: b.inits,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }
}

/// All learnable tensors of one model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    spec: ModelSpec,
    layout: Layout,
    tensors: Vec<Mat>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.tensors == other.tensors
    }
}

impl ModelParams {
    /// Seeded uniform(±1/√fan_in) initialization, stored at `f32` precision.
    pub fn init(spec: ModelSpec) -> Self {
        let layout = Layout::new(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.train.seed);
        let tensors = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(&(r, c), init)| {
                let mut m = match *init {
                    Init::Uniform(bound) => Mat::uniform(r, c, bound, &mut rng),
                    Init::Ones => Mat::filled(r, c, 1.0),
                    Init::Zeros => Mat::zeros(r, c),
                };
                m.round_to_f32();
                m
            })
            .collect();
        Self {
            spec,
            layout,
            tensors,
        }
    }

    /// Rebuilds from named tensors; every layout entry must appear exactly once.
    pub fn from_named(spec: ModelSpec, named: Vec<(String, Mat)>) -> Result<Self> {
        let layout = Layout::new(&spec);
        let mut slots: Vec<Option<Mat>> = vec![None; layout.len()];
        for (name, m) in named {
            let i = layout
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Format(format!("unknown tensor `{name}`")))?;
            if m.shape() != layout.shapes[i] {
                return Err(Error::Format(format!(
                    "tensor `{name}` is {:?}, expected {:?}",
                    m.shape(),
                    layout.shapes[i]
                )));
            }
            if slots[i].replace(m).is_some() {
                return Err(Error::Format(format!("tensor `{name}` appears twice")));
            }
        }
        let tensors = slots
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.ok_or_else(|| Error::Format(format!("missing tensor `{}`", layout.names[i]))))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            layout,
            tensors,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.layout.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.named().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    /// `θ ← θ − lr·g`, then rounding to `f32` storage precision. Refuses
    /// non-finite gradients without touching the parameters.
    pub fn sgd_step(&mut self, grads: &[Mat], lr: f64) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} tensors",
                grads.len(),
                self.tensors.len()
            )));
        }
        for (name, g) in self.layout.names.iter().zip(grads) {
            if !g.is_finite() {
                let bad = g.data().iter().filter(|v| !v.is_finite()).count();
                return Err(Error::Numerical(format!(
                    "gradient of `{name}` has {bad} non-finite entries"
                )));
            }
        }
        for (p, g) in self.tensors.iter_mut().zip(grads) {
            sgd_step(p, g, lr)?;
            p.round_to_f32();
        }
        Ok(())
    }

    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|m| tape.leaf(m.clone())).collect()
    }
}

/// `θ ← θ − lr·g` elementwise.
pub fn sgd_step(param: &mut Mat, grad: &Mat, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "parameter {:?} vs gradient {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}

/// Frames of one sample, already stacked.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    pub events: &'a FrameTensor,
    pub rgb: &'a FrameTensor,
}

/// Tape handles and side results of one forward pass.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub logits: Var,
    /// Pre-classifier `[1, F]` embedding.
    pub pooled: Var,
    pub mask: ActivityMask,
    /// Raw `[D, S]` affinity; drives the hyperedges only when construction is on.
    pub affinity: Var,
    pub hypergraph: Hypergraph,
}

/// Resolves a layout component against concrete tensors or tape handles.
pub fn resolve<T: Clone>(table: &[T]) -> impl Fn(&usize) -> T + '_ {
    move |&i| table[i].clone()
}

pub fn forward_sample(
    tape: &mut Tape,
    spec: &ModelSpec,
    layout: &Layout,
    vars: &[Var],
    sample: SampleView<'_>,
) -> Result<SampleTrace> {
    let c = &spec.train;
    let r = resolve(vars);
    let (nd, ns, dob, steps) = (c.dynamic_nodes, c.static_nodes, c.d_ob, c.steps);

    let (rgb_tokens, _) = embed_on_tape(tape, sample.rgb, c.patch_size, &layout.rgb_embed.map(&r))?;
    let (event_tokens, grid) = embed_on_tape(tape, sample.events, c.patch_size, &layout.event_embed.map(&r))?;
    let static_values = tape.mean_rows(rgb_tokens);
    let (dynamic_values, plan) = reduce_dynamic_on_tape(
        tape,
        event_tokens,
        sample.events.steps(),
        grid.0 * grid.1,
        steps,
        c.sim_threshold,
    )?;
    let mask = ActivityMask::from_steps(&plan.step_active(), nd);

    // Node features: value times a learned per-node vector.
    let dyn_col = tape.reshape(dynamic_values, steps * nd, 1);
    let tiled: Vec<usize> = (0..steps * nd).map(|i| i % nd).collect();
    let dyn_basis = tape.gather_rows(vars[layout.dyn_expand], &tiled);
    let dynamic = tape.row_scale(dyn_basis, dyn_col);
    let stat_col = tape.reshape(static_values, ns, 1);
    let statics = tape.row_scale(vars[layout.stat_expand], stat_col);

    let raw = affinity_on_tape(tape, dynamic, statics, steps, &layout.shared.map(&r))?;
    let (hypergraph, gamma_scores) = if c.ablation.hgc {
        let a = AffinityTensor::from_raw(tape.value(raw).clone());
        (build_hyperedges(&a, c.k)?, Some(raw))
    } else {
        (fixed_hyperedges(nd, ns, c.k)?, None)
    };

    let dynamic = if c.ablation.st1 {
        let g = build_dynamic_graph(nd)?;
        let plan = SlotPlan::new(&Structure::from_dynamic_graph(&g), &mask, steps)?;
        propagate_on_tape(tape, dynamic, &plan, &layout.stage1.map(&r), c.prop_heads, None)?
    } else {
        dynamic
    };

    let (dynamic, statics) = if c.ablation.st2 {
        stage2_on_tape(
            tape,
            dynamic,
            statics,
            steps,
            &hypergraph,
            &layout.stage2.map(&r),
            c.prop_heads,
            &mask,
            gamma_scores,
        )?
    } else {
        let tiled: Vec<usize> = (0..steps * ns).map(|i| i % ns).collect();
        (dynamic, tape.gather_rows(statics, &tiled))
    };

    let dyn_seq = tape.reshape(dynamic, steps, nd * dob);
    let stat_seq = tape.reshape(statics, steps, ns * dob);
    let temporal: Vec<EncoderBlock<Var>> = layout.temporal.iter().map(|b| b.map(&r)).collect();
    let dyn_seq = temporal_fuse_on_tape(tape, dyn_seq, &temporal, c.nhead)?;
    let (pooled, logits) = fuse_and_classify_on_tape(tape, dyn_seq, stat_seq, &layout.head.map(&r), c.nhead)?;

    Ok(SampleTrace {
        logits,
        pooled,
        mask,
        affinity: raw,
        hypergraph,
    })
}

/// Supervision for one sample: the class, or the set of positive attributes.
pub type Labels = [usize];

/// Dense `[B, M]` 0/1 attribute matrix.
pub fn attribute_targets(labels: &[&Labels], num_attributes: usize) -> Mat {
    let mut y = Mat::zeros(labels.len(), num_attributes);
    for (i, l) in labels.iter().enumerate() {
        for &j in l.iter() {
            y[(i, j)] = 1.0;
        }
    }
    y
}

/// Mean loss over a batch. `weights` are the multi-label attribute weights.
pub fn batch_loss(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &[Var],
    samples: &[SampleView<'_>],
    labels: &[&Labels],
    weights: Option<&[f64]>,
) -> Result<(Var, Vec<SampleTrace>)> {
    if samples.is_empty() || samples.len() != labels.len() {
        return Err(Error::invalid("batch needs one label set per sample"));
    }
    let spec = params.spec();
    let traces = samples
        .iter()
        .map(|s| forward_sample(tape, spec, params.layout(), vars, *s))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Var> = traces.iter().map(|t| t.logits).collect();
    let logits = tape.concat_rows(&rows);
    let classes = spec.geometry.num_classes;
    let loss = match spec.train.task {
        Task::SingleLabel => {
            let ys = labels
                .iter()
                .map(|l| match l {
                    [y] if *y < classes => Ok(*y),
                    _ => Err(Error::invalid(format!("single-label sample has labels {l:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            tape.softmax_cross_entropy(logits, &ys, spec.train.prob_eps)
        }
        Task::MultiLabel => {
            if labels.iter().any(|l| l.iter().any(|&j| j >= classes)) {
                return Err(Error::invalid("attribute index out of range"));
            }
            let y = attribute_targets(labels, classes);
            let ones = vec![1.0; classes];
            let w = weights.unwrap_or(&ones);
            tape.weighted_bce(logits, &y, w, spec.train.prob_eps)
        }
    };
    Ok((loss, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Modality;

    pub(crate) fn tiny_spec(task: Task) -> ModelSpec {
        let mut c = TrainConfig::with_seed(3);
        c.task = task;
        c.dynamic_nodes = 4;
        c.static_nodes = 3;
        c.steps = 2;
        c.k = 2;
        c.patch_size = 2;
        c.event_bins = 3;
        c.nhid = 6;
        c.latent = 4;
        let g = DataGeometry {
            sensor_width: 4,
            sensor_height: 4,
            t_start: 0,
            t_end: 100,
            num_classes: 3,
            task,
        };
        ModelSpec::new(c, g).unwrap()
    }

    #[test]
    fn names_unique_and_init_deterministic() {
        let spec = tiny_spec(Task::SingleLabel);
        let a = ModelParams::init(spec.clone());
        let b = ModelParams::init(spec);
        assert_eq!(a, b);
        let mut names: Vec<&str> = a.named().map(|(n, _)| n).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), a.layout().len());
        for m in a.tensors() {
            for &v in m.data() {
                assert_eq!(v, f64::from(v as f32));
            }
        }
    }

    #[test]
    fn from_named_requires_every_tensor_once() {
        let p = ModelParams::init(tiny_spec(Task::SingleLabel));
        let named: Vec<(String, Mat)> = p.named().map(|(n, m)| (n.to_string(), m.clone())).collect();
        let back = ModelParams::from_named(p.spec().clone(), named.clone()).unwrap();
        assert_eq!(back, p);
        let mut missing = named.clone();
        missing.pop();
        assert!(ModelParams::from_named(p.spec().clone(), missing).is_err());
        let mut dup = named;
        dup.push(dup[0].clone());
        assert!(ModelParams::from_named(p.spec().clone(), dup).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = Mat::row_vector(&[1.0, -2.0, 0.5]);
        sgd_step(&mut p, &Mat::row_vector(&[2.0, 0.0, -1.0]), 0.1).unwrap();
        let expected = [0.8, -2.0, 0.6];
        for (a, b) in p.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut q = Mat::row_vector(&[1.0]);
        assert!(matches!(
            sgd_step(&mut q, &Mat::row_vector(&[f64::NAN]), 0.1),
            Err(Error::Numerical(_))
        ));
        assert_eq!(q.data(), &[1.0]);
    }

    #[test]
    fn forward_produces_finite_logits() {
        let spec = tiny_spec(Task::SingleLabel);
        let params = ModelParams::init(spec);
        let events = FrameTensor::from_vec(Modality::Event, 3, 4, 4, (0..96).map(|i| (i % 3) as f32).collect()).unwrap();
        let rgb = FrameTensor::from_vec(Modality::Rgb, 1, 4, 4, (0..48).map(|i| (i % 5) as f32 / 5.0).collect()).unwrap();
        let mut tape = Tape::new();
        let vars = params.leaves(&mut tape);
        let s = SampleView {
            events: &events,
            rgb: &rgb,
        };
        let (loss, traces) = batch_loss(&mut tape, &params, &vars, &[s], &[&[1]], None).unwrap();
        assert!(tape.value(loss).data()[0].is_finite());
        assert_eq!(tape.value(traces[0].logits).shape(), (1, 3));
        assert_eq!(traces[0].hypergraph.edges().len(), 4);
    }
}
