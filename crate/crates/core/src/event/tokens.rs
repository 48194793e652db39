//! Patch tokens and their reduction to static (RGB) and dynamic (event) node features.

use std::ops::Range;

use super::frames::FrameTensor;
use crate::autodiff::{RowMix, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{dot, Mat};

/// Linear patch projection plus a learned positional table.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed<T> {
    /// `[width, C * p * p]`
    pub weight: T,
    /// `[1, width]`
    pub bias: T,
    /// `[N, width]`
    pub pos: T,
}

impl<T> PatchEmbed<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PatchEmbed<U> {
        PatchEmbed {
            weight: f(&self.weight),
            bias: f(&self.bias),
            pos: f(&self.pos),
        }
    }
}

/// Per-frame patch embeddings; row `t * N + n` holds patch `n` of frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub tokens: Mat,
    pub steps: usize,
    pub num_patches: usize,
    pub patch_size: usize,
    /// Patch grid `(rows, cols)`; patch `n` sits at `(n / cols, n % cols)`.
    pub grid: (usize, usize),
}

impl TokenSet {
    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn token(&self, t: usize, n: usize) -> &[f64] {
        self.tokens.row(t * self.num_patches + n)
    }

    pub fn positions(&self) -> Vec<(usize, usize)> {
        (0..self.num_patches)
            .map(|n| (n / self.grid.1, n % self.grid.1))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticFeatures {
    pub values: Vec<f64>,
}

/// Per-step, per-node activity. Inactive entries carry no observation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivityMask {
    steps: usize,
    nodes: usize,
    bits: Vec<bool>,
}

impl ActivityMask {
    pub fn all_active(steps: usize, nodes: usize) -> Self {
        Self {
            steps,
            nodes,
            bits: vec![true; steps * nodes],
        }
    }

    pub fn from_steps(step_active: &[bool], nodes: usize) -> Self {
        let bits = step_active
            .iter()
            .flat_map(|&a| std::iter::repeat_n(a, nodes))
            .collect();
        Self {
            steps: step_active.len(),
            nodes,
            bits,
        }
    }

    pub fn from_bits(steps: usize, nodes: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != steps * nodes {
            return Err(Error::shape(format!(
                "mask [{steps}, {nodes}] needs {} bits, got {}",
                steps * nodes,
                bits.len()
            )));
        }
        Ok(Self { steps, nodes, bits })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn is_active(&self, t: usize, node: usize) -> bool {
        self.bits[t * self.nodes + node]
    }

    pub fn set(&mut self, t: usize, node: usize, active: bool) {
        self.bits[t * self.nodes + node] = active;
    }
}

/// Event-side features: `[T, D]` values with an activity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicFeatures {
    pub values: Mat,
    pub mask: ActivityMask,
}

/// Unrolls every `p x p` patch (channel-major, then row, then column) into
/// rows `[T * N, C * p * p]`, patches in raster order.
pub fn patch_matrix(frames: &FrameTensor, p: usize) -> Result<(Mat, (usize, usize))> {
    let [t_len, c_len, h, w] = frames.dims();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!(
            "frame {h}x{w} is not divisible into {p}x{p} patches"
        )));
    }
    let grid = (h / p, w / p);
    let n = grid.0 * grid.1;
    let width = c_len * p * p;
    let mut m = Mat::zeros(t_len * n, width);
    for t in 0..t_len {
        for py in 0..grid.0 {
            for px in 0..grid.1 {
                let row = m.row_mut(t * n + py * grid.1 + px);
                let mut k = 0;
                for c in 0..c_len {
                    for dy in 0..p {
                        for dx in 0..p {
                            row[k] = f64::from(frames.get(t, c, py * p + dy, px * p + dx));
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((m, grid))
}

/// Tokens on the tape: `patches * W^T + b + pos[n]`.
pub fn embed_on_tape(
    tape: &mut Tape,
    frames: &FrameTensor,
    p: usize,
    params: &PatchEmbed<Var>,
) -> Result<(Var, (usize, usize))> {
    let (patches, grid) = patch_matrix(frames, p)?;
    let n = grid.0 * grid.1;
    let (w_out, w_in) = tape.value(params.weight).shape();
    if w_in != patches.cols() {
        return Err(Error::shape(format!(
            "patch projection expects {w_in} inputs, patches have {}",
            patches.cols()
        )));
    }
    let pos_shape = tape.value(params.pos).shape();
    if pos_shape != (n, w_out) {
        return Err(Error::shape(format!(
            "positional table is {pos_shape:?}, need ({n}, {w_out})"
        )));
    }
    let x = tape.leaf(patches);
    let y = tape.linear(x, params.weight, params.bias);
    let tiled: Vec<usize> = (0..frames.steps() * n).map(|r| r % n).collect();
    let pos = tape.gather_rows(params.pos, &tiled);
    Ok((tape.add(y, pos), grid))
}

pub fn patchify_embed(frames: &FrameTensor, p: usize, params: &PatchEmbed<Mat>) -> Result<TokenSet> {
    let mut tape = Tape::new();
    let vars = PatchEmbed {
        weight: tape.leaf(params.weight.clone()),
        bias: tape.leaf(params.bias.clone()),
        pos: tape.leaf(params.pos.clone()),
    };
    let (tokens, grid) = embed_on_tape(&mut tape, frames, p, &vars)?;
    Ok(TokenSet {
        tokens: tape.value(tokens).clone(),
        steps: frames.steps(),
        num_patches: grid.0 * grid.1,
        patch_size: p,
        grid,
    })
}

/// Mean over every token of every frame.
pub fn reduce_static(tokens: &TokenSet) -> Result<StaticFeatures> {
    if tokens.tokens.rows() == 0 {
        return Err(Error::invalid("cannot average an empty token set"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(tokens.tokens.clone());
    let m = tape.mean_rows(x);
    Ok(StaticFeatures {
        values: tape.value(m).data().to_vec(),
    })
}

/// Which source steps survive the redundancy filter and how they pool into
/// the fixed temporal length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalPlan {
    pub source_steps: usize,
    pub retained: Vec<usize>,
    /// Per output step, a range into `retained`.
    pub ranges: Vec<Range<usize>>,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Row mix averaging each step's `num_patches` tokens.
pub fn step_mean_mix(steps: usize, num_patches: usize) -> RowMix {
    let w = 1.0 / num_patches as f64;
    (0..steps)
        .map(|t| (0..num_patches).map(|n| (t * num_patches + n, w)).collect())
        .collect()
}

impl TemporalPlan {
    /// `step_means` is `[T_src, D]`, one patch-averaged vector per step.
    pub fn new(step_means: &Mat, target_steps: usize, sim_threshold: f64) -> Result<Self> {
        if target_steps == 0 {
            return Err(Error::invalid("target temporal length must be at least 1"));
        }
        if !(sim_threshold > 0.0 && sim_threshold <= 1.0) {
            return Err(Error::invalid(format!(
                "similarity threshold {sim_threshold} outside (0, 1]"
            )));
        }
        let mut retained: Vec<usize> = Vec::new();
        for t in 0..step_means.rows() {
            let keep = match retained.last() {
                None => true,
                Some(&prev) => {
                    cosine_similarity(step_means.row(t), step_means.row(prev)) <= sim_threshold
                }
            };
            if keep {
                retained.push(t);
            }
        }
        let r = retained.len();
        let bound = |i: usize| (i * r).div_ceil(target_steps);
        let ranges = (0..target_steps).map(|i| bound(i)..bound(i + 1)).collect();
        Ok(Self {
            source_steps: step_means.rows(),
            retained,
            ranges,
        })
    }

    pub fn step_active(&self) -> Vec<bool> {
        self.ranges.iter().map(|r| !r.is_empty()).collect()
    }

    /// Maps token rows `[T_src * N, D]` straight to pooled steps `[T, D]`.
    pub fn token_mix(&self, num_patches: usize) -> RowMix {
        self.ranges
            .iter()
            .map(|range| {
                if range.is_empty() {
                    return Vec::new();
                }
                let w = 1.0 / (range.len() * num_patches) as f64;
                self.retained[range.clone()]
                    .iter()
                    .flat_map(|&t| (0..num_patches).map(move |n| (t * num_patches + n, w)))
                    .collect()
            })
            .collect()
    }
}

/// Patch-averages each step, drops steps nearly parallel to the previous
/// retained one, then mean-pools the survivors to `target_steps`.
pub fn reduce_dynamic(tokens: &TokenSet, target_steps: usize, sim_threshold: f64) -> Result<DynamicFeatures> {
    let mut tape = Tape::new();
    let x = tape.leaf(tokens.tokens.clone());
    let (values, plan) = reduce_dynamic_on_tape(&mut tape, x, tokens.steps, tokens.num_patches, target_steps, sim_threshold)?;
    let mask = ActivityMask::from_steps(&plan.step_active(), tokens.width());
    Ok(DynamicFeatures {
        values: tape.value(values).clone(),
        mask,
    })
}

pub fn reduce_dynamic_on_tape(
    tape: &mut Tape,
    tokens: Var,
    steps: usize,
    num_patches: usize,
    target_steps: usize,
    sim_threshold: f64,
) -> Result<(Var, TemporalPlan)> {
    let rows = tape.value(tokens).rows();
    if rows != steps * num_patches || rows == 0 {
        return Err(Error::shape(format!(
            "{rows} token rows for {steps} steps of {num_patches} patches"
        )));
    }
    let means = {
        let mut scratch = Tape::new();
        let t = scratch.leaf(tape.value(tokens).clone());
        let m = scratch.row_mix(t, step_mean_mix(steps, num_patches));
        scratch.value(m).clone()
    };
    let plan = TemporalPlan::new(&means, target_steps, sim_threshold)?;
    let pooled = tape.row_mix(tokens, plan.token_mix(num_patches));
    Ok((pooled, plan))
}
