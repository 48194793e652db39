//! Pre-norm Transformer blocks over the time axis and the classification head.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One pre-norm encoder layer: `x + MHA(LN(x))`, then `x + FF(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    /// `[F, F]` each.
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    /// `[hidden, F]`
    pub ff1_weight: T,
    pub ff1_bias: T,
    /// `[F, hidden]`
    pub ff2_weight: T,
    pub ff2_bias: T,
}

impl<T> EncoderBlock<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncoderBlock<U> {
        EncoderBlock {
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_o: f(&self.w_o),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            ff1_weight: f(&self.ff1_weight),
            ff1_bias: f(&self.ff1_bias),
            ff2_weight: f(&self.ff2_weight),
            ff2_bias: f(&self.ff2_bias),
        }
    }
}

/// Fusion block, mean pooling over time and the linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub fusion: EncoderBlock<T>,
    /// `[classes, F]`
    pub weight: T,
    /// `[1, classes]`
    pub bias: T,
}

impl<T> ClassifierHead<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ClassifierHead<U> {
        ClassifierHead {
            fusion: self.fusion.map(&mut f),
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

/// Raw per-sample, per-class scores `[B, classes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub values: Mat,
}

fn check_block(tape: &Tape, x: Var, p: &EncoderBlock<Var>, heads: usize) -> Result<()> {
    let width = tape.value(x).cols();
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::shape(format!("{heads} heads do not divide width {width}")));
    }
    for (name, v) in [("w_q", p.w_q), ("w_k", p.w_k), ("w_v", p.w_v), ("w_o", p.w_o)] {
        if tape.value(v).shape() != (width, width) {
            return Err(Error::shape(format!(
                "{name} is {:?}, block width is {width}",
                tape.value(v).shape()
            )));
        }
    }
    if tape.value(p.ff1_weight).cols() != width || tape.value(p.ff2_weight).rows() != width {
        return Err(Error::shape("feed-forward weights do not match block width"));
    }
    Ok(())
}

/// Multi-head self-attention over the rows (time steps) of `h`. Returns the
/// output and the per-head `[T, T]` attention weights.
fn self_attention(tape: &mut Tape, h: Var, p: &EncoderBlock<Var>, heads: usize) -> (Var, Vec<Var>) {
    let width = tape.value(h).cols();
    let dh = width / heads;
    let q = tape.matmul_nt(h, p.w_q);
    let k = tape.matmul_nt(h, p.w_k);
    let v = tape.matmul_nt(h, p.w_v);
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice_cols(q, head * dh, dh);
        let kh = tape.slice_cols(k, head * dh, dh);
        let vh = tape.slice_cols(v, head * dh, dh);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.row_softmax(scores);
        weights.push(attn);
        outs.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&outs);
    (tape.matmul_nt(cat, p.w_o), weights)
}

pub fn encoder_block_on_tape(tape: &mut Tape, x: Var, p: &EncoderBlock<Var>, heads: usize) -> Result<Var> {
    check_block(tape, x, p, heads)?;
    let h = tape.layer_norm(x, p.ln1_gain, p.ln1_bias, LAYER_NORM_EPS);
    let (attn, _) = self_attention(tape, h, p, heads);
    let x = tape.add(x, attn);
    let h = tape.layer_norm(x, p.ln2_gain, p.ln2_bias, LAYER_NORM_EPS);
    let f = tape.linear(h, p.ff1_weight, p.ff1_bias);
    let f = tape.relu(f);
    let f = tape.linear(f, p.ff2_weight, p.ff2_bias);
    Ok(tape.add(x, f))
}

/// Per-head `[T, T]` attention weights of the first sublayer of `block`.
pub fn attention_weights(x: &Mat, block: &EncoderBlock<Mat>, heads: usize) -> Result<Vec<Mat>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let p = block.map(|m| tape.leaf(m.clone()));
    check_block(&tape, xv, &p, heads)?;
    let h = tape.layer_norm(xv, p.ln1_gain, p.ln1_bias, LAYER_NORM_EPS);
    let (_, weights) = self_attention(&mut tape, h, &p, heads);
    Ok(weights.into_iter().map(|w| tape.value(w).clone()).collect())
}

/// Stack of encoder blocks over `[T, F]` step features.
pub fn temporal_fuse_on_tape(tape: &mut Tape, x: Var, layers: &[EncoderBlock<Var>], heads: usize) -> Result<Var> {
    layers
        .iter()
        .try_fold(x, |h, layer| encoder_block_on_tape(tape, h, layer, heads))
}

pub fn temporal_fuse(x: &Mat, layers: &[EncoderBlock<Mat>], heads: usize) -> Result<Mat> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars: Vec<EncoderBlock<Var>> = layers
        .iter()
        .map(|l| l.map(|m| tape.leaf(m.clone())))
        .collect();
    let out = temporal_fuse_on_tape(&mut tape, xv, &vars, heads)?;
    Ok(tape.value(out).clone())
}

/// Concatenate per step, one fusion block, mean over time. Returns the
/// pooled `[1, F]` embedding and `[1, classes]` logits.
pub fn fuse_and_classify_on_tape(
    tape: &mut Tape,
    dynamic: Var,
    statics: Var,
    head: &ClassifierHead<Var>,
    heads: usize,
) -> Result<(Var, Var)> {
    if tape.value(dynamic).rows() != tape.value(statics).rows() {
        return Err(Error::shape("dynamic and static sequences differ in length"));
    }
    let cat = tape.concat_cols(&[dynamic, statics]);
    let fused = encoder_block_on_tape(tape, cat, &head.fusion, heads)?;
    let pooled = tape.mean_rows(fused);
    if tape.value(head.weight).cols() != tape.value(pooled).cols() {
        return Err(Error::shape(format!(
            "classifier expects width {}, pooled features have {}",
            tape.value(head.weight).cols(),
            tape.value(pooled).cols()
        )));
    }
    let logits = tape.linear(pooled, head.weight, head.bias);
    Ok((pooled, logits))
}

pub fn fuse_and_classify(dynamic: &Mat, statics: &Mat, head: &ClassifierHead<Mat>, heads: usize) -> Result<Logits> {
    let mut tape = Tape::new();
    let d = tape.leaf(dynamic.clone());
    let s = tape.leaf(statics.clone());
    let p = head.map(|m| tape.leaf(m.clone()));
    let (_, logits) = fuse_and_classify_on_tape(&mut tape, d, s, &p, heads)?;
    Ok(Logits {
        values: tape.value(logits).clone(),
    })
}
