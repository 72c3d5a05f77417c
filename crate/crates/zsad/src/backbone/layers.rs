//! Transformer layer primitives: attention score surgery, plain forward, and
//! the tape-recorded forward used during prompt training.
//!
//! The plain and tape paths are written op-for-op identically so their
//! outputs match bit-for-bit.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{NodeId, Tape};

/// Which operands form the pre-softmax attention score matrix.
///
/// `Qk` is the backbone's native attention; `Qq`/`Kk`/`Vv` replace it with a
/// diagonally prominent self-similarity of a single operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DpamMode {
    Qk,
    Qq,
    Kk,
    #[default]
    Vv,
}

impl DpamMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qk" => Ok(DpamMode::Qk),
            "qq" => Ok(DpamMode::Qq),
            "kk" => Ok(DpamMode::Kk),
            "vv" => Ok(DpamMode::Vv),
            other => Err(Error::Config(format!("unknown attention mode '{other}'"))),
        }
    }
}

/// Scaled pre-softmax attention scores for the selected operand pair.
///
/// For `Qq`/`Kk`/`Vv` the result is a Gram matrix and therefore exactly
/// symmetric up to rounding.
pub fn dpam_score_matrix(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    mode: DpamMode,
) -> Result<Array2<f64>> {
    if q.dim() != k.dim() || q.dim() != v.dim() {
        return Err(Error::Input(format!(
            "q/k/v shape mismatch: {:?} vs {:?} vs {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let scores = match mode {
        DpamMode::Qk => q.dot(&k.t()),
        DpamMode::Qq => q.dot(&q.t()),
        DpamMode::Kk => k.dot(&k.t()),
        DpamMode::Vv => v.dot(&v.t()),
    };
    Ok(scores.mapv(|x| scale * x))
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNormParams {
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        math::layer_norm_rows(x, &self.gamma, &self.beta)
    }
}

/// Weight stored as (out, in); applied as `x . w^T + b`.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearParams {
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    fn apply_tape(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let w = tape.constant(self.w.clone());
        let y = tape.matmul_nt(x, w);
        tape.add_row(y, self.b.clone())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub ln1: LayerNormParams,
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub ln2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
    pub heads: usize,
}

impl EncoderLayerParams {
    /// Pre-LN transformer block. `mask` is added to the scores of every head.
    pub fn forward(
        &self,
        x: &Array2<f64>,
        mask: Option<&Array2<f64>>,
        mode: DpamMode,
    ) -> Array2<f64> {
        let h = self.ln1.apply(x);
        let q = self.wq.apply(&h);
        let k = self.wk.apply(&h);
        let v = self.wv.apply(&h);

        let head_dim = q.ncols() / self.heads;
        let mut head_outs = Vec::with_capacity(self.heads);
        for hi in 0..self.heads {
            let cols = hi * head_dim..(hi + 1) * head_dim;
            let qh = q.slice(ndarray::s![.., cols.clone()]).to_owned();
            let kh = k.slice(ndarray::s![.., cols.clone()]).to_owned();
            let vh = v.slice(ndarray::s![.., cols]).to_owned();
            let mut scores = dpam_score_matrix(&qh, &kh, &vh, mode).expect("shapes match");
            if let Some(m) = mask {
                scores = scores + m;
            }
            let attn = math::softmax_rows(&scores);
            head_outs.push(attn.dot(&vh));
        }
        let views: Vec<_> = head_outs.iter().map(|a| a.view()).collect();
        let merged = ndarray::concatenate(Axis(1), &views).expect("head widths match");
        let x = x + &self.wo.apply(&merged);

        let h2 = self.ln2.apply(&x);
        let m = self.fc1.apply(&h2);
        let m = math::quick_gelu_array(&m);
        let m = self.fc2.apply(&m);
        &x + &m
    }

    /// Tape-recorded version of [`forward`](Self::forward); native QK scores
    /// only (prompt training never touches the DPAM route).
    pub fn forward_tape(&self, tape: &mut Tape, x: NodeId, mask: Option<&Array2<f64>>) -> NodeId {
        let h = tape.layer_norm_rows(x, self.ln1.gamma.clone(), self.ln1.beta.clone());
        let q = self.wq.apply_tape(tape, h);
        let k = self.wk.apply_tape(tape, h);
        let v = self.wv.apply_tape(tape, h);

        let width = tape.val(q).ncols();
        let head_dim = width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for hi in 0..self.heads {
            let qh = tape.slice_cols(q, hi * head_dim, head_dim);
            let kh = tape.slice_cols(k, hi * head_dim, head_dim);
            let vh = tape.slice_cols(v, hi * head_dim, head_dim);
            let scores = tape.matmul_nt(qh, kh);
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add_const(scores, m.clone());
            }
            let attn = tape.softmax_rows(scores);
            head_outs.push(tape.matmul(attn, vh));
        }
        let merged = tape.concat_cols(&head_outs);
        let o = self.wo.apply_tape(tape, merged);
        let x = tape.add(x, o);

        let h2 = tape.layer_norm_rows(x, self.ln2.gamma.clone(), self.ln2.beta.clone());
        let m = self.fc1.apply_tape(tape, h2);
        let m = tape.quick_gelu(m);
        let m = self.fc2.apply_tape(tape, m);
        tape.add(x, m)
    }
}

/// Additive causal mask: entry (i, j) is 0 for j <= i and -inf otherwise.
pub fn causal_mask(len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((len, len));
    for i in 0..len {
        for j in i + 1..len {
            m[(i, j)] = f64::NEG_INFINITY;
        }
    }
    m
}
