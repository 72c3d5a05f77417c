//! Text encoder forward passes.
//!
//! Deep tuning tokens are prepended to the running sequence before each of
//! the first M' layers and their output slots dropped afterwards, so the
//! non-tuning token count is invariant across layers. With no tuning the
//! forward pass is exactly the frozen encoder.
//!
//! `encode_text_embedded` (plain) and `encode_text_on_tape` perform the same
//! operations in the same order; their outputs are bit-identical.

use ndarray::{Array1, Array2};

use super::layers::causal_mask;
use super::BackboneHandle;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

impl BackboneHandle {
    fn check_text_len(&self, n: usize) -> Result<()> {
        if n > self.spec.context_length {
            return Err(Error::Input(format!(
                "text sequence length {n} exceeds context length {}",
                self.spec.context_length
            )));
        }
        Ok(())
    }

    fn check_tuning(&self, tuning: &[(usize, usize)]) -> Result<()> {
        if tuning.len() > self.spec.text_layers {
            return Err(Error::Config(format!(
                "tuning depth {} exceeds text encoder depth {}",
                tuning.len(),
                self.spec.text_layers
            )));
        }
        for (i, (_, w)) in tuning.iter().enumerate() {
            if *w != self.spec.text_width {
                return Err(Error::Config(format!(
                    "tuning tokens at layer {i} have width {w}, expected {}",
                    self.spec.text_width
                )));
            }
        }
        Ok(())
    }

    /// Encode a token-id sequence into a unit-norm D-dim embedding, reading
    /// out at the final (end-marker) position.
    pub fn encode_text(
        &self,
        token_ids: &[u32],
        tuning: Option<&[Array2<f64>]>,
    ) -> Result<Array1<f64>> {
        let n = token_ids.len();
        if n == 0 {
            return Err(Error::Input("empty token sequence".into()));
        }
        let mut seq = Array2::zeros((n, self.spec.text_width));
        for (i, &id) in token_ids.iter().enumerate() {
            if id as usize >= self.spec.vocab_size {
                return Err(Error::Input(format!("token id {id} out of vocabulary")));
            }
            seq.row_mut(i).assign(&self.text.token_embed.row(id as usize));
        }
        self.encode_text_embedded(&seq, tuning)
    }

    /// Encode an embedding-level sequence (used by prompt learning, where
    /// some rows are learnable rather than vocabulary entries).
    pub fn encode_text_embedded(
        &self,
        seq: &Array2<f64>,
        tuning: Option<&[Array2<f64>]>,
    ) -> Result<Array1<f64>> {
        let n = seq.nrows();
        self.check_text_len(n)?;
        if let Some(t) = tuning {
            self.check_tuning(&t.iter().map(|m| m.dim()).collect::<Vec<_>>())?;
        }

        let pos = self.text.pos_embed.slice(ndarray::s![0..n, ..]).to_owned();
        let mut x = seq + &pos;
        for (m, layer) in self.text.layers.iter().enumerate() {
            let injected = tuning.and_then(|t| t.get(m));
            match injected {
                Some(tok) => {
                    let l = tok.nrows();
                    let full = ndarray::concatenate(
                        ndarray::Axis(0),
                        &[tok.view(), x.view()],
                    )
                    .expect("widths match");
                    let mask = causal_mask(l + n);
                    let out = layer.forward(&full, Some(&mask), super::DpamMode::Qk);
                    x = out.slice(ndarray::s![l.., ..]).to_owned();
                }
                None => {
                    let mask = causal_mask(n);
                    x = layer.forward(&x, Some(&mask), super::DpamMode::Qk);
                }
            }
        }

        let readout = x.slice(ndarray::s![n - 1..n, ..]).to_owned();
        let readout = self.text.ln_final.apply(&readout);
        let projected = readout.dot(&self.text.proj);
        let normalized = crate::math::l2_normalize_rows(&projected);
        Ok(normalized.row(0).to_owned())
    }

    /// Tape-recorded text forward; gradients flow to the learnable rows of
    /// `seq` and to the tuning-token nodes, never to backbone weights.
    pub fn encode_text_on_tape(
        &self,
        tape: &mut Tape,
        seq: NodeId,
        tuning: Option<&[NodeId]>,
    ) -> Result<NodeId> {
        let n = tape.val(seq).nrows();
        self.check_text_len(n)?;
        if let Some(t) = tuning {
            self.check_tuning(&t.iter().map(|id| tape.val(*id).dim()).collect::<Vec<_>>())?;
        }

        let pos = self.text.pos_embed.slice(ndarray::s![0..n, ..]).to_owned();
        let mut x = tape.add_const(seq, pos);
        for (m, layer) in self.text.layers.iter().enumerate() {
            let injected = tuning.and_then(|t| t.get(m).copied());
            match injected {
                Some(tok) => {
                    let l = tape.val(tok).nrows();
                    let full = tape.concat_rows(&[tok, x]);
                    let mask = causal_mask(l + n);
                    let out = layer.forward_tape(tape, full, Some(&mask));
                    x = tape.slice_rows(out, l, n);
                }
                None => {
                    let mask = causal_mask(n);
                    x = layer.forward_tape(tape, x, Some(&mask));
                }
            }
        }

        let readout = tape.slice_rows(x, n - 1, 1);
        let readout = tape.layer_norm_rows(
            readout,
            self.text.ln_final.gamma.clone(),
            self.text.ln_final.beta.clone(),
        );
        let proj = tape.constant(self.text.proj.clone());
        let projected = tape.matmul(readout, proj);
        Ok(tape.l2_normalize_rows(projected))
    }
}

#[cfg(test)]
mod tests {
    use super::super::BackboneHandle;
    use ndarray::Array2;

    #[test]
    fn tuning_depth_must_fit_encoder() {
        let handle = BackboneHandle::stub(42);
        let ids = handle.tokenizer.encode("an object");
        let too_deep: Vec<Array2<f64>> =
            (0..3).map(|_| Array2::zeros((4, handle.text_width()))).collect();
        assert!(handle.encode_text(&ids, Some(&too_deep)).is_err());
    }

    #[test]
    fn tuning_changes_the_embedding_but_not_its_norm() {
        let handle = BackboneHandle::stub(42);
        let ids = handle.tokenizer.encode("an object");
        let plain = handle.encode_text(&ids, None).unwrap();
        let tuning: Vec<Array2<f64>> = (0..2)
            .map(|i| Array2::from_elem((4, handle.text_width()), 0.05 * (i + 1) as f64))
            .collect();
        let tuned = handle.encode_text(&ids, Some(&tuning)).unwrap();
        assert_ne!(plain, tuned);
        let n: f64 = tuned.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
}
