//! Normality/abnormality prompt construction and the learnable prompt state.
//!
//! The prompt state is the only trainable state in the whole pipeline: the
//! normality/abnormality word embeddings plus the deep tuning tokens injected
//! into the text encoder. Template words ("object", the abnormality word, a
//! class name) stay frozen vocabulary embeddings.

use ndarray::{Array1, Array2};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::backbone::{BackboneHandle, END_TOKEN, START_TOKEN};
use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

pub const DEFAULT_ABNORMAL_WORD: &str = "damaged";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Learnable prompts around the generic word "object".
    #[default]
    Agnostic,
    /// Learnable prompts around the literal class name.
    Aware,
    /// Fixed hand-written two-class templates, no learnable slots.
    PlainClip,
}

impl PromptMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "agnostic" => Ok(PromptMode::Agnostic),
            "aware" => Ok(PromptMode::Aware),
            "plain_clip" | "plain-clip" => Ok(PromptMode::PlainClip),
            other => Err(Error::Config(format!("unknown prompt mode '{other}'"))),
        }
    }
}

/// Learnable tokens injected into the first M' text-encoder layers.
#[derive(Debug, Clone, Default)]
pub struct DeepTuningState {
    /// One (L, text_width) matrix per tuned layer.
    pub tokens: Vec<Array2<f64>>,
}

impl DeepTuningState {
    pub fn depth(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_length(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.nrows())
    }
}

/// All trainable prompt state.
#[derive(Debug, Clone)]
pub struct PromptState {
    /// Normality word embeddings [V_1 .. V_E], (E, text_width).
    pub normal_ctx: Array2<f64>,
    /// Abnormality word embeddings [W_1 .. W_E], (E, text_width).
    pub abnormal_ctx: Array2<f64>,
    pub mode: PromptMode,
    pub tuning: DeepTuningState,
    /// Literal word preceding the object slot in the abnormal template.
    pub abnormal_word: String,
}

impl PromptState {
    pub fn context_len(&self) -> usize {
        self.normal_ctx.nrows()
    }

    pub fn assert_finite(&self) -> Result<()> {
        let all_finite = self.normal_ctx.iter().all(|v| v.is_finite())
            && self.abnormal_ctx.iter().all(|v| v.is_finite())
            && self
                .tuning
                .tokens
                .iter()
                .all(|t| t.iter().all(|v| v.is_finite()));
        if all_finite {
            Ok(())
        } else {
            Err(Error::Diverged("prompt state contains non-finite values".into()))
        }
    }
}

/// Initialize a prompt state with zero-mean Gaussian (std 0.02) embeddings.
/// Deterministic per seed.
pub fn init_prompt_state(
    text_width: usize,
    e: usize,
    depth: usize,
    token_length: usize,
    seed: u64,
    mode: PromptMode,
) -> Result<PromptState> {
    if e < 1 {
        return Err(Error::Config("prompt length E must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 0.02).unwrap();
    let mut sample = |rows: usize, cols: usize| {
        Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
    };
    let normal_ctx = sample(e, text_width);
    let abnormal_ctx = sample(e, text_width);
    let tokens = if mode == PromptMode::PlainClip {
        Vec::new()
    } else {
        (0..depth).map(|_| sample(token_length, text_width)).collect()
    };
    Ok(PromptState {
        normal_ctx,
        abnormal_ctx,
        mode,
        tuning: DeepTuningState { tokens },
        abnormal_word: DEFAULT_ABNORMAL_WORD.to_string(),
    })
}

/// One element of a prompt token sequence.
#[derive(Debug, Clone)]
pub enum SeqPart {
    /// Frozen vocabulary embeddings with their token ids.
    Frozen { ids: Vec<u32>, rows: Array2<f64> },
    /// The learnable normality context block V.
    Normal,
    /// The learnable abnormality context block W.
    Abnormal,
}

/// An embedding-level prompt sequence: frozen rows interleaved with the
/// learnable context block.
#[derive(Debug, Clone)]
pub struct PromptSequence {
    pub parts: Vec<SeqPart>,
}

impl PromptSequence {
    /// Concrete embedding matrix under the given prompt state.
    pub fn materialize(&self, state: &PromptState) -> Array2<f64> {
        let views: Vec<_> = self
            .parts
            .iter()
            .map(|p| match p {
                SeqPart::Frozen { rows, .. } => rows.view(),
                SeqPart::Normal => state.normal_ctx.view(),
                SeqPart::Abnormal => state.abnormal_ctx.view(),
            })
            .collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("widths match")
    }

    /// Token ids where defined (learnable slots have none).
    pub fn token_ids(&self) -> Vec<Option<u32>> {
        let mut out = Vec::new();
        for p in &self.parts {
            match p {
                SeqPart::Frozen { ids, .. } => out.extend(ids.iter().map(|&i| Some(i))),
                SeqPart::Normal | SeqPart::Abnormal => {
                    // Length resolved at materialization; marker only.
                    out.push(None);
                }
            }
        }
        out
    }

    pub fn len(&self, state: &PromptState) -> usize {
        self.parts
            .iter()
            .map(|p| match p {
                SeqPart::Frozen { rows, .. } => rows.nrows(),
                SeqPart::Normal | SeqPart::Abnormal => state.context_len(),
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Build the sequence node on a tape, splicing in the learnable blocks.
    pub fn assemble_on_tape(&self, tape: &mut Tape, v: NodeId, w: NodeId) -> NodeId {
        let part_nodes: Vec<NodeId> = self
            .parts
            .iter()
            .map(|p| match p {
                SeqPart::Frozen { rows, .. } => tape.constant(rows.clone()),
                SeqPart::Normal => v,
                SeqPart::Abnormal => w,
            })
            .collect();
        tape.concat_rows(&part_nodes)
    }
}

fn frozen_words(handle: &BackboneHandle, words: &str) -> SeqPart {
    let ids: Vec<u32> = words
        .split_whitespace()
        .map(|w| handle.tokenizer.word_id(w))
        .collect();
    frozen_ids(handle, ids)
}

fn frozen_ids(handle: &BackboneHandle, ids: Vec<u32>) -> SeqPart {
    let mut rows = Array2::zeros((ids.len(), handle.text_width()));
    for (i, &id) in ids.iter().enumerate() {
        rows.row_mut(i).assign(&handle.token_embedding(id));
    }
    SeqPart::Frozen { ids, rows }
}

fn marker(handle: &BackboneHandle, id: u32) -> SeqPart {
    frozen_ids(handle, vec![id])
}

/// Build the normal/abnormal token sequences for the configured mode.
///
/// In agnostic mode the output is independent of `class_name`.
pub fn build_token_sequences(
    handle: &BackboneHandle,
    state: &PromptState,
    class_name: &str,
) -> Result<(PromptSequence, PromptSequence)> {
    let object_word = match state.mode {
        PromptMode::Agnostic => "object".to_string(),
        PromptMode::Aware | PromptMode::PlainClip => {
            if class_name.trim().is_empty() {
                return Err(Error::Input(
                    "class name must be non-empty in aware/plain_clip modes".into(),
                ));
            }
            class_name.to_string()
        }
    };

    let (normal, abnormal) = match state.mode {
        PromptMode::Agnostic | PromptMode::Aware => {
            let normal = PromptSequence {
                parts: vec![
                    marker(handle, START_TOKEN),
                    SeqPart::Normal,
                    frozen_words(handle, &object_word),
                    marker(handle, END_TOKEN),
                ],
            };
            let abnormal = PromptSequence {
                parts: vec![
                    marker(handle, START_TOKEN),
                    SeqPart::Abnormal,
                    frozen_words(handle, &format!("{} {object_word}", state.abnormal_word)),
                    marker(handle, END_TOKEN),
                ],
            };
            (normal, abnormal)
        }
        PromptMode::PlainClip => {
            let normal = PromptSequence {
                parts: vec![frozen_ids(
                    handle,
                    handle
                        .tokenizer
                        .encode(&format!("a photo of a normal {object_word}")),
                )],
            };
            let abnormal = PromptSequence {
                parts: vec![frozen_ids(
                    handle,
                    handle
                        .tokenizer
                        .encode(&format!("a photo of an anomalous {object_word}")),
                )],
            };
            (normal, abnormal)
        }
    };
    Ok((normal, abnormal))
}

/// Trainable leaves registered on a tape for one forward/backward pass.
pub struct PromptParams {
    pub v: NodeId,
    pub w: NodeId,
    pub tuning: Vec<NodeId>,
}

/// Compute (g_n, g_a) without gradient tracking.
pub fn compute_prompt_embeddings(
    handle: &BackboneHandle,
    state: &PromptState,
    class_name: &str,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let (normal, abnormal) = build_token_sequences(handle, state, class_name)?;
    let tuning: Option<&[Array2<f64>]> = if state.tuning.tokens.is_empty() {
        None
    } else {
        Some(&state.tuning.tokens)
    };
    let g_n = handle.encode_text_embedded(&normal.materialize(state), tuning)?;
    let g_a = handle.encode_text_embedded(&abnormal.materialize(state), tuning)?;
    Ok((g_n, g_a))
}

/// Register the trainable leaves (V, W, tuning tokens) on a tape once per
/// forward/backward pass.
pub fn register_prompt_params(tape: &mut Tape, state: &PromptState) -> PromptParams {
    let v = tape.param(state.normal_ctx.clone());
    let w = tape.param(state.abnormal_ctx.clone());
    let tuning: Vec<NodeId> = state
        .tuning
        .tokens
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect();
    PromptParams { v, w, tuning }
}

/// Compute (g_n, g_a) on a tape through previously registered leaves.
pub fn prompt_embeddings_with_params(
    handle: &BackboneHandle,
    tape: &mut Tape,
    state: &PromptState,
    params: &PromptParams,
    class_name: &str,
) -> Result<(NodeId, NodeId)> {
    let (normal, abnormal) = build_token_sequences(handle, state, class_name)?;
    let tuning_opt: Option<&[NodeId]> = if params.tuning.is_empty() {
        None
    } else {
        Some(&params.tuning)
    };
    let normal_seq = normal.assemble_on_tape(tape, params.v, params.w);
    let g_n = handle.encode_text_on_tape(tape, normal_seq, tuning_opt)?;
    let abnormal_seq = abnormal.assemble_on_tape(tape, params.v, params.w);
    let g_a = handle.encode_text_on_tape(tape, abnormal_seq, tuning_opt)?;
    Ok((g_n, g_a))
}

/// Compute (g_n, g_a) on a tape; returns the embedding nodes plus the
/// registered trainable leaves.
pub fn compute_prompt_embeddings_on_tape(
    handle: &BackboneHandle,
    tape: &mut Tape,
    state: &PromptState,
    class_name: &str,
) -> Result<(NodeId, NodeId, PromptParams)> {
    let params = register_prompt_params(tape, state);
    let (g_n, g_a) = prompt_embeddings_with_params(handle, tape, state, &params, class_name)?;
    Ok((g_n, g_a, params))
}

// ── Checkpoint serialization ─────────────────────────────────────────

const PROMPT_KIND: &str = "prompt";

/// Serialize only the prompt state (the backbone is never written).
pub fn save_prompt_state(state: &PromptState, path: &Path) -> Result<()> {
    let mut c = TensorContainer::new();
    c.set_meta("kind", PROMPT_KIND);
    c.set_meta("mode", serde_json::to_value(state.mode).unwrap());
    c.set_meta("abnormal_word", state.abnormal_word.clone());
    c.set_meta("context_len", state.context_len() as u64);
    c.set_meta("tuning_depth", state.tuning.depth() as u64);
    c.set_meta("text_width", state.normal_ctx.ncols() as u64);
    c.insert_a2("prompt.normal", &state.normal_ctx);
    c.insert_a2("prompt.abnormal", &state.abnormal_ctx);
    for (i, t) in state.tuning.tokens.iter().enumerate() {
        c.insert_a2(&format!("tuning.{i}"), t);
    }
    c.save(path)
}

/// Load a prompt checkpoint and verify it matches the backbone dimensions.
pub fn load_prompt_state(path: &Path, handle: &BackboneHandle) -> Result<PromptState> {
    let c = TensorContainer::load(path)?;
    if c.meta_str("kind")? != PROMPT_KIND {
        return Err(Error::Load(format!(
            "{}: not a prompt checkpoint",
            path.display()
        )));
    }
    let width = c.meta_u64("text_width")? as usize;
    if width != handle.text_width() {
        return Err(Error::Config(format!(
            "prompt checkpoint text width {width} incompatible with backbone width {}",
            handle.text_width()
        )));
    }
    let e = c.meta_u64("context_len")? as usize;
    let depth = c.meta_u64("tuning_depth")? as usize;
    if depth > handle.spec.text_layers {
        return Err(Error::Config(format!(
            "prompt checkpoint tuning depth {depth} exceeds backbone text depth {}",
            handle.spec.text_layers
        )));
    }
    let mode: PromptMode = serde_json::from_value(
        c.meta
            .get("mode")
            .cloned()
            .ok_or_else(|| Error::Load("missing metadata field 'mode'".into()))?,
    )
    .map_err(|e| Error::Load(format!("bad prompt mode: {e}")))?;

    let mut tokens = Vec::with_capacity(depth);
    for i in 0..depth {
        let t = c.a2_any(&format!("tuning.{i}"))?;
        if t.ncols() != width {
            return Err(Error::Config(format!(
                "tuning.{i} has width {}, expected {width}",
                t.ncols()
            )));
        }
        tokens.push(t);
    }
    Ok(PromptState {
        normal_ctx: c.a2("prompt.normal", (e, width))?,
        abnormal_ctx: c.a2("prompt.abnormal", (e, width))?,
        mode,
        tuning: DeepTuningState { tokens },
        abnormal_word: c.meta_str("abnormal_word")?.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneHandle;

    #[test]
    fn aware_mode_requires_a_class_name() {
        let handle = BackboneHandle::stub(42);
        let state =
            init_prompt_state(handle.text_width(), 4, 0, 4, 0, PromptMode::Aware).unwrap();
        assert!(matches!(
            build_token_sequences(&handle, &state, "  "),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn plain_clip_has_no_learnable_slots() {
        let handle = BackboneHandle::stub(42);
        let state =
            init_prompt_state(handle.text_width(), 4, 0, 4, 0, PromptMode::PlainClip).unwrap();
        let (normal, abnormal) = build_token_sequences(&handle, &state, "bottle").unwrap();
        for seq in [&normal, &abnormal] {
            assert!(seq
                .parts
                .iter()
                .all(|p| matches!(p, SeqPart::Frozen { .. })));
        }
    }

    #[test]
    fn agnostic_sequences_use_the_generic_object_word() {
        let handle = BackboneHandle::stub(42);
        let state =
            init_prompt_state(handle.text_width(), 4, 0, 4, 0, PromptMode::Agnostic).unwrap();
        let (from_bottle, _) = build_token_sequences(&handle, &state, "bottle").unwrap();
        let (from_cable, _) = build_token_sequences(&handle, &state, "cable").unwrap();
        assert_eq!(from_bottle.token_ids(), from_cable.token_ids());
    }

    #[test]
    fn embedding_determinism() {
        let handle = BackboneHandle::stub(42);
        let state =
            init_prompt_state(handle.text_width(), 4, 2, 4, 0, PromptMode::Agnostic).unwrap();
        let (a_n, a_a) = compute_prompt_embeddings(&handle, &state, "object").unwrap();
        let (b_n, b_a) = compute_prompt_embeddings(&handle, &state, "object").unwrap();
        assert_eq!(a_n, b_n);
        assert_eq!(a_a, b_a);
    }

    #[test]
    fn checkpoint_width_mismatch_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ztc");
        let state = init_prompt_state(8, 4, 0, 4, 0, PromptMode::Agnostic).unwrap();
        save_prompt_state(&state, &path).unwrap();
        let handle = BackboneHandle::stub(42); // text width 16
        assert!(matches!(
            load_prompt_state(&path, &handle),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn init_embeddings_are_finite_and_small() {
        let state = init_prompt_state(16, 12, 3, 4, 0, PromptMode::Agnostic).unwrap();
        state.assert_finite().unwrap();
        assert_eq!(state.tuning.tokens.len(), 3);
        let max = state
            .normal_ctx
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 0.2, "std-0.02 init should stay small, got {max}");
    }
}
