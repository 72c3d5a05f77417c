//! Show the three prompt modes: object-agnostic learnable templates, class-
//! aware learnable templates, and fixed hand-written two-class templates.
//!
//! Run with: `cargo run --example prompt_modes`

use zsad::backbone::BackboneHandle;
use zsad::prompts::{self, PromptMode};

fn main() -> zsad::Result<()> {
    let handle = BackboneHandle::stub(42);
    let classes = ["bottle", "capsule", "transistor"];

    for mode in [PromptMode::Agnostic, PromptMode::Aware, PromptMode::PlainClip] {
        let state = prompts::init_prompt_state(handle.text_width(), 12, 2, 4, 0, mode)?;
        println!("mode {mode:?}:");
        let mut first: Option<ndarray::Array1<f64>> = None;
        for class in classes {
            let (g_n, g_a) = prompts::compute_prompt_embeddings(&handle, &state, class)?;
            let same_as_first = match &first {
                Some(f) => *f == g_n,
                None => {
                    first = Some(g_n.clone());
                    true
                }
            };
            println!(
                "  {class:<11} g_n.g_a = {:+.4}  identical-to-first: {}",
                g_n.dot(&g_a),
                same_as_first
            );
        }
        println!();
    }
    println!("agnostic embeddings ignore the class name entirely; aware and plain_clip do not");
    Ok(())
}
