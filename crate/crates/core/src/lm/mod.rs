//! Toy decoder LM that reads projected image tokens followed by the
//! classification prompt.

mod model;
mod prompt;
mod vocab;

pub use model::{
    answer_nll, answer_nll_forward, greedy_generate, masked_answer_nll, AnswerPass, Block, Layout, LmCache, LmConfig,
    LmParams, PromptedExample,
};
pub use prompt::{build_prompt, parse_label, render_prompt};
pub use vocab::{Vocab, BEGIN_ANSWER, EOS, SEP, UNK};

use crate::data::LabeledExample;
use crate::error::Result;
use crate::rng::RngState;

/// Builds the prompted form of `ex`. With `shuffle` the class order is drawn
/// from that stream, otherwise classes are listed in dataset order.
pub fn prompt_example(
    vocab: &Vocab,
    task: &str,
    classes: &[String],
    ex: &LabeledExample,
    shuffle: Option<RngState>,
) -> Result<PromptedExample> {
    let (prompt, class_order) = match shuffle {
        Some(rng) => build_prompt(classes, task, rng)?,
        None => {
            let order: Vec<usize> = (0..classes.len()).collect();
            (render_prompt(classes, task, &order), order)
        }
    };
    Ok(PromptedExample {
        image: ex.embedding.tokens().clone(),
        question: vocab.encode(&prompt),
        answer: vec![vocab.class_ids()[ex.label], vocab.eos()],
        class_order,
    })
}
