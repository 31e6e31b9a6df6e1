//! Greedy translation, repeated-bigram removal and BLEU.

use std::collections::HashMap;

use serde::Serialize;

use crate::data::Vocabularies;
use crate::model::ModelParameters;
use crate::stack::{Action, Limits};
use crate::tape::Tape;
use crate::transducer::{decode_pass, encode_pass, PassOptions, Policy, TreeNode};
use crate::{Error, Result};

/// Output characters allowed per source character.
pub const OUTPUT_CAP_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranslationResult {
    pub source: String,
    /// Generated text without the end token.
    pub output: String,
    pub output_ids: Vec<usize>,
    pub encoder_tree: TreeNode,
    pub decoder_tree: TreeNode,
    /// Character spans of the encoder constituents, in the order they
    /// index attention rows.
    pub encoder_spans: Vec<(usize, usize)>,
    /// Character spans of the decoder constituents, one per attention
    /// column, clipped to the output text.
    pub decoder_spans: Vec<(usize, usize)>,
    /// `attention[i][j]`: weight of encoder node `i` for decoder node `j`.
    pub attention: Vec<Vec<f64>>,
    pub encoder_actions: Vec<Action>,
    pub decoder_actions: Vec<Action>,
    /// The output cap was reached before the end token.
    pub truncated: bool,
}

/// Argmax trees on both sides; the decoder emits its most likely character
/// at every GEN until it produces the end token or reaches the cap.
pub fn translate_greedy(
    model: &ModelParameters,
    vocabs: &Vocabularies,
    source: &str,
    limits: Limits,
) -> Result<TranslationResult> {
    let src = vocabs.source.encode(source).ids;
    if src.is_empty() {
        return Err(Error::EmptySentence);
    }
    let opts = PassOptions {
        limits,
        lm_backprop_into_stack: false,
    };
    let mut tape = Tape::new(model.params());
    let (enc, table) = encode_pass(&mut tape, model, &src, Policy::Argmax, &opts)?;
    let cap = OUTPUT_CAP_FACTOR * src.len();
    let dec = decode_pass(&mut tape, model, &table, None, cap, Policy::Argmax, &opts)?;

    let end = model.config().end_token();
    let output_ids: Vec<usize> = dec.tokens.iter().copied().filter(|&t| t != end).collect();
    let n_out = output_ids.len();
    let mut decoder_spans = vec![(0, 0); dec.attention.cols()];
    for c in &dec.constituents {
        if let Some(j) = c.attention_event {
            decoder_spans[j] = (c.span.0.min(n_out), c.span.1.min(n_out));
        }
    }
    let attention = (0..dec.attention.rows())
        .map(|i| (0..dec.attention.cols()).map(|j| dec.attention.get(i, j)).collect())
        .collect();
    Ok(TranslationResult {
        source: source.to_string(),
        output: vocabs.target.decode(&output_ids),
        output_ids,
        encoder_spans: table.nodes.iter().map(|c| c.span).collect(),
        decoder_spans,
        attention,
        encoder_actions: enc.trajectory.actions(),
        decoder_actions: dec.trajectory.actions(),
        encoder_tree: enc.trajectory.tree,
        decoder_tree: dec.trajectory.tree,
        truncated: dec.truncated,
    })
}

/// Collapses `w1 w2 w1 w2` to `w1 w2`, leftmost first, until none remain.
pub fn remove_repeated_bigrams(text: &str) -> String {
    let mut w: Vec<&str> = text.split_whitespace().collect();
    while let Some(i) = (0..w.len().saturating_sub(3)).find(|&i| w[i] == w[i + 2] && w[i + 1] == w[i + 3]) {
        w.drain(i + 2..i + 4);
    }
    w.join(" ")
}

fn ngram_counts<'w, 'a>(words: &'w [&'a str], n: usize) -> HashMap<&'w [&'a str], usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 without smoothing over whitespace tokens. Orders beyond
/// the longest hypothesis are left out of the geometric mean.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> f64 {
    assert!(!hypotheses.is_empty(), "BLEU needs at least one hypothesis");
    assert_eq!(hypotheses.len(), references.len(), "hypothesis/reference count mismatch");
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let order = totals.iter().take_while(|&&t| t > 0).count();
    if order == 0 || matches[..order].contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..order)
        .map(|n| (matches[n] as f64 / totals[n] as f64).ln())
        .sum::<f64>()
        / order as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * log_p.exp()
}
