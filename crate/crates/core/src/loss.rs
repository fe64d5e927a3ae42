//! Sampled-softmax objective over item output vectors.

use std::collections::HashSet;

use crate::autograd::{CandidateRow, Tape, Var};
use crate::error::{Error, Result};
use crate::sampler::LogUniformSampler;

/// Candidate set for output row `row`: `positives` first, then
/// `negatives`. With `correction`, every logit is lowered by the log of the
/// candidate's expected count under the sampler.
pub fn candidate_row(
    row: usize,
    positives: &[usize],
    negatives: &[usize],
    correction: Option<(&LogUniformSampler, u64)>,
) -> Result<CandidateRow> {
    if positives.is_empty() {
        return Err(Error::InvalidArgument("sampled softmax needs a positive".into()));
    }
    let pos: HashSet<usize> = positives.iter().copied().collect();
    if pos.len() != positives.len() {
        return Err(Error::InvalidArgument("duplicate positives".into()));
    }
    if let Some(bad) = negatives.iter().find(|n| pos.contains(n)) {
        return Err(Error::InvalidArgument(format!("item {bad} is both positive and negative")));
    }
    let candidates: Vec<usize> = positives.iter().chain(negatives).copied().collect();
    let offsets = match correction {
        Some((sampler, draws)) => candidates.iter().map(|&c| sampler.log_q(c, draws)).collect(),
        None => vec![0.0; candidates.len()],
    };
    Ok(CandidateRow {
        row,
        candidates,
        offsets,
        positives: positives.len(),
    })
}

/// Mean over `rows` of the per-row cross-entropy, each row averaging over
/// its positives. `outputs` is `[n × d]`, `items` is `[|I| × d]`.
pub fn sampled_softmax_loss(tape: &Tape, outputs: Var, items: Var, rows: Vec<CandidateRow>) -> Result<Var> {
    tape.sampled_softmax_xent(outputs, items, rows)
}
