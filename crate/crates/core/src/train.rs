//! Mini-batch training with sampled softmax, gradient clipping and Adam.
//!
//! Sessions are bucketed by length into batches. A batch is split into
//! fixed-size chunks that are differentiated in parallel, each on its own
//! tape; chunk gradients are summed in chunk order so the result does not
//! depend on the thread count.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{CandidateRow, Tape};
use crate::config::TrainingConfig;
use crate::data::history::UserHistory;
use crate::error::{Error, Result};
use crate::init::rng_for;
use crate::loss::{candidate_row, sampled_softmax_loss};
use crate::model::{Features, Model};
use crate::optim::{clip_global_norm, AdamState};
use crate::sampler::LogUniformSampler;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

/// Sessions per tape inside a batch.
const CHUNK: usize = 8;
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

/// A featurized training session.
#[derive(Clone, Debug)]
struct Prepared {
    features: Features,
    items: Vec<usize>,
}

impl Prepared {
    /// `(output row, positives)` for every position that has a target.
    fn targets(&self, n_targets: usize, last_only: bool) -> Vec<(usize, Vec<usize>)> {
        let m = self.items.len();
        let first = if last_only { m - 2 } else { 0 };
        (first..m - 1)
            .map(|k| {
                let mut seen = HashSet::new();
                let pos = self.items[k + 1..(k + 1 + n_targets).min(m)]
                    .iter()
                    .copied()
                    .filter(|i| seen.insert(*i))
                    .collect();
                (k, pos)
            })
            .collect()
    }
}

pub struct Trainer {
    model: Model,
    adam: AdamState,
    sampler: LogUniformSampler,
    samples: Vec<Prepared>,
    epoch: usize,
}

impl Trainer {
    /// Builds the vocabulary from `histories` and a fresh model.
    pub fn from_histories(config: TrainingConfig, histories: &[UserHistory]) -> Result<Trainer> {
        let vocab = Vocab::build(histories, &config.profile_features);
        let model = Model::new(config, vocab)?;
        let adam = AdamState::new(model.config().adam(), model.params());
        Trainer::resume(model, adam, 0, histories)
    }

    /// Continues from existing parameters and optimizer state.
    pub fn resume(model: Model, adam: AdamState, epoch: usize, histories: &[UserHistory]) -> Result<Trainer> {
        let vocab = model.vocab();
        let samples: Vec<Prepared> = histories
            .iter()
            .filter(|h| h.short_term.len() >= 2)
            .map(|h| Prepared {
                features: model.featurize(&h.user_id, &h.profile, &h.short_term, &h.long_term),
                items: h.short_term.iter().map(|e| vocab.item_index(&e.item_id)).collect(),
            })
            .collect();
        if samples.is_empty() {
            return Err(Error::Data("no training session has two or more items".into()));
        }
        let sampler = LogUniformSampler::new(vocab.frequency_rank())?;
        let n = model.config().negatives;
        if sampler.len() < n + 1 {
            return Err(Error::Config(format!(
                "{n} negatives need more than {} items",
                sampler.len()
            )));
        }
        Ok(Trainer {
            model,
            adam,
            sampler,
            samples,
            epoch,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn into_parts(self) -> (Model, AdamState) {
        (self.model, self.adam)
    }

    /// Batches of sample indices: shuffled, grouped by session length, cut
    /// into `batch_size` pieces, then the batch order is shuffled.
    fn batches(&self, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(rng);
        order.sort_by_key(|&i| self.samples[i].items.len());
        let mut batches: Vec<Vec<usize>> = order
            .chunks(self.model.config().batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        batches.shuffle(rng);
        batches
    }

    /// One pass over the training sessions.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let started = Instant::now();
        let config = self.model.config().clone();
        let epoch = self.epoch + 1;
        let batches = self.batches(&mut rng_for(config.seed, SHUFFLE_STREAM + epoch as u64));
        let (mut loss_sum, mut rows_total) = (0.0, 0usize);
        for (step, batch) in batches.iter().enumerate() {
            let (loss, rows, mut grads) = self.batch_gradients(batch, epoch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, loss });
            }
            clip_global_norm(grads.values_mut(), config.clip_norm);
            self.adam.step(self.model.params_mut(), &grads)?;
            loss_sum += loss * rows as f64;
            rows_total += rows;
        }
        self.epoch = epoch;
        Ok(EpochMetrics {
            epoch,
            loss: loss_sum / rows_total as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }

    pub fn run(&mut self, epochs: usize, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let m = self.run_epoch()?;
            on_epoch(&m);
            out.push(m);
        }
        Ok(out)
    }

    /// Mean loss over the batch's target rows, the row count and the
    /// gradient of that mean per parameter slot.
    fn batch_gradients(&self, batch: &[usize], epoch: usize) -> Result<(f64, usize, BTreeMap<usize, Tensor>)> {
        let config = self.model.config();
        let row_counts: Vec<usize> = batch
            .iter()
            .map(|&i| self.samples[i].targets(config.n_targets, config.train_last_only).len())
            .collect();
        let total_rows: usize = row_counts.iter().sum();
        let parts = batch
            .par_chunks(CHUNK)
            .map(|chunk| self.chunk_gradients(chunk, epoch, total_rows))
            .collect::<Vec<_>>();
        let mut loss = 0.0;
        let mut grads: BTreeMap<usize, Tensor> = BTreeMap::new();
        for part in parts {
            let (l, g) = part?;
            loss += l;
            for (slot, t) in g {
                match grads.get_mut(&slot) {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        grads.insert(slot, t);
                    }
                }
            }
        }
        Ok((loss, total_rows, grads))
    }

    /// Loss contribution (already divided by the batch's row count) and
    /// gradients for one chunk of sessions.
    fn chunk_gradients(&self, chunk: &[usize], epoch: usize, total_rows: usize) -> Result<(f64, BTreeMap<usize, Tensor>)> {
        let config = self.model.config();
        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let mut outputs = Vec::with_capacity(chunk.len());
        let mut rows: Vec<CandidateRow> = Vec::new();
        let mut offset = 0;
        for &i in chunk {
            let sample = &self.samples[i];
            let mut rng = rng_for(config.seed, ((epoch as u64) << 32) | i as u64);
            let trace = self.model.forward(&tape, &bound, &sample.features, Some(&mut rng))?;
            let targets = sample.targets(config.n_targets, config.train_last_only);
            let exclude: HashSet<usize> = targets.iter().flat_map(|(_, p)| p.iter().copied()).collect();
            let drawn = self.sampler.sample_distinct(config.negatives, &exclude, &mut rng)?;
            let correction = config.logq_correction.then_some((&self.sampler, drawn.draws));
            for (k, positives) in targets {
                rows.push(candidate_row(offset + k, &positives, &drawn.items, correction)?);
            }
            offset += sample.items.len();
            outputs.push(trace.output);
        }
        let all = if outputs.len() == 1 { outputs[0] } else { tape.concat_rows(&outputs)? };
        let n_rows = rows.len();
        let mean = sampled_softmax_loss(&tape, all, bound.var(self.model.output_slot()), rows)?;
        let weighted = tape.scale(mean, n_rows as f64 / total_rows as f64)?;
        let loss = tape.value(weighted).item();
        Ok((loss, tape.backward(weighted)?.into_params()))
    }
}

pub struct Trained {
    pub model: Model,
    pub adam: AdamState,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains `config.epochs` epochs from scratch.
pub fn train(
    histories: &[UserHistory],
    config: TrainingConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Trained> {
    let epochs = config.epochs;
    let mut trainer = Trainer::from_histories(config, histories)?;
    let metrics = trainer.run(epochs, on_epoch)?;
    let (model, adam) = trainer.into_parts();
    Ok(Trained { model, adam, metrics })
}
