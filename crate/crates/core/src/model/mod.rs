//! The full user prediction network: embeddings, short-term encoder,
//! long-term branch and fusion, producing one behavior vector per prefix
//! position.

pub mod encoder;
pub mod fusion;

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::{Fusion, TrainingConfig};
use crate::data::event::InteractionEvent;
use crate::data::history::LongTerm;
use crate::error::{Error, Result};
use crate::init::{dropout_mask, orthogonal_with, rng_for};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

use encoder::{attention_block, lstm_stack, user_attention, AttentionWeights, LstmWeights};
use fusion::{encode_long_term, fuse, pool_subset, FusionWeights, GateWeights};

/// Stream used for parameter initialization.
const INIT_STREAM: u64 = 0x494e4954;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Orthogonal,
    Zeros,
    Ones,
}

/// Name, shape and initializer of every parameter, in slot order.
fn layout(config: &TrainingConfig, vocab: &Vocab) -> Vec<(String, Vec<usize>, Init)> {
    use Init::*;
    let d = config.d;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init| out.push((name, shape, init));
    let features = config.item_features();
    let widths = config.item_widths();
    for (f, w) in features.iter().zip(&widths) {
        push(format!("emb.item.{}", f.name()), vec![vocab.item(*f).size(), *w], Orthogonal);
    }
    for (p, w) in config.profile_features.iter().zip(config.profile_widths()) {
        let size = vocab.profile.get(p).map_or(1, |v| v.size());
        push(format!("emb.profile.{p}"), vec![size, w], Orthogonal);
    }
    for l in 0..config.lstm_layers {
        push(format!("lstm.{l}.w_input"), vec![4 * d, d], Orthogonal);
        push(format!("lstm.{l}.w_recurrent"), vec![4 * d, d], Orthogonal);
        push(format!("lstm.{l}.bias"), vec![4 * d], Zeros);
    }
    for name in ["w_query", "w_key", "w_value", "w_out"] {
        push(format!("attn.{name}"), vec![d, d], Orthogonal);
    }
    push("attn.ln_gain".into(), vec![d], Ones);
    push("attn.ln_bias".into(), vec![d], Zeros);
    if config.long_term {
        for (f, w) in features.iter().zip(&widths) {
            push(format!("longterm.proj.{}", f.name()), vec![d, *w], Orthogonal);
        }
        push("longterm.w_dense".into(), vec![d, features.len() * d], Orthogonal);
        push("longterm.bias".into(), vec![d], Zeros);
        match config.fusion {
            Fusion::Gated => {
                for name in ["w_profile", "w_short", "w_long"] {
                    push(format!("gate.{name}"), vec![d, d], Orthogonal);
                }
                push("gate.bias".into(), vec![d], Zeros);
            }
            Fusion::Concat => {
                push("fuse.w_concat".into(), vec![d, 2 * d], Orthogonal);
                push("fuse.bias".into(), vec![d], Zeros);
            }
            Fusion::Add | Fusion::Multiply | Fusion::ShortOnly => {}
        }
    }
    if !config.tie_embeddings {
        push("item_output".into(), vec![vocab.num_items(), d], Orthogonal);
    }
    out
}

#[derive(Clone, Debug)]
struct Slots {
    item_emb: Vec<usize>,
    profile_emb: Vec<usize>,
    lstm: Vec<[usize; 3]>,
    attn: [usize; 4],
    ln: [usize; 2],
    long_proj: Vec<usize>,
    long_dense: Option<[usize; 2]>,
    gate: Option<[usize; 4]>,
    concat: Option<[usize; 2]>,
    output: usize,
}

impl Slots {
    fn resolve(config: &TrainingConfig, params: &ParamStore) -> Result<Slots> {
        let get = |name: &str| {
            params
                .slot(name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
        };
        let features = config.item_features();
        let item_emb = features
            .iter()
            .map(|f| get(&format!("emb.item.{}", f.name())))
            .collect::<Result<Vec<_>>>()?;
        let output = if config.tie_embeddings {
            item_emb[0]
        } else {
            get("item_output")?
        };
        Ok(Slots {
            profile_emb: config
                .profile_features
                .iter()
                .map(|p| get(&format!("emb.profile.{p}")))
                .collect::<Result<_>>()?,
            lstm: (0..config.lstm_layers)
                .map(|l| {
                    Ok([
                        get(&format!("lstm.{l}.w_input"))?,
                        get(&format!("lstm.{l}.w_recurrent"))?,
                        get(&format!("lstm.{l}.bias"))?,
                    ])
                })
                .collect::<Result<_>>()?,
            attn: [
                get("attn.w_query")?,
                get("attn.w_key")?,
                get("attn.w_value")?,
                get("attn.w_out")?,
            ],
            ln: [get("attn.ln_gain")?, get("attn.ln_bias")?],
            long_proj: if config.long_term {
                features
                    .iter()
                    .map(|f| get(&format!("longterm.proj.{}", f.name())))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            },
            long_dense: match config.long_term {
                true => Some([get("longterm.w_dense")?, get("longterm.bias")?]),
                false => None,
            },
            gate: match (config.long_term, config.fusion) {
                (true, Fusion::Gated) => Some([
                    get("gate.w_profile")?,
                    get("gate.w_short")?,
                    get("gate.w_long")?,
                    get("gate.bias")?,
                ]),
                _ => None,
            },
            concat: match (config.long_term, config.fusion) {
                (true, Fusion::Concat) => Some([get("fuse.w_concat")?, get("fuse.bias")?]),
                _ => None,
            },
            item_emb,
            output,
        })
    }
}

/// Vocabulary indices for one history prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Features {
    /// `items[f][k]`: index of feature `f` at position `k`.
    pub items: Vec<Vec<usize>>,
    pub profile: Vec<usize>,
    /// `long_term[f]`: indices of the long-term subset of feature `f`.
    pub long_term: Vec<Vec<usize>>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.items[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub embedded: Var,
    pub e_u: Var,
    pub lstm: Var,
    pub attention: Var,
    pub head_weights: Vec<Var>,
    pub user_weights: Option<Var>,
    pub short_term: Var,
    pub long_term: Option<Var>,
    pub gate: Option<Var>,
    /// Behavior vectors, one row per prefix position.
    pub output: Var,
}

/// Parameters bound to a tape as leaves.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, slot: usize) -> Var {
        self.0[slot]
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: TrainingConfig,
    vocab: Vocab,
    params: ParamStore,
    slots: Slots,
}

impl Model {
    /// Freshly initialized model: orthogonal matrices, zero biases, unit
    /// layer-norm gain.
    pub fn new(config: TrainingConfig, vocab: Vocab) -> Result<Model> {
        config.validate()?;
        vocab.check(&config.profile_features)?;
        let mut rng = rng_for(config.seed, INIT_STREAM);
        let mut params = ParamStore::default();
        for (name, shape, init) in layout(&config, &vocab) {
            let value = match init {
                Init::Orthogonal => orthogonal_with(shape[0], shape[1], &mut rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, 1.0),
            };
            params.insert(name, value);
        }
        Self::from_parts(config, vocab, params)
    }

    /// Wraps existing parameters after checking names and shapes against
    /// the configuration.
    pub fn from_parts(config: TrainingConfig, vocab: Vocab, params: ParamStore) -> Result<Model> {
        config.validate()?;
        vocab.check(&config.profile_features)?;
        let want = layout(&config, &vocab);
        if want.len() != params.len() {
            return Err(Error::Data(format!(
                "expected {} parameters, found {}",
                want.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (have_name, have)) in want.iter().zip(params.iter()) {
            if name != have_name || shape.as_slice() != have.shape() {
                return Err(Error::Data(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {have_name} {:?}",
                    have.shape()
                )));
            }
        }
        let slots = Slots::resolve(&config, &params)?;
        Ok(Model {
            config,
            vocab,
            params,
            slots,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (TrainingConfig, Vocab, ParamStore) {
        (self.config, self.vocab, self.params)
    }

    /// Slot of the output item matrix (rows are item vectors).
    pub fn output_slot(&self) -> usize {
        self.slots.output
    }

    pub fn output_table(&self) -> &Tensor {
        self.params.get_slot(self.slots.output).expect("output slot")
    }

    /// Output vector of item index `i`.
    pub fn item_vector(&self, i: usize) -> Result<&[f64]> {
        let v = self.output_table();
        if i >= v.rows() {
            return Err(Error::InvalidArgument(format!(
                "item index {i} out of range for {} items",
                v.rows()
            )));
        }
        Ok(v.row(i))
    }

    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound(
            (0..self.params.len())
                .map(|slot| tape.param(slot, self.params.shared(slot)))
                .collect(),
        )
    }

    pub fn featurize(
        &self,
        user_id: &str,
        profile: &BTreeMap<String, String>,
        prefix: &[InteractionEvent],
        long_term: &LongTerm,
    ) -> Features {
        let features = self.config.item_features();
        Features {
            items: features
                .iter()
                .map(|&f| prefix.iter().map(|e| self.vocab.event_index(e, f)).collect())
                .collect(),
            profile: self
                .config
                .profile_features
                .iter()
                .map(|p| self.vocab.profile_index(user_id, profile, p))
                .collect(),
            long_term: if self.config.long_term {
                features
                    .iter()
                    .map(|&f| {
                        let v = self.vocab.item(f);
                        long_term.subset(f).iter().map(|x| v.lookup(Some(x))).collect()
                    })
                    .collect()
            } else {
                Vec::new()
            },
        }
    }

    /// Concatenated item embeddings, `[t × d]`.
    pub fn embed_items(&self, tape: &Tape, bound: &Bound, items: &[Vec<usize>]) -> Result<Var> {
        let parts = self
            .slots
            .item_emb
            .iter()
            .zip(items)
            .map(|(&slot, idx)| tape.select_rows(bound.var(slot), idx))
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_cols(&parts)
        }
    }

    /// Concatenated profile embeddings, `[1 × d]`.
    pub fn embed_profile(&self, tape: &Tape, bound: &Bound, profile: &[usize]) -> Result<Var> {
        let parts = self
            .slots
            .profile_emb
            .iter()
            .zip(profile)
            .map(|(&slot, &i)| tape.select_rows(bound.var(slot), &[i]))
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_cols(&parts)
        }
    }

    /// Runs the network over a prefix. `dropout_rng` switches on training
    /// mode; without it the pass is deterministic.
    pub fn forward<R: Rng>(
        &self,
        tape: &Tape,
        bound: &Bound,
        feats: &Features,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Trace> {
        if feats.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty session".into()));
        }
        let c = &self.config;
        let embedded = self.embed_items(tape, bound, &feats.items)?;
        let e_u = self.embed_profile(tape, bound, &feats.profile)?;

        let layers: Vec<LstmWeights> = self
            .slots
            .lstm
            .iter()
            .map(|s| LstmWeights {
                w_input: bound.var(s[0]),
                w_recurrent: bound.var(s[1]),
                bias: bound.var(s[2]),
            })
            .collect();
        let p = c.dropout;
        let lstm = lstm_stack(tape, embedded, &layers, |tape, x| match dropout_rng.as_mut() {
            Some(rng) if p > 0.0 => tape.mul_const(x, dropout_mask(&tape.shape(x), p, &mut **rng)),
            _ => Ok(x),
        })?;

        let [wq, wk, wv, wo] = self.slots.attn.map(|s| bound.var(s));
        let weights = AttentionWeights {
            w_query: wq,
            w_key: wk,
            w_value: wv,
            w_out: wo,
        };
        let (attention, head_weights) = attention_block(
            tape,
            lstm,
            weights,
            bound.var(self.slots.ln[0]),
            bound.var(self.slots.ln[1]),
            c.heads,
            c.scaled_attention,
        )?;

        let (short_term, user_weights) = if c.user_attention {
            let (s, a) = user_attention(tape, attention, e_u)?;
            (s, Some(a))
        } else {
            (attention, None)
        };

        let long_term = match self.slots.long_dense {
            Some([w_dense, bias]) => {
                let pooled = self
                    .slots
                    .long_proj
                    .iter()
                    .zip(&self.slots.item_emb)
                    .zip(&feats.long_term)
                    .map(|((&proj, &table), idx)| {
                        let g = if idx.is_empty() {
                            None
                        } else {
                            let rows = tape.select_rows(bound.var(table), idx)?;
                            Some(tape.matmul_t(rows, bound.var(proj))?)
                        };
                        pool_subset(tape, g, e_u)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(encode_long_term(tape, &pooled, bound.var(w_dense), bound.var(bias))?)
            }
            None => None,
        };

        let mode = c.effective_fusion();
        let (output, gate) = match long_term {
            Some(p) => {
                let w = match (self.slots.gate, self.slots.concat) {
                    (Some([w1, w2, w3, b]), _) => FusionWeights::Gated(GateWeights {
                        w_profile: bound.var(w1),
                        w_short: bound.var(w2),
                        w_long: bound.var(w3),
                        bias: bound.var(b),
                    }),
                    (_, Some([w, b])) => FusionWeights::Concat {
                        w: bound.var(w),
                        bias: bound.var(b),
                    },
                    _ => FusionWeights::None,
                };
                fuse(tape, mode, e_u, short_term, p, w)?
            }
            None => (short_term, None),
        };

        Ok(Trace {
            embedded,
            e_u,
            lstm,
            attention,
            head_weights,
            user_weights,
            short_term,
            long_term,
            gate,
            output,
        })
    }

    /// Behavior vector after the last prefix item, in inference mode.
    pub fn behavior_vector(&self, feats: &Features) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let trace = self.forward::<rand_chacha::ChaCha8Rng>(&tape, &bound, feats, None)?;
        let out = tape.value(trace.output);
        Ok(out.row(out.rows() - 1).to_vec())
    }
}
