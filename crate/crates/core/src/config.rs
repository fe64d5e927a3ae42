//! Model and training hyperparameters, loadable from a flat TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::event::ItemFeature;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Gated,
    Add,
    Concat,
    Multiply,
    ShortOnly,
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(Fusion::Gated),
            "add" => Ok(Fusion::Add),
            "concat" => Ok(Fusion::Concat),
            "multiply" => Ok(Fusion::Multiply),
            "short_only" => Ok(Fusion::ShortOnly),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Named model variants. Each one is a preset over the feature flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Multi-head attention only: no user attention, no long-term branch.
    Sdmma,
    /// Adds user attention over the attention outputs.
    Psdmma,
    /// Adds the long-term branch with gated fusion.
    Psdmmal,
    /// PSDMMAL trained on the following 5 items.
    PsdmmalN,
    /// PSDMMAL with item ids as the only item feature.
    PsdmmalNos,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sdmma" => Ok(Variant::Sdmma),
            "psdmma" => Ok(Variant::Psdmma),
            "psdmmal" => Ok(Variant::Psdmmal),
            "psdmmal-n" => Ok(Variant::PsdmmalN),
            "psdmmal-nos" => Ok(Variant::PsdmmalNos),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub d: usize,
    pub heads: usize,
    pub lstm_layers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub n_targets: usize,
    pub epochs: usize,
    pub seed: u64,
    pub fusion: Fusion,
    pub user_attention: bool,
    pub long_term: bool,
    pub side_info: bool,
    pub train_last_only: bool,
    pub scaled_attention: bool,
    pub tie_embeddings: bool,
    pub logq_correction: bool,
    pub profile_features: Vec<String>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            d: 64,
            heads: 4,
            lstm_layers: 2,
            dropout: 0.2,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            batch_size: 256,
            negatives: 20,
            n_targets: 1,
            epochs: 10,
            seed: 0,
            fusion: Fusion::Gated,
            user_attention: true,
            long_term: true,
            side_info: true,
            train_last_only: false,
            scaled_attention: false,
            tie_embeddings: false,
            logq_correction: true,
            profile_features: vec!["user_id".into(), "age_band".into(), "gender".into()],
        }
    }
}

impl TrainingConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let mut c = TrainingConfig::default();
        c.apply_variant(variant);
        c
    }

    pub fn apply_variant(&mut self, variant: Variant) {
        self.user_attention = true;
        self.long_term = true;
        self.side_info = true;
        self.n_targets = 1;
        self.fusion = Fusion::Gated;
        match variant {
            Variant::Sdmma => {
                self.user_attention = false;
                self.long_term = false;
                self.fusion = Fusion::ShortOnly;
            }
            Variant::Psdmma => {
                self.long_term = false;
                self.fusion = Fusion::ShortOnly;
            }
            Variant::Psdmmal => {}
            Variant::PsdmmalN => self.n_targets = 5,
            Variant::PsdmmalNos => self.side_info = false,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: TrainingConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fusion actually used: without the long-term branch only the
    /// short-term vector is available.
    pub fn effective_fusion(&self) -> Fusion {
        if self.long_term {
            self.fusion
        } else {
            Fusion::ShortOnly
        }
    }

    pub fn item_features(&self) -> &'static [ItemFeature] {
        if self.side_info {
            &ItemFeature::ALL
        } else {
            &ItemFeature::ALL[..1]
        }
    }

    /// Widths of the item feature segments, in `item_features()` order.
    pub fn item_widths(&self) -> Vec<usize> {
        split_widths(self.d, self.item_features().len(), true)
    }

    /// Widths of the profile feature segments, in `profile_features` order.
    /// `user_id`, when present, takes the half-width share.
    pub fn profile_widths(&self) -> Vec<usize> {
        let n = self.profile_features.len();
        match self.profile_features.iter().position(|p| p == "user_id") {
            Some(pos) => {
                let mut w = split_widths(self.d, n, true);
                w.swap(0, pos);
                w
            }
            None => split_widths(self.d, n, false),
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        if self.lstm_layers == 0 || self.batch_size == 0 || self.n_targets == 0 || self.negatives == 0 {
            return fail("lstm_layers, batch_size, n_targets and negatives must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.lr >= 0.0 && self.clip_norm > 0.0 && self.adam_eps > 0.0) {
            return fail("need lr >= 0, clip_norm > 0 and adam_eps > 0".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("beta1 and beta2 must be in [0, 1)".into());
        }
        if self.profile_features.is_empty() {
            return fail("at least one profile feature is required".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(p) = self.profile_features.iter().find(|p| !seen.insert(p.as_str())) {
            return fail(format!("duplicate profile feature {p:?}"));
        }
        if self.item_widths().contains(&0) || self.profile_widths().contains(&0) {
            return fail(format!("d = {} is too small for the feature split", self.d));
        }
        if self.tie_embeddings && self.side_info {
            return fail("tie_embeddings requires side_info = false".into());
        }
        Ok(())
    }
}

/// `n` widths summing to `d`. With `lead_half`, the first takes `d/2` plus
/// whatever the equal split of the other half leaves over; otherwise all
/// split equally with the remainder on the first.
pub fn split_widths(d: usize, n: usize, lead_half: bool) -> Vec<usize> {
    match n {
        0 => Vec::new(),
        1 => vec![d],
        _ if lead_half => {
            let each = (d / 2) / (n - 1);
            let mut w = vec![each; n];
            w[0] = d - each * (n - 1);
            w
        }
        _ => {
            let each = d / n;
            let mut w = vec![each; n];
            w[0] = d - each * (n - 1);
            w
        }
    }
}
