//! Model hyperparameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Architecture and capacity settings. The defaults are the full-size
/// model; experiments shrink `hidden`/`layers`/`ffn_dim` via config files.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of every token state.
    pub hidden: usize,
    /// Encoder blocks.
    pub layers: usize,
    /// Attention heads; `hidden = heads * head_dim`.
    pub heads: usize,
    pub head_dim: usize,
    /// Inner width of the feed-forward sublayer.
    pub ffn_dim: usize,
    /// Dropout rate for attention weights, sublayer outputs, and head inputs.
    pub dropout: f64,
    /// Appearance feature dimension.
    pub d_z: usize,
    /// Label vocabulary size (pseudo-labels and masked prediction).
    pub d_label: usize,
    /// Instance identity slots available per span.
    pub instance_slots: usize,
    /// Shot slots available per span.
    pub shot_slots: usize,
    /// Hard limit on tokens per span, `[CLS]` included.
    pub token_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 768,
            layers: 3,
            heads: 12,
            head_dim: 64,
            ffn_dim: 3072,
            dropout: 0.1,
            d_z: 64,
            d_label: 12,
            instance_slots: 64,
            shot_slots: 32,
            token_cap: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0
            || self.layers == 0
            || self.heads == 0
            || self.head_dim == 0
            || self.ffn_dim == 0
            || self.d_z == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.heads * self.head_dim != self.hidden {
            return Err(Error::Config(format!(
                "hidden ({}) must equal heads ({}) * head_dim ({})",
                self.hidden, self.heads, self.head_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        if self.d_label < 2 {
            return Err(Error::Config("d_label must be at least 2".into()));
        }
        if self.instance_slots == 0 || self.shot_slots == 0 {
            return Err(Error::Config("slot tables must be non-empty".into()));
        }
        if self.token_cap < 2 {
            return Err(Error::Config(format!(
                "token_cap {} leaves no room for detections",
                self.token_cap
            )));
        }
        Ok(())
    }

    /// Canonical key=value form (sorted keys), as stored in checkpoints.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        kv.insert("hidden".into(), self.hidden.to_string());
        kv.insert("layers".into(), self.layers.to_string());
        kv.insert("heads".into(), self.heads.to_string());
        kv.insert("head_dim".into(), self.head_dim.to_string());
        kv.insert("ffn_dim".into(), self.ffn_dim.to_string());
        kv.insert("dropout".into(), format!("{:?}", self.dropout));
        kv.insert("d_z".into(), self.d_z.to_string());
        kv.insert("d_label".into(), self.d_label.to_string());
        kv.insert("instance_slots".into(), self.instance_slots.to_string());
        kv.insert("shot_slots".into(), self.shot_slots.to_string());
        kv.insert("token_cap".into(), self.token_cap.to_string());
        kv
    }

    /// Parse the canonical form. Unknown keys are rejected.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in kv {
            let bad = || Error::Config(format!("bad value {v:?} for model key {k:?}"));
            match k.as_str() {
                "hidden" => cfg.hidden = v.parse().map_err(|_| bad())?,
                "layers" => cfg.layers = v.parse().map_err(|_| bad())?,
                "heads" => cfg.heads = v.parse().map_err(|_| bad())?,
                "head_dim" => cfg.head_dim = v.parse().map_err(|_| bad())?,
                "ffn_dim" => cfg.ffn_dim = v.parse().map_err(|_| bad())?,
                "dropout" => cfg.dropout = v.parse().map_err(|_| bad())?,
                "d_z" => cfg.d_z = v.parse().map_err(|_| bad())?,
                "d_label" => cfg.d_label = v.parse().map_err(|_| bad())?,
                "instance_slots" => cfg.instance_slots = v.parse().map_err(|_| bad())?,
                "shot_slots" => cfg.shot_slots = v.parse().map_err(|_| bad())?,
                "token_cap" => cfg.token_cap = v.parse().map_err(|_| bad())?,
                other => {
                    return Err(Error::Config(format!("unknown model key {other:?}")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
