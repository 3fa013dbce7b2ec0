use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ace::GumbelConfig;
use crate::cro::CroConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

const GN_GROUPS: usize = 4;

/// Mechanism switches. All off gives plain federated averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub cro: bool,
    pub fau: bool,
    pub dmr: bool,
    pub ace: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::all(true)
    }
}

impl Toggles {
    pub fn all(on: bool) -> Self {
        Toggles { cro: on, fau: on, dmr: on, ace: on }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AceSettings {
    pub tau_start: f64,
    pub tau_end: f64,
    pub dim: usize,
}

impl Default for AceSettings {
    fn default() -> Self {
        let g = GumbelConfig::default();
        AceSettings { tau_start: g.tau_start, tau_end: g.tau_end, dim: 8 }
    }
}

impl AceSettings {
    pub fn gumbel(&self) -> GumbelConfig {
        GumbelConfig { tau_start: self.tau_start, tau_end: self.tau_end }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub stage_channels: Vec<usize>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings { stage_channels: vec![8, 16] }
    }
}

/// Everything that determines a run. Serialises to the JSON config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    /// Clients sampled per round; `null` means all of them.
    pub clients_per_round: Option<usize>,
    pub fau_period: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
    pub toggles: Toggles,
    pub cro: CroConfig,
    pub ace: AceSettings,
    pub data: DataConfig,
    pub model: ModelSettings,
    /// Record a 2-D projection of the global parameters every round.
    pub trajectory: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            clients: 5,
            rounds: 40,
            local_epochs: 2,
            clients_per_round: None,
            fau_period: 5,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
            workers: 1,
            toggles: Toggles::default(),
            cro: CroConfig::default(),
            ace: AceSettings::default(),
            data: DataConfig::default(),
            model: ModelSettings::default(),
            trajectory: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let cfg = from_value(value, "")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn selected_per_round(&self) -> usize {
        self.clients_per_round.unwrap_or(self.clients)
    }

    /// Learning rate for training round `l`: halved from the midpoint on.
    pub fn learning_rate_at(&self, l: usize) -> f64 {
        if self.rounds > 0 && 2 * l >= self.rounds {
            self.learning_rate * 0.5
        } else {
            self.learning_rate
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_channels: 1,
            image_size: self.data.image_size,
            stage_channels: self.model.stage_channels.clone(),
            num_classes: self.data.classes,
            ace_enabled: self.toggles.ace,
            ace_dim: self.ace.dim,
            num_clients: self.clients,
            gn_groups: GN_GROUPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("clients", "must be ≥ 1"));
        }
        let k = self.selected_per_round();
        if k == 0 || k > self.clients {
            return Err(Error::config("clients_per_round", format!("must be in 1..={}", self.clients)));
        }
        if self.fau_period == 0 {
            return Err(Error::config("fau_period", "must be ≥ 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", "must be a positive number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be ≥ 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be ≥ 1"));
        }
        if !(self.cro.beta >= 0.0) || !self.cro.beta.is_finite() {
            return Err(Error::config("cro.beta", "must be finite and ≥ 0"));
        }
        if !(self.ace.tau_end > 0.0) || !(self.ace.tau_start >= self.ace.tau_end) || !self.ace.tau_start.is_finite() {
            return Err(Error::config("ace.tau_start", "need tau_start ≥ tau_end > 0"));
        }
        if self.ace.dim == 0 {
            return Err(Error::config("ace.dim", "must be ≥ 1"));
        }
        let stages = &self.model.stage_channels;
        if stages.is_empty() || stages.iter().any(|&c| c == 0 || c % GN_GROUPS != 0) {
            return Err(Error::config("model.stage_channels", format!("need ≥ 1 stage, each a positive multiple of {GN_GROUPS}")));
        }
        if !self.data.image_size.is_multiple_of(1 << (stages.len() - 1)) {
            return Err(Error::config("data.image_size", "must be divisible by 2^(stages − 1)"));
        }
        self.data.validate()
    }

    /// Applies `key=value`, where `key` is a dotted path into the JSON form
    /// and `value` is parsed as JSON, falling back to a plain string.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::config(key, "unknown key"))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let cfg = from_value(root, key)?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    /// Parses a `key=value` override string.
    pub fn apply_override_str(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
        self.apply_override(key.trim(), value.trim())
    }
}

fn from_value(value: Value, key: &str) -> Result<RunConfig> {
    serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        // serde names the offending field for unknown or mistyped keys.
        let named = msg
            .strip_prefix("unknown field `")
            .and_then(|rest| rest.split('`').next())
            .map(str::to_string);
        Error::config(named.unwrap_or_else(|| if key.is_empty() { "<root>".into() } else { key.into() }), msg)
    })
}
