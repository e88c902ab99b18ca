//! Flat key/value JSON run configuration.
//!
//! Every key is optional in the file; missing keys take the defaults below
//! and unknown keys are rejected. Command-line flags override file values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tlm_core::lora::{LoraConfig, LoraTarget};
use tlm_core::model::{ModelConfig, PretrainOptions, VOCAB_SIZE};
use tlm_core::optim::AdamParams;
use tlm_core::ttl::{Mode, TtlConfig, ENTROPY_BASELINE_TOKENS};

use crate::error::{Result, TlmError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,

    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    pub pretrain_window: usize,

    pub lora_rank: usize,
    pub lora_targets: Vec<LoraTarget>,
    /// Train every base weight instead of a LoRA adapter.
    pub full_parameter: bool,

    pub lambda: f64,
    pub p0: f64,
    /// When set, P₀ becomes this quantile of the frozen model's input
    /// perplexities on the test set, overriding `p0`.
    pub p0_quantile: Option<f64>,
    pub lr: f64,
    pub mode: Mode,
    pub cadence: usize,
    pub selection_enabled: bool,
    pub clamp_score: bool,
    pub batch_size: usize,
    pub interleaved: bool,
    pub max_new_tokens: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub entropy_tokens: usize,

    /// Updates between trend checkpoints.
    pub trend_every: usize,
    /// Held-out share of the data used to evaluate trend checkpoints.
    pub trend_eval_fraction: f64,
    pub contribution_fractions: Vec<f64>,
    pub forgetting_budgets: Vec<usize>,
    pub taylor_eta: f64,
    pub cross_grad_batch_size: usize,
    /// Cross-gradient over all base weights rather than the TTL trainable set.
    pub full_theta: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let p = PretrainOptions::default();
        let l = LoraConfig::default();
        let t = TtlConfig::default();
        Self {
            seed: 0,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_ff: m.d_ff,
            max_seq_len: m.max_seq_len,
            pretrain_steps: p.steps,
            pretrain_lr: p.lr,
            pretrain_batch_size: p.batch_size,
            pretrain_window: p.window,
            lora_rank: l.rank,
            lora_targets: l.targets,
            full_parameter: false,
            lambda: t.lambda,
            p0: t.p0,
            p0_quantile: None,
            lr: t.lr,
            mode: t.mode,
            cadence: t.cadence,
            selection_enabled: t.selection_enabled,
            clamp_score: t.clamp_score,
            batch_size: t.batch_size,
            interleaved: t.interleaved,
            max_new_tokens: t.max_new_tokens,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            entropy_tokens: ENTROPY_BASELINE_TOKENS,
            trend_every: 50,
            trend_eval_fraction: 0.25,
            contribution_fractions: vec![0.05, 0.25, 0.5, 1.0],
            forgetting_budgets: vec![0, 25, 50, 100],
            taylor_eta: 1e-3,
            cross_grad_batch_size: 50,
            full_theta: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TlmError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TlmError::Config(format!("{}: {e}", path.display())))
    }

    /// Sets one key from its command-line text. The value is read as JSON
    /// when it parses, otherwise as a string (so `mode=online` works).
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let Value::Object(mut map) = serde_json::to_value(&*self).expect("config serializes") else {
            unreachable!("config serializes to an object")
        };
        if !map.contains_key(key) {
            return Err(TlmError::Config(format!("unknown config key \"{key}\"")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.to_string(), value);
        *self = serde_json::from_value(Value::Object(map))
            .map_err(|e| TlmError::Config(format!("{key}={raw}: {e}")))?;
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size: VOCAB_SIZE,
            max_seq_len: self.max_seq_len,
            seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    pub fn pretrain(&self) -> PretrainOptions {
        PretrainOptions {
            steps: self.pretrain_steps,
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch_size,
            window: self.pretrain_window,
            seed: self.seed,
            adam: self.adam(),
        }
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig { rank: self.lora_rank, targets: self.lora_targets.clone(), seed: self.seed }
    }

    /// TTL settings with `p0` as given (quantile resolution happens once the
    /// test set is known).
    pub fn ttl(&self) -> TtlConfig {
        TtlConfig {
            lambda: self.lambda,
            p0: self.p0,
            lr: self.lr,
            mode: self.mode,
            cadence: self.cadence,
            selection_enabled: self.selection_enabled,
            clamp_score: self.clamp_score,
            batch_size: self.batch_size,
            adam: self.adam(),
            seed: self.seed,
            max_new_tokens: self.max_new_tokens,
            interleaved: self.interleaved,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: tlm_core::Error| TlmError::Config(e.to_string());
        self.model().validate().map_err(cfg)?;
        self.ttl().validate().map_err(cfg)?;
        if let Some(q) = self.p0_quantile {
            if !(0.0..=1.0).contains(&q) {
                return Err(TlmError::Config(format!("p0_quantile must lie in [0, 1], got {q}")));
            }
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_model {
            return Err(TlmError::Config(format!("lora_rank must be in 1..={}", self.d_model)));
        }
        if self.pretrain_window == 0 || self.pretrain_window > self.max_seq_len || self.pretrain_batch_size == 0 {
            return Err(TlmError::Config("pretrain window/batch out of range".into()));
        }
        if !(self.trend_eval_fraction > 0.0 && self.trend_eval_fraction < 1.0) || self.trend_every == 0 {
            return Err(TlmError::Config("trend_every must be >= 1 and trend_eval_fraction in (0, 1)".into()));
        }
        if self.cross_grad_batch_size == 0 {
            return Err(TlmError::Config("cross_grad_batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.lambda, 0.10);
        assert_eq!(c.p0, 3f64.exp());
        assert_eq!(c.batch_size, 1);
        assert_eq!(c.cadence, 100);
    }

    #[test]
    fn partial_file_fills_defaults_and_rejects_unknown_keys() {
        let c: RunConfig = serde_json::from_str(r#"{"lambda": 0.2}"#).unwrap();
        assert_eq!(c.lambda, 0.2);
        assert_eq!(c.d_model, 64);
        assert!(serde_json::from_str::<RunConfig>(r#"{"lamda": 0.2}"#).is_err());
    }

    #[test]
    fn set_parses_numbers_and_strings() {
        let mut c = RunConfig::default();
        c.set("p0", "7.5e0").unwrap();
        assert_eq!(c.p0, 7.5);
        c.set("mode", "online").unwrap();
        assert_eq!(c.mode, Mode::Online);
        c.set("p0_quantile", "0.5").unwrap();
        assert_eq!(c.p0_quantile, Some(0.5));
        assert!(matches!(c.set("nope", "1"), Err(TlmError::Config(_))));
        assert!(matches!(c.set("cadence", "fast"), Err(TlmError::Config(_))));
    }

    #[test]
    fn validation_catches_bad_values() {
        let c = RunConfig { p0: 0.5, ..RunConfig::default() };
        assert!(c.validate().is_err());
        let c = RunConfig { cadence: 0, ..RunConfig::default() };
        assert!(c.validate().is_err());
    }
}
