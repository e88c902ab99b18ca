//! Low-rank adapters on the attention query and value projections.
//!
//! Each adapted weight `W` (`d_out × d_in`) gains a pair `B` (`d_out × r`,
//! zero at creation) and `A` (`r × d_in`, Gaussian), and forward passes use
//! `W + B·A` with no extra scaling. Base weights are never written.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, ParamId, Tensor, Var};
use crate::model::{
    checksum_tensors, BaseWeights, CausalLm, GradMode, LanguageModel, LayerWeight, ModelConfig,
    TokenId, WeightSlot, WeightSource,
};
use crate::optim::ParamStore;
use crate::rng::SeededRng;
use crate::{Error, Result};

/// First [`ParamId`] used for adapter matrices; base ids are slot indices.
pub const ADAPTER_ID_BASE: usize = 1 << 20;

pub const DEFAULT_RANK: usize = 8;
pub const A_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LoraTarget {
    Query,
    Value,
}

impl LoraTarget {
    fn layer_weight(self) -> LayerWeight {
        match self {
            LoraTarget::Query => LayerWeight::Query,
            LoraTarget::Value => LayerWeight::Value,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LoraConfig {
    pub rank: usize,
    pub targets: Vec<LoraTarget>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: DEFAULT_RANK, targets: alloc::vec![LoraTarget::Query, LoraTarget::Value], seed: 0 }
    }
}

/// One `(B, A)` factor pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub layer: usize,
    pub target: LoraTarget,
    pub b: Tensor,
    pub a: Tensor,
}

impl LoraPair {
    pub fn slot(&self) -> WeightSlot {
        WeightSlot::Layer(self.layer, self.target.layer_weight())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    config: LoraConfig,
    pairs: Vec<LoraPair>,
}

impl LoraAdapter {
    /// Zero `B`, Gaussian `A`, for every layer × target of `model`.
    pub fn new(model_config: &ModelConfig, config: LoraConfig) -> Result<Self> {
        let d = model_config.d_model;
        if config.rank == 0 || config.rank > d {
            return Err(Error::invalid(format!(
                "LoRA rank {} must be in 1..={d}",
                config.rank
            )));
        }
        let mut targets = config.targets.clone();
        targets.sort();
        targets.dedup();
        if targets.is_empty() {
            return Err(Error::invalid("LoRA needs at least one target"));
        }
        let mut rng = SeededRng::derived(config.seed, 0x6c6f_7261);
        let mut pairs = Vec::new();
        for layer in 0..model_config.n_layers {
            for &target in &targets {
                let b = Tensor::zeros(&[d, config.rank]);
                let a = Tensor::from_fn(&[config.rank, d], |_| A_INIT_STD * rng.normal());
                pairs.push(LoraPair { layer, target, b, a });
            }
        }
        Ok(Self { config: LoraConfig { targets, ..config }, pairs })
    }

    /// Rebuilds an adapter from stored factors.
    pub fn from_pairs(model_config: &ModelConfig, config: LoraConfig, pairs: Vec<LoraPair>) -> Result<Self> {
        let d = model_config.d_model;
        for p in &pairs {
            if p.layer >= model_config.n_layers
                || p.b.shape() != [d, config.rank]
                || p.a.shape() != [config.rank, d]
            {
                return Err(Error::shape(format!(
                    "adapter pair for layer {} has B {:?}, A {:?}",
                    p.layer,
                    p.b.shape(),
                    p.a.shape()
                )));
            }
        }
        Ok(Self { config, pairs })
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn rank(&self) -> usize {
        self.config.rank
    }

    pub fn pairs(&self) -> &[LoraPair] {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> &mut [LoraPair] {
        &mut self.pairs
    }

    pub fn num_parameters(&self) -> usize {
        self.pairs.iter().map(|p| p.a.len() + p.b.len()).sum()
    }

    pub fn b_id(pair: usize) -> ParamId {
        ParamId(ADAPTER_ID_BASE + 2 * pair)
    }

    pub fn a_id(pair: usize) -> ParamId {
        ParamId(ADAPTER_ID_BASE + 2 * pair + 1)
    }

    fn pair_for(&self, slot: WeightSlot) -> Option<usize> {
        self.pairs.iter().position(|p| p.slot() == slot)
    }

    pub fn checksum(&self) -> u64 {
        checksum_tensors(self.pairs.iter().flat_map(|p| [&p.b, &p.a]))
    }
}

/// `W + B·A`.
pub fn effective_weight(w: &Tensor, b: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (&[d_out, d_in], &[bo, r], &[ar, ai]) = (w.shape(), b.shape(), a.shape()) else {
        return Err(Error::shape("effective_weight expects matrices"));
    };
    if bo != d_out || ar != r || ai != d_in {
        return Err(Error::shape(format!(
            "W {d_out}×{d_in}, B {bo}×{r}, A {ar}×{ai}"
        )));
    }
    let mut out = w.clone();
    let (bd, ad) = (b.data(), a.data());
    let od = out.data_mut();
    for i in 0..d_out {
        for k in 0..r {
            let bv = bd[i * r + k];
            if bv == 0.0 {
                continue;
            }
            for j in 0..d_in {
                od[i * d_in + j] += bv * ad[k * d_in + j];
            }
        }
    }
    Ok(out)
}

/// A base model with an attached adapter. Only the adapter is trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel {
    base: LanguageModel,
    adapter: LoraAdapter,
}

/// Attaches a fresh adapter; logits are unchanged until `B` moves.
pub fn attach(model: LanguageModel, config: LoraConfig) -> Result<AdaptedModel> {
    let adapter = LoraAdapter::new(model.config(), config)?;
    Ok(AdaptedModel { base: model, adapter })
}

impl AdaptedModel {
    pub fn from_parts(base: LanguageModel, adapter: LoraAdapter) -> Result<Self> {
        if adapter.pairs.iter().any(|p| p.layer >= base.config().n_layers)
            || adapter.pairs.iter().any(|p| p.b.shape()[0] != base.config().d_model)
        {
            return Err(Error::shape("adapter does not fit base model"));
        }
        Ok(Self { base, adapter })
    }

    pub fn base(&self) -> &LanguageModel {
        &self.base
    }

    pub fn adapter(&self) -> &LoraAdapter {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut LoraAdapter {
        &mut self.adapter
    }

    pub fn into_parts(self) -> (LanguageModel, LoraAdapter) {
        (self.base, self.adapter)
    }

    /// Plain model with `W ← W + B·A` baked in.
    pub fn merge(&self) -> Result<LanguageModel> {
        let mut merged = self.base.clone();
        for p in &self.adapter.pairs {
            let w = effective_weight(self.base.weight(p.slot()), &p.b, &p.a)?;
            *merged.weight_mut(p.slot()) = w;
        }
        Ok(merged)
    }
}

struct LoraWeights<'a> {
    adapter: &'a LoraAdapter,
    base_trainable: bool,
    adapter_trainable: bool,
}

impl WeightSource for LoraWeights<'_> {
    fn bind(&self, g: &mut Graph, model: &LanguageModel, slot: WeightSlot) -> Result<Var> {
        let base = BaseWeights { trainable: self.base_trainable }.bind(g, model, slot)?;
        let Some(i) = self.adapter.pair_for(slot) else {
            return Ok(base);
        };
        let p = &self.adapter.pairs[i];
        let (b, a) = if self.adapter_trainable {
            (g.param(LoraAdapter::b_id(i), p.b.clone()), g.param(LoraAdapter::a_id(i), p.a.clone()))
        } else {
            (g.constant(p.b.clone()), g.constant(p.a.clone()))
        };
        let delta = g.matmul(b, a)?;
        g.add(base, delta)
    }
}

impl ParamStore for AdaptedModel {
    fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        let rel = id.0.checked_sub(ADAPTER_ID_BASE)?;
        let pair = self.adapter.pairs.get_mut(rel / 2)?;
        Some(if rel % 2 == 0 { &mut pair.b } else { &mut pair.a })
    }
}

impl CausalLm for AdaptedModel {
    fn config(&self) -> &ModelConfig {
        self.base.config()
    }

    fn logits(&self, g: &mut Graph, tokens: &[TokenId], mode: GradMode) -> Result<Var> {
        let src = LoraWeights {
            adapter: &self.adapter,
            base_trainable: mode == GradMode::All,
            adapter_trainable: mode != GradMode::Frozen,
        };
        self.base.forward_with(g, tokens, &src)
    }

    fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.adapter.pairs.len())
            .flat_map(|i| [LoraAdapter::b_id(i), LoraAdapter::a_id(i)])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{next_token_logits, BOS};

    fn small() -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_ff: 32, max_seq_len: 16, ..ModelConfig::default() }
    }

    #[test]
    fn b_zero_gives_base_weight() {
        let w = Tensor::from_fn(&[3, 4], |i| i as f64);
        let b = Tensor::zeros(&[3, 2]);
        let a = Tensor::from_fn(&[2, 4], |i| 1.0 + i as f64);
        assert_eq!(effective_weight(&w, &b, &a).unwrap(), w);
    }

    #[test]
    fn rank_one_outer_product() {
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::matrix(2, 1, alloc::vec![2.0, -1.0]).unwrap();
        let a = Tensor::matrix(1, 3, alloc::vec![1.0, 0.5, 3.0]).unwrap();
        let e = effective_weight(&w, &b, &a).unwrap();
        assert_eq!(e.data(), &[2.0, 1.0, 6.0, -1.0, -0.5, -3.0]);
    }

    #[test]
    fn effective_weight_shape_mismatch() {
        let w = Tensor::zeros(&[2, 3]);
        assert!(effective_weight(&w, &Tensor::zeros(&[2, 1]), &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn rank_too_large_is_rejected() {
        let m = LanguageModel::new(small()).unwrap();
        let cfg = LoraConfig { rank: 17, ..LoraConfig::default() };
        assert!(attach(m, cfg).is_err());
    }

    #[test]
    fn trainable_count_matches_shapes() {
        let c = ModelConfig::default();
        let adapted = attach(LanguageModel::new(c.clone()).unwrap(), LoraConfig::default()).unwrap();
        // 2 layers × {W_q, W_v} × r·(d_out + d_in)
        assert_eq!(adapted.adapter().num_parameters(), 2 * 2 * 8 * (64 + 64));
        assert_eq!(adapted.trainable_ids().len(), 8);
    }

    #[test]
    fn attach_preserves_logits_and_merge_is_identity() {
        let m = LanguageModel::new(small()).unwrap();
        let adapted = attach(m.clone(), LoraConfig { rank: 4, ..LoraConfig::default() }).unwrap();
        let p = [BOS, 10, 20, 30];
        let a = next_token_logits(&adapted, &p).unwrap();
        let b = next_token_logits(&m, &p).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12);
        assert_eq!(adapted.merge().unwrap(), m);
        let twice = attach(adapted.merge().unwrap(), LoraConfig { rank: 4, ..LoraConfig::default() })
            .unwrap()
            .merge()
            .unwrap();
        assert_eq!(twice, m);
    }

    #[test]
    fn param_store_only_exposes_adapter() {
        let mut adapted = attach(LanguageModel::new(small()).unwrap(), LoraConfig::default()).unwrap();
        assert!(adapted.param_mut(ParamId(0)).is_none());
        assert!(adapted.param_mut(LoraAdapter::b_id(0)).is_some());
        assert!(adapted.param_mut(LoraAdapter::a_id(3)).is_some());
        assert!(adapted.param_mut(LoraAdapter::a_id(4)).is_none());
    }
}
