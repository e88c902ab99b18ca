//! Empirical checks of why input-perplexity minimization helps outputs.
//!
//! Log-likelihoods here are length-normalized (`−meanNLL`), the same
//! quantity whose exponent is perplexity. All functions leave the models they
//! are given untouched; anything trained runs on a clone.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Gradients;
use crate::lora::{attach, AdaptedModel, LoraConfig};
use crate::math;
use crate::model::{CausalLm, GradMode, LanguageModel, TokenId};
use crate::optim::AdamState;
use crate::ttl::{
    adam_step, conditional_perplexity, input_perplexity, mean_conditional_perplexity,
    mean_input_perplexity, run_offline, run_offline_observed, ttl_loss, Sample, TtlConfig,
};
use crate::{Error, Result};

/// Fraction of non-negative cross-gradient batches reported at LLM scale
/// (400 batches of 50 QA pairs). Reference only.
pub const LLM_SCALE_NONNEGATIVE_FRACTION: f64 = 0.9875;
/// Mean cross-gradient inner product reported alongside it.
pub const LLM_SCALE_MEAN_INNER_PRODUCT: f64 = 5.60;

/// A question/answer pair.
#[derive(Clone, Debug, PartialEq)]
pub struct QaPair {
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
}

impl QaPair {
    pub fn from_sample(s: &Sample) -> Option<Self> {
        s.reference.as_ref().map(|y| Self { x: s.input.clone(), y: y.clone() })
    }
}

/// `∇ log P(x)` averaged over the batch.
pub fn input_log_likelihood_gradient<M: CausalLm + ?Sized>(model: &M, batch: &[QaPair]) -> Result<Gradients> {
    batch_gradient(batch, |p| input_perplexity(model, &p.x, GradMode::Trainable)?.nll_gradients())
}

/// `∇ log P(y|x)` averaged over the batch.
pub fn output_log_likelihood_gradient<M: CausalLm + ?Sized>(model: &M, batch: &[QaPair]) -> Result<Gradients> {
    batch_gradient(batch, |p| conditional_perplexity(model, &p.x, &p.y, GradMode::Trainable)?.nll_gradients())
}

fn batch_gradient<F>(batch: &[QaPair], mut nll_grad: F) -> Result<Gradients>
where
    F: FnMut(&QaPair) -> Result<Gradients>,
{
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut g = Gradients::new();
    for p in batch {
        // log-likelihood is the negated NLL
        g.accumulate(&nll_grad(p)?, -1.0 / batch.len() as f64);
    }
    Ok(g)
}

/// `⟨∇ log P(x), ∇ log P(y|x)⟩` over the model's trainable set.
pub fn cross_gradient_inner_product<M: CausalLm + ?Sized>(model: &M, batch: &[QaPair]) -> Result<f64> {
    let gx = input_log_likelihood_gradient(model, batch)?;
    let gy = output_log_likelihood_gradient(model, batch)?;
    Ok(gx.dot(&gy))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradientDiagnostics {
    pub inner_products: Vec<f64>,
    pub fraction_nonnegative: f64,
    pub mean_inner_product: f64,
}

pub fn gradient_statistics<M: CausalLm + ?Sized>(model: &M, batches: &[Vec<QaPair>]) -> Result<GradientDiagnostics> {
    if batches.is_empty() {
        return Err(Error::invalid("no batches"));
    }
    let inner_products = batches
        .iter()
        .map(|b| cross_gradient_inner_product(model, b))
        .collect::<Result<Vec<_>>>()?;
    let n = inner_products.len() as f64;
    let fraction_nonnegative = inner_products.iter().filter(|&&v| v >= 0.0).count() as f64 / n;
    let mean_inner_product = inner_products.iter().sum::<f64>() / n;
    Ok(GradientDiagnostics { inner_products, fraction_nonnegative, mean_inner_product })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaylorResult {
    pub eta: f64,
    pub inner_product: f64,
    pub log_p_before: f64,
    pub log_p_after: f64,
    /// `|log P'(y|x) − log P(y|x) − η⟨∇x,∇y⟩|`
    pub residual: f64,
}

/// First-order check of a plain gradient-ascent step on `log P(x)`:
/// `Θ' = Θ + η ∇ log P(x)`, then compare the change in `log P(y|x)` with
/// `η ⟨∇x, ∇y⟩`.
pub fn taylor_residual<M: CausalLm + Clone>(model: &M, pair: &QaPair, eta: f64) -> Result<TaylorResult> {
    if !(eta >= 0.0) {
        return Err(Error::invalid(format!("eta must be >= 0, got {eta}")));
    }
    let batch = core::slice::from_ref(pair);
    let gx = input_log_likelihood_gradient(model, batch)?;
    let gy = output_log_likelihood_gradient(model, batch)?;
    let inner_product = gx.dot(&gy);
    let log_p_before = -conditional_perplexity(model, &pair.x, &pair.y, GradMode::Frozen)?.mean_nll;

    let mut stepped = model.clone();
    for (id, g) in gx.iter() {
        let p = stepped
            .param_mut(*id)
            .ok_or_else(|| Error::invalid(format!("gradient for non-trainable parameter {}", id.0)))?;
        for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
            *w += eta * gi;
        }
    }
    let log_p_after = -conditional_perplexity(&stepped, &pair.x, &pair.y, GradMode::Frozen)?.mean_nll;
    let residual = (log_p_after - log_p_before - eta * inner_product).abs();
    Ok(TaylorResult { eta, inner_product, log_p_before, log_p_after, residual })
}

/// Rescales to `[0, 1]`; a constant series maps to zeros.
pub fn min_max_normalize(series: &[f64]) -> Vec<f64> {
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; series.len()];
    }
    series.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / math::sqrt(saa * sbb))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrendReport {
    /// Update count at each checkpoint.
    pub checkpoints: Vec<usize>,
    pub input_ppl: Vec<f64>,
    pub output_ppl: Vec<f64>,
    pub input_normalized: Vec<f64>,
    pub output_normalized: Vec<f64>,
    /// `None` when a series is constant (degenerate).
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

impl TrendReport {
    pub fn from_series(checkpoints: Vec<usize>, input_ppl: Vec<f64>, output_ppl: Vec<f64>) -> Result<Self> {
        if checkpoints.len() < 3 || input_ppl.len() != checkpoints.len() || output_ppl.len() != checkpoints.len() {
            return Err(Error::invalid("trend needs at least 3 checkpoints with matching series"));
        }
        Ok(Self {
            input_normalized: min_max_normalize(&input_ppl),
            output_normalized: min_max_normalize(&output_ppl),
            pearson: pearson(&input_ppl, &output_ppl),
            spearman: spearman(&input_ppl, &output_ppl),
            checkpoints,
            input_ppl,
            output_ppl,
        })
    }
}

/// Mean input and output perplexity of `eval` at each `(update_count,
/// model)` checkpoint.
pub fn perplexity_trend<M: CausalLm>(checkpoints: &[(usize, M)], eval: &[Sample]) -> Result<TrendReport> {
    if checkpoints.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 checkpoints, got {}", checkpoints.len())));
    }
    let mut ins = Vec::with_capacity(checkpoints.len());
    let mut outs = Vec::with_capacity(checkpoints.len());
    for (_, m) in checkpoints {
        ins.push(mean_input_perplexity(m, eval)?);
        outs.push(mean_conditional_perplexity(m, eval)?);
    }
    TrendReport::from_series(checkpoints.iter().map(|(k, _)| *k).collect(), ins, outs)
}

/// Offline TTL on a clone of `model`, measuring `eval` before training and
/// after every `every` updates.
pub fn trend_during_ttl<M: CausalLm + Clone>(
    model: &M,
    train: &[Sample],
    eval: &[Sample],
    cfg: &TtlConfig,
    every: usize,
) -> Result<TrendReport> {
    if every == 0 {
        return Err(Error::invalid("checkpoint interval must be >= 1"));
    }
    let mut m = model.clone();
    let mut ks = vec![0];
    let mut ins = vec![mean_input_perplexity(&m, eval)?];
    let mut outs = vec![mean_conditional_perplexity(&m, eval)?];
    let cfg = TtlConfig { max_new_tokens: 0, ..cfg.clone() };
    run_offline_observed(&mut m, train, &cfg, &mut |cur: &M, updates| {
        if updates % every == 0 {
            ks.push(updates);
            ins.push(mean_input_perplexity(cur, eval)?);
            outs.push(mean_conditional_perplexity(cur, eval)?);
        }
        Ok(())
    })?;
    TrendReport::from_series(ks, ins, outs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SubsetStrategy {
    /// Highest-perplexity samples.
    Top,
    /// Lowest-perplexity samples.
    Bottom,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ContributionRow {
    pub fraction: f64,
    pub strategy: SubsetStrategy,
    pub subset_size: usize,
    /// Mean input perplexity over all test samples after training on the subset.
    pub final_mean_ppl: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ContributionStudy {
    pub baseline_mean_ppl: f64,
    pub rows: Vec<ContributionRow>,
}

/// Indices of the `k` highest (`Top`) or lowest (`Bottom`) perplexity
/// samples, returned in arrival order.
pub fn select_subset(ppls: &[f64], k: usize, strategy: SubsetStrategy) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ppls.len()).collect();
    // descending by ppl, ties by index
    order.sort_by(|&i, &j| ppls[j].total_cmp(&ppls[i]).then(i.cmp(&j)));
    let mut chosen: Vec<usize> = match strategy {
        SubsetStrategy::Top => order[..k].to_vec(),
        SubsetStrategy::Bottom => order[order.len() - k..].to_vec(),
    };
    chosen.sort_unstable();
    chosen
}

/// For each fraction, TTL on the top- and bottom-perplexity subsets
/// (weights fixed at 1), then mean input perplexity over every sample.
pub fn sample_contribution_study<M: CausalLm + Clone>(
    model: &M,
    test_set: &[Sample],
    fractions: &[f64],
    cfg: &TtlConfig,
) -> Result<ContributionStudy> {
    if test_set.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::invalid("fractions must lie in (0, 1]"));
    }
    let ppls = test_set
        .iter()
        .map(|s| Ok(input_perplexity(model, &s.input, GradMode::Frozen)?.ppl()))
        .collect::<Result<Vec<f64>>>()?;
    let baseline_mean_ppl = ppls.iter().sum::<f64>() / ppls.len() as f64;
    let cfg = TtlConfig { selection_enabled: false, max_new_tokens: 0, ..cfg.clone() };
    let mut rows = Vec::new();
    for &fraction in fractions {
        let k = (libm::ceil(fraction * test_set.len() as f64) as usize).clamp(1, test_set.len());
        for strategy in [SubsetStrategy::Top, SubsetStrategy::Bottom] {
            let subset: Vec<Sample> =
                select_subset(&ppls, k, strategy).into_iter().map(|i| test_set[i].clone()).collect();
            let mut m = model.clone();
            run_offline(&mut m, &subset, &cfg)?;
            rows.push(ContributionRow {
                fraction,
                strategy,
                subset_size: k,
                final_mean_ppl: mean_input_perplexity(&m, test_set)?,
            });
        }
    }
    Ok(ContributionStudy { baseline_mean_ppl, rows })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ForgettingReport {
    pub budgets: Vec<usize>,
    /// Source-domain mean input perplexity of the frozen model.
    pub baseline: f64,
    pub lora: Vec<f64>,
    pub full: Vec<f64>,
    pub lora_base_checksum_unchanged: bool,
}

impl ForgettingReport {
    pub fn lora_degradation(&self) -> f64 {
        self.lora.last().copied().unwrap_or(self.baseline) - self.baseline
    }

    pub fn full_degradation(&self) -> f64 {
        self.full.last().copied().unwrap_or(self.baseline) - self.baseline
    }
}

/// Unit-weight updates cycling through `target`, recording source perplexity
/// at each budget.
fn forgetting_arm<M: CausalLm>(
    model: &mut M,
    source_eval: &[Sample],
    target: &[Sample],
    budgets: &[usize],
    cfg: &TtlConfig,
    baseline: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(budgets.len());
    let mut adam = AdamState::new(cfg.adam);
    let mut done = 0usize;
    for &b in budgets {
        while done < b {
            let s = &target[done % target.len()];
            let mut eval = input_perplexity(model, &s.input, GradMode::Trainable)?;
            let grads = ttl_loss(&mut eval, 1.0)?.grads.expect("unit weight runs backward");
            adam_step(&mut adam, &grads, cfg.lr, model)?;
            done += 1;
        }
        out.push(if b == 0 { baseline } else { mean_input_perplexity(model, source_eval)? });
    }
    Ok(out)
}

/// LoRA-only versus full-parameter TTL with identical learning rate and
/// update counts; reports source-domain perplexity at each budget.
pub fn forgetting_eval(
    base: &LanguageModel,
    lora: &LoraConfig,
    source_eval: &[Sample],
    target: &[Sample],
    budgets: &[usize],
    cfg: &TtlConfig,
) -> Result<ForgettingReport> {
    if source_eval.is_empty() || target.is_empty() || budgets.is_empty() {
        return Err(Error::invalid("forgetting study needs source samples, target samples and budgets"));
    }
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("budgets must be nondecreasing"));
    }
    cfg.validate()?;
    let baseline = mean_input_perplexity(base, source_eval)?;
    let checksum = base.checksum();

    let mut lora_model: AdaptedModel = attach(base.clone(), lora.clone())?;
    let lora_curve = forgetting_arm(&mut lora_model, source_eval, target, budgets, cfg, baseline)?;
    let mut full_model = base.clone();
    let full_curve = forgetting_arm(&mut full_model, source_eval, target, budgets, cfg, baseline)?;

    Ok(ForgettingReport {
        budgets: budgets.to_vec(),
        baseline,
        lora: lora_curve,
        full: full_curve,
        lora_base_checksum_unchanged: lora_model.base().checksum() == checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_hits_bounds() {
        let n = min_max_normalize(&[3.0, 1.0, 2.0]);
        assert_eq!(n, vec![1.0, 0.0, 0.5]);
        assert_eq!(min_max_normalize(&[2.0, 2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn correlations() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
        assert!((spearman(&[1.0, 5.0, 9.0], &[1.0, 2.0, 100.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_trend_is_degenerate() {
        let t = TrendReport::from_series(vec![0, 1, 2], vec![5.0; 3], vec![7.0; 3]).unwrap();
        assert!(t.pearson.is_none());
        assert!(TrendReport::from_series(vec![0, 1], vec![1.0; 2], vec![1.0; 2]).is_err());
    }

    #[test]
    fn subset_selection() {
        let p = [5.0, 1.0, 9.0, 3.0];
        assert_eq!(select_subset(&p, 2, SubsetStrategy::Top), vec![0, 2]);
        assert_eq!(select_subset(&p, 2, SubsetStrategy::Bottom), vec![1, 3]);
        assert_eq!(select_subset(&p, 4, SubsetStrategy::Top), select_subset(&p, 4, SubsetStrategy::Bottom));
    }
}
