//! Test-time learning: input-perplexity measurement, perplexity-gated sample
//! weighting, the weighted loss, and the offline/online adaptation loops.
//!
//! The loss optimized per sample is `S(x) · meanNLL(x)`, i.e. the selection
//! weight times log-perplexity. `S(x)` is computed from a forward pass only
//! and enters the graph as a constant.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Gradients, Graph, Var};
use crate::math;
use crate::model::{greedy_generate, CausalLm, GradMode, TokenId, BOS};
use crate::optim::{AdamParams, AdamState};
use crate::{Error, Result};

/// `S(x)` is capped at this multiple of `λ` when clamping is enabled.
pub const SCORE_CLAMP_FACTOR: f64 = 100.0;

/// One unlabeled test record. `reference` is only for evaluation and
/// diagnostics; the adaptation loops never read it.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Sample {
    pub id: String,
    pub input: Vec<TokenId>,
    pub reference: Option<Vec<TokenId>>,
}

impl Sample {
    pub fn new(id: impl Into<String>, input: Vec<TokenId>) -> Self {
        Self { id: id.into(), input, reference: None }
    }

    pub fn with_reference(mut self, reference: Vec<TokenId>) -> Self {
        self.reference = Some(reference);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Mode {
    Offline,
    Online,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TtlConfig {
    /// Weight coefficient λ of the selection score.
    pub lambda: f64,
    /// Perplexity threshold P₀.
    pub p0: f64,
    pub lr: f64,
    pub mode: Mode,
    /// Online mode: updates are committed once per this many samples.
    pub cadence: usize,
    /// When off every sample gets weight 1.
    pub selection_enabled: bool,
    /// Cap `S(x)` at `SCORE_CLAMP_FACTOR · λ`.
    pub clamp_score: bool,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
    /// Greedy continuation length for predictions; 0 skips generation.
    pub max_new_tokens: usize,
    /// Offline only: predict each batch before its update instead of after
    /// the whole pass.
    pub interleaved: bool,
}

impl Default for TtlConfig {
    fn default() -> Self {
        Self {
            lambda: 0.10,
            p0: math::exp(3.0),
            lr: 1e-3,
            mode: Mode::Offline,
            cadence: 100,
            selection_enabled: true,
            clamp_score: true,
            batch_size: 1,
            adam: AdamParams::default(),
            seed: 0,
            max_new_tokens: 32,
            interleaved: false,
        }
    }
}

impl TtlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p0 >= 1.0) {
            return Err(Error::invalid(format!("p0 must be >= 1, got {}", self.p0)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.cadence == 0 {
            return Err(Error::invalid("cadence must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// A scored forward pass that keeps its graph so the same pass can drive the
/// backward step.
#[derive(Debug)]
pub struct PerplexityEval {
    graph: Graph,
    nll: Var,
    /// Mean negative log-likelihood over the scored positions.
    pub mean_nll: f64,
    /// Number of scored tokens.
    pub scored: usize,
}

impl PerplexityEval {
    pub fn ppl(&self) -> f64 {
        math::exp(self.mean_nll)
    }

    /// Gradients of the unweighted mean NLL.
    pub fn nll_gradients(&self) -> Result<Gradients> {
        self.graph.backward(self.nll)
    }
}

/// Builds `[BOS, context.., scored..]` inputs with shifted targets where only
/// `scored` positions count. Oversized inputs drop the oldest context tokens
/// (or, with no context, the oldest scored tokens).
pub fn scoring_window(
    max_seq_len: usize,
    context: &[TokenId],
    scored: &[TokenId],
) -> Result<(Vec<TokenId>, Vec<Option<usize>>)> {
    if scored.is_empty() {
        return Err(Error::invalid("nothing to score"));
    }
    let (mut ctx, mut sc) = (context, scored);
    let excess = (ctx.len() + sc.len()).saturating_sub(max_seq_len);
    if excess > 0 {
        if ctx.is_empty() {
            sc = &sc[excess..];
        } else if excess < ctx.len() {
            ctx = &ctx[excess..];
        } else {
            return Err(Error::invalid(format!(
                "{} scored tokens leave no room for context within {max_seq_len}",
                sc.len()
            )));
        }
    }
    let mut full = Vec::with_capacity(1 + ctx.len() + sc.len());
    full.push(BOS);
    full.extend_from_slice(ctx);
    full.extend_from_slice(sc);
    let inputs = full[..full.len() - 1].to_vec();
    let targets = (1..full.len())
        .map(|i| (i > ctx.len()).then(|| full[i]))
        .collect();
    Ok((inputs, targets))
}

fn evaluate<M: CausalLm + ?Sized>(
    model: &M,
    context: &[TokenId],
    scored: &[TokenId],
    mode: GradMode,
) -> Result<PerplexityEval> {
    let (inputs, targets) = scoring_window(model.config().max_seq_len, context, scored)?;
    let scored_count = targets.iter().filter(|t| t.is_some()).count();
    let mut graph = Graph::new();
    let logits = model.logits(&mut graph, &inputs, mode)?;
    let nll = graph.cross_entropy(logits, &targets)?;
    let mean_nll = graph.scalar(nll);
    Ok(PerplexityEval { graph, nll, mean_nll, scored: scored_count })
}

/// Perplexity of `x` itself, every token predicted (the first from BOS).
pub fn input_perplexity<M: CausalLm + ?Sized>(model: &M, x: &[TokenId], mode: GradMode) -> Result<PerplexityEval> {
    if x.is_empty() {
        return Err(Error::invalid("input is empty"));
    }
    evaluate(model, &[], x, mode)
}

/// Perplexity of `y` given `x`; only `y` positions enter the mean.
pub fn conditional_perplexity<M: CausalLm + ?Sized>(
    model: &M,
    x: &[TokenId],
    y: &[TokenId],
    mode: GradMode,
) -> Result<PerplexityEval> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("conditional perplexity needs nonempty x and y"));
    }
    evaluate(model, x, y, mode)
}

/// `S(x) = λ · exp(log ppl − log P₀) · 𝕀{ppl > P₀}`, optionally clamped.
pub fn selection_score(ppl: f64, cfg: &TtlConfig) -> f64 {
    if !(ppl > cfg.p0) {
        return 0.0;
    }
    let s = cfg.lambda * math::exp(math::ln(ppl) - math::ln(cfg.p0));
    if cfg.clamp_score {
        s.min(SCORE_CLAMP_FACTOR * cfg.lambda)
    } else {
        s
    }
}

/// Weight applied by the loops: `S(x)` when selection is on, 1 otherwise.
pub fn sample_weight(ppl: f64, cfg: &TtlConfig) -> f64 {
    if cfg.selection_enabled {
        selection_score(ppl, cfg)
    } else {
        1.0
    }
}

#[derive(Debug)]
pub struct TtlLoss {
    pub value: f64,
    /// `None` when the weight is zero and no backward was run.
    pub grads: Option<Gradients>,
}

/// `S · meanNLL(x)` on an existing evaluation, with its gradients.
pub fn ttl_loss(eval: &mut PerplexityEval, score: f64) -> Result<TtlLoss> {
    if !(score >= 0.0) {
        return Err(Error::invalid(format!("selection weight must be >= 0, got {score}")));
    }
    if score == 0.0 {
        return Ok(TtlLoss { value: 0.0, grads: None });
    }
    let weighted = eval.graph.scale(eval.nll, score);
    let value = eval.graph.scalar(weighted);
    let grads = eval.graph.backward(weighted)?;
    Ok(TtlLoss { value, grads: Some(grads) })
}

/// One Adam update of `model`'s trainable parameters.
pub fn adam_step<M: CausalLm + ?Sized>(
    state: &mut AdamState,
    grads: &Gradients,
    lr: f64,
    model: &mut M,
) -> Result<()> {
    state.step(grads, lr, model)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub sample_id: String,
    /// Arrival position in the test stream.
    pub index: usize,
    pub input_ppl: f64,
    pub score: f64,
    pub backward_performed: bool,
    pub loss: f64,
    /// Online window (`index / cadence`); batch index offline.
    pub window_index: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TtlReport {
    pub records: Vec<StepRecord>,
    pub backward_count: usize,
    /// Optimizer steps taken.
    pub update_count: usize,
    /// Mean input perplexity over the set before and after adaptation.
    pub mean_ppl_before: f64,
    pub mean_ppl_after: f64,
}

impl TtlReport {
    /// Fraction of samples with `S > 0` in each window.
    pub fn window_selection_fractions(&self) -> Vec<f64> {
        let Some(last) = self.records.last() else { return Vec::new() };
        let mut sel = vec![0usize; last.window_index + 1];
        let mut tot = vec![0usize; last.window_index + 1];
        for r in &self.records {
            tot[r.window_index] += 1;
            sel[r.window_index] += r.backward_performed as usize;
        }
        sel.iter().zip(&tot).map(|(&s, &t)| s as f64 / t.max(1) as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Prediction {
    pub sample_id: String,
    /// Generated continuation (prompt excluded).
    pub tokens: Vec<TokenId>,
}

/// Greedy continuation of `x`.
pub fn predict<M: CausalLm + ?Sized>(model: &M, sample: &Sample, max_new_tokens: usize) -> Result<Prediction> {
    let max = model.config().max_seq_len;
    let keep = sample.input.len().min(max - 1);
    let mut prompt = Vec::with_capacity(keep + 1);
    prompt.push(BOS);
    prompt.extend_from_slice(&sample.input[sample.input.len() - keep..]);
    let out = greedy_generate(model, &prompt, max_new_tokens)?;
    Ok(Prediction { sample_id: sample.id.clone(), tokens: out[prompt.len()..].to_vec() })
}

/// Mean input perplexity over `samples` (inference only).
pub fn mean_input_perplexity<M: CausalLm + ?Sized>(model: &M, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let mut total = 0.0;
    for s in samples {
        total += input_perplexity(model, &s.input, GradMode::Frozen)?.ppl();
    }
    Ok(total / samples.len() as f64)
}

/// Mean conditional perplexity of references given inputs, over samples
/// that carry a reference.
pub fn mean_conditional_perplexity<M: CausalLm + ?Sized>(model: &M, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        if let Some(y) = &s.reference {
            total += conditional_perplexity(model, &s.input, y, GradMode::Frozen)?.ppl();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no samples with references"));
    }
    Ok(total / n as f64)
}

fn predict_all<M: CausalLm + ?Sized>(model: &M, samples: &[Sample], n: usize) -> Result<Vec<Prediction>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    samples.iter().map(|s| predict(model, s, n)).collect()
}

/// Offline adaptation followed by predictions for every sample.
pub fn run_offline<M: CausalLm + ?Sized>(
    model: &mut M,
    test_set: &[Sample],
    cfg: &TtlConfig,
) -> Result<(TtlReport, Vec<Prediction>)> {
    run_offline_observed(model, test_set, cfg, &mut |_, _| Ok(()))
}

/// [`run_offline`] with `observer(model, update_count)` called after every
/// optimizer step.
pub fn run_offline_observed<M, F>(
    model: &mut M,
    test_set: &[Sample],
    cfg: &TtlConfig,
    observer: &mut F,
) -> Result<(TtlReport, Vec<Prediction>)>
where
    M: CausalLm + ?Sized,
    F: FnMut(&M, usize) -> Result<()>,
{
    cfg.validate()?;
    if test_set.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let mut report = TtlReport { mean_ppl_before: mean_input_perplexity(model, test_set)?, ..TtlReport::default() };
    let mut adam = AdamState::new(cfg.adam);
    let mut predictions = Vec::new();

    for (batch_idx, batch) in test_set.chunks(cfg.batch_size).enumerate() {
        if cfg.interleaved {
            predictions.extend(predict_all(model, batch, cfg.max_new_tokens)?);
        }
        let mut grads = Gradients::new();
        let mut any = false;
        for (k, sample) in batch.iter().enumerate() {
            let mut eval = input_perplexity(model, &sample.input, GradMode::Trainable)?;
            let ppl = eval.ppl();
            let score = sample_weight(ppl, cfg);
            let loss = ttl_loss(&mut eval, score)?;
            let backward = loss.grads.is_some();
            if let Some(g) = &loss.grads {
                grads.accumulate(g, 1.0 / batch.len() as f64);
                any = true;
            }
            report.backward_count += backward as usize;
            report.records.push(StepRecord {
                sample_id: sample.id.clone(),
                index: batch_idx * cfg.batch_size + k,
                input_ppl: ppl,
                score,
                backward_performed: backward,
                loss: loss.value,
                window_index: batch_idx,
            });
        }
        if any {
            adam_step(&mut adam, &grads, cfg.lr, model)?;
            report.update_count += 1;
            observer(model, report.update_count)?;
        }
    }

    if !cfg.interleaved {
        predictions = predict_all(model, test_set, cfg.max_new_tokens)?;
    }
    report.mean_ppl_after = mean_input_perplexity(model, test_set)?;
    Ok((report, predictions))
}

/// Answer-as-you-go adaptation. Each sample is predicted with the current
/// parameters and scored; selected samples are queued and applied (one Adam
/// step each, arrival order) at every `cadence` boundary and at the end of
/// the stream.
pub fn run_online<M: CausalLm + ?Sized>(
    model: &mut M,
    stream: &[Sample],
    cfg: &TtlConfig,
) -> Result<(TtlReport, Vec<Prediction>)> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::invalid("stream is empty"));
    }
    let mut report = TtlReport { mean_ppl_before: mean_input_perplexity(model, stream)?, ..TtlReport::default() };
    let mut adam = AdamState::new(cfg.adam);
    let mut predictions = Vec::new();
    let mut pending: Vec<(usize, f64)> = Vec::new();

    for (i, sample) in stream.iter().enumerate() {
        if cfg.max_new_tokens > 0 {
            predictions.push(predict(model, sample, cfg.max_new_tokens)?);
        }
        let eval = input_perplexity(model, &sample.input, GradMode::Frozen)?;
        let ppl = eval.ppl();
        let score = sample_weight(ppl, cfg);
        let backward = score > 0.0;
        if backward {
            pending.push((i, score));
            report.backward_count += 1;
        }
        report.records.push(StepRecord {
            sample_id: sample.id.clone(),
            index: i,
            input_ppl: ppl,
            score,
            backward_performed: backward,
            loss: score * eval.mean_nll,
            window_index: i / cfg.cadence,
        });

        if (i + 1) % cfg.cadence == 0 || i + 1 == stream.len() {
            for (j, score) in pending.drain(..) {
                let mut eval = input_perplexity(model, &stream[j].input, GradMode::Trainable)?;
                let loss = ttl_loss(&mut eval, score)?;
                if let Some(g) = loss.grads {
                    adam_step(&mut adam, &g, cfg.lr, model)?;
                    report.update_count += 1;
                }
            }
        }
    }
    report.mean_ppl_after = mean_input_perplexity(model, stream)?;
    Ok((report, predictions))
}

/// Dispatches on `cfg.mode`.
pub fn run<M: CausalLm + ?Sized>(
    model: &mut M,
    samples: &[Sample],
    cfg: &TtlConfig,
) -> Result<(TtlReport, Vec<Prediction>)> {
    match cfg.mode {
        Mode::Offline => run_offline(model, samples, cfg),
        Mode::Online => run_online(model, samples, cfg),
    }
}

/// Default continuation length of the entropy-minimization baseline.
pub const ENTROPY_BASELINE_TOKENS: usize = 80;

/// Mean predictive entropy over a greedily generated continuation of `x`,
/// with the graph retained for the backward step.
#[derive(Debug)]
pub struct EntropyEval {
    graph: Graph,
    entropy: Var,
    pub value: f64,
    pub generated: usize,
}

impl EntropyEval {
    pub fn gradients(&self) -> Result<Gradients> {
        self.graph.backward(self.entropy)
    }
}

/// Greedy-generate up to `n_tokens` after `x`, then measure the mean entropy
/// of the distributions each generated token was drawn from.
pub fn entropy_baseline_loss<M: CausalLm + ?Sized>(
    model: &M,
    x: &[TokenId],
    n_tokens: usize,
    mode: GradMode,
) -> Result<EntropyEval> {
    if n_tokens == 0 {
        return Err(Error::invalid("entropy baseline needs n_tokens >= 1"));
    }
    if x.is_empty() {
        return Err(Error::invalid("input is empty"));
    }
    let max = model.config().max_seq_len;
    let n = n_tokens.min(max - 1);
    let keep = x.len().min(max - n);
    let mut prompt = Vec::with_capacity(keep + 1);
    prompt.push(BOS);
    prompt.extend_from_slice(&x[x.len() - keep..]);
    let seq = greedy_generate(model, &prompt, n)?;
    let generated = seq.len() - prompt.len();
    // row r predicts token r + 1; the rows that produced the generated tokens
    let first = prompt.len() - 1;
    let rows: Vec<usize> = (first..first + generated.max(1)).collect();
    let feed = &seq[..first + generated.max(1)];
    let mut graph = Graph::new();
    let logits = model.logits(&mut graph, feed, mode)?;
    let entropy = graph.mean_row_entropy(logits, &rows)?;
    let value = graph.scalar(entropy);
    Ok(EntropyEval { graph, entropy, value, generated })
}

/// One baseline update on `x`; returns the entropy before the update.
pub fn entropy_baseline_step<M: CausalLm + ?Sized>(
    model: &mut M,
    adam: &mut AdamState,
    x: &[TokenId],
    n_tokens: usize,
    lr: f64,
) -> Result<f64> {
    let eval = entropy_baseline_loss(model, x, n_tokens, GradMode::Trainable)?;
    let grads = eval.gradients()?;
    adam_step(adam, &grads, lr, model)?;
    Ok(eval.value)
}

/// Offline entropy-minimization pass (one step per sample); returns the
/// per-sample entropies.
pub fn run_entropy_baseline<M: CausalLm + ?Sized>(
    model: &mut M,
    samples: &[Sample],
    lr: f64,
    n_tokens: usize,
    adam: AdamParams,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let mut state = AdamState::new(adam);
    samples.iter().map(|s| entropy_baseline_step(model, &mut state, &s.input, n_tokens, lr)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GlobalWeight, LanguageModel, ModelConfig, WeightSlot};

    fn tiny() -> LanguageModel {
        LanguageModel::new(ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 24,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn cfg(lambda: f64, p0: f64) -> TtlConfig {
        TtlConfig { lambda, p0, ..TtlConfig::default() }
    }

    #[test]
    fn score_below_and_at_threshold_is_zero() {
        let c = cfg(0.1, 3f64.exp());
        assert_eq!(selection_score(2f64.exp(), &c), 0.0);
        assert_eq!(selection_score(3f64.exp(), &c), 0.0);
    }

    #[test]
    fn score_above_threshold() {
        let c = cfg(0.1, 3f64.exp());
        let s = selection_score(4f64.exp(), &c);
        assert!((s - 0.1 * 1f64.exp()).abs() < 1e-12);
        assert!((s - 0.27183).abs() < 1e-5);
    }

    #[test]
    fn score_clamps_at_hundred_lambda() {
        let mut c = cfg(0.1, 1.0);
        assert!((selection_score(1e6, &c) - 10.0).abs() < 1e-12);
        c.clamp_score = false;
        assert!((selection_score(1e6, &c) - 1e5).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(TtlConfig::default().validate().is_ok());
        assert!(TtlConfig { p0: 0.5, ..TtlConfig::default() }.validate().is_err());
        assert!(TtlConfig { lambda: -1.0, ..TtlConfig::default() }.validate().is_err());
        assert!(TtlConfig { cadence: 0, ..TtlConfig::default() }.validate().is_err());
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let mut m = tiny();
        m.weight_mut(WeightSlot::Global(GlobalWeight::OutputHead)).fill(0.0);
        let e = input_perplexity(&m, &[1, 2, 3, 4], GradMode::Frozen).unwrap();
        assert!((e.ppl() - 258.0).abs() < 1e-9);
        let c = conditional_perplexity(&m, &[1, 2], &[3], GradMode::Frozen).unwrap();
        assert!((c.ppl() - 258.0).abs() < 1e-9);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let m = tiny();
        assert!(input_perplexity(&m, &[], GradMode::Frozen).is_err());
        assert!(conditional_perplexity(&m, &[], &[1], GradMode::Frozen).is_err());
        assert!(conditional_perplexity(&m, &[1], &[], GradMode::Frozen).is_err());
    }

    #[test]
    fn scoring_window_truncation() {
        let (inp, tgt) = scoring_window(4, &[], &[1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(inp, vec![BOS, 3, 4, 5]);
        assert_eq!(tgt, vec![Some(3), Some(4), Some(5), Some(6)]);
        let (inp, tgt) = scoring_window(4, &[1, 2, 3], &[7, 8]).unwrap();
        assert_eq!(inp, vec![BOS, 2, 3, 7]);
        assert_eq!(tgt, vec![None, None, Some(7), Some(8)]);
        assert!(scoring_window(4, &[1], &[7, 8, 9, 10]).is_err());
    }

    #[test]
    fn zero_weight_skips_backward() {
        let m = tiny();
        let mut e = input_perplexity(&m, &[5, 6, 7], GradMode::Trainable).unwrap();
        let l = ttl_loss(&mut e, 0.0).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grads.is_none());
    }

    #[test]
    fn unit_weight_loss_is_log_perplexity() {
        let m = tiny();
        let mut e = input_perplexity(&m, &[5, 6, 7], GradMode::Trainable).unwrap();
        let ppl = e.ppl();
        let l = ttl_loss(&mut e, 1.0).unwrap();
        assert!((l.value - ppl.ln()).abs() < 1e-12);
    }

    #[test]
    fn online_rejects_empty_stream() {
        let mut m = tiny();
        assert!(run_online(&mut m, &[], &TtlConfig::default()).is_err());
        assert!(run_offline(&mut m, &[], &TtlConfig::default()).is_err());
    }

    #[test]
    fn entropy_of_uniform_model_is_ln_vocab() {
        let mut m = tiny();
        m.weight_mut(WeightSlot::Global(GlobalWeight::OutputHead)).fill(0.0);
        let e = entropy_baseline_loss(&m, &[1, 2], 5, GradMode::Frozen).unwrap();
        assert!((e.value - 258f64.ln()).abs() < 1e-12);
        assert_eq!(e.generated, 5);
    }
}
