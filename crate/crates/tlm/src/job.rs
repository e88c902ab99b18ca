//! Executable jobs behind each subcommand, and the manifests that let a run
//! be repeated exactly.
//!
//! A manifest stores the job (including its input paths) and the complete
//! resolved config. Replaying it into a fresh output directory reproduces
//! every report byte for byte: all randomness flows from seeds in the config
//! and nothing time- or path-dependent is written into reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use tlm_core::corpus::{generate_domain_corpus, pretraining_documents, to_samples, DomainSpec, Record};
use tlm_core::diagnostics::{
    forgetting_eval, gradient_statistics, sample_contribution_study, taylor_residual, trend_during_ttl, QaPair,
    LLM_SCALE_MEAN_INNER_PRODUCT, LLM_SCALE_NONNEGATIVE_FRACTION,
};
use tlm_core::lora::{attach, AdaptedModel};
use tlm_core::metrics::{exact_match, rouge_l_sum};
use tlm_core::model::{decode_lossy, pretrain, CausalLm, GradMode};
use tlm_core::ttl::{
    conditional_perplexity, input_perplexity, mean_input_perplexity, predict, run, run_entropy_baseline, Mode,
    Prediction, Sample, TtlConfig,
};

use crate::checkpoint::{load_adapter, load_model, save_adapter, save_model};
use crate::config::RunConfig;
use crate::error::{Result, TlmError};
use crate::jsonl::{load_jsonl, write_jsonl};
use crate::report::{self, TtlSummary};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    SourceMarkov,
    SourceQa,
    TargetQa,
}

impl Domain {
    pub fn spec(self, seed: u64) -> DomainSpec {
        match self {
            Domain::SourceMarkov => DomainSpec::source_markov(seed),
            Domain::SourceQa => DomainSpec::source_qa(seed),
            Domain::TargetQa => DomainSpec::target_qa(seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Diagnostic {
    CrossGrad,
    Taylor,
    Trend,
    Contribution,
    Forgetting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    GenCorpus { domain: Domain, n_records: usize, domain_seed: u64, sample_seed: u64 },
    Pretrain { corpora: Vec<PathBuf> },
    Ttl { model: PathBuf, data: PathBuf },
    Eval { model: PathBuf, adapter: Option<PathBuf>, data: PathBuf },
    Diagnose { kind: Diagnostic, model: PathBuf, data: PathBuf, source_data: Option<PathBuf> },
    BaselineEntropy { model: PathBuf, data: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub job: Job,
    pub config: RunConfig,
    /// Output file name → path, relative to the output directory.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TlmError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TlmError::format(path, format!("manifest: {e}")))
    }
}

/// Collects outputs as they are written.
struct Outputs<'a> {
    dir: &'a Path,
    files: BTreeMap<String, String>,
}

impl<'a> Outputs<'a> {
    fn path(&mut self, key: &str, file: &str) -> PathBuf {
        self.files.insert(key.to_string(), file.to_string());
        self.dir.join(file)
    }
}

fn load_records(path: &Path) -> Result<Vec<Record>> {
    let corpus = load_jsonl(path)?;
    for s in &corpus.skipped {
        eprintln!("{}:{}: skipped: {}", path.display(), s.line, s.reason);
    }
    if corpus.records.is_empty() {
        return Err(TlmError::format(path, "no usable records"));
    }
    Ok(corpus.records)
}

fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    Ok(to_samples(&load_records(path)?))
}

/// `q`-quantile (nearest rank) of the frozen model's input perplexities.
pub fn perplexity_quantile<M: CausalLm + ?Sized>(model: &M, samples: &[Sample], q: f64) -> Result<f64> {
    let mut ppls = samples
        .iter()
        .map(|s| Ok(input_perplexity(model, &s.input, GradMode::Frozen)?.ppl()))
        .collect::<Result<Vec<f64>>>()?;
    ppls.sort_by(f64::total_cmp);
    let idx = (q * (ppls.len() - 1) as f64).round() as usize;
    Ok(ppls[idx])
}

/// TTL settings with any `p0_quantile` resolved against `samples`.
pub fn resolve_ttl<M: CausalLm + ?Sized>(cfg: &RunConfig, model: &M, samples: &[Sample]) -> Result<TtlConfig> {
    let mut ttl = cfg.ttl();
    if let Some(q) = cfg.p0_quantile {
        ttl.p0 = perplexity_quantile(model, samples, q)?.max(1.0);
    }
    Ok(ttl)
}

fn write_predictions(samples: &[Sample], preds: &[Prediction], path: &Path) -> Result<()> {
    let by_id: BTreeMap<&str, &Prediction> = preds.iter().map(|p| (p.sample_id.as_str(), p)).collect();
    let records: Vec<Record> = samples
        .iter()
        .filter_map(|s| by_id.get(s.id.as_str()))
        .map(|p| Record { id: p.sample_id.clone(), instruction: None, input: String::new(), output: decode_lossy(&p.tokens) })
        .collect();
    write_jsonl(&records, path)
}

fn load_adapted(model: &Path, adapter: &Path) -> Result<AdaptedModel> {
    let base = load_model(model)?;
    let (lora, checksum) = load_adapter(adapter)?;
    if checksum != base.checksum() {
        return Err(TlmError::Config(format!(
            "{} was trained against a different base model than {}",
            adapter.display(),
            model.display()
        )));
    }
    Ok(AdaptedModel::from_parts(base, lora)?)
}

fn ttl_job<M: CausalLm>(model: &mut M, samples: &[Sample], cfg: &RunConfig, out: &mut Outputs) -> Result<TtlSummary> {
    let ttl = resolve_ttl(cfg, model, samples)?;
    let (report, preds) = run(model, samples, &ttl)?;
    report::write_ttl_steps(&report, &out.path("report", "report.csv"))?;
    if ttl.max_new_tokens > 0 {
        write_predictions(samples, &preds, &out.path("predictions", "predictions.jsonl"))?;
    }
    Ok(TtlSummary {
        mode: format!("{:?}", ttl.mode).to_lowercase(),
        p0: ttl.p0,
        samples: samples.len(),
        backward_count: report.backward_count,
        update_count: report.update_count,
        mean_ppl_before: report.mean_ppl_before,
        mean_ppl_after: report.mean_ppl_after,
        window_selection_fractions: (ttl.mode == Mode::Online).then(|| report.window_selection_fractions()),
    })
}

#[derive(Serialize)]
struct EvalSummary {
    samples: usize,
    mean_input_ppl: f64,
    mean_output_ppl: Option<f64>,
    rouge_lsum: Option<f64>,
    exact_match: Option<f64>,
}

fn eval_job<M: CausalLm + ?Sized>(model: &M, samples: &[Sample], cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let mut rows = Vec::new();
    let (mut out_ppl, mut rouge, mut em, mut n_ref) = (0.0, 0.0, 0.0, 0usize);
    let mut in_ppl = 0.0;
    for s in samples {
        let ip = input_perplexity(model, &s.input, GradMode::Frozen)?.ppl();
        in_ppl += ip;
        let pred = predict(model, s, cfg.max_new_tokens)?;
        let text = decode_lossy(&pred.tokens);
        let mut row = vec![s.id.clone(), ip.to_string(), String::new(), String::new(), String::new(), text.clone()];
        if let Some(y) = &s.reference {
            let op = conditional_perplexity(model, &s.input, y, GradMode::Frozen)?.ppl();
            let reference = decode_lossy(y);
            let (r, e) = (rouge_l_sum(&text, &reference), exact_match(&text, &reference));
            out_ppl += op;
            rouge += r;
            em += e;
            n_ref += 1;
            row[2] = op.to_string();
            row[3] = r.to_string();
            row[4] = e.to_string();
        }
        rows.push(row);
    }
    report::write_csv(
        &out.path("eval_records", "eval.csv"),
        &["sample_id", "input_ppl", "output_ppl", "rouge_lsum", "exact_match", "prediction"],
        rows,
    )?;
    let mean = |v: f64| (n_ref > 0).then(|| v / n_ref as f64);
    let summary = EvalSummary {
        samples: samples.len(),
        mean_input_ppl: in_ppl / samples.len() as f64,
        mean_output_ppl: mean(out_ppl),
        rouge_lsum: mean(rouge),
        exact_match: mean(em),
    };
    report::write_json(&summary, &out.path("eval_summary", "eval.json"))
}

fn qa_pairs(samples: &[Sample], path: &Path) -> Result<Vec<QaPair>> {
    let pairs: Vec<QaPair> = samples.iter().filter_map(QaPair::from_sample).collect();
    if pairs.is_empty() {
        return Err(TlmError::format(path, "diagnostic needs records with outputs"));
    }
    Ok(pairs)
}

fn diagnose_job(
    kind: Diagnostic,
    model_path: &Path,
    data: &Path,
    source_data: Option<&Path>,
    cfg: &RunConfig,
    out: &mut Outputs,
) -> Result<()> {
    let base = load_model(model_path)?;
    let samples = load_samples(data)?;
    let adapted = attach(base.clone(), cfg.lora())?;
    let stem = match kind {
        Diagnostic::CrossGrad => "cross_grad",
        Diagnostic::Taylor => "taylor",
        Diagnostic::Trend => "trend",
        Diagnostic::Contribution => "contribution",
        Diagnostic::Forgetting => "forgetting",
    };
    let csv = out.path("series", &format!("{stem}.csv"));
    let summary_path = out.path("summary", &format!("{stem}.json"));
    match kind {
        Diagnostic::CrossGrad => {
            let pairs = qa_pairs(&samples, data)?;
            let batches: Vec<Vec<QaPair>> = pairs.chunks(cfg.cross_grad_batch_size).map(<[_]>::to_vec).collect();
            let diag = if cfg.full_theta {
                gradient_statistics(&base, &batches)?
            } else {
                gradient_statistics(&adapted, &batches)?
            };
            report::write_cross_gradient(&diag, &csv)?;
            report::write_json(
                &json!({
                    "batches": batches.len(),
                    "full_theta": cfg.full_theta,
                    "fraction_nonnegative": diag.fraction_nonnegative,
                    "mean_inner_product": diag.mean_inner_product,
                    "reference_fraction_nonnegative": LLM_SCALE_NONNEGATIVE_FRACTION,
                    "reference_mean_inner_product": LLM_SCALE_MEAN_INNER_PRODUCT,
                }),
                &summary_path,
            )
        }
        Diagnostic::Taylor => {
            let pairs = qa_pairs(&samples, data)?;
            let mut rows = Vec::new();
            for (s, p) in samples.iter().filter(|s| s.reference.is_some()).zip(&pairs) {
                for k in 0..3 {
                    let eta = cfg.taylor_eta / f64::from(1 << k);
                    rows.push((s.id.clone(), taylor_residual(&adapted, p, eta)?));
                }
            }
            let shrinking = rows.chunks(3).filter(|r| r[1].1.residual <= 0.5 * r[0].1.residual && r[2].1.residual <= 0.5 * r[1].1.residual).count();
            report::write_taylor(&rows, &csv)?;
            report::write_json(
                &json!({ "pairs": pairs.len(), "eta": cfg.taylor_eta, "pairs_with_quadratic_shrinkage": shrinking }),
                &summary_path,
            )
        }
        Diagnostic::Trend => {
            let pairs: Vec<Sample> = samples.into_iter().filter(|s| s.reference.is_some()).collect();
            let n_eval = ((pairs.len() as f64 * cfg.trend_eval_fraction).round() as usize).clamp(1, pairs.len() - 1);
            let (train, eval) = pairs.split_at(pairs.len() - n_eval);
            let ttl = resolve_ttl(cfg, &adapted, train)?;
            let trend = trend_during_ttl(&adapted, train, eval, &ttl, cfg.trend_every)?;
            report::write_trend(&trend, &csv)?;
            report::write_json(&trend, &summary_path)
        }
        Diagnostic::Contribution => {
            let ttl = resolve_ttl(cfg, &adapted, &samples)?;
            let study = sample_contribution_study(&adapted, &samples, &cfg.contribution_fractions, &ttl)?;
            report::write_contribution(&study, &csv)?;
            report::write_json(&study, &summary_path)
        }
        Diagnostic::Forgetting => {
            let source_path = source_data.ok_or_else(|| TlmError::Usage("forgetting needs --source-data".into()))?;
            let source = load_samples(source_path)?;
            let ttl = resolve_ttl(cfg, &base, &samples)?;
            let rep = forgetting_eval(&base, &cfg.lora(), &source, &samples, &cfg.forgetting_budgets, &ttl)?;
            report::write_forgetting(&rep, &csv)?;
            report::write_json(
                &json!({
                    "report": rep,
                    "lora_degradation": rep.lora_degradation(),
                    "full_degradation": rep.full_degradation(),
                }),
                &summary_path,
            )
        }
    }
}

/// Runs `job` into `out_dir` (created if needed) and writes its manifest.
pub fn execute(job: &Job, cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| TlmError::io(out_dir, e))?;
    let mut out = Outputs { dir: out_dir, files: BTreeMap::new() };
    match job {
        Job::GenCorpus { domain, n_records, domain_seed, sample_seed } => {
            let spec = domain.spec(*domain_seed).with_sample_seed(*sample_seed);
            let records = generate_domain_corpus(&spec, *n_records)?;
            write_jsonl(&records, &out.path("corpus", "corpus.jsonl"))?;
        }
        Job::Pretrain { corpora } => {
            if corpora.is_empty() {
                return Err(TlmError::Usage("pretrain needs at least one --corpus".into()));
            }
            let mut docs = Vec::new();
            for c in corpora {
                docs.extend(pretraining_documents(&load_records(c)?));
            }
            let (model, rep) = pretrain(&cfg.model(), &docs, &cfg.pretrain())?;
            save_model(&model, &out.path("model", "model.ckpt"))?;
            report::write_csv(
                &out.path("losses", "pretrain_losses.csv"),
                &["step", "loss"],
                rep.losses.iter().enumerate().map(|(i, l)| vec![i.to_string(), l.to_string()]),
            )?;
            report::write_json(
                &json!({
                    "steps": rep.losses.len(),
                    "initial_nll": rep.initial_nll,
                    "final_nll": rep.final_nll,
                    "parameters": model.num_parameters(),
                    "checksum": model.checksum(),
                }),
                &out.path("summary", "pretrain.json"),
            )?;
        }
        Job::Ttl { model, data } => {
            let base = load_model(model)?;
            let samples = load_samples(data)?;
            let summary = if cfg.full_parameter {
                let mut m = base;
                let s = ttl_job(&mut m, &samples, cfg, &mut out)?;
                save_model(&m, &out.path("model", "model.ckpt"))?;
                s
            } else {
                let checksum = base.checksum();
                let mut m = attach(base, cfg.lora())?;
                let s = ttl_job(&mut m, &samples, cfg, &mut out)?;
                save_adapter(m.adapter(), m.base().config(), checksum, &out.path("adapter", "adapter.lora"))?;
                s
            };
            report::write_json(&summary, &out.path("summary", "summary.json"))?;
        }
        Job::Eval { model, adapter, data } => {
            let samples = load_samples(data)?;
            match adapter {
                Some(a) => eval_job(&load_adapted(model, a)?, &samples, cfg, &mut out)?,
                None => eval_job(&load_model(model)?, &samples, cfg, &mut out)?,
            }
        }
        Job::Diagnose { kind, model, data, source_data } => {
            diagnose_job(*kind, model, data, source_data.as_deref(), cfg, &mut out)?;
        }
        Job::BaselineEntropy { model, data } => {
            let base = load_model(model)?;
            let checksum = base.checksum();
            let samples = load_samples(data)?;
            let mut m = attach(base, cfg.lora())?;
            let before = mean_input_perplexity(&m, &samples)?;
            let entropies = run_entropy_baseline(&mut m, &samples, cfg.lr, cfg.entropy_tokens, cfg.adam())?;
            let after = mean_input_perplexity(&m, &samples)?;
            report::write_csv(
                &out.path("report", "entropy.csv"),
                &["sample_id", "entropy"],
                samples.iter().zip(&entropies).map(|(s, e)| vec![s.id.clone(), e.to_string()]),
            )?;
            save_adapter(m.adapter(), m.base().config(), checksum, &out.path("adapter", "adapter.lora"))?;
            report::write_json(
                &json!({
                    "samples": samples.len(),
                    "entropy_tokens": cfg.entropy_tokens,
                    "mean_ppl_before": before,
                    "mean_ppl_after": after,
                }),
                &out.path("summary", "summary.json"),
            )?;
        }
    }
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        job: job.clone(),
        config: cfg.clone(),
        outputs: out.files,
    };
    report::write_json(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Re-executes the job recorded in `manifest` into `out_dir`.
pub fn replay(manifest: &Path, out_dir: &Path) -> Result<Manifest> {
    let m = Manifest::load(manifest)?;
    execute(&m.job, &m.config, out_dir)
}
