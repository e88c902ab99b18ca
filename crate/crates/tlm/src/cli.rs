use std::env;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tlm_core::ttl::Mode;

use crate::config::RunConfig;
use crate::error::{Result, TlmError};
use crate::job::{execute, replay, Diagnostic, Domain, Job, Manifest};

/// Relative `--out` directories resolve under this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "TLM_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "tlm", version, about = "Test-time learning on a small byte-level language model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat JSON config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints, reports and the run manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override any config key, e.g. `--set lr=0.003`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args, Default)]
pub struct TtlFlags {
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub p0: Option<f64>,
    /// Set P₀ to this quantile of the frozen model's input perplexities.
    #[arg(long)]
    pub p0_quantile: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub cadence: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight every sample 1 instead of using the selection score.
    #[arg(long)]
    pub no_selection: bool,
    #[arg(long)]
    pub no_clamp: bool,
    /// Train all base weights instead of a LoRA adapter.
    #[arg(long)]
    pub full_parameter: bool,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    match s {
        "offline" => Ok(Mode::Offline),
        "online" => Ok(Mode::Online),
        _ => Err(format!("expected offline or online, got {s:?}")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic domain corpus as JSONL.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        domain: Domain,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Fixes the domain's distribution (defaults to --seed).
        #[arg(long)]
        domain_seed: Option<u64>,
        /// Fixes which records are drawn (defaults to the domain seed).
        #[arg(long)]
        sample_seed: Option<u64>,
    },
    /// Train a base model from scratch on one or more corpora.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Test-time learning on unlabeled inputs.
    Ttl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        flags: TtlFlags,
    },
    /// Perplexities, ROUGE-Lsum and exact match of a model (plus adapter).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Diagnostics of why input-perplexity minimization helps outputs.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum)]
        kind: Diagnostic,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Source-domain records (forgetting only).
        #[arg(long)]
        source_data: Option<PathBuf>,
        #[command(flatten)]
        flags: TtlFlags,
    },
    /// Entropy-minimization adaptation baseline.
    BaselineEntropy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Re-run a recorded job from its manifest into a new directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn output_dir(out: &Path) -> PathBuf {
    match env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if out.is_relative() => Path::new(&root).join(out),
        _ => out.to_path_buf(),
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| TlmError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn apply_ttl_flags(cfg: &mut RunConfig, f: &TtlFlags) {
    if let Some(m) = f.mode {
        cfg.mode = m;
    }
    if let Some(v) = f.p0 {
        cfg.p0 = v;
    }
    if f.p0_quantile.is_some() {
        cfg.p0_quantile = f.p0_quantile;
    }
    if let Some(v) = f.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = f.lr {
        cfg.lr = v;
    }
    if let Some(v) = f.cadence {
        cfg.cadence = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.max_new_tokens {
        cfg.max_new_tokens = v;
    }
    cfg.selection_enabled &= !f.no_selection;
    cfg.clamp_score &= !f.no_clamp;
    cfg.full_parameter |= f.full_parameter;
}

/// Turns parsed arguments into a job, its config and the output directory.
pub fn plan(command: Command) -> Result<Option<(Job, RunConfig, PathBuf)>> {
    let (job, cfg, out) = match command {
        Command::Replay { .. } => return Ok(None),
        Command::GenCorpus { common, domain, n, domain_seed, sample_seed } => {
            let cfg = base_config(&common)?;
            let domain_seed = domain_seed.unwrap_or(cfg.seed);
            let job = Job::GenCorpus {
                domain,
                n_records: n,
                domain_seed,
                sample_seed: sample_seed.unwrap_or(domain_seed),
            };
            (job, cfg, common.out)
        }
        Command::Pretrain { common, corpora, steps } => {
            let mut cfg = base_config(&common)?;
            if let Some(s) = steps {
                cfg.pretrain_steps = s;
            }
            (Job::Pretrain { corpora }, cfg, common.out)
        }
        Command::Ttl { common, model, data, flags } => {
            let mut cfg = base_config(&common)?;
            apply_ttl_flags(&mut cfg, &flags);
            (Job::Ttl { model, data }, cfg, common.out)
        }
        Command::Eval { common, model, adapter, data, max_new_tokens } => {
            let mut cfg = base_config(&common)?;
            if let Some(v) = max_new_tokens {
                cfg.max_new_tokens = v;
            }
            (Job::Eval { model, adapter, data }, cfg, common.out)
        }
        Command::Diagnose { common, kind, model, data, source_data, flags } => {
            let mut cfg = base_config(&common)?;
            apply_ttl_flags(&mut cfg, &flags);
            if kind == Diagnostic::Forgetting && source_data.is_none() {
                return Err(TlmError::Usage("diagnose forgetting needs --source-data".into()));
            }
            (Job::Diagnose { kind, model, data, source_data }, cfg, common.out)
        }
        Command::BaselineEntropy { common, model, data, lr, tokens } => {
            let mut cfg = base_config(&common)?;
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if let Some(v) = tokens {
                cfg.entropy_tokens = v;
            }
            (Job::BaselineEntropy { model, data }, cfg, common.out)
        }
    };
    Ok(Some((job, cfg, output_dir(&out))))
}

pub fn run(cli: Cli) -> Result<Manifest> {
    if let Command::Replay { manifest, out } = &cli.command {
        return replay(manifest, &output_dir(out));
    }
    let (job, cfg, out) = plan(cli.command)?.expect("non-replay commands produce a job");
    execute(&job, &cfg, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("tlm").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn ttl_flags_override_defaults() {
        let cli = parse(&[
            "ttl", "--out", "o", "--model", "m", "--data", "d", "--mode", "offline", "--p0", "7.5e0", "--lambda", "0.1",
        ]);
        let (job, cfg, _) = plan(cli.command).unwrap().unwrap();
        assert!(matches!(job, Job::Ttl { .. }));
        assert_eq!(cfg.p0, 7.5);
        assert_eq!(cfg.lambda, 0.1);
        assert_eq!(cfg.mode, Mode::Offline);
    }

    #[test]
    fn unknown_flags_and_modes_are_usage_errors() {
        assert!(Cli::try_parse_from(["tlm", "ttl", "--out", "o", "--model", "m", "--data", "d", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["tlm", "ttl", "--out", "o", "--model", "m", "--data", "d", "--mode", "x"]).is_err());
    }

    #[test]
    fn set_requires_key_value() {
        let cli = parse(&["pretrain", "--out", "o", "--corpus", "c", "--set", "lr"]);
        assert!(matches!(plan(cli.command), Err(TlmError::Usage(_))));
        let cli = parse(&["pretrain", "--out", "o", "--corpus", "c", "--set", "pretrain_lr=0.01", "--steps", "0"]);
        let (_, cfg, _) = plan(cli.command).unwrap().unwrap();
        assert_eq!(cfg.pretrain_lr, 0.01);
        assert_eq!(cfg.pretrain_steps, 0);
    }

    #[test]
    fn forgetting_requires_source() {
        let cli = parse(&["diagnose", "forgetting", "--out", "o", "--model", "m", "--data", "d"]);
        assert!(matches!(plan(cli.command), Err(TlmError::Usage(_))));
    }
}
