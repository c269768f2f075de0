use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use dive_core::pipeline::commands as cmd;
use dive_core::pipeline::RunConfig;
use dive_core::synthtask::Split;
use dive_core::Error;

/// Train and evaluate steering adapters distilled from a frozen backbone's
/// few-shot behavior.
///
/// Every stage writes into a subdirectory of the run directory given by
/// `--out` and reads its inputs from the sibling stages unless overridden.
#[derive(Parser)]
#[command(name = "dive", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; omitted fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs/default")]
    out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Replace an existing stage output.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct Inputs {
    /// Dataset directory [default: <out>/data]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Backbone directory [default: <out>/backbone]
    #[arg(long, value_name = "DIR")]
    backbone: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Distill,
    Pool,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Distill => Split::Distill,
            SplitArg::Pool => Split::Pool,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct Inference {
    #[command(flatten)]
    inputs: Inputs,
    /// Adapter directory [default: <out>/adapters]
    #[arg(long, value_name = "DIR", conflicts_with = "zero_shot")]
    adapters: Option<PathBuf>,
    /// Run the bare backbone without adapters.
    #[arg(long)]
    zero_shot: bool,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset, vocabulary and phrase lexicon.
    GenData,
    /// Pretrain the backbone on synthetic episodes.
    Pretrain,
    /// Cache the backbone's few-shot top-K logits on the distill and val splits.
    CacheTeacher {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Train steering adapters against the teacher cache.
    Distill {
        #[command(flatten)]
        inputs: Inputs,
        /// Teacher cache directory [default: <out>/cache]
        #[arg(long, value_name = "DIR")]
        cache: Option<PathBuf>,
    },
    /// Generate reports from queries alone.
    Generate(Inference),
    /// Score generations and profile EOS probability.
    Evaluate {
        #[command(flatten)]
        inference: Inference,
        /// Generations directory [default: <out>/generations]
        #[arg(long, value_name = "DIR")]
        generations: Option<PathBuf>,
    },
    /// Train and evaluate the ablation rows over every configured seed.
    Ablate {
        #[command(flatten)]
        inputs: Inputs,
        /// Teacher cache directory [default: <out>/cache]
        #[arg(long, value_name = "DIR")]
        cache: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> dive_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config {
                field: "--config".into(),
                message: format!("{}: {e}", p.display()),
            })?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.override_seed(s);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn or_default(p: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| out.join(name))
}

fn run(cli: Cli) -> dive_core::Result<()> {
    let c = &cli.common;
    rayon::ThreadPoolBuilder::new()
        .num_threads(c.threads)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let cfg = load_config(c)?;
    let out = &c.out;
    let data = |i: &Inputs| or_default(&i.data, out, "data");
    let backbone = |i: &Inputs| or_default(&i.backbone, out, "backbone");
    match &cli.command {
        Command::GenData => {
            let m = cmd::cmd_gen_data(&cfg, &out.join("data"), c.overwrite)?;
            info!("dataset written ({} files)", m.outputs.len());
        }
        Command::Pretrain => {
            let steps = cfg.pretrain.steps;
            let (_, r) = cmd::cmd_pretrain(&cfg, &out.join("backbone"), c.overwrite, |step, loss| {
                if step % 100 == 0 || step + 1 == steps {
                    info!("step {step}/{steps} loss {loss:.4}");
                }
            })?;
            info!("pretraining done, final loss {:.4}", r.meta.final_loss);
        }
        Command::CacheTeacher { inputs } => {
            let skipped = cmd::cmd_cache(&cfg, &data(inputs), &backbone(inputs), &out.join("cache"), c.overwrite)?;
            info!("teacher cache written, {skipped} cases skipped for context overflow");
        }
        Command::Distill { inputs, cache } => {
            let r = cmd::cmd_distill(
                &cfg,
                &data(inputs),
                &backbone(inputs),
                &or_default(cache, out, "cache"),
                &out.join("adapters"),
                c.overwrite,
            )?;
            if let (Some(a), Some(b)) = (&r.initial_val, &r.final_val) {
                info!("distilled: val objective {:.4} -> {:.4}", a.loss, b.loss);
            }
        }
        Command::Generate(inf) => {
            let adapters = (!inf.zero_shot).then(|| or_default(&inf.adapters, out, "adapters"));
            let n = cmd::cmd_generate(
                &cfg,
                &data(&inf.inputs),
                &backbone(&inf.inputs),
                adapters.as_deref(),
                inf.split.into(),
                &out.join("generations"),
                c.overwrite,
            )?;
            info!("{n} reports generated");
        }
        Command::Evaluate { inference: inf, generations } => {
            let adapters = (!inf.zero_shot).then(|| or_default(&inf.adapters, out, "adapters"));
            let r = cmd::cmd_evaluate(
                &cfg,
                &data(&inf.inputs),
                &backbone(&inf.inputs),
                adapters.as_deref(),
                &or_default(generations, out, "generations"),
                inf.split.into(),
                &out.join("eval"),
                c.overwrite,
            )?;
            println!(
                "BLEU-1 {:.2}  BLEU-4 {:.2}  ROUGE-L {:.2}  finding F1 {:.2}  |dLen| {:.2}  proper {:.1}%",
                r.bleu1, r.bleu4, r.rouge_l, r.finding.f1, r.length.mae_delta, r.length.proper
            );
        }
        Command::Ablate { inputs, cache } => {
            cmd::cmd_ablate(
                &cfg,
                &data(inputs),
                &backbone(inputs),
                &or_default(cache, out, "cache"),
                &out.join("ablation"),
                c.overwrite,
                |r| {
                    println!(
                        "{:<20} seed {}  BLEU-4 {:6.2}  ROUGE-L {:6.2}  F1 {:6.2}  |dLen| {:6.2}  proper {:5.1}%",
                        r.id, r.seed, r.report.bleu4, r.report.rouge_l, r.report.finding.f1,
                        r.report.length.mae_delta, r.report.length.proper
                    )
                },
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
