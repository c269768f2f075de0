//! File-level commands. Each writes into its own output directory together
//! with a manifest, and checks the manifests of its inputs.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::RunConfig;
use super::manifest::RunManifest;
use super::stages::{self, Query};
use crate::backbone::{pretrain, Backbone, PretrainReport};
use crate::distill::TeacherCache;
use crate::error::{Error, Result};
use crate::evalkit::{self, all_configs, cumulative_configs, objective_configs, AblationConfig, CSV_HEADER};
use crate::steering::AdapterSet;
use crate::synthtask::io::{read_dataset, write_dataset};
use crate::synthtask::{make_splits, Split, Splits, Vocab};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LEXICON_FILE: &str = "lexicon.toml";
pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.jsonl";
pub const CACHE_FILE: &str = "teacher.cache";
pub const SKIPPED_FILE: &str = "skipped.json";
pub const ADAPTER_FILE: &str = "adapters.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const PROFILE_FILE: &str = "eos_profile.jsonl";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_PROFILES: &str = "ablation_profiles.jsonl";

/// An output directory being written.
pub struct Output {
    pub dir: PathBuf,
    manifest: RunManifest,
    start: Instant,
}

impl Output {
    /// Creates `dir`; refuses a directory that already holds a manifest unless
    /// `overwrite` is set.
    pub fn create(dir: &Path, command: &str, cfg: &RunConfig, overwrite: bool) -> Result<Self> {
        if dir.join(super::manifest::MANIFEST_FILE).exists() && !overwrite {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
        fs::create_dir_all(dir)?;
        Ok(Output {
            dir: dir.to_path_buf(),
            manifest: RunManifest::new(command, cfg),
            start: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn writer(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    /// Records an input artifact by its verified hash.
    pub fn input(&mut self, label: &str, hash: String) {
        self.manifest.inputs.insert(label.to_string(), hash);
    }

    pub fn finish(mut self, outputs: &[&str]) -> Result<RunManifest> {
        for name in outputs {
            self.manifest.record_output(&self.dir, name)?;
        }
        self.manifest.wall_seconds = self.start.elapsed().as_secs_f64();
        self.manifest.write(&self.dir)?;
        Ok(self.manifest)
    }
}

/// Opens an upstream artifact after checking it against its manifest.
/// Returns the path and its hash.
fn verified(dir: &Path, name: &str) -> Result<(PathBuf, String)> {
    let m = RunManifest::load(dir)?;
    let h = m.verify_output(dir, name)?;
    Ok((dir.join(name), h))
}

fn jsonl<T: serde::Serialize>(mut w: impl Write, rows: impl IntoIterator<Item = T>) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path, out: Option<&mut Output>) -> Result<Splits> {
    let (p, h) = verified(dir, DATASET_FILE)?;
    if let Some(o) = out {
        o.input(&format!("{}", p.display()), h);
    }
    read_dataset(BufReader::new(File::open(p)?))
}

pub fn load_backbone(dir: &Path, cfg: &RunConfig, out: Option<&mut Output>) -> Result<Backbone> {
    let (p, h) = verified(dir, BACKBONE_FILE)?;
    if let Some(o) = out {
        o.input(&format!("{}", p.display()), h);
    }
    Ok(Backbone::load(BufReader::new(File::open(p)?), Some(&cfg.backbone))?.0)
}

pub fn load_cache(dir: &Path, out: Option<&mut Output>) -> Result<TeacherCache> {
    let (p, h) = verified(dir, CACHE_FILE)?;
    if let Some(o) = out {
        o.input(&format!("{}", p.display()), h);
    }
    TeacherCache::load(BufReader::new(File::open(p)?))
}

pub fn load_adapters(dir: &Path, out: Option<&mut Output>) -> Result<AdapterSet> {
    let (p, h) = verified(dir, ADAPTER_FILE)?;
    if let Some(o) = out {
        o.input(&format!("{}", p.display()), h);
    }
    AdapterSet::load(BufReader::new(File::open(p)?))
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<RunManifest> {
    let o = Output::create(out, "gen-data", cfg, overwrite)?;
    let splits = make_splits(&cfg.task)?;
    write_dataset(o.writer(DATASET_FILE)?, &splits)?;
    let vocab = Vocab::new(cfg.task.layout()?);
    fs::write(o.path(VOCAB_FILE), vocab.to_sidecar())?;
    let lex = stages::task_lexicon(cfg)?;
    fs::write(o.path(LEXICON_FILE), lex.lexicon.to_toml(&vocab))?;
    o.finish(&[DATASET_FILE, VOCAB_FILE, LEXICON_FILE])
}

pub fn cmd_pretrain(
    cfg: &RunConfig,
    out: &Path,
    overwrite: bool,
    progress: impl FnMut(usize, f64),
) -> Result<(Backbone, PretrainReport)> {
    let o = Output::create(out, "pretrain", cfg, overwrite)?;
    let (model, report) = pretrain(cfg.backbone, &cfg.task, &cfg.pretrain, progress)?;
    model.save(o.writer(BACKBONE_FILE)?, &report.meta)?;
    jsonl(
        o.writer(PRETRAIN_LOG)?,
        report
            .losses
            .iter()
            .enumerate()
            .map(|(step, loss)| serde_json::json!({"step": step, "loss": loss})),
    )?;
    o.finish(&[BACKBONE_FILE, PRETRAIN_LOG])?;
    Ok((model, report))
}

pub fn cmd_cache(cfg: &RunConfig, data: &Path, backbone: &Path, out: &Path, overwrite: bool) -> Result<usize> {
    let mut o = Output::create(out, "cache-teacher", cfg, overwrite)?;
    let splits = load_dataset(data, Some(&mut o))?;
    let model = load_backbone(backbone, cfg, Some(&mut o))?;
    let outcome = stages::build_cache(cfg, &model, &splits)?;
    outcome.cache.save(o.writer(CACHE_FILE)?)?;
    fs::write(o.path(SKIPPED_FILE), serde_json::to_string(&outcome.skipped)? + "\n")?;
    o.finish(&[CACHE_FILE, SKIPPED_FILE])?;
    Ok(outcome.skipped.len())
}

pub fn cmd_distill(
    cfg: &RunConfig,
    data: &Path,
    backbone: &Path,
    cache: &Path,
    out: &Path,
    overwrite: bool,
) -> Result<crate::distill::DistillReport> {
    let mut o = Output::create(out, "distill", cfg, overwrite)?;
    let splits = load_dataset(data, Some(&mut o))?;
    let model = load_backbone(backbone, cfg, Some(&mut o))?;
    let cache = load_cache(cache, Some(&mut o))?;
    let lex = stages::task_lexicon(cfg)?;
    let mut log = o.writer(TRAIN_LOG)?;
    let mut log_err = None;
    let (adapters, report) = stages::distill(&model, &splits, &cache, &lex.matcher, &cfg.steering, &cfg.distill, |s| {
        if log_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut log, s).map_err(Error::from).and_then(|_| {
                log.write_all(b"\n")?;
                Ok(())
            }) {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    log.flush()?;
    drop(log);
    jsonl(o.writer(EPOCH_LOG)?, &report.epochs)?;
    adapters.save(o.writer(ADAPTER_FILE)?)?;
    o.finish(&[ADAPTER_FILE, TRAIN_LOG, EPOCH_LOG])?;
    Ok(report)
}

/// Query-only inference on one split. The signature admits no teacher cache
/// and no demonstration pool.
pub fn cmd_generate(
    cfg: &RunConfig,
    data: &Path,
    backbone: &Path,
    adapters: Option<&Path>,
    split: Split,
    out: &Path,
    overwrite: bool,
) -> Result<usize> {
    let mut o = Output::create(out, "generate", cfg, overwrite)?;
    let splits = load_dataset(data, Some(&mut o))?;
    let model = load_backbone(backbone, cfg, Some(&mut o))?;
    let adapters = adapters.map(|a| load_adapters(a, Some(&mut o))).transpose()?;
    let queries: Vec<Query> = splits.get(split).iter().map(Query::from).collect();
    let gens = stages::generate_reports(&model, adapters.as_ref(), &queries, cfg.eval.max_new_tokens)?;
    evalkit::write_generations(o.writer(GENERATIONS_FILE)?, &gens)?;
    o.finish(&[GENERATIONS_FILE])?;
    Ok(gens.len())
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    data: &Path,
    backbone: &Path,
    adapters: Option<&Path>,
    generations: &Path,
    split: Split,
    out: &Path,
    overwrite: bool,
) -> Result<evalkit::MetricReport> {
    let mut o = Output::create(out, "evaluate", cfg, overwrite)?;
    let splits = load_dataset(data, Some(&mut o))?;
    let model = load_backbone(backbone, cfg, Some(&mut o))?;
    let adapters = adapters.map(|a| load_adapters(a, Some(&mut o))).transpose()?;
    let (gp, gh) = verified(generations, GENERATIONS_FILE)?;
    o.input(&format!("{}", gp.display()), gh);
    let gens = evalkit::read_generations(BufReader::new(File::open(gp)?))?;
    let lex = stages::task_lexicon(cfg)?;
    let cases = splits.get(split);
    let report = evalkit::score_generations(&gens, cases, &lex.matcher, &lex.negations)?;
    let hook = adapters.as_ref().filter(|a| a.mode != crate::steering::AdapterMode::Off);
    let profile = evalkit::eos_profile(
        &model,
        hook.map(|a| a as &dyn crate::backbone::RowHook),
        cases,
        cfg.eval.eos_before,
        cfg.eval.eos_after,
        adapters.as_ref().map_or(1.0, |a| a.decay_rate),
    )?;
    fs::write(o.path(METRICS_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    jsonl(
        o.writer(PROFILE_FILE)?,
        profile
            .offsets
            .iter()
            .zip(&profile.mean_prob)
            .zip(&profile.counts)
            .map(|((o, p), c)| serde_json::json!({"offset": o, "mean_prob": p, "cases": c})),
    )?;
    o.finish(&[METRICS_FILE, PROFILE_FILE])?;
    Ok(report)
}

/// Rows selected by `cfg.eval.configs`, in declared order.
pub fn selected_configs(cfg: &RunConfig) -> Result<Vec<AblationConfig>> {
    let alpha = cfg.distill.alpha;
    if cfg.eval.configs.is_empty() {
        let mut v = cumulative_configs(alpha);
        v.extend(objective_configs(alpha));
        return Ok(v);
    }
    let all = all_configs(alpha);
    cfg.eval
        .configs
        .iter()
        .map(|id| {
            all.iter()
                .find(|c| &c.id == id)
                .cloned()
                .ok_or_else(|| Error::config("eval.configs", format!("unknown ablation config {id:?}")))
        })
        .collect()
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    data: &Path,
    backbone: &Path,
    cache: &Path,
    out: &Path,
    overwrite: bool,
    mut progress: impl FnMut(&evalkit::AblationRow),
) -> Result<Vec<evalkit::AblationRow>> {
    let mut o = Output::create(out, "ablate", cfg, overwrite)?;
    let rows = selected_configs(cfg)?;
    let splits = load_dataset(data, Some(&mut o))?;
    let model = load_backbone(backbone, cfg, Some(&mut o))?;
    let cache = load_cache(cache, Some(&mut o))?;
    let results = stages::run_ablation(cfg, &model, &splits, &cache, &rows, &cfg.eval.seeds, |r| progress(r))?;
    let mut csv = o.writer(ABLATION_FILE)?;
    writeln!(csv, "{CSV_HEADER}")?;
    for (r, _) in &results {
        writeln!(csv, "{}", r.csv())?;
    }
    csv.flush()?;
    drop(csv);
    jsonl(
        o.writer(ABLATION_PROFILES)?,
        results
            .iter()
            .map(|(r, p)| serde_json::json!({"config": r.id, "seed": r.seed, "offsets": p.offsets, "mean_prob": p.mean_prob})),
    )?;
    o.finish(&[ABLATION_FILE, ABLATION_PROFILES])?;
    Ok(results.into_iter().map(|(r, _)| r).collect())
}
