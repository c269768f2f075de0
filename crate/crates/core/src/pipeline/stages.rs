//! In-memory pipeline stages shared by the command line and the tests.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::backbone::{generate, Backbone, DecodeConfig, RowHook};
use crate::distill::{
    cache_teacher, check_cache, prepare, train_adapters, CacheOutcome, DistillConfig, DistillReport, StepLog,
    TeacherCache,
};
use crate::error::Result;
use crate::evalkit::{eos_profile, score_generations, AblationConfig, AblationRow, EosProfile, GenerationRecord, MetricReport};
use crate::lexicon::{compile_matcher, Matcher, PhraseLexicon};
use crate::steering::{AdapterMode, AdapterSet, SteeringConfig};
use crate::synthtask::io::dataset_id as dataset_id_of;
use crate::synthtask::{query_tokens, CaseRecord, Splits, TokenId};

/// Lexicon, matcher and negation tokens of the task vocabulary.
pub struct TaskLexicon {
    pub lexicon: PhraseLexicon,
    pub matcher: Matcher,
    pub negations: Vec<TokenId>,
}

pub fn task_lexicon(cfg: &RunConfig) -> Result<TaskLexicon> {
    let layout = cfg.task.layout()?;
    let lexicon = PhraseLexicon::from_layout(&layout);
    Ok(TaskLexicon {
        matcher: compile_matcher(&lexicon),
        lexicon,
        negations: layout.negations(),
    })
}

/// Teacher cache over the distill and validation splits.
pub fn build_cache(cfg: &RunConfig, model: &Backbone, splits: &Splits) -> Result<CacheOutcome> {
    let mut cases = splits.distill.clone();
    cases.extend(splits.val.iter().cloned());
    cache_teacher(
        model,
        &cases,
        &splits.pool,
        cfg.distill.k,
        cfg.distill.shots,
        cfg.distill.temperature,
        cfg.task.seed,
        dataset_id_of(splits),
    )
}

/// Distillation settings of one ablation row at one seed.
pub fn row_settings(cfg: &RunConfig, row: &AblationConfig, seed: u64) -> (SteeringConfig, DistillConfig) {
    let steering = SteeringConfig {
        mode: row.mode,
        seed,
        ..cfg.steering.clone()
    };
    let distill = DistillConfig {
        alpha: row.alpha,
        weights: row.weights,
        kl_on_eos: row.kl_on_eos,
        seed,
        ..cfg.distill.clone()
    };
    (steering, distill)
}

/// Trains one adapter set against the cache.
pub fn distill(
    model: &Backbone,
    splits: &Splits,
    cache: &TeacherCache,
    matcher: &Matcher,
    steering: &SteeringConfig,
    dc: &DistillConfig,
    on_step: impl FnMut(&StepLog),
) -> Result<(AdapterSet, DistillReport)> {
    check_cache(cache, dataset_id_of(splits), dc)?;
    let train = prepare(&splits.distill, cache, matcher)?;
    let val = prepare(&splits.val, cache, matcher)?;
    let mut adapters = AdapterSet::init(steering, model.config.d_model, model.config.n_layers)?;
    let report = train_adapters(model, &mut adapters, &train, &val, dc, on_step)?;
    Ok((adapters, report))
}

/// What the inference path sees of a case: its id and condition tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub case_id: u64,
    pub condition: Vec<TokenId>,
}

impl From<&CaseRecord> for Query {
    fn from(c: &CaseRecord) -> Self {
        Query {
            case_id: c.id,
            condition: c.condition.clone(),
        }
    }
}

fn hook_of(adapters: Option<&AdapterSet>) -> Option<&dyn RowHook> {
    adapters.filter(|a| a.mode != AdapterMode::Off).map(|a| a as &dyn RowHook)
}

/// Query-only generation. Takes no demonstrations and no teacher cache.
pub fn generate_reports(
    model: &Backbone,
    adapters: Option<&AdapterSet>,
    queries: &[Query],
    max_new_tokens: usize,
) -> Result<Vec<GenerationRecord>> {
    let decode = DecodeConfig {
        max_new_tokens,
        decay_rate: adapters.map_or(1.0, |a| a.decay_rate),
        ..DecodeConfig::default()
    };
    let hook = hook_of(adapters);
    let one = |q: &Query| -> Result<GenerationRecord> {
        let prompt = query_tokens(&q.condition);
        Ok(GenerationRecord::new(q.case_id, generate(model, &prompt, &decode, hook)?))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        queries.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        queries.iter().map(one).collect()
    }
}

/// Generates on `cases`, scores the generations and profiles EOS.
pub fn evaluate_system(
    cfg: &RunConfig,
    model: &Backbone,
    adapters: Option<&AdapterSet>,
    cases: &[CaseRecord],
    lex: &TaskLexicon,
) -> Result<(Vec<GenerationRecord>, MetricReport, EosProfile)> {
    let queries: Vec<Query> = cases.iter().map(Query::from).collect();
    let gens = generate_reports(model, adapters, &queries, cfg.eval.max_new_tokens)?;
    let report = score_generations(&gens, cases, &lex.matcher, &lex.negations)?;
    let profile = eos_profile(
        model,
        hook_of(adapters),
        cases,
        cfg.eval.eos_before,
        cfg.eval.eos_after,
        adapters.map_or(1.0, |a| a.decay_rate),
    )?;
    Ok((gens, report, profile))
}

/// P(EOS) at offsets −3, 0, +3.
pub fn eos_peak(p: &EosProfile) -> Option<[f64; 3]> {
    Some([p.at(-3)?, p.at(0)?, p.at(3)?])
}

/// Trains and evaluates every `(row, seed)` pair on the test split. Zero-shot
/// rows are evaluated once per seed on the bare backbone.
pub fn run_ablation(
    cfg: &RunConfig,
    model: &Backbone,
    splits: &Splits,
    cache: &TeacherCache,
    rows: &[AblationConfig],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<(AblationRow, EosProfile)>> {
    let lex = task_lexicon(cfg)?;
    let mut out = Vec::new();
    let mut zero_shot: Option<(MetricReport, EosProfile)> = None;
    for &seed in seeds {
        for row in rows {
            let (report, profile) = if row.is_zero_shot() {
                if zero_shot.is_none() {
                    let (_, r, p) = evaluate_system(cfg, model, None, &splits.test, &lex)?;
                    zero_shot = Some((r, p));
                }
                zero_shot.clone().unwrap()
            } else {
                let (sc, dc) = row_settings(cfg, row, seed);
                let (adapters, _) = distill(model, splits, cache, &lex.matcher, &sc, &dc, |_| {})?;
                let (_, r, p) = evaluate_system(cfg, model, Some(&adapters), &splits.test, &lex)?;
                (r, p)
            };
            let r = AblationRow {
                id: row.id.clone(),
                name: row.name.clone(),
                seed,
                eos_peak: eos_peak(&profile),
                report,
            };
            progress(&r);
            out.push((r, profile));
        }
    }
    Ok(out)
}
