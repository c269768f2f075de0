//! Generation records, metric reports and ablation configurations.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::metrics::{bleu, corpus_rouge_l, finding_f1, length_stats, FindingScores, LengthStats};
use crate::backbone::{GenResult, StopReason};
use crate::error::{Error, Result};
use crate::lexicon::{Matcher, WeightProfile};
use crate::steering::AdapterMode;
use crate::synthtask::{CaseRecord, TokenId, EOS};

/// One line of a generations file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub case_id: u64,
    pub tokens: Vec<TokenId>,
    pub eos_probs: Vec<f64>,
    pub stop: StopReason,
}

impl GenerationRecord {
    pub fn new(case_id: u64, g: GenResult) -> Self {
        GenerationRecord {
            case_id,
            tokens: g.tokens,
            eos_probs: g.eos_probs,
            stop: g.stop,
        }
    }

    /// Generated tokens without the trailing EOS.
    pub fn body(&self) -> &[TokenId] {
        strip_eos(&self.tokens)
    }
}

pub fn strip_eos(t: &[TokenId]) -> &[TokenId] {
    t.strip_suffix(&[EOS]).unwrap_or(t)
}

pub fn write_generations<W: Write>(mut w: W, records: &[GenerationRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_generations<R: BufRead>(r: R) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format("generations", format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Scores of one system on a test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub length: LengthStats,
    pub finding: FindingScores,
    pub eos_budget_stops: usize,
    pub cases: usize,
}

/// Scores generations against the matching cases; every case must have a
/// generation.
pub fn score_generations(
    records: &[GenerationRecord],
    cases: &[CaseRecord],
    matcher: &Matcher,
    negations: &[TokenId],
) -> Result<MetricReport> {
    let by_id: std::collections::HashMap<u64, &GenerationRecord> = records.iter().map(|r| (r.case_id, r)).collect();
    let mut cands = Vec::with_capacity(cases.len());
    let mut refs = Vec::with_capacity(cases.len());
    let mut truth = Vec::with_capacity(cases.len());
    let mut budget = 0;
    for c in cases {
        let g = by_id
            .get(&c.id)
            .ok_or_else(|| Error::InvalidArgument(format!("no generation for case {}", c.id)))?;
        budget += usize::from(g.stop == StopReason::Budget);
        cands.push(g.body().to_vec());
        refs.push(strip_eos(&c.report).to_vec());
        truth.push(c.labels.iter().copied().collect::<BTreeSet<usize>>());
    }
    let b = bleu(&cands, &refs, 4)?;
    let pairs: Vec<(usize, usize)> = cands.iter().zip(&refs).map(|(c, r)| (c.len(), r.len())).collect();
    Ok(MetricReport {
        bleu1: b[0],
        bleu4: b[3],
        rouge_l: corpus_rouge_l(&cands, &refs)?,
        length: length_stats(&pairs, 5)?,
        finding: finding_f1(&cands, &truth, matcher, negations)?,
        eos_budget_stops: budget,
        cases: cases.len(),
    })
}

/// A trained (or untrained) system in the ablation tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub id: String,
    pub name: String,
    pub mode: AdapterMode,
    pub alpha: f64,
    pub weights: WeightProfile,
    pub kl_on_eos: bool,
}

impl AblationConfig {
    fn new(id: &str, name: &str, mode: AdapterMode, alpha: f64, path: f64, eos: f64, kl_on_eos: bool) -> Self {
        AblationConfig {
            id: id.into(),
            name: name.into(),
            mode,
            alpha,
            weights: WeightProfile { path, eos },
            kl_on_eos,
        }
    }

    pub fn is_zero_shot(&self) -> bool {
        self.mode == AdapterMode::Off
    }
}

/// Cumulative rows: each adds one component to the previous one.
pub fn cumulative_configs(alpha: f64) -> Vec<AblationConfig> {
    use AdapterMode::*;
    vec![
        AblationConfig::new("zero_shot", "Zero-shot", Off, alpha, 1.0, 1.0, true),
        AblationConfig::new("dynamic", "+ Dynamic TV", Dynamic, alpha, 1.0, 0.0, false),
        AblationConfig::new("path", "+ Pathology-token supervision", Dynamic, alpha, 8.0, 0.0, false),
        AblationConfig::new("eos_w1", "+ EOS (w=1)", Dynamic, alpha, 8.0, 1.0, true),
        AblationConfig::new("eos_w5", "+ EOS upweight (w=5)", Dynamic, alpha, 8.0, 5.0, true),
    ]
}

/// Objective ablations around the full configuration.
pub fn objective_configs(alpha: f64) -> Vec<AblationConfig> {
    use AdapterMode::*;
    vec![
        AblationConfig::new("static_full", "Static + full objective", Static, alpha, 8.0, 5.0, true),
        AblationConfig::new("kl_uniform_ce", "KL + uniform CE", Dynamic, alpha, 1.0, 1.0, true),
        AblationConfig::new("decisive_ce_no_kl", "Decisive CE, no KL", Dynamic, 0.0, 8.0, 5.0, true),
    ]
}

/// One-at-a-time sweeps of the path weight (EOS weight 5) and the EOS weight
/// (path weight 8).
pub fn sweep_configs(alpha: f64) -> Vec<AblationConfig> {
    let mut v = Vec::new();
    for p in [0.0, 1.0, 3.0, 5.0, 8.0, 10.0] {
        v.push(AblationConfig::new(
            &format!("sweep_path_w{p}"),
            &format!("ω_path={p}"),
            AdapterMode::Dynamic,
            alpha,
            p,
            5.0,
            true,
        ));
    }
    for e in [0.0, 1.0, 2.0, 3.0, 5.0, 8.0] {
        v.push(AblationConfig::new(
            &format!("sweep_eos_w{e}"),
            &format!("ω_EOS={e}"),
            AdapterMode::Dynamic,
            alpha,
            8.0,
            e,
            true,
        ));
    }
    v
}

/// Every table row in declared order; ids are unique.
pub fn all_configs(alpha: f64) -> Vec<AblationConfig> {
    let mut v = cumulative_configs(alpha);
    v.extend(objective_configs(alpha));
    v.extend(sweep_configs(alpha));
    v
}

/// One CSV row per (config, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: String,
    pub name: String,
    pub seed: u64,
    pub report: MetricReport,
    pub eos_peak: Option<[f64; 3]>,
}

pub const CSV_HEADER: &str = "config,name,seed,bleu1,bleu4,rouge_l,mean_len,mean_dlen,mae_dlen,under_pct,over_pct,proper_pct,finding_p,finding_r,finding_f1,budget_stops,eos_m3,eos_0,eos_p3";

impl AblationRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        let peak = self
            .eos_peak
            .map(|p| format!("{:.6},{:.6},{:.6}", p[0], p[1], p[2]))
            .unwrap_or_else(|| ",,".into());
        format!(
            "{},\"{}\",{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.2},{:.2},{:.2},{:.4},{:.4},{:.4},{},{}",
            self.id,
            self.name,
            self.seed,
            r.bleu1,
            r.bleu4,
            r.rouge_l,
            r.length.mean_len,
            r.length.mean_delta,
            r.length.mae_delta,
            r.length.under,
            r.length.over,
            r.length.proper,
            r.finding.precision,
            r.finding.recall,
            r.finding.f1,
            r.eos_budget_stops,
            peak
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_ids_are_unique_and_ordered() {
        let all = all_configs(0.8);
        let ids: BTreeSet<&str> = all.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids.len(), all.len());
        let cum: Vec<String> = cumulative_configs(0.8).into_iter().map(|c| c.id).collect();
        assert_eq!(cum, ["zero_shot", "dynamic", "path", "eos_w1", "eos_w5"]);
        assert_eq!(CSV_HEADER.split(',').count(), 19);
    }

    #[test]
    fn path_zero_sweep_matches_eos_only_weights() {
        let s = sweep_configs(0.8);
        let p0 = s.iter().find(|c| c.id == "sweep_path_w0").unwrap();
        assert_eq!(p0.weights, WeightProfile { path: 0.0, eos: 5.0 });
    }

    #[test]
    fn generations_round_trip() {
        let recs = vec![GenerationRecord {
            case_id: 4,
            tokens: vec![7, 8, EOS],
            eos_probs: vec![0.1, 0.2, 0.9],
            stop: StopReason::Eos,
        }];
        let mut buf = Vec::new();
        write_generations(&mut buf, &recs).unwrap();
        assert_eq!(read_generations(&buf[..]).unwrap(), recs);
        assert_eq!(recs[0].body(), &[7, 8]);
    }
}
