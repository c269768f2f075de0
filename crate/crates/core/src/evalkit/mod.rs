//! Evaluation: lexical metrics, length control, EOS profiles, finding F1 and
//! forward-cost accounting.

pub mod cost;
pub mod eos;
pub mod metrics;
pub mod report;

pub use cost::{fit_lin_quad_ratio, CostModel};
pub use eos::{eos_profile, EosProfile};
pub use metrics::{bleu, corpus_rouge_l, finding_f1, lcs_len, length_stats, rouge_l, FindingScores, LengthStats};
pub use report::{
    all_configs, cumulative_configs, objective_configs, read_generations, score_generations, sweep_configs,
    write_generations, AblationConfig, AblationRow, GenerationRecord, MetricReport, CSV_HEADER,
};
