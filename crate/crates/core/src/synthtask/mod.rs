//! Synthetic multi-style report task: vocabulary, grammars, prompts and splits.

pub mod io;
pub mod prompt;
pub mod sample;
pub mod splits;
pub mod style;
pub mod vocab;

pub use prompt::{build_prompt, query_tokens, PromptLayout};
pub use sample::{parse_report, phrase_variants, sample_case, CaseRecord, Split};
pub use splits::{make_splits, select_demos, Episode, PretrainStream, SplitSizes, Splits, TaskConfig};
pub use style::{LabelOrder, LengthRegime, StyleSpec};
pub use vocab::{FindingForm, TokenClass, TokenId, Vocab, VocabLayout, BOS, COND, DEMO, EOS, PAD, REPORT};
