//! Finding-phrase lexicon, a multi-pattern token matcher, and the decisive
//! token masks and CE weights derived from it.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthtask::{phrase_variants, TokenId, Vocab, VocabLayout};

/// Label → token phrases.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhraseLexicon {
    /// `(label, phrase)` in insertion order, deduplicated.
    phrases: Vec<(usize, Vec<TokenId>)>,
    n_labels: usize,
}

impl PhraseLexicon {
    pub fn new(n_labels: usize, entries: impl IntoIterator<Item = (usize, Vec<TokenId>)>) -> Result<Self> {
        let mut phrases: Vec<(usize, Vec<TokenId>)> = Vec::new();
        for (label, p) in entries {
            if label >= n_labels {
                return Err(Error::InvalidArgument(format!("label {label} out of range")));
            }
            if p.is_empty() {
                return Err(Error::InvalidArgument(format!("empty phrase for label {label}")));
            }
            if !phrases.iter().any(|(l, q)| *l == label && *q == p) {
                phrases.push((label, p));
            }
        }
        for l in 0..n_labels {
            if !phrases.iter().any(|(x, _)| *x == l) {
                return Err(Error::InvalidArgument(format!("label {l} has no phrase")));
            }
        }
        Ok(PhraseLexicon { phrases, n_labels })
    }

    /// Every phrase variant the synthetic grammar can emit.
    pub fn from_layout(layout: &VocabLayout) -> Self {
        let entries = (0..layout.n_labels).flat_map(|l| phrase_variants(layout, l).into_iter().map(move |p| (l, p)));
        PhraseLexicon::new(layout.n_labels, entries).expect("grammar phrases are valid")
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn phrases(&self) -> &[(usize, Vec<TokenId>)] {
        &self.phrases
    }

    pub fn variants(&self, label: usize) -> impl Iterator<Item = &[TokenId]> {
        self.phrases.iter().filter(move |(l, _)| *l == label).map(|(_, p)| p.as_slice())
    }

    /// Human-readable form: one table per label with space-separated surfaces.
    pub fn to_toml(&self, vocab: &Vocab) -> String {
        let mut labels = BTreeMap::new();
        for l in 0..self.n_labels {
            labels.insert(
                vocab.layout.label_name(l).to_string(),
                LexiconLabel {
                    id: l,
                    phrases: self.variants(l).map(|p| vocab.render(p)).collect(),
                },
            );
        }
        toml::to_string(&LexiconFile { labels }).expect("lexicon serializes")
    }

    /// Parses a lexicon file and compiles its surfaces against `vocab`.
    pub fn from_toml(text: &str, vocab: &Vocab) -> Result<Self> {
        let file: LexiconFile = toml::from_str(text).map_err(|e| Error::format("lexicon file", e.to_string()))?;
        let mut entries = Vec::new();
        for (name, entry) in &file.labels {
            for surface in &entry.phrases {
                let toks = surface
                    .split_whitespace()
                    .map(|w| {
                        vocab.lookup(w).ok_or_else(|| {
                            Error::format("lexicon file", format!("label `{name}`: unknown token `{w}`"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                entries.push((entry.id, toks));
            }
        }
        PhraseLexicon::new(vocab.layout.n_labels, entries).map_err(|e| Error::format("lexicon file", e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconLabel {
    id: usize,
    phrases: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconFile {
    labels: BTreeMap<String, LexiconLabel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhraseMatch {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub label: usize,
    /// Index into [`PhraseLexicon::phrases`].
    pub phrase: usize,
}

/// Aho–Corasick automaton over token ids.
#[derive(Clone, Debug)]
pub struct Matcher {
    goto: Vec<HashMap<TokenId, usize>>,
    fail: Vec<usize>,
    /// Phrases ending at each state, including those reached through
    /// failure links.
    out: Vec<Vec<usize>>,
    lexicon: PhraseLexicon,
}

pub fn compile_matcher(lexicon: &PhraseLexicon) -> Matcher {
    let mut goto: Vec<HashMap<TokenId, usize>> = vec![HashMap::new()];
    let mut out: Vec<Vec<usize>> = vec![Vec::new()];
    for (i, (_, p)) in lexicon.phrases.iter().enumerate() {
        let mut s = 0;
        for &t in p {
            s = match goto[s].get(&t) {
                Some(&n) => n,
                None => {
                    goto.push(HashMap::new());
                    out.push(Vec::new());
                    let n = goto.len() - 1;
                    goto[s].insert(t, n);
                    n
                }
            };
        }
        out[s].push(i);
    }
    let mut fail = vec![0; goto.len()];
    let mut queue: VecDeque<usize> = goto[0].values().copied().collect();
    while let Some(s) = queue.pop_front() {
        let edges: Vec<(TokenId, usize)> = goto[s].iter().map(|(&t, &n)| (t, n)).collect();
        for (t, n) in edges {
            let mut f = fail[s];
            while f != 0 && !goto[f].contains_key(&t) {
                f = fail[f];
            }
            fail[n] = goto[f].get(&t).copied().filter(|&x| x != n).unwrap_or(0);
            let inherited = out[fail[n]].clone();
            out[n].extend(inherited);
            queue.push_back(n);
        }
    }
    Matcher {
        goto,
        fail,
        out,
        lexicon: lexicon.clone(),
    }
}

impl Matcher {
    pub fn lexicon(&self) -> &PhraseLexicon {
        &self.lexicon
    }

    /// All occurrences of all phrases, in one left-to-right pass. Sorted by
    /// `(start, end, phrase)`.
    pub fn find_all(&self, tokens: &[TokenId]) -> Vec<PhraseMatch> {
        let mut s = 0;
        let mut found = Vec::new();
        for (i, &t) in tokens.iter().enumerate() {
            while s != 0 && !self.goto[s].contains_key(&t) {
                s = self.fail[s];
            }
            s = self.goto[s].get(&t).copied().unwrap_or(0);
            for &p in &self.out[s] {
                let (label, ref phrase) = self.lexicon.phrases[p];
                found.push(PhraseMatch {
                    start: i + 1 - phrase.len(),
                    end: i + 1,
                    label,
                    phrase: p,
                });
            }
        }
        found.sort();
        found
    }

    /// Labels asserted in `tokens`: a label is present iff one of its matches
    /// is not immediately preceded by a negation token.
    pub fn extract_labels(&self, tokens: &[TokenId], negations: &[TokenId]) -> BTreeSet<usize> {
        self.find_all(tokens)
            .into_iter()
            .filter(|m| m.start == 0 || !negations.contains(&tokens[m.start - 1]))
            .map(|m| m.label)
            .collect()
    }
}

/// Per-position decisive-token masks of one reference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPair {
    pub path: Vec<bool>,
    pub eos: Vec<bool>,
}

impl MaskPair {
    pub fn len(&self) -> usize {
        self.path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.path.is_empty()
    }
}

/// Marks every token of every match of an active label, and the final EOS.
pub fn mark_decisive(reference: &[TokenId], active: &[usize], matcher: &Matcher, eos: TokenId) -> Result<MaskPair> {
    if reference.last() != Some(&eos) {
        return Err(Error::InvalidArgument("reference does not end with EOS".into()));
    }
    let n = reference.len();
    let mut path = vec![false; n];
    for m in matcher.find_all(reference) {
        if active.contains(&m.label) {
            path[m.start..m.end].iter_mut().for_each(|b| *b = true);
        }
    }
    // EOS is never part of a phrase, but keep the masks disjoint regardless.
    path[n - 1] = false;
    let mut eos_mask = vec![false; n];
    eos_mask[n - 1] = true;
    Ok(MaskPair { path, eos: eos_mask })
}

/// CE weight schedule: `ω_EOS` on the EOS position, `ω_path` on decisive
/// finding tokens, 1 elsewhere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightProfile {
    pub path: f64,
    pub eos: f64,
}

impl WeightProfile {
    pub const UNIFORM: WeightProfile = WeightProfile { path: 1.0, eos: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.path >= 0.0 && self.eos >= 0.0 && self.path.is_finite() && self.eos.is_finite()) {
            return Err(Error::config("weights", "ω_path and ω_EOS must be finite and nonnegative"));
        }
        Ok(())
    }
}

impl Default for WeightProfile {
    fn default() -> Self {
        WeightProfile { path: 8.0, eos: 5.0 }
    }
}

pub fn weights_from_masks(masks: &MaskPair, profile: &WeightProfile) -> Vec<f64> {
    masks
        .path
        .iter()
        .zip(&masks.eos)
        .map(|(&p, &e)| if e { profile.eos } else if p { profile.path } else { 1.0 })
        .collect()
}
