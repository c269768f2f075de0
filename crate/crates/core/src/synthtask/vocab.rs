//! Token id layout: contiguous blocks for special, observation, finding,
//! negation, per-style template and closing tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
/// Opens one demonstration report.
pub const DEMO: TokenId = 3;
/// Opens the observation prefix of the query.
pub const COND: TokenId = 4;
/// Marks the start of the answer region.
pub const REPORT: TokenId = 5;

const N_SPECIAL: usize = 6;
/// Tokens per finding label: lower, Capitalized, ▁lower, qualifier, tail.
pub const TOKENS_PER_LABEL: usize = 5;
pub const N_NEGATIONS: usize = 2;
pub const TEMPLATE_PER_STYLE: usize = 10;
pub const OPENING_LEN: usize = 5;
pub const LEAD_LEN: usize = 4;

const LABEL_NAMES: [&str; 20] = [
    "arvex", "bolmic", "caddra", "dunelle", "efrim", "fossane", "gorret", "hyllic", "ibrant",
    "jorvane", "kestil", "lumora", "marrow", "nivelle", "orsk", "pellim", "quarane", "ristel",
    "sorvic", "tallen",
];
const STYLE_WORDS: [&str; TEMPLATE_PER_STYLE] = [
    "open", "view", "scan", "note", "field", "lead", "area", "zone", "seen", "stop",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenClass {
    Special,
    Observation,
    Finding,
    Negation,
    Template,
    Closing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FindingForm {
    Lower = 0,
    Capital = 1,
    SpaceLower = 2,
    Qualifier = 3,
    Tail = 4,
}

/// Shape of the vocabulary. Everything is derived from three counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub n_labels: usize,
    pub n_styles: usize,
    pub n_closing: usize,
}

impl VocabLayout {
    pub fn new(n_labels: usize, n_styles: usize, n_closing: usize) -> Result<Self> {
        if n_labels == 0 || n_labels > LABEL_NAMES.len() {
            return Err(Error::config(
                "task.n_labels",
                format!("must be in 1..={}", LABEL_NAMES.len()),
            ));
        }
        if n_styles == 0 || n_styles > 26 {
            return Err(Error::config("task.styles", "need between 1 and 26 styles"));
        }
        if n_closing == 0 {
            return Err(Error::config("task.n_closing", "must be positive"));
        }
        Ok(VocabLayout {
            n_labels,
            n_styles,
            n_closing,
        })
    }

    fn obs_base(&self) -> usize {
        N_SPECIAL
    }
    fn finding_base(&self) -> usize {
        self.obs_base() + self.n_labels
    }
    fn negation_base(&self) -> usize {
        self.finding_base() + self.n_labels * TOKENS_PER_LABEL
    }
    fn template_base(&self) -> usize {
        self.negation_base() + N_NEGATIONS
    }
    fn closing_base(&self) -> usize {
        self.template_base() + self.n_styles * TEMPLATE_PER_STYLE
    }

    pub fn size(&self) -> usize {
        self.closing_base() + self.n_closing
    }

    pub fn observation(&self, label: usize) -> TokenId {
        debug_assert!(label < self.n_labels);
        (self.obs_base() + label) as TokenId
    }

    pub fn finding(&self, label: usize, form: FindingForm) -> TokenId {
        debug_assert!(label < self.n_labels);
        (self.finding_base() + label * TOKENS_PER_LABEL + form as usize) as TokenId
    }

    pub fn negation(&self, i: usize) -> TokenId {
        debug_assert!(i < N_NEGATIONS);
        (self.negation_base() + i) as TokenId
    }

    pub fn negations(&self) -> Vec<TokenId> {
        (0..N_NEGATIONS).map(|i| self.negation(i)).collect()
    }

    pub fn template(&self, style: usize, i: usize) -> TokenId {
        debug_assert!(style < self.n_styles && i < TEMPLATE_PER_STYLE);
        (self.template_base() + style * TEMPLATE_PER_STYLE + i) as TokenId
    }

    pub fn opening(&self, style: usize, i: usize) -> TokenId {
        self.template(style, i)
    }

    pub fn lead(&self, style: usize, i: usize) -> TokenId {
        self.template(style, OPENING_LEN + i)
    }

    pub fn period(&self, style: usize) -> TokenId {
        self.template(style, TEMPLATE_PER_STYLE - 1)
    }

    /// `j`-th closing token, 1-based.
    pub fn closing(&self, j: usize) -> TokenId {
        debug_assert!(j >= 1 && j <= self.n_closing);
        (self.closing_base() + j - 1) as TokenId
    }

    pub fn class(&self, t: TokenId) -> TokenClass {
        let t = t as usize;
        if t < self.obs_base() {
            TokenClass::Special
        } else if t < self.finding_base() {
            TokenClass::Observation
        } else if t < self.negation_base() {
            TokenClass::Finding
        } else if t < self.template_base() {
            TokenClass::Negation
        } else if t < self.closing_base() {
            TokenClass::Template
        } else {
            TokenClass::Closing
        }
    }

    /// Label owning a finding token.
    pub fn finding_label(&self, t: TokenId) -> Option<usize> {
        (self.class(t) == TokenClass::Finding)
            .then(|| (t as usize - self.finding_base()) / TOKENS_PER_LABEL)
    }

    pub fn observation_label(&self, t: TokenId) -> Option<usize> {
        (self.class(t) == TokenClass::Observation).then(|| t as usize - self.obs_base())
    }

    /// Style owning a template token.
    pub fn template_style(&self, t: TokenId) -> Option<usize> {
        (self.class(t) == TokenClass::Template)
            .then(|| (t as usize - self.template_base()) / TEMPLATE_PER_STYLE)
    }

    /// 1-based ordinal of a closing token.
    pub fn closing_index(&self, t: TokenId) -> Option<usize> {
        (self.class(t) == TokenClass::Closing).then(|| t as usize - self.closing_base() + 1)
    }

    pub fn label_name(&self, label: usize) -> &'static str {
        LABEL_NAMES[label]
    }

    fn style_tag(style: usize) -> char {
        (b'A' + style as u8) as char
    }

    /// Surface string of every token, indexed by id.
    pub fn surfaces(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.size());
        out.extend(
            ["<pad>", "<bos>", "<eos>", "<demo>", "<cond>", "<report>"]
                .iter()
                .map(|s| s.to_string()),
        );
        for l in 0..self.n_labels {
            out.push(format!("obs:{}", LABEL_NAMES[l]));
        }
        for l in 0..self.n_labels {
            let name = LABEL_NAMES[l];
            let mut cap = name.to_string();
            cap[..1].make_ascii_uppercase();
            out.push(name.to_string());
            out.push(cap);
            out.push(format!("▁{name}"));
            out.push(format!("{name}-grade"));
            out.push(format!("{name}-extent"));
        }
        out.push("no".into());
        out.push("without".into());
        for s in 0..self.n_styles {
            for w in STYLE_WORDS {
                out.push(format!("{w}/{}", Self::style_tag(s)));
            }
        }
        for j in 1..=self.n_closing {
            out.push(format!("close#{j}"));
        }
        debug_assert_eq!(out.len(), self.size());
        out
    }
}

/// Vocabulary: surfaces plus the layout that produced them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub layout: VocabLayout,
    surfaces: Vec<String>,
}

impl Vocab {
    pub fn new(layout: VocabLayout) -> Self {
        Vocab {
            surfaces: layout.surfaces(),
            layout,
        }
    }

    pub fn size(&self) -> usize {
        self.surfaces.len()
    }

    pub fn surface(&self, t: TokenId) -> &str {
        &self.surfaces[t as usize]
    }

    pub fn lookup(&self, surface: &str) -> Option<TokenId> {
        self.surfaces
            .iter()
            .position(|s| s == surface)
            .map(|i| i as TokenId)
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.surface(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Sidecar file: one `id<TAB>surface` per line.
    pub fn to_sidecar(&self) -> String {
        let mut s = String::new();
        for (i, w) in self.surfaces.iter().enumerate() {
            s.push_str(&format!("{i}\t{w}\n"));
        }
        s
    }

    /// Reads a sidecar and checks it against the expected layout.
    pub fn from_sidecar(text: &str, layout: VocabLayout) -> Result<Self> {
        let expected = Vocab::new(layout);
        let mut surfaces = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (id, w) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("vocab file", format!("line {}: missing tab", n + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::format("vocab file", format!("line {}: bad id `{id}`", n + 1)))?;
            if id != surfaces.len() {
                return Err(Error::format("vocab file", format!("line {}: ids must be contiguous", n + 1)));
            }
            surfaces.push(w.to_string());
        }
        if surfaces != expected.surfaces {
            return Err(Error::ArtifactMismatch {
                what: "vocabulary".into(),
                expected: format!("{} tokens for layout {:?}", expected.size(), layout),
                found: format!("{} tokens", surfaces.len()),
            });
        }
        Ok(expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_are_contiguous_and_classified() {
        let l = VocabLayout::new(14, 4, 12).unwrap();
        assert_eq!(l.size(), 6 + 14 + 14 * 5 + 2 + 4 * 10 + 12);
        assert_eq!(l.class(EOS), TokenClass::Special);
        assert_eq!(l.class(l.observation(13)), TokenClass::Observation);
        assert_eq!(l.finding_label(l.finding(7, FindingForm::Tail)), Some(7));
        assert_eq!(l.class(l.negation(1)), TokenClass::Negation);
        assert_eq!(l.template_style(l.period(3)), Some(3));
        assert_eq!(l.closing_index(l.closing(12)), Some(12));
        assert_eq!(l.closing(12) as usize, l.size() - 1);
    }

    #[test]
    fn surfaces_are_unique_and_round_trip() {
        let v = Vocab::new(VocabLayout::new(14, 4, 12).unwrap());
        let mut seen = std::collections::HashSet::new();
        for i in 0..v.size() {
            assert!(seen.insert(v.surface(i as TokenId).to_string()));
        }
        let back = Vocab::from_sidecar(&v.to_sidecar(), v.layout).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_sidecar(&v.to_sidecar(), VocabLayout::new(13, 4, 12).unwrap()).is_err());
    }
}
