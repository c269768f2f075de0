use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prompt::build_prompt_from_parts;
use super::sample::{sample_case, sample_report, CaseRecord, Split};
use super::style::StyleSpec;
use super::vocab::{TokenId, VocabLayout};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub distill: usize,
    pub pool: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            distill: 256,
            pool: 512,
            val: 64,
            test: 256,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Distill => self.distill,
            Split::Pool => self.pool,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub n_labels: usize,
    /// Prior of every label, unless `priors` lists one per label.
    pub label_prior: f64,
    pub priors: Option<Vec<f64>>,
    pub flip_noise: f64,
    pub n_closing: usize,
    pub styles: Vec<StyleSpec>,
    /// Style of the distill/pool/val/test splits.
    pub deployment_style: usize,
    /// Largest demonstration count in pretraining episodes.
    pub max_shots: usize,
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n_labels: 14,
            label_prior: 0.25,
            priors: None,
            flip_noise: 0.05,
            n_closing: 12,
            styles: StyleSpec::defaults(),
            deployment_style: 1,
            max_shots: 8,
            sizes: SplitSizes::default(),
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn layout(&self) -> Result<VocabLayout> {
        VocabLayout::new(self.n_labels, self.styles.len(), self.n_closing)
    }

    pub fn priors(&self) -> Vec<f64> {
        self.priors
            .clone()
            .unwrap_or_else(|| vec![self.label_prior; self.n_labels])
    }

    pub fn deployment(&self) -> &StyleSpec {
        &self.styles[self.deployment_style]
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        for (i, s) in self.styles.iter().enumerate() {
            if s.id != i {
                return Err(Error::config(format!("task.styles[{i}].id"), "style ids must equal their index"));
            }
            s.validate(self.n_closing)?;
        }
        if self.deployment_style >= self.styles.len() {
            return Err(Error::config("task.deployment_style", "no such style"));
        }
        let priors = self.priors();
        if priors.len() != self.n_labels {
            return Err(Error::config("task.priors", format!("need {} entries", self.n_labels)));
        }
        if priors.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("task.priors", "each prior must be in [0, 1]"));
        }
        if !(0.0..0.5).contains(&self.flip_noise) {
            return Err(Error::config("task.flip_noise", "must be in [0, 0.5)"));
        }
        Ok(())
    }
}

/// The four case splits of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub distill: Vec<CaseRecord>,
    pub pool: Vec<CaseRecord>,
    pub val: Vec<CaseRecord>,
    pub test: Vec<CaseRecord>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[CaseRecord] {
        match split {
            Split::Distill => &self.distill,
            Split::Pool => &self.pool,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &CaseRecord> {
        Split::ALL.into_iter().flat_map(move |s| self.get(s).iter())
    }

    /// Groups records by their split tag, rejecting duplicate ids.
    pub fn from_records(records: Vec<CaseRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut out = Splits {
            distill: vec![],
            pool: vec![],
            val: vec![],
            test: vec![],
        };
        for r in records {
            if !seen.insert(r.id) {
                return Err(Error::format("dataset", format!("case id {} appears more than once", r.id)));
            }
            match r.split {
                Split::Distill => out.distill.push(r),
                Split::Pool => out.pool.push(r),
                Split::Val => out.val.push(r),
                Split::Test => out.test.push(r),
            }
        }
        Ok(out)
    }

    pub fn find(&self, id: u64) -> Option<&CaseRecord> {
        self.all().find(|c| c.id == id)
    }
}

/// Generates the four splits in the deployment style. Ids are consecutive
/// across splits, so the splits are disjoint by construction.
pub fn make_splits(cfg: &TaskConfig) -> Result<Splits> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let priors = cfg.priors();
    let style = cfg.deployment();
    let mut next_id = 0u64;
    let mut gen = |split: Split| {
        let mut rng = seed::rng(cfg.seed, &format!("split/{}", split.name()));
        (0..cfg.sizes.get(split))
            .map(|_| {
                let id = next_id;
                next_id += 1;
                sample_case(id, style, &layout, &priors, cfg.flip_noise, split, &mut rng)
            })
            .collect::<Vec<_>>()
    };
    let records: Vec<CaseRecord> = Split::ALL.into_iter().flat_map(&mut gen).collect();
    Splits::from_records(records)
}

/// `k` demonstrations for one query, drawn uniformly without replacement.
/// The draw depends only on the seed and the query id.
pub fn select_demos<'a>(pool: &'a [CaseRecord], k: usize, seed: u64, case_id: u64) -> Result<Vec<&'a CaseRecord>> {
    if k > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "{k} demonstrations requested from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = seed::rng(seed, &format!("demos/{case_id}"));
    Ok(pool.choose_multiple(&mut rng, k).collect())
}

/// One pretraining sequence: a full prompt with answer, all positions supervised.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub tokens: Vec<TokenId>,
    pub shots: usize,
    pub style: usize,
    pub closing: usize,
}

/// Endless stream of pretraining episodes mixing all styles and shot counts.
///
/// Within an episode the demonstrations and the query share one style and one
/// closing-run length drawn from the style's range, so the closing length is
/// only recoverable from the demonstrations.
pub struct PretrainStream {
    cfg: TaskConfig,
    layout: VocabLayout,
    priors: Vec<f64>,
    max_context: usize,
    rng: ChaCha8Rng,
}

impl PretrainStream {
    pub fn new(cfg: &TaskConfig, max_context: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(PretrainStream {
            layout: cfg.layout()?,
            priors: cfg.priors(),
            cfg: cfg.clone(),
            max_context,
            rng: seed::rng(seed, "pretrain-stream"),
        })
    }

    pub fn next_episode(&mut self) -> Episode {
        let rng = &mut self.rng;
        let base = &self.cfg.styles[rng.random_range(0..self.cfg.styles.len())];
        let (lo, hi) = base.closing_range;
        let closing = rng.random_range(lo..=hi);
        let style = base.with_closing(closing);
        let shots = rng.random_range(0..=self.cfg.max_shots);
        let demos: Vec<Vec<TokenId>> = (0..shots)
            .map(|_| {
                let active: Vec<bool> = self.priors.iter().map(|&p| rng.random::<f64>() < p).collect();
                sample_report(&style, &self.layout, &active, rng)
            })
            .collect();
        let query = sample_case(0, &style, &self.layout, &self.priors, self.cfg.flip_noise, Split::Distill, rng);
        // drop trailing demos until the episode fits
        let mut k = demos.len();
        loop {
            match build_prompt_from_parts(
                &query.condition,
                &query.report,
                demos[..k].iter().map(|d| d.as_slice()),
                self.max_context,
            ) {
                Ok(p) => {
                    return Episode {
                        tokens: p.tokens,
                        shots: k,
                        style: style.id,
                        closing,
                    }
                }
                Err(_) if k > 0 => k -= 1,
                Err(e) => panic!("query alone exceeds the context: {e}"),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskConfig {
        TaskConfig {
            sizes: SplitSizes {
                distill: 20,
                pool: 30,
                val: 5,
                test: 10,
            },
            ..TaskConfig::default()
        }
    }

    #[test]
    fn same_seed_same_splits() {
        let a = make_splits(&small()).unwrap();
        let b = make_splits(&small()).unwrap();
        assert_eq!(a, b);
        let mut c = small();
        c.seed = 1;
        assert_ne!(make_splits(&c).unwrap(), a);
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let s = make_splits(&small()).unwrap();
        let ids = |v: &[CaseRecord]| v.iter().map(|c| c.id).collect::<HashSet<_>>();
        assert!(ids(&s.distill).is_disjoint(&ids(&s.pool)));
        assert!(ids(&s.distill).is_disjoint(&ids(&s.test)));
        assert_eq!((s.distill.len(), s.pool.len(), s.val.len(), s.test.len()), (20, 30, 5, 10));
        assert!(s.all().all(|c| c.style == 1));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let s = make_splits(&small()).unwrap();
        let mut recs: Vec<CaseRecord> = s.all().cloned().collect();
        let mut dup = recs[0].clone();
        dup.split = Split::Test;
        recs.push(dup);
        assert!(Splits::from_records(recs).is_err());
    }

    #[test]
    fn large_split_sizes_are_accepted() {
        let mut cfg = TaskConfig::default();
        cfg.sizes = SplitSizes {
            distill: 1000,
            pool: 2000,
            val: 200,
            test: 10,
        };
        let s = make_splits(&cfg).unwrap();
        assert_eq!(s.distill.len() + s.pool.len() + s.val.len(), 3200);
    }

    #[test]
    fn demo_selection_is_keyed_by_case() {
        let s = make_splits(&small()).unwrap();
        let a = select_demos(&s.pool, 8, 3, 17).unwrap();
        let b = select_demos(&s.pool, 8, 3, 17).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<u64> = a.iter().map(|c| c.id).collect();
        assert_eq!(ids.len(), 8);
        assert!(select_demos(&s.pool, 31, 3, 17).is_err());
    }

    #[test]
    fn episodes_mix_styles_and_shots_and_fit() {
        let mut st = PretrainStream::new(&TaskConfig::default(), 512, 9).unwrap();
        let mut styles = HashSet::new();
        let mut shots = HashSet::new();
        for _ in 0..300 {
            let e = st.next_episode();
            assert!(e.tokens.len() <= 513);
            styles.insert(e.style);
            shots.insert(e.shots);
        }
        assert_eq!(styles.len(), 4);
        assert!(shots.len() >= 8);
    }
}
