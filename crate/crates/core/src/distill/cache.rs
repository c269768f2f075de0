//! Teacher top-K logit cache and its binary file.

use std::io::{Read, Write};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::numeric::ops::top_k_indices;
use crate::synthtask::{build_prompt, select_demos, CaseRecord};

const MAGIC: &[u8; 4] = b"DVTC";
const VERSION: u32 = 1;

/// Top-K teacher logits for every answer position of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCacheRecord {
    pub case_id: u64,
    /// Per answer position: K token ids, descending by logit.
    pub ids: Vec<Vec<u32>>,
    /// Raw logits aligned with `ids`.
    pub logits: Vec<Vec<f32>>,
}

impl TeacherCacheRecord {
    pub fn positions(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCache {
    pub k: usize,
    pub shots: usize,
    pub temperature: f64,
    pub dataset_id: u64,
    pub records: Vec<TeacherCacheRecord>,
}

impl TeacherCache {
    pub fn get(&self, case_id: u64) -> Option<&TeacherCacheRecord> {
        self.records
            .binary_search_by_key(&case_id, |r| r.case_id)
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.k as u32).to_le_bytes());
        buf.extend_from_slice(&(self.shots as u32).to_le_bytes());
        buf.extend_from_slice(&self.temperature.to_le_bytes());
        buf.extend_from_slice(&self.dataset_id.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            buf.extend_from_slice(&r.case_id.to_le_bytes());
            buf.extend_from_slice(&(r.positions() as u32).to_le_bytes());
            for (ids, logits) in r.ids.iter().zip(&r.logits) {
                ids.iter().for_each(|i| buf.extend_from_slice(&i.to_le_bytes()));
                logits.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            }
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut b = Vec::new();
        r.read_to_end(&mut b)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = b
                .get(pos..pos + n)
                .ok_or_else(|| Error::format("teacher cache", "truncated file"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::format("teacher cache", "bad magic"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(Error::format("teacher cache", format!("unsupported version {version}")));
        }
        let k = u32_at(take(4)?) as usize;
        let shots = u32_at(take(4)?) as usize;
        let temperature = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let dataset_id = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let n = u32_at(take(4)?) as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let case_id = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let npos = u32_at(take(4)?) as usize;
            let mut ids = Vec::with_capacity(npos);
            let mut logits = Vec::with_capacity(npos);
            for _ in 0..npos {
                ids.push(take(4 * k)?.chunks_exact(4).map(u32_at).collect());
                logits.push(
                    take(4 * k)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                );
            }
            records.push(TeacherCacheRecord { case_id, ids, logits });
        }
        if pos != b.len() {
            return Err(Error::format("teacher cache", "trailing bytes"));
        }
        Ok(TeacherCache {
            k,
            shots,
            temperature,
            dataset_id,
            records,
        })
    }
}

/// Outcome of caching: the cache plus ids of cases whose teacher prompt did
/// not fit the context.
pub struct CacheOutcome {
    pub cache: TeacherCache,
    pub skipped: Vec<u64>,
}

/// Top-K logits of one case from a teacher-forced forward of the
/// demonstration prompt.
pub fn teacher_record(model: &Backbone, case: &CaseRecord, demos: &[&CaseRecord], k: usize) -> Result<TeacherCacheRecord> {
    let layout = build_prompt(case, demos, model.config.max_context)?;
    let logits = model.logits(layout.model_input())?;
    let mut ids = Vec::with_capacity(layout.answer.len());
    let mut vals = Vec::with_capacity(layout.answer.len());
    for row in layout.predicting_positions() {
        let r = logits.row(row);
        let top = top_k_indices(r, k);
        vals.push(top.iter().map(|&i| r[i] as f32).collect());
        ids.push(top.into_iter().map(|i| i as u32).collect());
    }
    Ok(TeacherCacheRecord {
        case_id: case.id,
        ids,
        logits: vals,
    })
}

/// Caches the teacher for `cases`, with `shots` demonstrations per case drawn
/// from `pool` by `demo_seed`.
pub fn cache_teacher(
    model: &Backbone,
    cases: &[CaseRecord],
    pool: &[CaseRecord],
    k: usize,
    shots: usize,
    temperature: f64,
    demo_seed: u64,
    dataset_id: u64,
) -> Result<CacheOutcome> {
    if k == 0 || k > model.config.vocab_size {
        return Err(Error::config("distill.k", format!("must be in 1..={}", model.config.vocab_size)));
    }
    let one = |c: &CaseRecord| -> Result<Option<TeacherCacheRecord>> {
        let demos = select_demos(pool, shots, demo_seed, c.id)?;
        match teacher_record(model, c, &demos, k) {
            Ok(r) => Ok(Some(r)),
            Err(Error::ContextOverflow { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<Option<TeacherCacheRecord>>> = {
        use rayon::prelude::*;
        cases.par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<Option<TeacherCacheRecord>>> = cases.iter().map(one).collect();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (c, r) in cases.iter().zip(results) {
        match r? {
            Some(rec) => records.push(rec),
            None => {
                log::warn!("case {} skipped: teacher prompt exceeds the context", c.id);
                skipped.push(c.id);
            }
        }
    }
    records.sort_by_key(|r| r.case_id);
    Ok(CacheOutcome {
        cache: TeacherCache {
            k,
            shots,
            temperature,
            dataset_id,
            records,
        },
        skipped,
    })
}
