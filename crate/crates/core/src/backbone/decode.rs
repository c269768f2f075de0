use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backbone, Branch, LN_EPS};
use crate::error::{Error, Result};
use crate::numeric::matrix::{dot, vec_mat};
use crate::numeric::ops::{argmax, gelu, softmax_into};
use crate::seed;
use crate::steering::decay_schedule;

/// Row-wise intervention used by the incremental decoder. `scale` is the
/// decode-time multiplier for the residual at this position.
pub trait RowHook: Sync {
    fn on_branch(&self, layer: usize, branch: Branch, out: &mut [f64], scale: f64);
}

fn layer_norm_row(x: &[f64], g: &[f64], b: &[f64], out: &mut [f64]) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rs = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rs * g[i] + b[i];
    }
}

/// Incremental decoder with per-layer key/value caches.
pub struct Decoder<'m> {
    model: &'m Backbone,
    hook: Option<&'m dyn RowHook>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Backbone, hook: Option<&'m dyn RowHook>) -> Self {
        let n = model.config.n_layers;
        Decoder {
            model,
            hook,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `token` and returns the next-token logits at its position.
    pub fn step(&mut self, token: u32, scale: f64) -> Result<Vec<f64>> {
        let m = self.model;
        let c = &m.config;
        if self.len >= c.max_context {
            return Err(Error::ContextOverflow {
                needed: self.len + 1,
                max: c.max_context,
            });
        }
        if token as usize >= c.vocab_size {
            return Err(Error::InvalidArgument(format!("token {token} outside vocabulary of {}", c.vocab_size)));
        }
        let (d, heads) = (c.d_model, c.n_heads);
        let dh = d / heads;
        let att_scale = 1.0 / (dh as f64).sqrt();
        let pos = self.len;
        let mut x: Vec<f64> = m.tok_emb.row(token as usize).iter().zip(m.pos_emb.row(pos)).map(|(a, b)| a + b).collect();
        let mut a = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut att = vec![0.0; d];
        let mut o = vec![0.0; d];
        let mut f = vec![0.0; c.d_ff];
        let mut probs = vec![0.0; pos + 1];
        for (l, p) in m.layers.iter().enumerate() {
            layer_norm_row(&x, p.ln1_g.data(), p.ln1_b.data(), &mut a);
            vec_mat(&a, &p.wq, &mut q);
            vec_mat(&a, &p.wk, &mut k);
            vec_mat(&a, &p.wv, &mut v);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let (ks, vs) = (&self.keys[l], &self.values[l]);
            att.iter_mut().for_each(|z| *z = 0.0);
            for h in 0..heads {
                let c0 = h * dh;
                let qh = &q[c0..c0 + dh];
                for (j, s) in probs.iter_mut().enumerate() {
                    *s = att_scale * dot(qh, &ks[j * d + c0..j * d + c0 + dh]);
                }
                let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in probs.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for (j, s) in probs.iter().enumerate() {
                    let w = s / sum;
                    for (z, vv) in att[c0..c0 + dh].iter_mut().zip(&vs[j * d + c0..j * d + c0 + dh]) {
                        *z += w * vv;
                    }
                }
            }
            vec_mat(&att, &p.wo, &mut o);
            o.iter_mut().zip(p.bo.data()).for_each(|(z, b)| *z += b);
            if let Some(hk) = self.hook {
                hk.on_branch(l, Branch::Attn, &mut o, scale);
            }
            x.iter_mut().zip(&o).for_each(|(z, y)| *z += y);

            layer_norm_row(&x, p.ln2_g.data(), p.ln2_b.data(), &mut a);
            vec_mat(&a, &p.w1, &mut f);
            f.iter_mut().zip(p.b1.data()).for_each(|(z, b)| *z = gelu(*z + b));
            vec_mat(&f, &p.w2, &mut o);
            o.iter_mut().zip(p.b2.data()).for_each(|(z, b)| *z += b);
            if let Some(hk) = self.hook {
                hk.on_branch(l, Branch::Mlp, &mut o, scale);
            }
            x.iter_mut().zip(&o).for_each(|(z, y)| *z += y);
        }
        layer_norm_row(&x, m.lnf_g.data(), m.lnf_b.data(), &mut a);
        let mut logits = vec![0.0; c.vocab_size];
        vec_mat(&a, &m.head, &mut logits);
        self.len += 1;
        Ok(logits)
    }

    /// Feeds a whole prefix at scale 1; returns the logits after its last token.
    pub fn prefill(&mut self, tokens: &[u32]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let mut last = Vec::new();
        for &t in tokens {
            last = self.step(t, 1.0)?;
        }
        Ok(last)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub greedy: bool,
    pub eos: u32,
    /// Per-generated-token decay of adapter residuals; 1 disables decay.
    pub decay_rate: f64,
    /// Seed for sampling when `greedy` is false.
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_new_tokens: 128,
            greedy: true,
            eos: crate::synthtask::EOS,
            decay_rate: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Eos,
    Budget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenResult {
    /// Generated tokens, including the EOS when one was emitted.
    pub tokens: Vec<u32>,
    /// P(EOS) from each step's softmax.
    pub eos_probs: Vec<f64>,
    pub stop: StopReason,
}

/// Free-running generation from `prompt`. The residual scale at generation
/// step `j` (the step producing the `j`-th new token) is `decay_rate^j`.
pub fn generate(model: &Backbone, prompt: &[u32], cfg: &DecodeConfig, hook: Option<&dyn RowHook>) -> Result<GenResult> {
    let needed = prompt.len() + cfg.max_new_tokens.saturating_sub(1);
    if needed > model.config.max_context {
        return Err(Error::ContextOverflow {
            needed,
            max: model.config.max_context,
        });
    }
    if cfg.eos as usize >= model.config.vocab_size {
        return Err(Error::InvalidArgument(format!("eos id {} outside vocabulary", cfg.eos)));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let mut out = GenResult {
        tokens: Vec::new(),
        eos_probs: Vec::new(),
        stop: StopReason::Budget,
    };
    if cfg.max_new_tokens == 0 {
        return Ok(out);
    }
    let mut dec = Decoder::new(model, hook);
    let mut rng: Option<ChaCha8Rng> = (!cfg.greedy).then(|| seed::rng(cfg.seed, "sampling"));
    let (body, last) = prompt.split_at(prompt.len() - 1);
    for &t in body {
        dec.step(t, 1.0)?;
    }
    let mut logits = dec.step(last[0], decay_schedule(0, cfg.decay_rate))?;
    let mut probs = vec![0.0; logits.len()];
    for j in 0..cfg.max_new_tokens {
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("logits at generation step {j}"),
                index: i,
            });
        }
        softmax_into(&logits, 1.0, &mut probs);
        out.eos_probs.push(probs[cfg.eos as usize]);
        let next = match rng.as_mut() {
            None => argmax(&logits),
            Some(r) => {
                let u: f64 = r.random();
                let mut acc = 0.0;
                probs
                    .iter()
                    .position(|&p| {
                        acc += p;
                        acc > u
                    })
                    .unwrap_or(probs.len() - 1)
            }
        } as u32;
        out.tokens.push(next);
        if next == cfg.eos {
            out.stop = StopReason::Eos;
            break;
        }
        if j + 1 < cfg.max_new_tokens {
            logits = dec.step(next, decay_schedule(j + 1, cfg.decay_rate))?;
        }
    }
    Ok(out)
}
