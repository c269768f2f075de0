//! Small pre-norm decoder-only transformer with taps on every branch output.

mod decode;
mod forward;
mod pretrain;

use std::io::{Read, Write};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{GradTape, Matrix, NodeId};
use crate::{seed, tensorfile};

pub use decode::{generate, DecodeConfig, Decoder, GenResult, RowHook, StopReason};
pub use forward::{forward, Branch, NoHook, TapeHook};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};

pub const LN_EPS: f64 = 1e-5;
const MAGIC: &[u8; 4] = b"DVBB";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 144,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_context: 512,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("backbone.vocab_size", self.vocab_size),
            ("backbone.d_model", self.d_model),
            ("backbone.n_layers", self.n_layers),
            ("backbone.n_heads", self.n_heads),
            ("backbone.d_ff", self.d_ff),
            ("backbone.max_context", self.max_context),
        ];
        for (f, v) in positive {
            if v == 0 {
                return Err(Error::config(f, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "backbone.d_model",
                format!("{} is not divisible by n_heads = {}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }
}

/// Parameters of one block, in checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

const LAYER_FIELDS: [&str; 13] = [
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
];

impl LayerParams {
    fn fields(&self) -> [&Matrix; 13] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo, &self.bo, &self.ln2_g,
            &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Matrix; 13] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn shapes(c: &BackboneConfig) -> [(usize, usize); 13] {
        let (d, f) = (c.d_model, c.d_ff);
        [(1, d), (1, d), (d, d), (d, d), (d, d), (d, d), (1, d), (1, d), (1, d), (d, f), (1, f), (f, d), (1, d)]
    }
}

/// Training metadata stored with a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps: usize,
    pub final_loss: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Matrix,
    pub lnf_b: Matrix,
    pub head: Matrix,
}

/// Tape handles for every backbone tensor.
pub struct BackboneNodes {
    pub tok_emb: NodeId,
    pub pos_emb: NodeId,
    pub layers: Vec<[NodeId; 13]>,
    pub lnf_g: NodeId,
    pub lnf_b: NodeId,
    pub head: NodeId,
}

impl Backbone {
    /// Scaled-normal initialization; output projections get an extra
    /// `1/√(2·n_layers)`. Values are rounded to f32 so checkpoints are exact.
    pub fn init(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, "backbone-init");
        let std = 0.02;
        let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut normal = |r: usize, c: usize, s: f64| {
            let dist = Normal::new(0.0, s).unwrap();
            let mut m = Matrix::from_vec(r, c, (0..r * c).map(|_| dist.sample(&mut rng)).collect()).unwrap();
            m.round_to_f32();
            m
        };
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let tok_emb = normal(v, d, std);
        let pos_emb = normal(config.max_context, d, std);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_g: Matrix::filled(1, d, 1.0),
                ln1_b: Matrix::zeros(1, d),
                wq: normal(d, d, std),
                wk: normal(d, d, std),
                wv: normal(d, d, std),
                wo: normal(d, d, proj_std),
                bo: Matrix::zeros(1, d),
                ln2_g: Matrix::filled(1, d, 1.0),
                ln2_b: Matrix::zeros(1, d),
                w1: normal(d, f, std),
                b1: Matrix::zeros(1, f),
                w2: normal(f, d, proj_std),
                b2: Matrix::zeros(1, d),
            })
            .collect();
        let head = normal(d, v, std);
        Ok(Backbone {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Matrix::filled(1, d, 1.0),
            lnf_b: Matrix::zeros(1, d),
            head,
        })
    }

    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, m) in LAYER_FIELDS.iter().zip(l.fields()) {
                out.push((format!("layers.{i}.{n}"), m));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable tensors in the same order as [`Backbone::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.head);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        self.tensors_mut().into_iter().for_each(|m| m.round_to_f32());
    }

    /// Registers every tensor on `tape`, trainable or frozen.
    pub fn register<'a>(&'a self, tape: &mut GradTape<'a>, trainable: bool) -> BackboneNodes {
        let mut reg = |m: &'a Matrix| if trainable { tape.param(m) } else { tape.constant(m) };
        BackboneNodes {
            tok_emb: reg(&self.tok_emb),
            pos_emb: reg(&self.pos_emb),
            layers: self.layers.iter().map(|l| l.fields().map(&mut reg)).collect(),
            lnf_g: reg(&self.lnf_g),
            lnf_b: reg(&self.lnf_b),
            head: reg(&self.head),
        }
    }

    /// Teacher-forced logits (`T × vocab`) of the bare backbone.
    pub fn logits(&self, tokens: &[u32]) -> Result<Matrix> {
        let mut tape = GradTape::new();
        let nodes = self.register(&mut tape, false);
        let out = forward(&mut tape, self, &nodes, tokens, &mut NoHook)?;
        Ok(tape.value(out).clone())
    }

    pub fn save<W: Write>(&self, w: W, meta: &TrainMeta) -> Result<()> {
        let header = serde_json::json!({ "config": self.config, "meta": meta }).to_string();
        let named = self.named();
        let refs: Vec<(&str, &Matrix)> = named.iter().map(|(n, m)| (n.as_str(), *m)).collect();
        tensorfile::write(w, MAGIC, &header, &refs)
    }

    /// Loads a checkpoint; with `expected`, a differing config is rejected.
    pub fn load<R: Read>(r: R, expected: Option<&BackboneConfig>) -> Result<(Self, TrainMeta)> {
        let mut c = tensorfile::read(r, MAGIC)?;
        #[derive(Deserialize)]
        struct Header {
            config: BackboneConfig,
            meta: TrainMeta,
        }
        let h: Header = serde_json::from_str(&c.header)?;
        if let Some(e) = expected {
            if *e != h.config {
                return Err(Error::ArtifactMismatch {
                    what: "backbone config".into(),
                    expected: format!("{e:?}"),
                    found: format!("{:?}", h.config),
                });
            }
        }
        let cfg = h.config;
        cfg.validate()?;
        let (v, d) = (cfg.vocab_size, cfg.d_model);
        let shapes = LayerParams::shapes(&cfg);
        let tok_emb = c.take("tok_emb", v, d)?;
        let pos_emb = c.take("pos_emb", cfg.max_context, d)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let mut t: Vec<Matrix> = Vec::with_capacity(13);
            for (n, &(r, cc)) in LAYER_FIELDS.iter().zip(&shapes) {
                t.push(c.take(&format!("layers.{i}.{n}"), r, cc)?);
            }
            let mut it = t.into_iter();
            let mut next = || it.next().unwrap();
            layers.push(LayerParams {
                ln1_g: next(),
                ln1_b: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                bo: next(),
                ln2_g: next(),
                ln2_b: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            });
        }
        let lnf_g = c.take("lnf_g", 1, d)?;
        let lnf_b = c.take("lnf_b", 1, d)?;
        let head = c.take("head", d, v)?;
        if let Some((n, _)) = c.tensors.first() {
            return Err(Error::format("checkpoint", format!("unexpected tensor `{n}`")));
        }
        Ok((
            Backbone {
                config: cfg,
                tok_emb,
                pos_emb,
                layers,
                lnf_g,
                lnf_b,
                head,
            },
            h.meta,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_context: 32,
            seed: 5,
        }
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = Backbone::init(tiny()).unwrap();
        assert_eq!(a, Backbone::init(tiny()).unwrap());
        let b = Backbone::init(BackboneConfig { seed: 6, ..tiny() }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let c = BackboneConfig {
            d_model: 63,
            n_heads: 4,
            ..BackboneConfig::default()
        };
        assert!(matches!(Backbone::init(c), Err(Error::Config { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Backbone::init(tiny()).unwrap();
        let meta = TrainMeta {
            steps: 3,
            final_loss: 1.5,
            seed: 5,
        };
        let mut buf = Vec::new();
        m.save(&mut buf, &meta).unwrap();
        let (back, bm) = Backbone::load(&buf[..], Some(&tiny())).unwrap();
        assert_eq!(bm, meta);
        assert_eq!(back, m);
        let toks = [1u32, 4, 7, 2, 9];
        let (a, b) = (m.logits(&toks).unwrap(), back.logits(&toks).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let other = BackboneConfig { d_ff: 32, ..tiny() };
        assert!(matches!(
            Backbone::load(&buf[..], Some(&other)),
            Err(Error::ArtifactMismatch { .. })
        ));
    }
}
