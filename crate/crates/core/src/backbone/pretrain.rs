use serde::{Deserialize, Serialize};

use super::{forward, Backbone, BackboneConfig, NoHook, TrainMeta};
use crate::error::{Error, Result};
use crate::numeric::losses::weighted_ce;
use crate::numeric::{Adam, AdamConfig, GradTape, Matrix};
use crate::synthtask::{PretrainStream, TaskConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of steps with linear warmup.
    pub warmup_frac: f64,
    /// Cosine decay floor as a fraction of `lr`.
    pub final_lr_frac: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 8,
            lr: 2e-3,
            warmup_frac: 0.05,
            final_lr_frac: 0.1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("pretrain.steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("pretrain.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.final_lr_frac) {
            return Err(Error::config("pretrain.warmup_frac", "fractions must be in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = ((self.steps as f64 * self.warmup_frac).round() as usize).max(1);
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = (self.steps - warm).max(1) as f64;
        let prog = ((step - warm) as f64 / span).min(1.0);
        let floor = self.final_lr_frac;
        self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * prog).cos()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    pub meta: TrainMeta,
}

/// Next-token loss and gradients of one sequence (all positions supervised).
fn sequence_grads(model: &Backbone, tokens: &[u32]) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = GradTape::new();
    let nodes = model.register(&mut tape, true);
    let input = &tokens[..tokens.len() - 1];
    let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    let logits = forward(&mut tape, model, &nodes, input, &mut NoHook)?;
    let loss = weighted_ce(&mut tape, logits, &targets, &vec![1.0; targets.len()])?;
    tape.backward(loss)?;
    let value = tape.scalar(loss);
    let mut ids = vec![nodes.tok_emb, nodes.pos_emb];
    for l in &nodes.layers {
        ids.extend_from_slice(l);
    }
    ids.extend([nodes.lnf_g, nodes.lnf_b, nodes.head]);
    let grads = ids
        .into_iter()
        .map(|id| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(tape.value(id).rows(), tape.value(id).cols()))
        })
        .collect();
    Ok((value, grads))
}

fn batch_grads(model: &Backbone, batch: &[Vec<u32>]) -> Result<Vec<(f64, Vec<Matrix>)>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        batch.par_iter().map(|s| sequence_grads(model, s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.iter().map(|s| sequence_grads(model, s)).collect()
    }
}

/// Trains a fresh backbone on the mixed-style, mixed-shot episode stream.
/// `progress` is called after every step with `(step, loss)`.
pub fn pretrain(
    config: BackboneConfig,
    task: &TaskConfig,
    pc: &PretrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(Backbone, PretrainReport)> {
    pc.validate()?;
    let mut model = Backbone::init(config)?;
    let mut stream = PretrainStream::new(task, config.max_context, pc.seed)?;
    let shapes: Vec<usize> = model.named().iter().map(|(_, m)| m.len()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: pc.lr,
            ..AdamConfig::default()
        },
        &shapes,
    );
    let mut losses = Vec::with_capacity(pc.steps);
    for step in 0..pc.steps {
        let batch: Vec<Vec<u32>> = (0..pc.batch_size).map(|_| stream.next_episode().tokens).collect();
        let results = batch_grads(&model, &batch)?;
        let inv = 1.0 / pc.batch_size as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Matrix> = Vec::new();
        for (l, g) in results {
            loss += l * inv;
            if grads.is_empty() {
                grads = g;
                grads.iter_mut().for_each(|m| m.scale(inv));
            } else {
                for (acc, mut x) in grads.iter_mut().zip(g) {
                    x.scale(inv);
                    acc.add_assign(&x);
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        if pc.grad_clip > 0.0 {
            let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if norm > pc.grad_clip {
                grads.iter_mut().for_each(|g| g.scale(pc.grad_clip / norm));
            }
        }
        let grefs: Vec<&Matrix> = grads.iter().collect();
        adam.step_with_lr(&mut model.tensors_mut(), &grefs, pc.lr_at(step));
        losses.push(loss);
        progress(step, loss);
    }
    model.round_to_f32();
    let meta = TrainMeta {
        steps: pc.steps,
        final_loss: *losses.last().unwrap(),
        seed: pc.seed,
    };
    Ok((model, PretrainReport { losses, meta }))
}
