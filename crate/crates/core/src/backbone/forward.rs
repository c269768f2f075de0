use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneNodes, LN_EPS};
use crate::error::{Error, Result};
use crate::numeric::{GradTape, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Attn,
    Mlp,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Attn, Branch::Mlp];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Intervention point on the tape: receives each branch output (after its
/// output projection, before the residual add) and returns the node that is
/// added to the residual stream instead.
pub trait TapeHook<'a> {
    fn on_branch(&mut self, tape: &mut GradTape<'a>, layer: usize, branch: Branch, out: NodeId) -> Result<NodeId>;
}

pub struct NoHook;

impl<'a> TapeHook<'a> for NoHook {
    fn on_branch(&mut self, _: &mut GradTape<'a>, _: usize, _: Branch, out: NodeId) -> Result<NodeId> {
        Ok(out)
    }
}

/// Full causal forward over `tokens`; returns the `T × vocab` logits node.
pub fn forward<'a>(
    tape: &mut GradTape<'a>,
    model: &Backbone,
    p: &BackboneNodes,
    tokens: &[u32],
    hook: &mut dyn TapeHook<'a>,
) -> Result<NodeId> {
    let c = &model.config;
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if tokens.len() > c.max_context {
        return Err(Error::ContextOverflow {
            needed: tokens.len(),
            max: c.max_context,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(Error::InvalidArgument(format!("token {t} outside vocabulary of {}", c.vocab_size)));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let te = tape.gather(p.tok_emb, &ids)?;
    let pe = tape.gather(p.pos_emb, &positions)?;
    let mut x = tape.add(te, pe)?;
    for (l, n) in p.layers.iter().enumerate() {
        let [ln1_g, ln1_b, wq, wk, wv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] = *n;
        let a = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
        let q = tape.matmul(a, wq)?;
        let k = tape.matmul(a, wk)?;
        let v = tape.matmul(a, wv)?;
        let att = tape.causal_attention(q, k, v, c.n_heads)?;
        let o = tape.matmul(att, wo)?;
        let o = tape.add_row(o, bo)?;
        let o = hook.on_branch(tape, l, Branch::Attn, o)?;
        x = tape.add(x, o)?;

        let m = tape.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
        let f = tape.matmul(m, w1)?;
        let f = tape.add_row(f, b1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, b2)?;
        let f = hook.on_branch(tape, l, Branch::Mlp, f)?;
        x = tape.add(x, f)?;
    }
    let h = tape.layer_norm(x, p.lnf_g, p.lnf_b, LN_EPS)?;
    tape.matmul(h, p.head)
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::*;

    #[test]
    fn suffix_mutation_leaves_prefix_logits_unchanged() {
        let m = Backbone::init(tiny()).unwrap();
        let toks = vec![1u32, 3, 5, 7, 9, 2, 4];
        let a = m.logits(&toks).unwrap();
        for t in 0..toks.len() - 1 {
            let mut mutated = toks.clone();
            mutated[t + 1] = (mutated[t + 1] + 3) % 11;
            let b = m.logits(&mutated).unwrap();
            for r in 0..=t {
                let same = a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits());
                assert!(same, "position {r} changed after mutating {}", t + 1);
            }
        }
    }

    #[test]
    fn overflow_names_lengths() {
        let m = Backbone::init(tiny()).unwrap();
        let toks = vec![1u32; 33];
        match m.logits(&toks) {
            Err(Error::ContextOverflow { needed: 33, max: 32 }) => {}
            other => panic!("{other:?}"),
        }
    }
}
