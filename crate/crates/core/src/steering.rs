//! Hidden-state interventions: static residual vectors and state-conditioned
//! bottleneck adapters, injected with norm clipping.

use std::io::{Read, Write};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Branch, RowHook, TapeHook};
use crate::error::{Error, Result};
use crate::numeric::matrix::{dot, l2_norm, vec_mat};
use crate::numeric::ops::gelu;
use crate::numeric::{CustomOp, GradTape, Matrix, NodeId};
use crate::{seed, tensorfile};

const MAGIC: &[u8; 4] = b"DVAD";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    Dynamic,
    Static,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringConfig {
    pub mode: AdapterMode,
    pub rank: usize,
    /// Norm-clip ratio; the injected state never exceeds `rho · ‖h‖`.
    pub rho: f64,
    /// Per-generated-token decay of the residual during free-running decoding.
    pub decay_rate: f64,
    /// Layers carrying adapters; `None` means all.
    pub layers: Option<Vec<usize>>,
    pub branches: Vec<Branch>,
    pub seed: u64,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        SteeringConfig {
            mode: AdapterMode::Dynamic,
            rank: 16,
            rho: 2.0,
            decay_rate: 1.0,
            layers: None,
            branches: Branch::BOTH.to_vec(),
            seed: 0,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.rho > 1.0) || !self.rho.is_finite() {
            return Err(Error::config("steering.rho", "must be a finite value > 1"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::config("steering.decay_rate", "must be in (0, 1]"));
        }
        if self.mode == AdapterMode::Dynamic && self.rank == 0 {
            return Err(Error::config("steering.rank", "must be positive"));
        }
        if let Some(ls) = &self.layers {
            if let Some(l) = ls.iter().find(|&&l| l >= n_layers) {
                return Err(Error::config("steering.layers", format!("layer {l} does not exist")));
            }
        }
        Ok(())
    }
}

/// Parameters at one (layer, branch) site. Row-vector convention: a state
/// `h` (1×d) maps to `gelu(h · down) · up`, with `down` d×r and `up` r×d.
#[derive(Clone, Debug, PartialEq)]
pub enum AdapterEntry {
    Dynamic { down: Matrix, up: Matrix },
    Static { v: Matrix },
}

impl AdapterEntry {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            AdapterEntry::Dynamic { down, up } => vec![("down", down), ("up", up)],
            AdapterEntry::Static { v } => vec![("v", v)],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            AdapterEntry::Dynamic { down, up } => vec![down, up],
            AdapterEntry::Static { v } => vec![v],
        }
    }
}

/// `δ` for state `h`: `gelu(h·down)·up` (dynamic) or `v` (static).
pub fn adapter_delta(h: &[f64], entry: &AdapterEntry) -> Result<Vec<f64>> {
    match entry {
        AdapterEntry::Dynamic { down, up } => {
            if h.len() != down.rows() || down.cols() != up.rows() || up.cols() != h.len() {
                return Err(Error::shape(
                    "adapter_delta",
                    format!("h of length {}", down.rows()),
                    format!("{} (down {:?}, up {:?})", h.len(), down.shape(), up.shape()),
                ));
            }
            let mut z = vec![0.0; down.cols()];
            vec_mat(h, down, &mut z);
            z.iter_mut().for_each(|v| *v = gelu(*v));
            let mut out = vec![0.0; up.cols()];
            vec_mat(&z, up, &mut out);
            Ok(out)
        }
        AdapterEntry::Static { v } => {
            if v.len() != h.len() {
                return Err(Error::shape("adapter_delta", format!("h of length {}", v.len()), h.len()));
            }
            Ok(v.data().to_vec())
        }
    }
}

/// Norm-clipped addition `(h + s·δ) · min(1, ρ‖h‖ / ‖h + s·δ‖)`.
///
/// `δ = 0` (or `s = 0`) returns `h` unchanged; `h = 0` with a nonzero
/// residual returns 0.
pub fn inject(h: &[f64], delta: &[f64], rho: f64, scale: f64) -> Vec<f64> {
    let mut out = h.to_vec();
    inject_into(&mut out, delta, rho, scale);
    out
}

fn clip_factor(h_norm: f64, u_norm: f64, rho: f64) -> f64 {
    if u_norm <= rho * h_norm {
        1.0
    } else {
        rho * h_norm / u_norm
    }
}

/// In-place [`inject`] on `h`.
pub fn inject_into(h: &mut [f64], delta: &[f64], rho: f64, scale: f64) {
    debug_assert_eq!(h.len(), delta.len());
    if scale == 0.0 || delta.iter().all(|&d| d == 0.0) {
        return;
    }
    let h_norm = l2_norm(h);
    h.iter_mut().zip(delta).for_each(|(x, d)| *x += scale * d);
    let c = clip_factor(h_norm, l2_norm(h), rho);
    if c != 1.0 {
        h.iter_mut().for_each(|x| *x *= c);
    }
}

/// Residual scale at free-running generation step `step`: `rate^step`.
pub fn decay_schedule(step: usize, rate: f64) -> f64 {
    rate.powi(step.min(i32::MAX as usize) as i32)
}

/// Tape op for row-wise [`inject`] with one scale per row.
struct InjectOp {
    rho: f64,
    scales: Vec<f64>,
}

impl CustomOp for InjectOp {
    fn backward(&self, g: &Matrix, inputs: &[&Matrix], needs: &[bool]) -> Vec<Option<Matrix>> {
        let (h, delta) = (inputs[0], inputs[1]);
        let (rows, d) = h.shape();
        let mut gh = Matrix::zeros(rows, d);
        let mut gd = Matrix::zeros(rows, d);
        for r in 0..rows {
            let s = self.scales[r];
            let (hr, dr, gr) = (h.row(r), delta.row(r), g.row(r));
            let identity = s == 0.0 || dr.iter().all(|&x| x == 0.0);
            let u: Vec<f64> = hr.iter().zip(dr).map(|(a, b)| a + s * b).collect();
            let (hn, un) = (l2_norm(hr), l2_norm(&u));
            if identity || un <= self.rho * hn {
                gh.row_mut(r).copy_from_slice(gr);
                gd.row_mut(r).iter_mut().zip(gr).for_each(|(o, x)| *o = s * x);
                continue;
            }
            if hn == 0.0 {
                continue;
            }
            let c = self.rho * hn / un;
            let ug = dot(&u, gr);
            let gu: Vec<f64> = gr.iter().zip(&u).map(|(x, ui)| c * (x - ui * ug / (un * un))).collect();
            let k = self.rho * ug / un / hn;
            for (i, o) in gh.row_mut(r).iter_mut().enumerate() {
                *o = gu[i] + k * hr[i];
            }
            gd.row_mut(r).iter_mut().zip(&gu).for_each(|(o, x)| *o = s * x);
        }
        vec![needs[0].then_some(gh), needs[1].then_some(gd)]
    }
}

/// Row-wise norm-clipped injection on the tape.
pub fn inject_node(tape: &mut GradTape<'_>, h: NodeId, delta: NodeId, rho: f64, scales: Vec<f64>) -> Result<NodeId> {
    let (hv, dv) = (tape.value(h), tape.value(delta));
    if hv.shape() != dv.shape() || scales.len() != hv.rows() {
        return Err(Error::shape(
            "inject",
            format!("{:?} with {} scales", hv.shape(), hv.rows()),
            format!("{:?} with {} scales", dv.shape(), scales.len()),
        ));
    }
    let mut out = hv.clone();
    for (r, &s) in scales.iter().enumerate() {
        inject_into(out.row_mut(r), dv.row(r), rho, s);
    }
    Ok(tape.custom(&[h, delta], out, Box::new(InjectOp { rho, scales })))
}

/// The trainable steering state: one optional entry per (layer, branch).
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub mode: AdapterMode,
    pub rank: usize,
    pub rho: f64,
    pub decay_rate: f64,
    pub d_model: usize,
    pub n_layers: usize,
    /// Indexed by `layer * 2 + branch`.
    pub entries: Vec<Option<AdapterEntry>>,
}

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    mode: AdapterMode,
    rank: usize,
    rho: f64,
    decay_rate: f64,
    d_model: usize,
    n_layers: usize,
    sites: Vec<(usize, Branch)>,
}

impl AdapterSet {
    /// Fresh adapters: dynamic sites get a random down-projection and a zero
    /// up-projection, static sites a zero vector.
    pub fn init(cfg: &SteeringConfig, d_model: usize, n_layers: usize) -> Result<Self> {
        cfg.validate(n_layers)?;
        let mut rng = seed::rng(cfg.seed, "adapter-init");
        let dist = Normal::new(0.0, 1.0 / (d_model as f64).sqrt()).unwrap();
        let mut entries = vec![None; n_layers * 2];
        if cfg.mode != AdapterMode::Off {
            for l in 0..n_layers {
                if cfg.layers.as_ref().is_some_and(|ls| !ls.contains(&l)) {
                    continue;
                }
                for &b in &cfg.branches {
                    let e = match cfg.mode {
                        AdapterMode::Dynamic => {
                            let mut down = Matrix::from_vec(
                                d_model,
                                cfg.rank,
                                (0..d_model * cfg.rank).map(|_| dist.sample(&mut rng)).collect(),
                            )?;
                            down.round_to_f32();
                            AdapterEntry::Dynamic {
                                down,
                                up: Matrix::zeros(cfg.rank, d_model),
                            }
                        }
                        AdapterMode::Static => AdapterEntry::Static {
                            v: Matrix::zeros(1, d_model),
                        },
                        AdapterMode::Off => unreachable!(),
                    };
                    entries[l * 2 + b.index()] = Some(e);
                }
            }
        }
        Ok(AdapterSet {
            mode: cfg.mode,
            rank: cfg.rank,
            rho: cfg.rho,
            decay_rate: cfg.decay_rate,
            d_model,
            n_layers,
            entries,
        })
    }

    pub fn off(d_model: usize, n_layers: usize) -> Self {
        AdapterSet {
            mode: AdapterMode::Off,
            rank: 0,
            rho: 2.0,
            decay_rate: 1.0,
            d_model,
            n_layers,
            entries: vec![None; n_layers * 2],
        }
    }

    pub fn entry(&self, layer: usize, branch: Branch) -> Option<&AdapterEntry> {
        self.entries.get(layer * 2 + branch.index()).and_then(|e| e.as_ref())
    }

    pub fn sites(&self) -> Vec<(usize, Branch)> {
        (0..self.n_layers)
            .flat_map(|l| Branch::BOTH.into_iter().map(move |b| (l, b)))
            .filter(|&(l, b)| self.entry(l, b).is_some())
            .collect()
    }

    /// Trainable tensors in site order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.entries.iter_mut().flatten().flat_map(|e| e.tensors_mut()).collect()
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.entries.iter().flatten().flat_map(|e| e.tensors().into_iter().map(|(_, m)| m)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        self.tensors_mut().into_iter().for_each(|m| m.round_to_f32());
    }

    /// Registers the adapter tensors on `tape` in [`AdapterSet::tensors`] order.
    pub fn register<'a>(&'a self, tape: &mut GradTape<'a>, trainable: bool) -> Vec<NodeId> {
        self.tensors()
            .into_iter()
            .map(|m| if trainable { tape.param(m) } else { tape.constant(m) })
            .collect()
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let header = serde_json::to_string(&AdapterHeader {
            mode: self.mode,
            rank: self.rank,
            rho: self.rho,
            decay_rate: self.decay_rate,
            d_model: self.d_model,
            n_layers: self.n_layers,
            sites: self.sites(),
        })?;
        let mut names = Vec::new();
        for (l, b) in self.sites() {
            for (n, m) in self.entry(l, b).unwrap().tensors() {
                names.push((format!("layers.{l}.{}.{n}", branch_name(b)), m));
            }
        }
        let refs: Vec<(&str, &Matrix)> = names.iter().map(|(n, m)| (n.as_str(), *m)).collect();
        tensorfile::write(w, MAGIC, &header, &refs)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let mut c = tensorfile::read(r, MAGIC)?;
        let h: AdapterHeader = serde_json::from_str(&c.header)?;
        let mut entries = vec![None; h.n_layers * 2];
        for &(l, b) in &h.sites {
            if l >= h.n_layers {
                return Err(Error::format("adapter checkpoint", format!("site layer {l} out of range")));
            }
            let p = format!("layers.{l}.{}", branch_name(b));
            let e = match h.mode {
                AdapterMode::Dynamic => AdapterEntry::Dynamic {
                    down: c.take(&format!("{p}.down"), h.d_model, h.rank)?,
                    up: c.take(&format!("{p}.up"), h.rank, h.d_model)?,
                },
                AdapterMode::Static => AdapterEntry::Static {
                    v: c.take(&format!("{p}.v"), 1, h.d_model)?,
                },
                AdapterMode::Off => {
                    return Err(Error::format("adapter checkpoint", "mode off has no sites"));
                }
            };
            entries[l * 2 + b.index()] = Some(e);
        }
        Ok(AdapterSet {
            mode: h.mode,
            rank: h.rank,
            rho: h.rho,
            decay_rate: h.decay_rate,
            d_model: h.d_model,
            n_layers: h.n_layers,
            entries,
        })
    }

    /// Tape hook applying these adapters at scale 1 (teacher forcing).
    /// `nodes` are the handles returned by [`AdapterSet::register`].
    pub fn tape_hook<'s>(&'s self, nodes: &'s [NodeId]) -> SteeringHook<'s> {
        SteeringHook {
            set: self,
            nodes,
            taps: None,
        }
    }
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Attn => "attn",
        Branch::Mlp => "mlp",
    }
}

/// Pre-injection branch output captured during a tape forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchTap {
    pub layer: usize,
    pub branch: Branch,
    /// `T × d`: one state per position.
    pub states: Matrix,
}

pub struct SteeringHook<'s> {
    set: &'s AdapterSet,
    nodes: &'s [NodeId],
    pub taps: Option<Vec<BranchTap>>,
}

impl<'s> SteeringHook<'s> {
    pub fn with_taps(mut self) -> Self {
        self.taps = Some(Vec::new());
        self
    }

    fn site_nodes(&self, layer: usize, branch: Branch) -> &'s [NodeId] {
        let mut i = 0;
        for (l, b) in self.set.sites() {
            let n = match self.set.entry(l, b).unwrap() {
                AdapterEntry::Dynamic { .. } => 2,
                AdapterEntry::Static { .. } => 1,
            };
            if (l, b) == (layer, branch) {
                return &self.nodes[i..i + n];
            }
            i += n;
        }
        &[]
    }
}

impl<'a, 's> TapeHook<'a> for SteeringHook<'s> {
    fn on_branch(&mut self, tape: &mut GradTape<'a>, layer: usize, branch: Branch, out: NodeId) -> Result<NodeId> {
        if let Some(taps) = self.taps.as_mut() {
            taps.push(BranchTap {
                layer,
                branch,
                states: tape.value(out).clone(),
            });
        }
        let Some(entry) = self.set.entry(layer, branch) else {
            return Ok(out);
        };
        let nodes = self.site_nodes(layer, branch);
        let rows = tape.value(out).rows();
        let delta = match entry {
            AdapterEntry::Dynamic { .. } => {
                let z = tape.matmul(out, nodes[0])?;
                let z = tape.gelu(z);
                tape.matmul(z, nodes[1])?
            }
            AdapterEntry::Static { .. } => tape.broadcast_row(nodes[0], rows)?,
        };
        inject_node(tape, out, delta, self.set.rho, vec![1.0; rows])
    }
}

impl RowHook for AdapterSet {
    fn on_branch(&self, layer: usize, branch: Branch, out: &mut [f64], scale: f64) {
        if let Some(e) = self.entry(layer, branch) {
            let delta = adapter_delta(out, e).expect("adapter dimensions checked at load");
            inject_into(out, &delta, self.rho, scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::grad_check;

    #[test]
    fn clipping_example() {
        let out = inject(&[3.0, 4.0], &[3.0, 4.0], 1.2, 1.0);
        assert!((out[0] - 3.6).abs() < 1e-12 && (out[1] - 4.8).abs() < 1e-12, "{out:?}");
        assert!((l2_norm(&out) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_delta_is_identity_bit_exactly() {
        let h = [-0.0, 1.5, -2.25e-300];
        let out = inject(&h, &[0.0, -0.0, 0.0], 2.0, 1.0);
        assert!(out.iter().zip(&h).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn large_rho_does_not_clip() {
        let out = inject(&[1.0, 2.0], &[0.1, -0.1], 10.0, 1.0);
        assert_eq!(out, vec![1.1, 1.9]);
    }

    #[test]
    fn zero_state_with_residual_collapses() {
        assert_eq!(inject(&[0.0, 0.0], &[1.0, 1.0], 2.0, 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn decay_values() {
        assert_eq!(decay_schedule(0, 0.9), 1.0);
        assert!((decay_schedule(2, 0.9) - 0.81).abs() < 1e-15);
        assert_eq!(decay_schedule(57, 1.0), 1.0);
    }

    #[test]
    fn zero_up_gives_zero_delta_and_static_ignores_state() {
        let cfg = SteeringConfig {
            rank: 3,
            ..SteeringConfig::default()
        };
        let set = AdapterSet::init(&cfg, 6, 1).unwrap();
        let e = set.entry(0, Branch::Mlp).unwrap();
        assert!(adapter_delta(&[1.0, -2.0, 3.0, 0.5, 0.0, 1.0], e).unwrap().iter().all(|&v| v == 0.0));
        assert!(adapter_delta(&[1.0; 5], e).is_err());
        let st = AdapterEntry::Static {
            v: Matrix::row_vector(vec![0.5, -1.0]),
        };
        assert_eq!(adapter_delta(&[1.0, 2.0], &st).unwrap(), adapter_delta(&[-7.0, 3.0], &st).unwrap());
    }

    #[test]
    fn inject_gradient_matches_finite_differences() {
        // two rows: one clipped, one not
        let x0 = vec![0.3, -0.2, 0.5, 0.1, 1.0, 0.5, 1.2, 0.9, 0.05, 0.02, -0.01, 0.04, 0.2, 0.1, -0.3, 0.0];
        for scale in [1.0, 0.6] {
            let rep = grad_check(
                |x| {
                    let h = Matrix::from_vec(2, 4, x[..8].to_vec()).unwrap();
                    let d = Matrix::from_vec(2, 4, x[8..].to_vec()).unwrap();
                    let w = Matrix::from_vec(4, 1, vec![0.7, -1.1, 0.4, 2.0]).unwrap();
                    let ones = Matrix::filled(1, 2, 1.0);
                    let mut tape = GradTape::new();
                    let (hn, dn) = (tape.param(&h), tape.param(&d));
                    let o = inject_node(&mut tape, hn, dn, 1.3, vec![scale, scale]).unwrap();
                    let wn = tape.constant(&w);
                    let y = tape.matmul(o, wn).unwrap();
                    let on = tape.constant(&ones);
                    let y2 = tape.gelu(y);
                    let s = tape.matmul(on, y2).unwrap();
                    tape.backward(s).unwrap();
                    let mut g = tape.grad(hn).unwrap().data().to_vec();
                    g.extend_from_slice(tape.grad(dn).unwrap().data());
                    (tape.scalar(s), g)
                },
                &x0,
                1e-6,
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-6, "{rep:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for mode in [AdapterMode::Dynamic, AdapterMode::Static] {
            let cfg = SteeringConfig {
                mode,
                rank: 2,
                layers: Some(vec![1]),
                ..SteeringConfig::default()
            };
            let mut set = AdapterSet::init(&cfg, 4, 2).unwrap();
            set.tensors_mut().into_iter().for_each(|m| m.data_mut().iter_mut().for_each(|v| *v += 0.25));
            set.round_to_f32();
            let mut buf = Vec::new();
            set.save(&mut buf).unwrap();
            assert_eq!(AdapterSet::load(&buf[..]).unwrap(), set);
            assert_eq!(set.sites().len(), 2);
        }
    }
}
