//! Box attention and its scale-aware variants.
//!
//! Every head refines a reference window with offsets predicted from the
//! query, samples a `g x g` grid of projected values inside it, and takes a
//! softmax-weighted average scored against a learned per-cell embedding.
//! Fixed-scale attention gives head `i` the anchor `i mod m`; adaptive-scale
//! attention runs all `m` anchors in every head and mixes the per-scale
//! features with query-predicted softmax weights.

use crate::attention::layers::Linear;
use crate::attention::window::{AnchorSet, HeadScaleAssignment};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    /// single window of the base anchor size per query
    Base,
    Fixed,
    Adaptive,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Base => "base",
            Mechanism::Fixed => "fixed",
            Mechanism::Adaptive => "adaptive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" | "box" => Ok(Mechanism::Base),
            "fixed" => Ok(Mechanism::Fixed),
            "adaptive" => Ok(Mechanism::Adaptive),
            _ => Err(Error::Config(format!("unknown attention mechanism {s:?}"))),
        }
    }
}

/// How adaptive-scale attention predicts offsets for its `m` anchors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OffsetSharing {
    /// one `d -> 4m` projection per head: independent offsets per anchor
    PerScale,
    /// one `d -> 4` projection per head reused (temperature-damped) by every anchor
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub scale_count: usize,
    /// temperature denominator; anchor `j` uses `2^j / lambda`
    pub lambda: f64,
    pub grid: usize,
    pub offset_sharing: OffsetSharing,
}

impl AttentionConfig {
    /// Grid 2 and `lambda = 2^(m-1)`.
    pub fn new(dim: usize, heads: usize, scale_count: usize) -> Result<Self> {
        let cfg = Self {
            dim,
            heads,
            scale_count,
            lambda: default_lambda(scale_count),
            grid: 2,
            offset_sharing: OffsetSharing::PerScale,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.scale_count < 1 {
            return Err(Error::Config("scale count must be at least 1".into()));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.grid < 1 {
            return Err(Error::Config("grid size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn temperature(&self, j: usize) -> f64 {
        2f64.powi(j as i32) / self.lambda
    }
}

pub fn default_lambda(scale_count: usize) -> f64 {
    2f64.powi(scale_count.saturating_sub(1) as i32)
}

/// Learned key per head per grid cell, `[heads, grid^2, dim]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelPosEmbedding {
    pub table: ParamId,
}

impl RelPosEmbedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        heads: usize,
        cells: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let t = Tensor::from_fn([heads, cells, dim], |_| rng.range(-bound, bound));
        Self {
            table: store.add(format!("{name}.relpos"), t),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[k, d]`
    pub output: Var,
    /// softmax weights over grid cells, `[k, heads, grid^2]`
    pub grid_weights: Var,
    /// adaptive only: softmax weights over anchors, `[k, heads, m]`
    pub scale_weights: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct GridAttention {
    pub mechanism: Mechanism,
    pub config: AttentionConfig,
    pub offsets: Linear,
    pub value: Linear,
    pub relpos: RelPosEmbedding,
    pub scale_logits: Option<Linear>,
    pub output: Linear,
    assignment: Option<HeadScaleAssignment>,
}

impl GridAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        mechanism: Mechanism,
        config: AttentionConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (n, d, m) = (config.heads, config.dim, config.scale_count);
        let assignment = match mechanism {
            Mechanism::Fixed => Some(HeadScaleAssignment::round_robin(n, m)?),
            _ => None,
        };
        let offset_sets = match (mechanism, config.offset_sharing) {
            (Mechanism::Adaptive, OffsetSharing::PerScale) => m,
            _ => 1,
        };
        // zero offsets: windows start at their anchors
        let offsets = Linear::zeros(store, &format!("{name}.offsets"), d, n * offset_sets * 4);
        let value = Linear::new(store, &format!("{name}.value"), d, d, rng);
        let relpos = RelPosEmbedding::new(store, name, n, config.grid * config.grid, d, rng);
        let scale_logits = (mechanism == Mechanism::Adaptive)
            .then(|| Linear::zeros(store, &format!("{name}.scale_logits"), d, n * m));
        let output = Linear::new(store, &format!("{name}.output"), d, d, rng);
        Ok(Self {
            mechanism,
            config,
            offsets,
            value,
            relpos,
            scale_logits,
            output,
            assignment,
        })
    }

    pub fn assignment(&self) -> Option<&HeadScaleAssignment> {
        self.assignment.as_ref()
    }

    /// Box attention from explicit per-query windows `[k, 4]`; valid for
    /// the base mechanism only.
    pub fn forward_windows(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        map: Var,
        queries: Var,
        windows: Var,
    ) -> Result<AttentionOutput> {
        if self.mechanism != Mechanism::Base {
            return Err(Error::Config(format!(
                "{} attention takes query positions, not windows",
                self.mechanism.name()
            )));
        }
        let k = tape.shape(queries)[0];
        if tape.shape(windows) != [k, 4] {
            return shape_err(format!("windows {:?} for {k} queries", tape.shape(windows)));
        }
        let n = self.config.heads;
        let w = tape.reshape(windows, &[k, 1, 1, 4])?;
        let w = tape.broadcast_to(w, &[k, n, 1, 4])?;
        self.attend(tape, store, map, queries, w, &[1.0])
    }

    /// Attention with anchor windows centered at `positions[k, 2]`.
    pub fn forward_at(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        map: Var,
        queries: Var,
        positions: &Tensor,
        anchors: &AnchorSet,
    ) -> Result<AttentionOutput> {
        let k = tape.shape(queries)[0];
        if positions.shape() != [k, 2] {
            return shape_err(format!("positions {:?} for {k} queries", positions.shape()));
        }
        let (n, m) = (self.config.heads, self.config.scale_count);
        if self.mechanism != Mechanism::Base && anchors.scale_count != m {
            return Err(Error::Config(format!(
                "anchor set has {} scales, config {m}",
                anchors.scale_count
            )));
        }
        let (sets, temps): (usize, Vec<f64>) = match self.mechanism {
            Mechanism::Base | Mechanism::Fixed => (1, vec![1.0]),
            Mechanism::Adaptive => (m, (0..m).map(|j| self.config.temperature(j)).collect()),
        };
        let mut win = Tensor::zeros([k, n, sets, 4]);
        for q in 0..k {
            let (x, y) = (positions.at(&[q, 0]), positions.at(&[q, 1]));
            for h in 0..n {
                for j in 0..sets {
                    let a = match self.mechanism {
                        Mechanism::Base => anchors.size(0),
                        Mechanism::Fixed => {
                            anchors.size(self.assignment.as_ref().unwrap().scale_of(h))
                        }
                        Mechanism::Adaptive => anchors.size(j),
                    };
                    let o = ((q * n + h) * sets + j) * 4;
                    win.data_mut()[o..o + 4].copy_from_slice(&[x, y, a, a]);
                }
            }
        }
        let w = tape.constant(win);
        self.attend(tape, store, map, queries, w, &temps)
    }

    fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        map: Var,
        q: Var,
        base: Var,
        temps: &[f64],
    ) -> Result<AttentionOutput> {
        let cfg = &self.config;
        let ms = tape.shape(map).to_vec();
        if ms.len() != 3 || ms[2] != cfg.dim {
            return shape_err(format!("feature map {ms:?} for attention dim {}", cfg.dim));
        }
        let qs = tape.shape(q).to_vec();
        if qs.len() != 2 || qs[1] != cfg.dim {
            return shape_err(format!("queries {qs:?} for attention dim {}", cfg.dim));
        }
        let (k, n, dh, g) = (qs[0], cfg.heads, cfg.head_dim(), cfg.grid);
        let sets = temps.len();
        let cells = g * g;

        let v = self.value.forward(tape, store, map)?;
        let mut off = self.offsets.forward(tape, store, q)?;
        if tape.shape(off)[1] != n * sets * 4 {
            off = tape.reshape(off, &[k, n, 1, 4])?;
            off = tape.broadcast_to(off, &[k, n, sets, 4])?;
        }
        let off = tape.reshape(off, &[k * n * sets, 4])?;
        let win = tape.reshape(base, &[k * n * sets, 4])?;
        let tvec = (0..k * n * sets).map(|r| temps[r % sets]).collect();
        let min_size = (1.0 / ms[1] as f64, 1.0 / ms[0] as f64);
        let refined = tape.refine_windows(win, off, tvec, min_size)?;
        let pts = tape.grid_points(refined, g)?;
        let pts = tape.reshape(pts, &[k, n, sets * cells, 2])?;
        let samples = tape.sample_heads(v, pts)?;
        let samples = tape.reshape(samples, &[k, n, sets, cells, dh])?;

        let table = tape.param(store, self.relpos.table);
        let table = tape.reshape(table, &[n * cells, cfg.dim])?;
        let keys = tape.transpose(table)?;
        let scores = tape.matmul(q, keys)?;
        let scores = tape.reshape(scores, &[k, n, 1, 1, cells])?;
        let alpha = tape.softmax(scores, -1)?;
        let feats = tape.matmul(alpha, samples)?;

        let (heads, scale_weights) = match &self.scale_logits {
            Some(lin) => {
                let logits = lin.forward(tape, store, q)?;
                let logits = tape.reshape(logits, &[k, n, sets])?;
                let sw = tape.softmax(logits, -1)?;
                let sw4 = tape.reshape(sw, &[k, n, 1, sets])?;
                let f = tape.reshape(feats, &[k, n, sets, dh])?;
                (tape.matmul(sw4, f)?, Some(sw))
            }
            None => (feats, None),
        };
        let heads = tape.reshape(heads, &[k, n * dh])?;
        let output = self.output.forward(tape, store, heads)?;
        let grid_weights = tape.reshape(alpha, &[k, n, cells])?;
        Ok(AttentionOutput {
            output,
            grid_weights,
            scale_weights,
        })
    }
}
