//! Masked instance attention: a dense `g x g` grid per head split into
//! 2x2 bins that share one score each, masked by the previous layer's mask
//! prediction.

use crate::attention::layers::Linear;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{sample_point, ParamStore, Rng, Tape, Tensor, Var};

/// Additive score for a masked cell.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskedConfig {
    pub dim: usize,
    pub heads: usize,
    pub grid: usize,
}

impl MaskedConfig {
    pub fn new(dim: usize, heads: usize, grid: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "dim {dim} not divisible by {heads} heads"
            )));
        }
        if grid < 2 || !grid.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "masked attention grid must be even, got {grid}"
            )));
        }
        Ok(Self { dim, heads, grid })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaskedOutput {
    pub output: Var,
    /// `[k, heads, grid^2]`
    pub weights: Var,
    /// sample points `[k, heads, grid^2, 2]`
    pub points: Var,
}

#[derive(Clone, Debug)]
pub struct MaskedInstanceAttention {
    pub config: MaskedConfig,
    pub offsets: Linear,
    pub value: Linear,
    pub bins: Linear,
    pub output: Linear,
}

impl MaskedInstanceAttention {
    pub fn new(store: &mut ParamStore, name: &str, config: MaskedConfig, rng: &mut Rng) -> Self {
        let (d, n) = (config.dim, config.heads);
        Self {
            config,
            offsets: Linear::zeros(store, &format!("{name}.offsets"), d, n * 4),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            bins: Linear::new(store, &format!("{name}.bins"), d, n * 4, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
        }
    }

    /// `prev_mask_logits[k, Hm, Wm]` from the previous decoder layer, or
    /// `None` for no masking.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        map: Var,
        queries: Var,
        windows: Var,
        prev_mask_logits: Option<&Tensor>,
    ) -> Result<MaskedOutput> {
        self.run(
            tape,
            store,
            map,
            queries,
            windows,
            |pts| match prev_mask_logits {
                Some(m) => attention_mask(pts, m).map(Some),
                None => Ok(None),
            },
        )
    }

    /// As [`forward`](Self::forward) with an explicit additive mask
    /// `[k, heads, grid^2]` (0 or [`MASKED`]).
    pub fn forward_with_mask(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        map: Var,
        queries: Var,
        windows: Var,
        mask: Option<Tensor>,
    ) -> Result<MaskedOutput> {
        self.run(
            tape,
            store,
            map,
            queries,
            windows,
            move |_| Ok(mask.clone()),
        )
    }

    fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        map: Var,
        q: Var,
        windows: Var,
        mask_for: impl Fn(&Tensor) -> Result<Option<Tensor>>,
    ) -> Result<MaskedOutput> {
        let cfg = &self.config;
        let (n, g, d) = (cfg.heads, cfg.grid, cfg.dim);
        let cells = g * g;
        let ms = tape.shape(map).to_vec();
        if ms.len() != 3 || ms[2] != d {
            return shape_err(format!("feature map {ms:?} for attention dim {d}"));
        }
        let k = tape.shape(q)[0];
        if tape.shape(q) != [k, d] || tape.shape(windows) != [k, 4] {
            return shape_err(format!(
                "queries {:?} with windows {:?}",
                tape.shape(q),
                tape.shape(windows)
            ));
        }
        let v = self.value.forward(tape, store, map)?;
        let off = self.offsets.forward(tape, store, q)?;
        let off = tape.reshape(off, &[k * n, 4])?;
        let w = tape.reshape(windows, &[k, 1, 4])?;
        let w = tape.broadcast_to(w, &[k, n, 4])?;
        let w = tape.reshape(w, &[k * n, 4])?;
        let refined = tape.refine_windows(
            w,
            off,
            vec![1.0; k * n],
            (1.0 / ms[1] as f64, 1.0 / ms[0] as f64),
        )?;
        let pts = tape.grid_points(refined, g)?;
        let pts = tape.reshape(pts, &[k, n, cells, 2])?;
        let values = tape.sample_heads(v, pts)?;

        let bins = self.bins.forward(tape, store, q)?;
        let bins = tape.reshape(bins, &[k, n, 4])?;
        let mut scores = tape.repeat_bins(bins, g)?;
        if let Some(mut m) = mask_for(tape.value(pts))? {
            if m.shape() != [k, n, cells] {
                return shape_err(format!(
                    "attention mask {:?}, expected {:?}",
                    m.shape(),
                    [k, n, cells]
                ));
            }
            // a fully masked row falls back to no masking
            for row in m.data_mut().chunks_exact_mut(cells) {
                if row.iter().all(|&x| x <= MASKED * 0.5) {
                    row.fill(0.0);
                }
            }
            let m = tape.constant(m);
            scores = tape.add(scores, m)?;
        }
        let weights = tape.softmax(scores, -1)?;
        let w4 = tape.reshape(weights, &[k, n, 1, cells])?;
        let heads = tape.matmul(w4, values)?;
        let heads = tape.reshape(heads, &[k, d])?;
        let output = self.output.forward(tape, store, heads)?;
        Ok(MaskedOutput {
            output,
            weights,
            points: pts,
        })
    }
}

/// Additive mask from previous mask logits: a cell whose point samples a
/// logit `<= 0` is background and gets [`MASKED`].
pub fn attention_mask(points: &Tensor, prev_mask_logits: &Tensor) -> Result<Tensor> {
    let ps = points.shape();
    let mm = prev_mask_logits.shape();
    if ps.len() != 4 || ps[3] != 2 || mm.len() != 3 || mm[0] != ps[0] {
        return shape_err(format!("mask logits {mm:?} for points {ps:?}"));
    }
    let (k, n, cells) = (ps[0], ps[1], ps[2]);
    let plane = mm[1] * mm[2];
    let mut out = Tensor::zeros([k, n, cells]);
    for q in 0..k {
        let m = Tensor::new(
            [mm[1], mm[2], 1],
            prev_mask_logits.data()[q * plane..(q + 1) * plane].to_vec(),
        )?;
        for h in 0..n {
            for c in 0..cells {
                let o = ((q * n + h) * cells + c) * 2;
                let (x, y) = (points.data()[o], points.data()[o + 1]);
                if sample_point(&m, x, y)[0] <= 0.0 {
                    out.data_mut()[(q * n + h) * cells + c] = MASKED;
                }
            }
        }
    }
    Ok(out)
}
