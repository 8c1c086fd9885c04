//! Input-feature projection, the scale-aware encoder and the 1/4-scale
//! pixel head.

use std::f64::consts::PI;

use crate::attention::layers::{LayerNorm, Linear, Mlp};
use crate::attention::{AnchorSet, AttentionConfig, AttentionOutput, GridAttention, Mechanism};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{default_groups, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug)]
enum Stage {
    /// stride-`p` patch convolution (`p = 1` is a 1x1 convolution)
    Conv {
        weight: ParamId,
        bias: ParamId,
        p: usize,
    },
    Deconv {
        weight: ParamId,
        bias: ParamId,
    },
}

/// Maps the backbone map to the head dimension and scale: a strided
/// convolution when coarsening (or keeping) the scale, a chain of 2x
/// deconvolutions when refining it, each followed by GroupNorm.
#[derive(Clone, Debug)]
pub struct Projection {
    stages: Vec<(Stage, LayerNorm)>,
    dim: usize,
}

impl Projection {
    /// `ratio` is target stride over backbone stride; a power of two.
    pub fn new(
        store: &mut ParamStore,
        in_dim: usize,
        dim: usize,
        ratio: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let log = ratio.log2();
        if !(ratio > 0.0) || log.fract() != 0.0 || log.abs() > 4.0 {
            return Err(Error::Config(format!(
                "unsupported feature scale ratio {ratio}"
            )));
        }
        let mut stages = Vec::new();
        if log >= 0.0 {
            let p = ratio as usize;
            let fan_in = p * p * in_dim;
            let b = 1.0 / (fan_in as f64).sqrt();
            let weight = store.add(
                "project.stage0.weight",
                Tensor::from_fn([fan_in, dim], |_| rng.range(-b, b)),
            );
            let bias = store.add("project.stage0.bias", Tensor::zeros([dim]));
            stages.push((
                Stage::Conv { weight, bias, p },
                LayerNorm::new(store, "project.norm0", dim),
            ));
        } else {
            let mut c = in_dim;
            for i in 0..(-log) as usize {
                let b = 1.0 / (c as f64).sqrt();
                let weight = store.add(
                    format!("project.stage{i}.weight"),
                    Tensor::from_fn([c, 4 * dim], |_| rng.range(-b, b)),
                );
                let bias = store.add(format!("project.stage{i}.bias"), Tensor::zeros([dim]));
                stages.push((
                    Stage::Deconv { weight, bias },
                    LayerNorm::new(store, &format!("project.norm{i}"), dim),
                ));
                c = dim;
            }
        }
        Ok(Self { stages, dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for (stage, norm) in &self.stages {
            x = match stage {
                Stage::Conv { weight, bias, p } => {
                    let (w, b) = (tape.param(store, *weight), tape.param(store, *bias));
                    tape.conv2d_patchify(x, w, Some(b), *p)?
                }
                Stage::Deconv { weight, bias } => {
                    let (w, b) = (tape.param(store, *weight), tape.param(store, *bias));
                    tape.deconv2x(x, w, Some(b))?
                }
            };
            x = norm.group(tape, store, x, default_groups(self.dim))?;
        }
        Ok(x)
    }
}

/// Fixed 2-D sine-cosine codes `[h*w, d]`: the first half of the channels
/// encode the row, the second half the column.
pub fn position_encoding(h: usize, w: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut t = Tensor::zeros([h * w, d]);
    for r in 0..h {
        for c in 0..w {
            let coords = [
                (r as f64 + 0.5) / h as f64 * 2.0 * PI,
                (c as f64 + 0.5) / w as f64 * 2.0 * PI,
            ];
            let row = &mut t.data_mut()[(r * w + c) * d..(r * w + c + 1) * d];
            for (axis, v) in coords.iter().enumerate() {
                for i in 0..half / 2 {
                    let f = v / 10000f64.powf(2.0 * i as f64 / half as f64);
                    row[axis * half + 2 * i] = f.sin();
                    row[axis * half + 2 * i + 1] = f.cos();
                }
            }
        }
    }
    t
}

/// Normalized texel centers `[h*w, 2]` as `(x, y)`, row-major.
pub fn texel_centers(h: usize, w: usize) -> Tensor {
    Tensor::from_fn([h * w, 2], |i| {
        let (t, axis) = (i / 2, i % 2);
        if axis == 0 {
            ((t % w) as f64 + 0.5) / w as f64
        } else {
            ((t / w) as f64 + 0.5) / h as f64
        }
    })
}

/// Post-norm layer: every texel queries the map from its own position.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: GridAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        mechanism: Mechanism,
        cfg: AttentionConfig,
        ffn_ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            attn: GridAttention::new(store, &format!("{name}.attn"), mechanism, cfg, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), (d, ffn_ratio * d, d), rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        anchors: &AnchorSet,
    ) -> Result<(Var, AttentionOutput)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err(format!("encoder input {s:?} is not [H, W, d]"));
        }
        let (h, w, d) = (s[0], s[1], s[2]);
        let flat = tape.reshape(x, &[h * w, d])?;
        let pos = tape.constant(position_encoding(h, w, d));
        let q = tape.add(flat, pos)?;
        let out = self
            .attn
            .forward_at(tape, store, x, q, &texel_centers(h, w), anchors)?;
        let y = tape.add(flat, out.output)?;
        let y = self.norm1.forward(tape, store, y)?;
        let f = self.ffn.forward(tape, store, y)?;
        let y = tape.add(y, f)?;
        let y = self.norm2.forward(tape, store, y)?;
        Ok((tape.reshape(y, &s)?, out))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub map: Var,
    /// per layer, adaptive-scale weights `[h*w, heads, m]`
    pub scale_weights: Vec<Option<Var>>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        layers: usize,
        mechanism: Mechanism,
        cfg: AttentionConfig,
        ffn_ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    &format!("{prefix}.layer{i}"),
                    mechanism,
                    cfg,
                    ffn_ratio,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mut x: Var,
        anchors: &AnchorSet,
    ) -> Result<EncoderOutput> {
        let mut scale_weights = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, out) = l.forward(tape, store, x, anchors)?;
            scale_weights.push(out.scale_weights);
            x = y;
        }
        Ok(EncoderOutput {
            map: x,
            scale_weights,
        })
    }
}

/// Bilinear resize of `map[h, w, d]` to `[oh, ow, d]` by sampling at the
/// target texel centers.
pub fn resize_bilinear(tape: &mut Tape, map: Var, oh: usize, ow: usize) -> Result<Var> {
    let d = tape.shape(map)[2];
    let pts = tape.constant(texel_centers(oh, ow));
    let s = tape.bilinear_sample(map, pts)?;
    tape.reshape(s, &[oh, ow, d])
}

/// Upsample to the mask resolution, then `K` scale-aware encoder layers.
#[derive(Clone, Debug)]
pub struct PixelHead {
    pub side: usize,
    pub encoder: Encoder,
}

impl PixelHead {
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        map: Var,
        anchors: &AnchorSet,
    ) -> Result<Var> {
        let up = resize_bilinear(tape, map, self.side, self.side)?;
        Ok(self.encoder.forward(tape, store, up, anchors)?.map)
    }
}

/// Optional dimension change between encoder and decoder.
pub fn maybe_linear(
    store: &mut ParamStore,
    name: &str,
    from: usize,
    to: usize,
    rng: &mut Rng,
) -> Option<Linear> {
    (from != to).then(|| Linear::new(store, name, from, to, rng))
}
