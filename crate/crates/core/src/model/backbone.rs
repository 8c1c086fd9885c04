//! Plain ViT-style backbone: patch embedding, then pre-norm transformer
//! blocks with windowed self-attention except at the global blocks.

use crate::attention::layers::{LayerNorm, Linear, Mlp};
use crate::attention::SelfAttention;
use crate::error::{shape_err, Result};
use crate::model::config::ModelConfig;
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    /// window side in tokens, or `None` for global attention
    pub window: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch: usize,
    pub dim: usize,
    pub embed: Linear,
    pub position: ParamId,
    pub blocks: Vec<Block>,
}

/// `[H, W, d]` to `[(H/w)(W/w), w*w, d]` windows, row-major over windows.
pub fn to_windows(tape: &mut Tape, x: Var, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (h, wd, d) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[h / w, w, wd / w, w, d])?;
    let r = tape.permute(r, &[0, 2, 1, 3, 4])?;
    tape.reshape(r, &[(h / w) * (wd / w), w * w, d])
}

/// Inverse of [`to_windows`].
pub fn from_windows(tape: &mut Tape, x: Var, w: usize, h: usize, wd: usize) -> Result<Var> {
    let d = tape.shape(x)[2];
    let r = tape.reshape(x, &[h / w, wd / w, w, w, d])?;
    let r = tape.permute(r, &[0, 2, 1, 3, 4])?;
    tape.reshape(r, &[h, wd, d])
}

impl Block {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (h, w) = (s[0], s[1]);
        let n = self.norm1.forward(tape, store, x)?;
        let a = match self.window {
            Some(win) => {
                let g = to_windows(tape, n, win)?;
                let o = self.attn.forward(tape, store, g)?;
                from_windows(tape, o, win, h, w)?
            }
            None => {
                let flat = tape.reshape(n, &[h * w, s[2]])?;
                let o = self.attn.forward(tape, store, flat)?;
                tape.reshape(o, &s)?
            }
        };
        let x = tape.add(x, a)?;
        let n = self.norm2.forward(tape, store, x)?;
        let m = self.mlp.forward(tape, store, n)?;
        tape.add(x, m)
    }
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let (d, p) = (cfg.backbone_dim, cfg.patch_size);
        let side = cfg.backbone_side();
        let embed = Linear::new(store, "backbone.patch_embed", p * p * 3, d, rng);
        let position = store.add(
            "backbone.position",
            Tensor::from_fn([side, side, d], |_| 0.02 * rng.normal()),
        );
        let mut blocks = Vec::with_capacity(cfg.backbone_depth);
        for b in 1..=cfg.backbone_depth {
            let name = format!("backbone.block{b}");
            blocks.push(Block {
                norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                attn: SelfAttention::new(
                    store,
                    &format!("{name}.attn"),
                    d,
                    cfg.backbone_heads,
                    rng,
                )?,
                norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                mlp: Mlp::new(
                    store,
                    &format!("{name}.mlp"),
                    (d, cfg.ffn_ratio * d, d),
                    rng,
                ),
                window: (!cfg.global_blocks.contains(&b)).then_some(cfg.window),
            });
        }
        Ok(Self {
            patch: p,
            dim: d,
            embed,
            position,
            blocks,
        })
    }

    /// `image[H, W, 3]` to the single-scale map `[H/p, W/p, d]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[2] != 3 || !s[0].is_multiple_of(self.patch) || !s[1].is_multiple_of(self.patch) {
            return shape_err(format!(
                "image {s:?} is not [H, W, 3] divisible by patch {}",
                self.patch
            ));
        }
        let w = tape.param(store, self.embed.weight);
        let b = tape.param(store, self.embed.bias);
        let x = tape.conv2d_patchify(image, w, Some(b), self.patch)?;
        let pos = tape.param(store, self.position);
        if tape.shape(pos) != tape.shape(x) {
            return shape_err(format!(
                "position table {:?} for tokens {:?}",
                tape.shape(pos),
                tape.shape(x)
            ));
        }
        let x = tape.add(x, pos)?;
        self.blocks_forward(tape, store, x)
    }

    /// The transformer blocks alone, on a token map `[h, w, d]`.
    pub fn blocks_forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(tape, store, x)?;
        }
        Ok(x)
    }
}
