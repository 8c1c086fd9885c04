//! Two-stage proposals and the decoder with its prediction heads.

use std::cmp::Ordering;

use crate::attention::layers::{LayerNorm, Linear, Mlp};
use crate::attention::{MaskedConfig, MaskedInstanceAttention, ReferenceWindow, SelfAttention};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{ParamStore, Rng, Tape, Tensor, Var};
use crate::objective::PredictionSet;

/// One selected encoder texel.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub score: f64,
    pub window: ReferenceWindow,
    pub feature: Tensor,
    /// row-major texel index
    pub index: usize,
}

/// Indices of the `k` largest logits, descending; equal logits keep
/// index order.
pub fn top_k_indices(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > logits.len() {
        return Err(Error::InvalidArgument(format!(
            "top-{k} of {} texels",
            logits.len()
        )));
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

/// Per-texel objectness and a box regressed from the texel's anchor.
#[derive(Clone, Debug)]
pub struct ProposalHead {
    pub objectness: Linear,
    pub boxes: Mlp,
    /// normalized anchor side
    pub anchor: f64,
}

#[derive(Clone, Debug)]
pub struct ProposalOutput {
    /// `[T]`
    pub logits: Var,
    /// `[T, 4]`
    pub boxes: Var,
    pub selected: Vec<usize>,
    /// `[k, d]`
    pub queries: Var,
    /// `[k, 4]`
    pub windows: Var,
}

impl ProposalOutput {
    pub fn list(&self, tape: &Tape) -> Vec<Proposal> {
        let logits = tape.value(self.logits);
        let boxes = tape.value(self.boxes);
        let feats = tape.value(self.queries);
        self.selected
            .iter()
            .enumerate()
            .map(|(i, &t)| Proposal {
                score: logits.data()[t],
                window: ReferenceWindow::from_slice(boxes.row(t)),
                feature: Tensor::new([feats.shape()[1]], feats.row(i).to_vec()).unwrap(),
                index: t,
            })
            .collect()
    }
}

fn zero_last(store: &mut ParamStore, mlp: &Mlp) {
    store.value_mut(mlp.fc2.weight).data_mut().fill(0.0);
}

impl ProposalHead {
    pub fn new(store: &mut ParamStore, dim: usize, anchor: f64, rng: &mut Rng) -> Self {
        let objectness = Linear::new(store, "proposal.objectness", dim, 1, rng);
        let boxes = Mlp::new(store, "proposal.box", (dim, dim, 4), rng);
        zero_last(store, &boxes);
        Self {
            objectness,
            boxes,
            anchor,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        map: Var,
        k: usize,
    ) -> Result<ProposalOutput> {
        let s = tape.shape(map).to_vec();
        if s.len() != 3 {
            return shape_err(format!("proposal input {s:?} is not [H, W, d]"));
        }
        let (h, w, d) = (s[0], s[1], s[2]);
        let flat = tape.reshape(map, &[h * w, d])?;
        let logits = self.objectness.forward(tape, store, flat)?;
        let logits = tape.reshape(logits, &[h * w])?;
        let deltas = self.boxes.forward(tape, store, flat)?;
        let a = self.anchor.clamp(1e-4, 1.0 - 1e-4);
        let inv = |v: f64| (v / (1.0 - v)).ln();
        let base = Tensor::from_fn([h * w, 4], |i| {
            let (t, j) = (i / 4, i % 4);
            match j {
                0 => inv(((t % w) as f64 + 0.5) / w as f64),
                1 => inv(((t / w) as f64 + 0.5) / h as f64),
                _ => inv(a),
            }
        });
        let base = tape.constant(base);
        let z = tape.add(base, deltas)?;
        let boxes = tape.sigmoid(z)?;
        let selected = top_k_indices(tape.value(logits).data(), k)?;
        let queries = tape.index_select(flat, &selected)?;
        let windows = tape.index_select(boxes, &selected)?;
        Ok(ProposalOutput {
            logits,
            boxes,
            selected,
            queries,
            windows,
        })
    }
}

/// `logits[q, y, x] = <embed_q, pixel(y, x)>` for `embed[k, d]` and
/// `pixel[H, W, d]`, giving `[k, H, W]`.
pub fn predict_masks(tape: &mut Tape, embed: Var, pixel: Var) -> Result<Var> {
    let es = tape.shape(embed).to_vec();
    let ps = tape.shape(pixel).to_vec();
    if es.len() != 2 || ps.len() != 3 || es[1] != ps[2] {
        return shape_err(format!(
            "mask embeddings {es:?} against pixel features {ps:?}"
        ));
    }
    let flat = tape.reshape(pixel, &[ps[0] * ps[1], ps[2]])?;
    let ft = tape.transpose(flat)?;
    let m = tape.matmul(embed, ft)?;
    tape.reshape(m, &[es[0], ps[0], ps[1]])
}

/// Post-norm: self-attention among queries, masked instance attention into
/// the map, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: SelfAttention,
    pub norm1: LayerNorm,
    pub cross: MaskedInstanceAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        grid: usize,
        ffn_ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: SelfAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            cross: MaskedInstanceAttention::new(
                store,
                &format!("{name}.cross"),
                MaskedConfig::new(dim, heads, grid)?,
                rng,
            ),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: Mlp::new(
                store,
                &format!("{name}.ffn"),
                (dim, ffn_ratio * dim, dim),
                rng,
            ),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        map: Var,
        windows: Var,
        prev_mask_logits: Option<&Tensor>,
    ) -> Result<Var> {
        let a = self.self_attn.forward(tape, store, q)?;
        let q = tape.add(q, a)?;
        let q = self.norm1.forward(tape, store, q)?;
        let c = self
            .cross
            .forward(tape, store, map, q, windows, prev_mask_logits)?;
        let q = tape.add(q, c.output)?;
        let q = self.norm2.forward(tape, store, q)?;
        let f = self.ffn.forward(tape, store, q)?;
        let q = tape.add(q, f)?;
        self.norm3.forward(tape, store, q)
    }
}

/// Class, box and mask heads shared by all decoder layers.
#[derive(Clone, Debug)]
pub struct PredictionHeads {
    pub class: Linear,
    pub boxes: Mlp,
    pub mask_embed: Option<Mlp>,
}

impl PredictionHeads {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        classes: usize,
        masks: bool,
        rng: &mut Rng,
    ) -> Self {
        let class = Linear::new(store, "head.class", dim, classes, rng);
        // prior probability 0.01 per class, as is usual with sigmoid focal loss
        store.value_mut(class.bias).data_mut().fill(-(99f64).ln());
        let boxes = Mlp::new(store, "head.box", (dim, dim, 4), rng);
        zero_last(store, &boxes);
        let mask_embed = masks.then(|| Mlp::new(store, "head.mask_embed", (dim, dim, dim), rng));
        Self {
            class,
            boxes,
            mask_embed,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        windows: Var,
        pixel: Option<Var>,
    ) -> Result<PredictionSet> {
        let logits = self.class.forward(tape, store, q)?;
        let delta = self.boxes.forward(tape, store, q)?;
        let base = tape.inverse_sigmoid(windows)?;
        let z = tape.add(base, delta)?;
        let boxes = tape.sigmoid(z)?;
        let masks = match (&self.mask_embed, pixel) {
            (Some(m), Some(p)) => {
                let e = m.forward(tape, store, q)?;
                Some(predict_masks(tape, e, p)?)
            }
            _ => None,
        };
        Ok(PredictionSet {
            logits,
            boxes,
            masks,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub heads: PredictionHeads,
    pub iterative: bool,
}

impl Decoder {
    /// One prediction set per layer; layer `l`'s masks gate layer `l+1`'s
    /// cross-attention when masks are predicted.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        map: Var,
        windows: Var,
        pixel: Option<Var>,
    ) -> Result<Vec<PredictionSet>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let (mut q, mut win) = (queries, windows);
        let mut prev: Option<Tensor> = None;
        for layer in &self.layers {
            q = layer.forward(tape, store, q, map, win, prev.as_ref())?;
            let p = self.heads.forward(tape, store, q, win, pixel)?;
            prev = p.masks.map(|m| tape.value(m).clone());
            if self.iterative {
                win = p.boxes;
            }
            out.push(p);
        }
        Ok(out)
    }
}
