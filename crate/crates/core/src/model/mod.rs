//! The miniature plain detector: ViT-style backbone, single projection to
//! the head scale, scale-aware encoder, two-stage proposals, masked
//! instance-attention decoder, and box, class and mask heads.

mod backbone;
pub mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod panoptic;

pub use backbone::{from_windows, to_windows, Backbone, Block};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use config::{FeatureScale, ModelConfig, STUFF_CLASSES, THING_CLASSES};
pub use decoder::{
    predict_masks, top_k_indices, Decoder, DecoderLayer, PredictionHeads, Proposal, ProposalHead,
    ProposalOutput,
};
pub use encoder::{
    position_encoding, resize_bilinear, texel_centers, Encoder, EncoderLayer, EncoderOutput,
    PixelHead, Projection,
};
pub use panoptic::{panoptic_merge, MergeConfig, PanopticOutput, Segment};

use crate::attention::layers::Linear;
use crate::attention::AnchorSet;
use crate::error::Result;
use crate::numerics::{ParamStore, Rng, Tape, Tensor, Var};
use crate::objective::{
    composite_loss, LossReport, LossWeights, PredictionSet, ProposalSet, TargetSet,
};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub projection: Projection,
    pub encoder: Encoder,
    pub proposals: ProposalHead,
    pub decoder_input: Option<Linear>,
    pub decoder: Decoder,
    pub pixel_head: Option<PixelHead>,
    pub anchors: AnchorSet,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// one prediction set per decoder layer
    pub layers: Vec<PredictionSet>,
    pub proposals: ProposalOutput,
    pub encoder: EncoderOutput,
    pub pixel: Option<Var>,
}

impl ModelOutput {
    pub fn proposal_set(&self) -> ProposalSet {
        ProposalSet {
            logits: self.proposals.logits,
            boxes: self.proposals.boxes,
        }
    }

    pub fn last(&self) -> &PredictionSet {
        self.layers.last().expect("at least one decoder layer")
    }
}

/// Final-layer values of one forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[k, C]` sigmoid probabilities
    pub class_probs: Tensor,
    /// `[k, 4]` normalized center-size
    pub boxes: Tensor,
    /// `[k, Hm, Wm]` sigmoid probabilities
    pub mask_probs: Option<Tensor>,
    /// encoder texel behind each query
    pub proposal_texels: Vec<usize>,
    /// last encoder layer's scale weights at the proposal texels, `[k, heads, m]`
    pub scale_weights: Option<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config, &mut rng)?;
        let ratio = config.feature_scale.stride() as f64 / config.patch_size as f64;
        let projection = Projection::new(
            &mut store,
            config.backbone_dim,
            config.encoder_dim,
            ratio,
            &mut rng,
        )?;
        let enc_attn = config.attention(config.encoder_dim, config.heads)?;
        let encoder = Encoder::new(
            &mut store,
            "encoder",
            config.encoder_layers,
            config.mechanism,
            enc_attn,
            config.ffn_ratio,
            &mut rng,
        )?;
        let anchors = AnchorSet::new(config.base_size, config.scale_count, config.image_size)?;
        let middle = anchors.size(config.scale_count / 2);
        let proposals = ProposalHead::new(&mut store, config.encoder_dim, middle, &mut rng);
        let dd = config.decoder_dim;
        let decoder_input = encoder::maybe_linear(
            &mut store,
            "decoder.input",
            config.encoder_dim,
            dd,
            &mut rng,
        );
        let layers = (0..config.decoder_layers)
            .map(|i| {
                DecoderLayer::new(
                    &mut store,
                    &format!("decoder.layer{i}"),
                    dd,
                    config.decoder_heads,
                    config.decoder_grid,
                    config.ffn_ratio,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let heads = PredictionHeads::new(
            &mut store,
            dd,
            config.classes(),
            config.has_masks(),
            &mut rng,
        );
        let decoder = Decoder {
            layers,
            heads,
            iterative: config.iterative_windows,
        };
        let pixel_head = if config.has_masks() {
            let pixel_attn = config.attention(dd, config.decoder_heads)?;
            Some(PixelHead {
                side: config.mask_side(),
                encoder: Encoder::new(
                    &mut store,
                    "pixel",
                    config.pixel_layers,
                    config.mechanism,
                    pixel_attn,
                    config.ffn_ratio,
                    &mut rng,
                )?,
            })
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            backbone,
            projection,
            encoder,
            proposals,
            decoder_input,
            decoder,
            pixel_head,
            anchors,
        })
    }

    /// Full forward from `image[H, W, 3]`.
    pub fn forward(&self, tape: &mut Tape, image: &Tensor) -> Result<ModelOutput> {
        let x = tape.constant(image.clone());
        self.forward_var(tape, x)
    }

    pub fn forward_var(&self, tape: &mut Tape, image: Var) -> Result<ModelOutput> {
        let s = &self.store;
        let b = self.backbone.forward(tape, s, image)?;
        let e = self.projection.forward(tape, s, b)?;
        let enc = self.encoder.forward(tape, s, e, &self.anchors)?;
        self.head_forward(tape, enc)
    }

    /// Everything after the encoder.
    pub fn head_forward(&self, tape: &mut Tape, enc: EncoderOutput) -> Result<ModelOutput> {
        let s = &self.store;
        let props = self
            .proposals
            .forward(tape, s, enc.map, self.config.effective_queries())?;
        let (map, queries) = match &self.decoder_input {
            Some(lin) => (
                lin.forward(tape, s, enc.map)?,
                lin.forward(tape, s, props.queries)?,
            ),
            None => (enc.map, props.queries),
        };
        let pixel = match &self.pixel_head {
            Some(ph) => Some(ph.forward(tape, s, map, &self.anchors)?),
            None => None,
        };
        let layers = self
            .decoder
            .forward(tape, s, queries, map, props.windows, pixel)?;
        Ok(ModelOutput {
            layers,
            proposals: props,
            encoder: enc,
            pixel,
        })
    }

    /// Composite loss over every decoder layer and the proposals.
    pub fn loss(
        &self,
        tape: &mut Tape,
        out: &ModelOutput,
        targets: &TargetSet,
    ) -> Result<(Var, LossReport)> {
        let weights = LossWeights::for_task(self.config.task);
        let props = out.proposal_set();
        composite_loss(
            tape,
            &out.layers,
            Some(&props),
            targets,
            &weights,
            self.config.task,
            self.config.mask_cost,
        )
    }

    /// Inference-only forward returning final-layer values.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, image)?;
        let last = out.last();
        let class_probs = tape.value(last.logits).map(sigmoid);
        let boxes = tape.value(last.boxes).clone();
        let mask_probs = last.masks.map(|m| tape.value(m).map(sigmoid));
        let scale_weights = match out.encoder.scale_weights.last() {
            Some(Some(sw)) => {
                let t = tape.value(*sw);
                let row = t.shape()[1] * t.shape()[2];
                let data = out
                    .proposals
                    .selected
                    .iter()
                    .flat_map(|&i| t.data()[i * row..(i + 1) * row].to_vec())
                    .collect();
                Some(Tensor::new(
                    [out.proposals.selected.len(), t.shape()[1], t.shape()[2]],
                    data,
                )?)
            }
            _ => None,
        };
        Ok(Prediction {
            class_probs,
            boxes,
            mask_probs,
            proposal_texels: out.proposals.selected.clone(),
            scale_weights,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
