use std::fmt;

use crate::attention::{default_lambda, AttentionConfig, Mechanism, OffsetSharing};
use crate::error::{Error, Result};
use crate::numerics::default_groups;
use crate::objective::Task;
use crate::textconf::{parse_list, KeyValues};

/// Stride of the detection-head feature map relative to the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureScale {
    Quarter,
    Eighth,
    Sixteenth,
}

impl FeatureScale {
    pub fn stride(self) -> usize {
        match self {
            FeatureScale::Quarter => 4,
            FeatureScale::Eighth => 8,
            FeatureScale::Sixteenth => 16,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "1/4" => Ok(FeatureScale::Quarter),
            "1/8" => Ok(FeatureScale::Eighth),
            "1/16" => Ok(FeatureScale::Sixteenth),
            _ => Err(Error::Config(format!(
                "feature scale must be 1/4, 1/8 or 1/16, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for FeatureScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1/{}", self.stride())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    pub image_size: usize,
    pub patch_size: usize,
    pub backbone_dim: usize,
    pub backbone_heads: usize,
    pub backbone_depth: usize,
    /// 1-based indices of blocks with global (unwindowed) attention
    pub global_blocks: Vec<usize>,
    /// side of a windowed-attention window, in backbone tokens
    pub window: usize,
    pub encoder_dim: usize,
    pub decoder_dim: usize,
    /// encoder attention heads
    pub heads: usize,
    /// decoder and pixel-decoder attention heads
    pub decoder_heads: usize,
    pub feature_scale: FeatureScale,
    pub queries: usize,
    pub mechanism: Mechanism,
    pub scale_count: usize,
    /// smallest anchor side, in image pixels
    pub base_size: f64,
    pub lambda: f64,
    pub offset_sharing: OffsetSharing,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_ratio: usize,
    pub decoder_grid: usize,
    /// scale-aware layers on the 1/4-scale pixel map
    pub pixel_layers: usize,
    /// refine decoder windows from each layer's boxes (else keep the proposals)
    pub iterative_windows: bool,
    /// include mask terms in the matching cost
    pub mask_cost: bool,
}

pub const THING_CLASSES: usize = 3;
pub const STUFF_CLASSES: usize = 2;

impl ModelConfig {
    /// Desk-scale default: 64 px images, 8x8 backbone tokens, 2+2 head layers.
    pub fn femto() -> Self {
        Self {
            task: Task::Detect,
            image_size: 64,
            patch_size: 8,
            backbone_dim: 64,
            backbone_heads: 4,
            backbone_depth: 4,
            global_blocks: vec![2, 4],
            window: 4,
            encoder_dim: 32,
            decoder_dim: 32,
            heads: 4,
            decoder_heads: 4,
            feature_scale: FeatureScale::Eighth,
            queries: 25,
            mechanism: Mechanism::Adaptive,
            scale_count: 4,
            base_size: 4.0,
            lambda: default_lambda(4),
            offset_sharing: OffsetSharing::PerScale,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_ratio: 4,
            decoder_grid: 14,
            pixel_layers: 1,
            iterative_windows: true,
            mask_cost: false,
        }
    }

    /// Smallest useful config, for finite-difference checks: 16 px images,
    /// an 8x8 backbone map projected to a 4x4 head map, 2+2 layers, 8 queries.
    pub fn tiny(task: Task) -> Self {
        Self {
            task,
            image_size: 16,
            patch_size: 2,
            backbone_dim: 8,
            backbone_heads: 2,
            backbone_depth: 2,
            global_blocks: vec![2],
            window: 4,
            encoder_dim: 8,
            decoder_dim: 8,
            heads: 2,
            decoder_heads: 2,
            feature_scale: FeatureScale::Quarter,
            queries: 8,
            mechanism: Mechanism::Adaptive,
            scale_count: 2,
            base_size: 2.0,
            lambda: default_lambda(2),
            offset_sharing: OffsetSharing::PerScale,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_ratio: 4,
            decoder_grid: 4,
            pixel_layers: 1,
            iterative_windows: true,
            mask_cost: task != Task::Detect,
        }
    }

    /// The full-size "Base" head on a ViT-B backbone at 1024 px. Constructible,
    /// far too slow to train here.
    pub fn base() -> Self {
        Self {
            task: Task::Detect,
            image_size: 1024,
            patch_size: 16,
            backbone_dim: 768,
            backbone_heads: 12,
            backbone_depth: 12,
            global_blocks: vec![3, 6, 9, 12],
            window: 16,
            encoder_dim: 384,
            decoder_dim: 256,
            heads: 12,
            decoder_heads: 8,
            feature_scale: FeatureScale::Eighth,
            queries: 300,
            mechanism: Mechanism::Adaptive,
            scale_count: 4,
            base_size: 32.0,
            lambda: default_lambda(4),
            offset_sharing: OffsetSharing::PerScale,
            encoder_layers: 6,
            decoder_layers: 6,
            ffn_ratio: 4,
            decoder_grid: 14,
            pixel_layers: 1,
            iterative_windows: true,
            mask_cost: false,
        }
    }

    pub fn classes(&self) -> usize {
        match self.task {
            Task::Panoptic => THING_CLASSES + STUFF_CLASSES,
            _ => THING_CLASSES,
        }
    }

    pub fn has_masks(&self) -> bool {
        self.task.supervises_masks()
    }

    /// Backbone token grid side.
    pub fn backbone_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Encoder map side.
    pub fn feature_side(&self) -> usize {
        self.image_size / self.feature_scale.stride()
    }

    /// Mask and pixel-feature side (1/4 of the image).
    pub fn mask_side(&self) -> usize {
        self.image_size / 4
    }

    /// Queries actually used: at most one per encoder texel.
    pub fn effective_queries(&self) -> usize {
        self.queries.min(self.feature_side() * self.feature_side())
    }

    pub fn attention(&self, dim: usize, heads: usize) -> Result<AttentionConfig> {
        let mut a = AttentionConfig::new(dim, heads, self.scale_count)?;
        a.lambda = self.lambda;
        a.offset_sharing = self.offset_sharing;
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.image_size.is_multiple_of(16) {
            return bad(format!(
                "image size {} must be a multiple of 16",
                self.image_size
            ));
        }
        let side = self.backbone_side();
        let windowed = (1..=self.backbone_depth).any(|b| !self.global_blocks.contains(&b));
        if windowed && (self.window == 0 || !side.is_multiple_of(self.window)) {
            return bad(format!(
                "backbone side {side} not divisible by window {}",
                self.window
            ));
        }
        if self
            .global_blocks
            .iter()
            .any(|&b| b == 0 || b > self.backbone_depth)
        {
            return bad(format!(
                "global blocks {:?} outside 1..={}",
                self.global_blocks, self.backbone_depth
            ));
        }
        for (what, dim, heads) in [
            ("backbone", self.backbone_dim, self.backbone_heads),
            ("encoder", self.encoder_dim, self.heads),
            ("decoder", self.decoder_dim, self.decoder_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return bad(format!("{what} dim {dim} not divisible by {heads} heads"));
            }
        }
        if !self.encoder_dim.is_multiple_of(4) {
            return bad(format!(
                "encoder dim {} must be a multiple of 4 for position codes",
                self.encoder_dim
            ));
        }
        let ratio = self.feature_scale.stride() as f64 / self.patch_size as f64;
        if !(ratio.log2().fract() == 0.0) {
            return bad(format!(
                "cannot project stride {} to {}",
                self.patch_size, self.feature_scale
            ));
        }
        if !self.encoder_dim.is_multiple_of(default_groups(self.encoder_dim)) {
            return bad(format!(
                "encoder dim {} has no valid group count",
                self.encoder_dim
            ));
        }
        if self.queries == 0 {
            return bad("query count must be at least 1".into());
        }
        let pixel_heads = if self.has_masks() {
            self.decoder_heads
        } else {
            self.heads
        };
        for heads in [self.heads, pixel_heads] {
            if self.mechanism == Mechanism::Fixed && heads % self.scale_count != 0 {
                return bad(format!(
                    "fixed-scale attention needs heads ({heads}) divisible by scales ({})",
                    self.scale_count
                ));
            }
        }
        if !(self.base_size > 0.0) {
            return bad(format!(
                "anchor base size must be positive, got {}",
                self.base_size
            ));
        }
        if self.decoder_grid < 2 || !self.decoder_grid.is_multiple_of(2) {
            return bad(format!(
                "decoder grid must be even, got {}",
                self.decoder_grid
            ));
        }
        if self.ffn_ratio == 0 {
            return bad("feed-forward ratio must be positive".into());
        }
        self.attention(self.encoder_dim, self.heads)?;
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("task", self.task.name());
        kv.set("image_size", self.image_size);
        kv.set("patch_size", self.patch_size);
        kv.set("backbone_dim", self.backbone_dim);
        kv.set("backbone_heads", self.backbone_heads);
        kv.set("backbone_depth", self.backbone_depth);
        kv.set(
            "global_blocks",
            self.global_blocks
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.set("window", self.window);
        kv.set("encoder_dim", self.encoder_dim);
        kv.set("decoder_dim", self.decoder_dim);
        kv.set("heads", self.heads);
        kv.set("decoder_heads", self.decoder_heads);
        kv.set("feature_scale", self.feature_scale);
        kv.set("queries", self.queries);
        kv.set("mechanism", self.mechanism.name());
        kv.set("scale_count", self.scale_count);
        kv.set("base_size", self.base_size);
        kv.set("lambda", self.lambda);
        kv.set(
            "offset_sharing",
            match self.offset_sharing {
                OffsetSharing::PerScale => "per_scale",
                OffsetSharing::Shared => "shared",
            },
        );
        kv.set("encoder_layers", self.encoder_layers);
        kv.set("decoder_layers", self.decoder_layers);
        kv.set("ffn_ratio", self.ffn_ratio);
        kv.set("decoder_grid", self.decoder_grid);
        kv.set("pixel_layers", self.pixel_layers);
        kv.set("iterative_windows", self.iterative_windows);
        kv.set("mask_cost", self.mask_cost);
        kv
    }

    /// Reads the keys present in `kv` over `self`; unknown `model.`-free
    /// keys are left to the caller. Changing the scale count without an
    /// explicit lambda resets lambda to its default.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = kv.get(stringify!($field))? {
                    self.$field = v;
                }
            };
        }
        if let Some(t) = kv.get_str("task") {
            self.task = Task::parse(t)?;
        }
        take!(image_size);
        take!(patch_size);
        take!(backbone_dim);
        take!(backbone_heads);
        take!(backbone_depth);
        if let Some(g) = kv.get_str("global_blocks") {
            self.global_blocks = if g.trim().is_empty() {
                vec![]
            } else {
                parse_list(g)?
            };
        }
        take!(window);
        take!(encoder_dim);
        take!(decoder_dim);
        take!(heads);
        take!(decoder_heads);
        if let Some(s) = kv.get_str("feature_scale") {
            self.feature_scale = FeatureScale::parse(s)?;
        }
        take!(queries);
        if let Some(m) = kv.get_str("mechanism") {
            self.mechanism = Mechanism::parse(m)?;
        }
        if let Some(m) = kv.get::<usize>("scale_count")? {
            self.scale_count = m;
            self.lambda = default_lambda(m);
        }
        take!(base_size);
        take!(lambda);
        if let Some(s) = kv.get_str("offset_sharing") {
            self.offset_sharing = match s {
                "per_scale" => OffsetSharing::PerScale,
                "shared" => OffsetSharing::Shared,
                _ => return Err(Error::Config(format!("unknown offset sharing {s:?}"))),
            };
        }
        take!(encoder_layers);
        take!(decoder_layers);
        take!(ffn_ratio);
        take!(decoder_grid);
        take!(pixel_layers);
        take!(iterative_windows);
        take!(mask_cost);
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::femto();
        c.apply_kv(kv)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for c in [
            ModelConfig::femto(),
            ModelConfig::tiny(Task::Instance),
            ModelConfig::base(),
        ] {
            c.validate().unwrap();
            let kv = KeyValues::parse(&c.to_kv().render()).unwrap();
            assert_eq!(ModelConfig::from_kv(&kv).unwrap(), c);
        }
    }

    #[test]
    fn sizes() {
        let c = ModelConfig::femto();
        assert_eq!(
            (c.backbone_side(), c.feature_side(), c.mask_side()),
            (8, 8, 16)
        );
        let mut c16 = c.clone();
        c16.feature_scale = FeatureScale::Sixteenth;
        assert_eq!(c16.effective_queries(), 16);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::femto();
        c.mechanism = Mechanism::Fixed;
        c.scale_count = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::femto();
        c.queries = 0;
        assert!(c.validate().is_err());
        assert!(FeatureScale::parse("1/2").is_err());
    }
}
