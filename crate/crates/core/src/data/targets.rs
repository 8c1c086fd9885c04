use crate::data::scene::{tight_box, SceneRecord};
use crate::error::{shape_err, Result};
use crate::numerics::Tensor;
use crate::objective::{TargetSet, Task};

/// Average-pools a binary `[H, W]` mask by `factor` and thresholds at 0.5.
/// A non-empty mask that would vanish keeps its best-covered texel.
pub fn downsample_mask(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 2 || factor == 0 || !s[0].is_multiple_of(factor) || !s[1].is_multiple_of(factor) {
        return shape_err(format!("cannot pool mask {s:?} by {factor}"));
    }
    let (oh, ow) = (s[0] / factor, s[1] / factor);
    let mut cover = vec![0.0; oh * ow];
    for r in 0..s[0] {
        for c in 0..s[1] {
            cover[(r / factor) * ow + c / factor] += mask.data()[r * s[1] + c];
        }
    }
    let norm = (factor * factor) as f64;
    let mut out = Tensor::new(
        [oh, ow],
        cover
            .iter()
            .map(|&v| if v / norm >= 0.5 { 1.0 } else { 0.0 })
            .collect(),
    )?;
    if out.sum() == 0.0 {
        let (best, &v) = cover
            .iter()
            .enumerate()
            .fold((0, &0.0), |b, x| if x.1 > b.1 { x } else { b });
        if v > 0.0 {
            out.data_mut()[best] = 1.0;
        }
    }
    Ok(out)
}

/// Training targets for `task` with masks pooled to `mask_side`. Panoptic
/// targets add one segment per visible stuff class.
pub fn scene_targets(scene: &SceneRecord, task: Task, mask_side: usize) -> Result<TargetSet> {
    let (h, w) = (scene.height, scene.width);
    let factor = h / mask_side.max(1);
    let mut classes = Vec::new();
    let mut boxes = Vec::new();
    let mut masks = Vec::new();
    for inst in &scene.instances {
        classes.push(inst.class.id());
        boxes.extend_from_slice(&inst.bbox);
        if task.supervises_masks() {
            masks.extend_from_slice(downsample_mask(&inst.mask, factor)?.data());
        }
    }
    if task == Task::Panoptic {
        let vis = scene.visible_stuff();
        for id in 0..crate::data::scene::STUFF_NAMES.len() as u8 {
            let m: Vec<bool> = vis.iter().map(|v| *v == Some(id)).collect();
            let Some(b) = tight_box(&m, h, w) else {
                continue;
            };
            let mt = Tensor::new(
                [h, w],
                m.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect(),
            )?;
            classes.push(crate::model::THING_CLASSES + id as usize);
            boxes.extend_from_slice(&b);
            masks.extend_from_slice(downsample_mask(&mt, factor)?.data());
        }
    }
    let t = classes.len();
    let masks = task
        .supervises_masks()
        .then(|| Tensor::new([t, mask_side * mask_side], masks))
        .transpose()?;
    Ok(TargetSet {
        classes,
        boxes: Tensor::new([t, 4], boxes)?,
        masks,
    })
}

/// Images stacked `[B, H, W, 3]` with targets padded to the largest count;
/// `valid[b][j]` marks real targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Vec<TargetSet>,
    pub valid: Vec<Vec<bool>>,
}

impl Batch {
    pub fn new(scenes: &[SceneRecord], task: Task, mask_side: usize) -> Result<Self> {
        let Some(first) = scenes.first() else {
            return shape_err("empty batch");
        };
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(scenes.len() * h * w * 3);
        let mut targets = Vec::new();
        for s in scenes {
            if (s.height, s.width) != (h, w) {
                return shape_err(format!("scene {}x{} in a {h}x{w} batch", s.height, s.width));
            }
            data.extend_from_slice(s.image.data());
            targets.push(scene_targets(s, task, mask_side)?);
        }
        let most = targets.iter().map(|t| t.len()).max().unwrap_or(0);
        let valid = targets
            .iter()
            .map(|t| (0..most).map(|j| j < t.len()).collect())
            .collect();
        Ok(Self {
            images: Tensor::new([scenes.len(), h, w, 3], data)?,
            targets,
            valid,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Image `b` as `[H, W, 3]`.
    pub fn image(&self, b: usize) -> Tensor {
        let s = self.images.shape();
        let n = s[1] * s[2] * 3;
        Tensor::new(
            [s[1], s[2], 3],
            self.images.data()[b * n..(b + 1) * n].to_vec(),
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsampling_keeps_tiny_masks() {
        let mut m = Tensor::zeros([8, 8]);
        m.set(&[5, 6], 1.0);
        let d = downsample_mask(&m, 4).unwrap();
        assert_eq!(d.sum(), 1.0);
        assert_eq!(d.at(&[1, 1]), 1.0);
        let full = downsample_mask(&Tensor::full([8, 8], 1.0), 4).unwrap();
        assert_eq!(full.sum(), 4.0);
    }
}
