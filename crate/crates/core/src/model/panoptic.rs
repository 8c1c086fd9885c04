//! Merging per-query masks into one panoptic segmentation.

use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeConfig {
    /// segments smaller than this many texels are dropped to void
    pub min_area: usize,
    /// queries whose best class probability is below this are ignored
    pub min_score: f64,
    /// classes at or above this index are stuff; same-class stuff merges
    pub first_stuff_class: usize,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            min_area: 16,
            min_score: 0.0,
            first_stuff_class: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// id in the merged map, from 1
    pub id: usize,
    pub class: usize,
    /// lowest query index contributing
    pub query: usize,
    pub area: usize,
    pub score: f64,
}

/// Merged map `[H, W]` of segment ids (0 = void) with its segment list.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticOutput {
    pub ids: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub segments: Vec<Segment>,
}

/// Each texel goes to the query maximizing `class score * mask
/// probability` (lowest index on ties), then small segments become void.
/// `mask_probs[k, H, W]` and `class_probs[k, C]` are probabilities.
pub fn panoptic_merge(
    mask_probs: &Tensor,
    class_probs: &Tensor,
    cfg: &MergeConfig,
) -> Result<PanopticOutput> {
    let ms = mask_probs.shape();
    let cs = class_probs.shape();
    if ms.len() != 3 || cs.len() != 2 || ms[0] != cs[0] || cs[1] == 0 {
        return shape_err(format!("masks {ms:?} against class scores {cs:?}"));
    }
    let (k, h, w) = (ms[0], ms[1], ms[2]);
    let plane = h * w;
    let (mut label, mut score) = (vec![0; k], vec![0.0; k]);
    for q in 0..k {
        let row = class_probs.row(q);
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        label[q] = best;
        score[q] = row[best];
    }
    let kept: Vec<usize> = (0..k).filter(|&q| score[q] >= cfg.min_score).collect();
    // owner query per texel
    let mut owner = vec![usize::MAX; plane];
    for (t, o) in owner.iter_mut().enumerate() {
        let mut best = 0.0;
        for &q in &kept {
            let v = score[q] * mask_probs.data()[q * plane + t];
            if v > best {
                best = v;
                *o = q;
            }
        }
    }
    // group queries into segments: things per query, stuff per class
    let key = |q: usize| {
        if label[q] >= cfg.first_stuff_class {
            (1, label[q])
        } else {
            (0, q)
        }
    };
    let mut groups: Vec<((usize, usize), usize, usize)> = Vec::new(); // (key, first query, area)
    for &o in &owner {
        if o == usize::MAX {
            continue;
        }
        match groups.iter_mut().find(|g| g.0 == key(o)) {
            Some(g) => {
                g.1 = g.1.min(o);
                g.2 += 1;
            }
            None => groups.push((key(o), o, 1)),
        }
    }
    groups.retain(|g| g.2 >= cfg.min_area);
    groups.sort_by_key(|g| g.1);
    let segments: Vec<Segment> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| Segment {
            id: i + 1,
            class: label[g.1],
            query: g.1,
            area: g.2,
            score: score[g.1],
        })
        .collect();
    let ids = owner
        .iter()
        .map(|&o| {
            if o == usize::MAX {
                return 0;
            }
            groups
                .iter()
                .position(|g| g.0 == key(o))
                .map_or(0, |i| i + 1)
        })
        .collect();
    Ok(PanopticOutput {
        ids,
        height: h,
        width: w,
        segments,
    })
}
