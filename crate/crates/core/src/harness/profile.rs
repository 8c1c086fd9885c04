//! Which anchor scales adaptive-scale attention picks, by object size.
//!
//! Final predictions are matched one-to-one to ground truth; each matched
//! query contributes its encoder scale weights (averaged over heads) to the
//! size bucket of its object, and each bucket is normalized to sum to 1.

use std::io::Write;

use crate::attention::Mechanism;
use crate::data::{SceneRecord, SizeBucket};
use crate::error::{Error, Result};
use crate::model::{Model, Prediction};
use crate::numerics::Tensor;
use crate::objective::boxes::{cxcywh_to_xyxy, giou};
use crate::objective::{hungarian_match, LossWeights};

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub bucket: SizeBucket,
    /// matched objects that fell in the bucket
    pub count: usize,
    /// normalized mass per anchor, smallest first; uniform when `count == 0`
    pub weights: Vec<f64>,
}

impl ProfileRow {
    pub fn modal_anchor(&self) -> usize {
        let mut best = 0;
        for (j, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = j;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleProfile {
    /// anchor sides in pixels
    pub anchor_px: Vec<f64>,
    pub rows: Vec<ProfileRow>,
}

impl ScaleProfile {
    pub fn row(&self, bucket: SizeBucket) -> &ProfileRow {
        &self.rows[bucket as usize]
    }

    /// Whether small objects put most mass on the smallest anchor; `None`
    /// without any matched small object.
    pub fn small_prefers_smallest(&self) -> Option<bool> {
        let r = self.row(SizeBucket::Small);
        (r.count > 0).then(|| r.modal_anchor() == 0)
    }
}

/// Hungarian matching of final predictions to `scene`'s objects using
/// class probability, L1 and GIoU costs.
pub fn match_predictions(pred: &Prediction, scene: &SceneRecord) -> Result<Vec<(usize, usize)>> {
    let t = scene.instances.len();
    let k = pred.boxes.shape()[0];
    if t == 0 {
        return Ok(vec![]);
    }
    let w = LossWeights::for_task(crate::objective::Task::Detect);
    let mut cost = Tensor::zeros([k, t]);
    for q in 0..k {
        let pb: [f64; 4] = pred.boxes.row(q).try_into().unwrap();
        for (j, inst) in scene.instances.iter().enumerate() {
            let l1: f64 = pb.iter().zip(&inst.bbox).map(|(a, b)| (a - b).abs()).sum();
            let g = giou(cxcywh_to_xyxy(pb), cxcywh_to_xyxy(inst.bbox))?;
            let p = pred.class_probs.at(&[q, inst.class.id()]);
            cost.set(&[q, j], -w.cls * p + w.l1 * l1 + w.giou * (1.0 - g));
        }
    }
    Ok(hungarian_match(&cost)?.pairs)
}

pub fn scale_profile(model: &Model, scenes: &[SceneRecord]) -> Result<ScaleProfile> {
    if model.config.mechanism != Mechanism::Adaptive {
        return Err(Error::Config(format!(
            "scale profiles need adaptive-scale attention; this model uses {}",
            model.config.mechanism.name()
        )));
    }
    let m = model.config.scale_count;
    let per_scene =
        crate::parallel::map_indexed(scenes.len(), |i| -> Result<Vec<(SizeBucket, Vec<f64>)>> {
            let pred = model.predict(&scenes[i].image)?;
            let sw = pred
                .scale_weights
                .as_ref()
                .ok_or_else(|| Error::Config("model returned no scale weights".into()))?;
            let heads = sw.shape()[1];
            let mut out = Vec::new();
            for (q, j) in match_predictions(&pred, &scenes[i])? {
                let mut acc = vec![0.0; m];
                for h in 0..heads {
                    for (a, v) in acc.iter_mut().enumerate() {
                        *v += sw.at(&[q, h, a]) / heads as f64;
                    }
                }
                out.push((SizeBucket::of_area(scenes[i].instances[j].area()), acc));
            }
            Ok(out)
        });
    let mut sums = vec![vec![0.0; m]; 3];
    let mut counts = [0usize; 3];
    for scene in per_scene {
        for (b, w) in scene? {
            counts[b as usize] += 1;
            for (s, v) in sums[b as usize].iter_mut().zip(w) {
                *s += v;
            }
        }
    }
    let rows = SizeBucket::ALL
        .iter()
        .map(|&b| {
            let s = &sums[b as usize];
            let total: f64 = s.iter().sum();
            let weights = if total > 0.0 {
                s.iter().map(|v| v / total).collect()
            } else {
                vec![1.0 / m as f64; m]
            };
            ProfileRow {
                bucket: b,
                count: counts[b as usize],
                weights,
            }
        })
        .collect();
    Ok(ScaleProfile {
        anchor_px: (0..m)
            .map(|j| model.config.base_size * 2f64.powi(j as i32))
            .collect(),
        rows,
    })
}

pub fn write_profile<W: Write>(p: &ScaleProfile, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["bucket".to_string(), "count".to_string()];
    header.extend(p.anchor_px.iter().map(|a| format!("anchor_{a}px")));
    wr.write_record(&header)?;
    for r in &p.rows {
        let mut rec = vec![r.bucket.name().to_string(), r.count.to_string()];
        rec.extend(r.weights.iter().map(|v| format!("{v:.9}")));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// A matplotlib script that draws one bar group per size bucket from the
/// CSV written next to it.
pub fn plot_script(csv_name: &str) -> String {
    format!(
        r#"import csv
import matplotlib.pyplot as plt

with open("{csv_name}") as f:
    rows = list(csv.reader(f))
header, rows = rows[0], rows[1:]
anchors = header[2:]
width = 0.8 / len(rows)
fig, ax = plt.subplots(figsize=(6, 3.5))
for i, row in enumerate(rows):
    xs = [j + i * width for j in range(len(anchors))]
    ax.bar(xs, [float(v) for v in row[2:]], width, label=f"{{row[0]}} (n={{row[1]}})")
ax.set_xticks([j + width * (len(rows) - 1) / 2 for j in range(len(anchors))])
ax.set_xticklabels([a.replace("anchor_", "") for a in anchors])
ax.set_xlabel("anchor size")
ax.set_ylabel("mean scale weight")
ax.legend()
fig.tight_layout()
fig.savefig("{stem}.png", dpi=150)
"#,
        csv_name = csv_name,
        stem = csv_name.trim_end_matches(".csv"),
    )
}
