//! Detection and segmentation metrics.
//!
//! AP: detections visited by descending score take the highest-IoU
//! unmatched ground truth of the same image and class at or above the
//! threshold; precision is made monotone and read at the 101 recall levels
//! 0, 0.01, ..., 1; the result is the mean over classes with ground truth.
//! Per-size AP ignores ground truth whose visible area is outside the
//! bucket, and unmatched detections whose box area is. PQ-lite is the usual panoptic quality (segments match at
//! IoU > 0.5), averaged over classes that occur.

use std::io::{Read, Write};

use crate::data::{SceneRecord, SizeBucket, VOID};
use crate::error::{Error, Result};
use crate::model::{panoptic_merge, MergeConfig, Model, PanopticOutput, Prediction, THING_CLASSES};
use crate::objective::boxes::cxcywh_to_xyxy;
use crate::objective::Task;

#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    /// corner form
    Box([f64; 4]),
    Mask(Vec<bool>),
}

impl Region {
    pub fn iou(&self, other: &Region) -> f64 {
        match (self, other) {
            (Region::Box(a), Region::Box(b)) => crate::objective::boxes::iou(*a, *b).unwrap_or(0.0),
            (Region::Mask(a), Region::Mask(b)) => {
                let (mut i, mut u) = (0usize, 0usize);
                for (x, y) in a.iter().zip(b) {
                    i += usize::from(*x && *y);
                    u += usize::from(*x || *y);
                }
                if u == 0 {
                    0.0
                } else {
                    i as f64 / u as f64
                }
            }
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub region: Region,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub image: usize,
    pub class: usize,
    pub region: Region,
}

pub const RECALL_LEVELS: usize = 101;

pub fn average_precision(dets: &[Scored], truths: &[Truth], iou_threshold: f64) -> Result<f64> {
    average_precision_ignoring(
        dets,
        truths,
        iou_threshold,
        &vec![false; truths.len()],
        &vec![false; dets.len()],
    )
}

/// AP with some ground truth and detections set aside, as for per-size AP:
/// an ignored truth does not count towards recall, and a detection matched
/// to it, or an ignored detection left unmatched, is neither a true nor a
/// false positive. Detections prefer non-ignored truth.
pub fn average_precision_ignoring(
    dets: &[Scored],
    truths: &[Truth],
    iou_threshold: f64,
    truth_ignored: &[bool],
    det_ignored: &[bool],
) -> Result<f64> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold {iou_threshold} outside [0, 1]"
        )));
    }
    if truth_ignored.len() != truths.len() || det_ignored.len() != dets.len() {
        return Err(Error::InvalidArgument(
            "ignore flags do not line up with their lists".into(),
        ));
    }
    let n_classes = truths.iter().map(|t| t.class + 1).max().unwrap_or(0);
    let mut total = 0.0;
    let mut counted = 0;
    for cls in 0..n_classes {
        let gts: Vec<usize> = (0..truths.len())
            .filter(|&g| truths[g].class == cls)
            .collect();
        let positives = gts.iter().filter(|&&g| !truth_ignored[g]).count();
        if positives == 0 {
            continue;
        }
        counted += 1;
        let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == cls).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        let mut used = vec![false; gts.len()];
        let mut precision = Vec::with_capacity(order.len());
        let mut recall = Vec::with_capacity(order.len());
        let (mut tp, mut fp) = (0usize, 0usize);
        for &i in &order {
            let d = &dets[i];
            // best unmatched truth, non-ignored ones first
            let mut best: Option<(usize, bool, f64)> = None;
            for (slot, &g) in gts.iter().enumerate() {
                let gt = &truths[g];
                if used[slot] || gt.image != d.image {
                    continue;
                }
                let iou = d.region.iou(&gt.region);
                if iou < iou_threshold {
                    continue;
                }
                let ign = truth_ignored[g];
                let better = match best {
                    None => true,
                    Some((_, bign, biou)) => (bign && !ign) || (bign == ign && iou > biou),
                };
                if better {
                    best = Some((slot, ign, iou));
                }
            }
            match best {
                Some((slot, ign, _)) => {
                    used[slot] = true;
                    if ign {
                        continue;
                    }
                    tp += 1;
                }
                None if det_ignored[i] => continue,
                None => fp += 1,
            }
            precision.push(tp as f64 / (tp + fp) as f64);
            recall.push(tp as f64 / positives as f64);
        }
        // suffix maximum: best precision at any recall at or beyond each rank
        for i in (0..precision.len().saturating_sub(1)).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
        let mut ap = 0.0;
        let mut j = 0;
        for step in 0..RECALL_LEVELS {
            let level = step as f64 / (RECALL_LEVELS - 1) as f64;
            while j < recall.len() && recall[j] < level - 1e-12 {
                j += 1;
            }
            if j < recall.len() {
                ap += precision[j];
            }
        }
        total += ap / RECALL_LEVELS as f64;
    }
    Ok(if counted == 0 {
        0.0
    } else {
        total / counted as f64
    })
}

/// One image's detections in a task-independent form.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    /// normalized center-size
    pub bbox: [f64; 4],
    /// binary mask at the mask resolution
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePrediction {
    pub detections: Vec<Detection>,
    pub panoptic: Option<PanopticOutput>,
}

/// Panoptic ground truth at `side x side`: ids (0 void) by nearest
/// sampling of the full-resolution layering, and the class of each id.
pub fn panoptic_truth(scene: &SceneRecord, side: usize) -> (Vec<usize>, Vec<usize>) {
    let (h, w) = (scene.height, scene.width);
    let n_inst = scene.instances.len();
    let mut classes: Vec<usize> = scene.instances.iter().map(|i| i.class.id()).collect();
    classes.extend((0..crate::data::STUFF_NAMES.len()).map(|s| THING_CLASSES + s));
    let mut ids = vec![0; side * side];
    for r in 0..side {
        for c in 0..side {
            let (sr, sc) = ((r * h + h / 2) / side, (c * w + w / 2) / side);
            let t = sr * w + sc;
            let id = match scene.instances.iter().position(|i| i.mask.data()[t] > 0.5) {
                Some(j) => j + 1,
                None if scene.stuff[t] == VOID => 0,
                None => n_inst + 1 + scene.stuff[t] as usize,
            };
            ids[r * side + c] = id;
        }
    }
    (ids, classes)
}

#[derive(Clone, Debug, Default)]
struct PqAccum {
    /// per class: (iou sum, tp, fp, fn)
    per_class: Vec<(f64, usize, usize, usize)>,
}

impl PqAccum {
    fn add(
        &mut self,
        pred_ids: &[usize],
        pred_class: &dyn Fn(usize) -> usize,
        gt_ids: &[usize],
        gt_class: &dyn Fn(usize) -> usize,
        classes: usize,
    ) {
        if self.per_class.len() < classes {
            self.per_class.resize(classes, (0.0, 0, 0, 0));
        }
        let np = pred_ids.iter().copied().max().unwrap_or(0);
        let ng = gt_ids.iter().copied().max().unwrap_or(0);
        let mut inter = vec![vec![0usize; ng + 1]; np + 1];
        let mut parea = vec![0usize; np + 1];
        let mut garea = vec![0usize; ng + 1];
        for (&p, &g) in pred_ids.iter().zip(gt_ids) {
            inter[p][g] += 1;
            parea[p] += 1;
            garea[g] += 1;
        }
        let mut pmatched = vec![false; np + 1];
        let mut gmatched = vec![false; ng + 1];
        for p in 1..=np {
            if parea[p] == 0 {
                continue;
            }
            for g in 1..=ng {
                if garea[g] == 0 || pred_class(p) != gt_class(g) {
                    continue;
                }
                let i = inter[p][g];
                let u = parea[p] + garea[g] - i;
                let iou = i as f64 / u as f64;
                if iou > 0.5 {
                    pmatched[p] = true;
                    gmatched[g] = true;
                    let e = &mut self.per_class[gt_class(g)];
                    e.0 += iou;
                    e.1 += 1;
                }
            }
        }
        for p in 1..=np {
            if parea[p] > 0 && !pmatched[p] {
                self.per_class[pred_class(p)].2 += 1;
            }
        }
        for g in 1..=ng {
            if garea[g] > 0 && !gmatched[g] {
                self.per_class[gt_class(g)].3 += 1;
            }
        }
    }

    fn pq(&self, range: std::ops::Range<usize>) -> Option<f64> {
        let vals: Vec<f64> = self.per_class
            [range.start.min(self.per_class.len())..range.end.min(self.per_class.len())]
            .iter()
            .filter(|e| e.1 + e.2 + e.3 > 0)
            .map(|e| e.0 / (e.1 as f64 + 0.5 * e.2 as f64 + 0.5 * e.3 as f64))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub task: Task,
    pub images: usize,
    pub ap50: f64,
    pub ap75: f64,
    pub mask_ap50: Option<f64>,
    pub pq: Option<f64>,
    pub pq_th: Option<f64>,
    pub pq_st: Option<f64>,
    /// box AP@0.5 per size bucket; `None` without ground truth in it
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub final_loss: Option<f64>,
}

fn bucket_of_box(b: &[f64; 4], h: usize, w: usize) -> SizeBucket {
    SizeBucket::of_area(b[2] * w as f64 * b[3] * h as f64)
}

/// Scores `predictions[i]` against `scenes[i]`. Mask regions are compared
/// at `mask_side`; panoptic quality needs `predictions[i].panoptic`.
pub fn evaluate_predictions(
    predictions: &[ImagePrediction],
    scenes: &[SceneRecord],
    task: Task,
    mask_side: usize,
) -> Result<MetricReport> {
    if predictions.len() != scenes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} scenes",
            predictions.len(),
            scenes.len()
        )));
    }
    let mut box_dets = Vec::new();
    let mut box_truth = Vec::new();
    let mut mask_dets = Vec::new();
    let mut mask_truth = Vec::new();
    let mut truth_bucket = Vec::new();
    let mut det_bucket = Vec::new();
    let mut pq = PqAccum::default();
    let n_classes = THING_CLASSES + crate::data::STUFF_NAMES.len();
    for (img, (pred, scene)) in predictions.iter().zip(scenes).enumerate() {
        let (h, w) = (scene.height, scene.width);
        let factor = h / mask_side;
        for inst in &scene.instances {
            let region = Region::Box(cxcywh_to_xyxy(inst.bbox));
            let t = Truth {
                image: img,
                class: inst.class.id(),
                region,
            };
            truth_bucket.push(SizeBucket::of_area(inst.area()));
            box_truth.push(t);
            if task.supervises_masks() {
                let m = crate::data::downsample_mask(&inst.mask, factor)?;
                mask_truth.push(Truth {
                    image: img,
                    class: inst.class.id(),
                    region: Region::Mask(m.data().iter().map(|&v| v > 0.5).collect()),
                });
            }
        }
        for d in &pred.detections {
            if d.class >= THING_CLASSES {
                continue;
            }
            let s = Scored {
                image: img,
                class: d.class,
                score: d.score,
                region: Region::Box(cxcywh_to_xyxy(d.bbox)),
            };
            det_bucket.push(bucket_of_box(&d.bbox, h, w));
            box_dets.push(s);
            if let (true, Some(m)) = (task.supervises_masks(), &d.mask) {
                mask_dets.push(Scored {
                    image: img,
                    class: d.class,
                    score: d.score,
                    region: Region::Mask(m.clone()),
                });
            }
        }
        if task == Task::Panoptic {
            let out = pred.panoptic.as_ref().ok_or_else(|| {
                Error::InvalidArgument("panoptic evaluation without a merged segmentation".into())
            })?;
            let (gt_ids, gt_classes) = panoptic_truth(scene, out.height);
            let pclass = |id: usize| out.segments[id - 1].class;
            let gclass = |id: usize| gt_classes[id - 1];
            pq.add(&out.ids, &pclass, &gt_ids, &gclass, n_classes);
        }
    }
    let size_ap = |b: SizeBucket| -> Result<Option<f64>> {
        if !truth_bucket.contains(&b) {
            return Ok(None);
        }
        let ti: Vec<bool> = truth_bucket.iter().map(|&x| x != b).collect();
        let di: Vec<bool> = det_bucket.iter().map(|&x| x != b).collect();
        average_precision_ignoring(&box_dets, &box_truth, 0.5, &ti, &di).map(Some)
    };
    Ok(MetricReport {
        task,
        images: scenes.len(),
        ap50: average_precision(&box_dets, &box_truth, 0.5)?,
        ap75: average_precision(&box_dets, &box_truth, 0.75)?,
        mask_ap50: if task.supervises_masks() {
            Some(average_precision(&mask_dets, &mask_truth, 0.5)?)
        } else {
            None
        },
        pq: if task == Task::Panoptic {
            Some(pq.pq(0..n_classes).unwrap_or(0.0))
        } else {
            None
        },
        pq_th: if task == Task::Panoptic {
            Some(pq.pq(0..THING_CLASSES).unwrap_or(0.0))
        } else {
            None
        },
        pq_st: if task == Task::Panoptic {
            Some(pq.pq(THING_CLASSES..n_classes).unwrap_or(0.0))
        } else {
            None
        },
        ap_small: size_ap(SizeBucket::Small)?,
        ap_medium: size_ap(SizeBucket::Medium)?,
        ap_large: size_ap(SizeBucket::Large)?,
        final_loss: None,
    })
}

/// Ground truth dressed up as confident predictions.
pub fn ground_truth_predictions(
    scene: &SceneRecord,
    task: Task,
    mask_side: usize,
) -> Result<ImagePrediction> {
    let factor = scene.height / mask_side;
    let mut detections = Vec::new();
    for inst in &scene.instances {
        let mask = if task.supervises_masks() {
            Some(
                crate::data::downsample_mask(&inst.mask, factor)?
                    .data()
                    .iter()
                    .map(|&v| v > 0.5)
                    .collect(),
            )
        } else {
            None
        };
        detections.push(Detection {
            class: inst.class.id(),
            score: 1.0,
            bbox: inst.bbox,
            mask,
        });
    }
    let panoptic = (task == Task::Panoptic).then(|| {
        let (ids, classes) = panoptic_truth(scene, mask_side);
        let n = classes.len();
        let segments = (1..=n)
            .filter_map(|id| {
                let area = ids.iter().filter(|&&i| i == id).count();
                (area > 0).then(|| crate::model::Segment {
                    id,
                    class: classes[id - 1],
                    query: id - 1,
                    area,
                    score: 1.0,
                })
            })
            .collect::<Vec<_>>();
        // renumber to consecutive ids in segment order
        let mut remap = vec![0; n + 1];
        for (i, s) in segments.iter().enumerate() {
            remap[s.id] = i + 1;
        }
        let segments = segments
            .into_iter()
            .enumerate()
            .map(|(i, s)| crate::model::Segment { id: i + 1, ..s })
            .collect();
        PanopticOutput {
            ids: ids.iter().map(|&i| remap[i]).collect(),
            height: mask_side,
            width: mask_side,
            segments,
        }
    });
    Ok(ImagePrediction {
        detections,
        panoptic,
    })
}

/// Turns a forward pass into scored detections: every (query, class) pair
/// is a candidate, keeping the `max_dets` best.
pub fn prediction_to_image(
    pred: &Prediction,
    task: Task,
    max_dets: usize,
) -> Result<ImagePrediction> {
    let (k, c) = (pred.class_probs.shape()[0], pred.class_probs.shape()[1]);
    let plane = pred
        .mask_probs
        .as_ref()
        .map(|m| m.shape()[1] * m.shape()[2]);
    let mut detections = Vec::with_capacity(k * c);
    for q in 0..k {
        let bbox: [f64; 4] = pred.boxes.row(q).try_into().unwrap();
        let mask = match (&pred.mask_probs, plane) {
            (Some(m), Some(p)) => Some(
                m.data()[q * p..(q + 1) * p]
                    .iter()
                    .map(|&v| v > 0.5)
                    .collect::<Vec<bool>>(),
            ),
            _ => None,
        };
        for cls in 0..c.min(THING_CLASSES) {
            detections.push(Detection {
                class: cls,
                score: pred.class_probs.at(&[q, cls]),
                bbox,
                mask: mask.clone(),
            });
        }
    }
    detections.sort_by(|a, b| b.score.total_cmp(&a.score));
    detections.truncate(max_dets);
    let panoptic = match (task, &pred.mask_probs) {
        (Task::Panoptic, Some(m)) => Some(panoptic_merge(
            m,
            &pred.class_probs,
            &MergeConfig {
                min_area: 16,
                min_score: 0.5,
                first_stuff_class: THING_CLASSES,
            },
        )?),
        _ => None,
    };
    Ok(ImagePrediction {
        detections,
        panoptic,
    })
}

pub const MAX_DETECTIONS: usize = 100;

/// Runs the model over `scenes` (in parallel, results in order) and scores it.
pub fn evaluate_model(model: &Model, scenes: &[SceneRecord]) -> Result<MetricReport> {
    let task = model.config.task;
    let preds: Vec<ImagePrediction> = crate::parallel::map_indexed(scenes.len(), |i| {
        prediction_to_image(&model.predict(&scenes[i].image)?, task, MAX_DETECTIONS)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    evaluate_predictions(&preds, scenes, task, model.config.mask_side())
}

impl MetricReport {
    fn rows(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("images", Some(self.images as f64)),
            ("ap50", Some(self.ap50)),
            ("ap75", Some(self.ap75)),
            ("mask_ap50", self.mask_ap50),
            ("pq", self.pq),
            ("pq_th", self.pq_th),
            ("pq_st", self.pq_st),
            ("ap_small", self.ap_small),
            ("ap_medium", self.ap_medium),
            ("ap_large", self.ap_large),
            ("final_loss", self.final_loss),
        ]
    }

    /// `metric,value` CSV with six decimals; empty values for absent metrics.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["metric", "value"])?;
        wr.write_record(["task", self.task.name()])?;
        for (k, v) in self.rows() {
            wr.write_record([
                k.to_string(),
                v.map_or(String::new(), |v| format!("{v:.6}")),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut map = std::collections::HashMap::new();
        for rec in rd.records() {
            let rec = rec?;
            map.insert(rec[0].to_string(), rec[1].to_string());
        }
        let get = |k: &str| -> Result<Option<f64>> {
            match map.get(k).map(String::as_str) {
                None | Some("") => Ok(None),
                Some(v) => v
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::Format(format!("bad value for {k}: {v}"))),
            }
        };
        let need = |k: &str| -> Result<f64> {
            get(k)?.ok_or_else(|| Error::Format(format!("missing metric {k}")))
        };
        Ok(Self {
            task: Task::parse(map.get("task").map(String::as_str).unwrap_or(""))?,
            images: need("images")? as usize,
            ap50: need("ap50")?,
            ap75: need("ap75")?,
            mask_ap50: get("mask_ap50")?,
            pq: get("pq")?,
            pq_th: get("pq_th")?,
            pq_st: get("pq_st")?,
            ap_small: get("ap_small")?,
            ap_medium: get("ap_medium")?,
            ap_large: get("ap_large")?,
            final_loss: get("final_loss")?,
        })
    }

    /// Every present metric rounded to six decimals.
    pub fn rounded(&self) -> Self {
        let r = |v: f64| (v * 1e6).round() / 1e6;
        let o = |v: Option<f64>| v.map(r);
        Self {
            task: self.task,
            images: self.images,
            ap50: r(self.ap50),
            ap75: r(self.ap75),
            mask_ap50: o(self.mask_ap50),
            pq: o(self.pq),
            pq_th: o(self.pq_th),
            pq_st: o(self.pq_st),
            ap_small: o(self.ap_small),
            ap_medium: o(self.ap_medium),
            ap_large: o(self.ap_large),
            final_loss: o(self.final_loss),
        }
    }
}
