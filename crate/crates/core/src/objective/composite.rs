//! Matching-based training objective summed over decoder layers.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::objective::boxes::{cxcywh_to_xyxy, giou, giou_tape};
use crate::objective::losses::{dice_rows, focal_loss_sum, focal_value, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::objective::matching::{hungarian_match, MatchResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Detect,
    Instance,
    Panoptic,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Detect => "detect",
            Task::Instance => "instance",
            Task::Panoptic => "panoptic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "detect" => Ok(Task::Detect),
            "instance" => Ok(Task::Instance),
            "panoptic" => Ok(Task::Panoptic),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }

    pub fn supervises_masks(self) -> bool {
        self != Task::Detect
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub focal: f64,
    pub dice: f64,
    pub l1: f64,
    pub giou: f64,
    pub cls: f64,
}

impl LossWeights {
    pub fn for_task(task: Task) -> Self {
        Self {
            focal: 5.0,
            dice: 5.0,
            l1: 5.0,
            giou: 2.0,
            cls: if task == Task::Panoptic { 4.0 } else { 2.0 },
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.focal, self.dice, self.l1, self.giou, self.cls];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Ground truth for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub classes: Vec<usize>,
    /// `[t, 4]` normalized center-size boxes
    pub boxes: Tensor,
    /// `[t, N]` binary masks at prediction resolution
    pub masks: Option<Tensor>,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn empty(mask_len: Option<usize>) -> Self {
        Self {
            classes: vec![],
            boxes: Tensor::zeros([0, 4]),
            masks: mask_len.map(|n| Tensor::zeros([0, n])),
        }
    }
}

/// One layer's predictions.
#[derive(Clone, Copy, Debug)]
pub struct PredictionSet {
    /// `[k, C]`
    pub logits: Var,
    /// `[k, 4]` center-size
    pub boxes: Var,
    /// `[k, ...]` mask logits at target resolution
    pub masks: Option<Var>,
}

/// Dense class-agnostic proposals: objectness `[P]` and boxes `[P, 4]`.
#[derive(Clone, Copy, Debug)]
pub struct ProposalSet {
    pub logits: Var,
    pub boxes: Var,
}

/// Unweighted loss sums, one per weight.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RawTerms {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub raw: RawTerms,
    /// `(name, weight * raw)`; these add up to `total`
    pub weighted: Vec<(&'static str, f64)>,
    pub total: f64,
    /// matches of each decoder layer
    pub matches: Vec<MatchResult>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mask_pair_cost(logits: &[f64], target: &[f64], w: &LossWeights) -> f64 {
    let n = logits.len() as f64;
    let mut focal = 0.0;
    let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
    for (&z, &y) in logits.iter().zip(target) {
        let p = sigmoid(z).clamp(1e-12, 1.0 - 1e-12);
        focal += focal_value(p, y, Some(FOCAL_ALPHA), FOCAL_GAMMA);
        inter += p * y;
        ps += p;
        ts += y;
    }
    w.focal * focal / n + w.dice * (1.0 - (2.0 * inter + 1.0) / (ps + ts + 1.0))
}

/// `cost[q, t] = cls * (-p_q(class_t)) + l1 * |b_q - b_t|_1 + giou * (1 - giou)`
/// plus mask focal and dice terms when `masks` is given.
pub fn build_cost_matrix(
    logits: &Tensor,
    boxes: &Tensor,
    masks: Option<&Tensor>,
    targets: &TargetSet,
    weights: &LossWeights,
) -> Result<Tensor> {
    let k = logits.shape()[0];
    let t = targets.len();
    if t > k {
        return Err(Error::InvalidArgument(format!(
            "{t} targets exceed {k} queries"
        )));
    }
    if boxes.shape() != [k, 4] || targets.boxes.shape() != [t, 4] {
        return shape_err(format!(
            "boxes {:?} vs targets {:?}",
            boxes.shape(),
            targets.boxes.shape()
        ));
    }
    let c = logits.shape()[1];
    let mut cost = Tensor::zeros([k, t]);
    for q in 0..k {
        let pb: [f64; 4] = boxes.row(q).try_into().unwrap();
        for j in 0..t {
            let cls = targets.classes[j];
            if cls >= c {
                return Err(Error::InvalidArgument(format!(
                    "target class {cls} >= {c} classes"
                )));
            }
            let tb: [f64; 4] = targets.boxes.row(j).try_into().unwrap();
            let l1: f64 = pb.iter().zip(&tb).map(|(a, b)| (a - b).abs()).sum();
            let g = giou(cxcywh_to_xyxy(pb), cxcywh_to_xyxy(tb))?;
            let mut v = weights.cls * -sigmoid(logits.at(&[q, cls]))
                + weights.l1 * l1
                + weights.giou * (1.0 - g);
            if let (Some(m), Some(tm)) = (masks, targets.masks.as_ref()) {
                v += mask_pair_cost(m.row(q), tm.row(j), weights);
            }
            cost.set(&[q, j], v);
        }
    }
    Ok(cost)
}

struct Accum {
    cls: Vec<Var>,
    l1: Vec<Var>,
    giou: Vec<Var>,
    focal: Vec<Var>,
    dice: Vec<Var>,
}

fn box_terms(
    tape: &mut Tape,
    pred: Var,
    idx: &[usize],
    target: &Tensor,
    acc: &mut Accum,
) -> Result<()> {
    let n = idx.len() as f64;
    let sel = tape.index_select(pred, idx)?;
    let tv = tape.constant(target.clone());
    let diff = tape.sub(sel, tv)?;
    let diff = tape.abs(diff)?;
    let l1 = tape.sum(diff)?;
    acc.l1.push(tape.scale(l1, 1.0 / n)?);
    let g = giou_tape(tape, sel, target)?;
    let g = tape.sum(g)?;
    let g = tape.scale(g, -1.0 / n)?;
    acc.giou.push(tape.add_scalar(g, 1.0)?);
    Ok(())
}

/// Total loss `sum_w weight_w * raw_w` over all decoder layers (and the
/// proposal stage when given), with a per-term report.
pub fn composite_loss(
    tape: &mut Tape,
    layers: &[PredictionSet],
    proposals: Option<&ProposalSet>,
    targets: &TargetSet,
    weights: &LossWeights,
    task: Task,
    match_masks: bool,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no prediction layers".into()));
    }
    let t = targets.len();
    let use_masks = task.supervises_masks() && targets.masks.is_some();
    let mut acc = Accum {
        cls: vec![],
        l1: vec![],
        giou: vec![],
        focal: vec![],
        dice: vec![],
    };
    let mut matches = Vec::new();

    for layer in layers {
        let logits = tape.value(layer.logits).clone();
        let (k, c) = (logits.shape()[0], logits.shape()[1]);
        let boxes = tape.value(layer.boxes).clone();
        let flat_masks = match (use_masks, layer.masks) {
            (true, Some(m)) => {
                let n = tape.value(m).len() / k;
                Some(tape.reshape(m, &[k, n])?)
            }
            (true, None) => {
                return Err(Error::InvalidArgument(
                    "mask task without mask predictions".into(),
                ))
            }
            _ => None,
        };
        let mask_vals = match (match_masks, flat_masks) {
            (true, Some(m)) => Some(tape.value(m).clone()),
            _ => None,
        };
        let cost = build_cost_matrix(&logits, &boxes, mask_vals.as_ref(), targets, weights)?;
        let m = hungarian_match(&cost)?;

        let mut onehot = Tensor::zeros([k, c]);
        for &(q, j) in &m.pairs {
            onehot.set(&[q, targets.classes[j]], 1.0);
        }
        let cls = focal_loss_sum(tape, layer.logits, &onehot, Some(FOCAL_ALPHA), FOCAL_GAMMA)?;
        acc.cls.push(tape.scale(cls, 1.0 / k as f64)?);

        if t > 0 {
            let qidx: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
            box_terms(tape, layer.boxes, &qidx, &targets.boxes, &mut acc)?;
            if let (Some(fm), Some(tm)) = (flat_masks, targets.masks.as_ref()) {
                let n = tm.shape()[1];
                if tape.shape(fm)[1] != n {
                    return shape_err(format!(
                        "mask logits {:?} vs targets {:?}",
                        tape.shape(fm),
                        tm.shape()
                    ));
                }
                let sel = tape.index_select(fm, &qidx)?;
                let per = tape.sigmoid_focal(sel, tm.clone(), Some(FOCAL_ALPHA), FOCAL_GAMMA)?;
                let norm = Tensor::new(
                    [t, 1],
                    tm.data()
                        .chunks_exact(n)
                        .map(|r| 1.0 / (r.iter().sum::<f64>().max(1.0) * t as f64))
                        .collect(),
                )?;
                let norm = tape.constant(norm);
                let per = tape.mul(per, norm)?;
                acc.focal.push(tape.sum(per)?);
                let d = dice_rows(tape, sel, tm)?;
                let d = tape.sum(d)?;
                acc.dice.push(tape.scale(d, 1.0 / t as f64)?);
            }
        }
        matches.push(m);
    }

    if let Some(p) = proposals {
        let np = tape.shape(p.logits)[0];
        let logits = tape.value(p.logits).clone().reshape([np, 1])?;
        let boxes = tape.value(p.boxes).clone();
        let agnostic = TargetSet {
            classes: vec![0; t],
            boxes: targets.boxes.clone(),
            masks: None,
        };
        let m = hungarian_match(&build_cost_matrix(
            &logits, &boxes, None, &agnostic, weights,
        )?)?;
        let mut obj = Tensor::zeros([np]);
        for &(q, _) in &m.pairs {
            obj.data_mut()[q] = 1.0;
        }
        let cls = focal_loss_sum(tape, p.logits, &obj, Some(FOCAL_ALPHA), FOCAL_GAMMA)?;
        acc.cls.push(tape.scale(cls, 1.0 / np as f64)?);
        if t > 0 {
            let qidx: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
            box_terms(tape, p.boxes, &qidx, &targets.boxes, &mut acc)?;
        }
    }

    let mut total: Option<Var> = None;
    let mut raw = RawTerms::default();
    let mut weighted = Vec::new();
    let groups: [(&'static str, &Vec<Var>, f64); 5] = [
        ("cls", &acc.cls, weights.cls),
        ("l1", &acc.l1, weights.l1),
        ("giou", &acc.giou, weights.giou),
        ("mask_focal", &acc.focal, weights.focal),
        ("mask_dice", &acc.dice, weights.dice),
    ];
    for (name, vars, w) in groups {
        if vars.is_empty() {
            weighted.push((name, 0.0));
            continue;
        }
        let mut s = vars[0];
        for v in &vars[1..] {
            s = tape.add(s, *v)?;
        }
        let r = tape.value(s).item()?;
        match name {
            "cls" => raw.cls = r,
            "l1" => raw.l1 = r,
            "giou" => raw.giou = r,
            "mask_focal" => raw.focal = r,
            _ => raw.dice = r,
        }
        let ws = tape.scale(s, w)?;
        weighted.push((name, tape.value(ws).item()?));
        total = Some(match total {
            Some(acc) => tape.add(acc, ws)?,
            None => ws,
        });
    }
    let total = total.expect("classification term always present");
    let total_value = tape.value(total).item()?;
    Ok((
        total,
        LossReport {
            raw,
            weighted,
            total: total_value,
            matches,
        },
    ))
}
