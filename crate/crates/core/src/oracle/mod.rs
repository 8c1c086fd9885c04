//! Brute-force reference implementations for tests and acceptance runs.
//!
//! Nothing here calls into the tensor engine, the attention blocks, the
//! matcher or the metrics; tensors are only read as flat row-major data.
//! Runtimes are cubic or exponential and never matter.

use crate::attention::{GridAttention, MaskedInstanceAttention};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};
use crate::objective::MatchResult;

/// Triple-loop `a[n, p] * b[p, m]`.
pub fn oracle_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, p, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if b.shape()[0] != p {
        return Err(Error::Shape(format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for k in 0..p {
                s += a.data()[i * p + k] * b.data()[k * m + j];
            }
            out[i * m + j] = s;
        }
    }
    Tensor::new([n, m], out)
}

/// Explicit four-corner bilinear interpolation of `map[H, W, c]` at the
/// normalized point `(x, y)`; texel `i` sits at `(i + 0.5) / W` and points
/// beyond the outer texel centers take the border value.
pub fn oracle_bilinear(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let px = (x * w as f64 - 0.5).max(0.0).min((w - 1) as f64);
    let py = (y * h as f64 - 0.5).max(0.0).min((h - 1) as f64);
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    let at = |r: usize, col: usize, ch: usize| map.data()[(r * w + col) * c + ch];
    (0..c)
        .map(|ch| {
            at(y0, x0, ch) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x1, ch) * fx * (1.0 - fy)
                + at(y1, x0, ch) * (1.0 - fx) * fy
                + at(y1, x1, ch) * fx * fy
        })
        .collect()
}

/// Plain copies of one attention block's parameters: matrices as
/// `[fan_in][fan_out]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub offsets: (Vec<Vec<f64>>, Vec<f64>),
    pub value: (Vec<Vec<f64>>, Vec<f64>),
    pub output: (Vec<Vec<f64>>, Vec<f64>),
    /// grid blocks: `[heads][cells][dim]`; masked blocks leave this empty
    pub relpos: Vec<Vec<Vec<f64>>>,
    /// adaptive: scale logits; masked: bin scores
    pub extra: Option<(Vec<Vec<f64>>, Vec<f64>)>,
}

fn rows(store: &ParamStore, id: ParamId) -> Vec<Vec<f64>> {
    let t = store.value(id);
    let m = t.shape()[1];
    t.data().chunks(m).map(<[f64]>::to_vec).collect()
}

fn lin(store: &ParamStore, w: ParamId, b: ParamId) -> (Vec<Vec<f64>>, Vec<f64>) {
    (rows(store, w), store.value(b).data().to_vec())
}

impl AttentionParams {
    pub fn from_grid(block: &GridAttention, store: &ParamStore) -> Self {
        let t = store.value(block.relpos.table);
        let (n, cells, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let relpos = (0..n)
            .map(|i| {
                (0..cells)
                    .map(|c| t.data()[(i * cells + c) * d..(i * cells + c + 1) * d].to_vec())
                    .collect()
            })
            .collect();
        Self {
            offsets: lin(store, block.offsets.weight, block.offsets.bias),
            value: lin(store, block.value.weight, block.value.bias),
            output: lin(store, block.output.weight, block.output.bias),
            relpos,
            extra: block.scale_logits.map(|l| lin(store, l.weight, l.bias)),
        }
    }

    pub fn from_masked(block: &MaskedInstanceAttention, store: &ParamStore) -> Self {
        Self {
            offsets: lin(store, block.offsets.weight, block.offsets.bias),
            value: lin(store, block.value.weight, block.value.bias),
            output: lin(store, block.output.weight, block.output.bias),
            relpos: vec![],
            extra: Some(lin(store, block.bins.weight, block.bins.bias)),
        }
    }
}

fn affine(x: &[f64], p: &(Vec<Vec<f64>>, Vec<f64>)) -> Vec<f64> {
    let mut y = p.1.clone();
    for (i, xi) in x.iter().enumerate() {
        for (j, yj) in y.iter_mut().enumerate() {
            *yj += xi * p.0[i][j];
        }
    }
    y
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Everything besides the parameters that a single-query attention
/// evaluation needs.
#[derive(Clone, Debug)]
pub struct OracleSetting<'a> {
    pub heads: usize,
    pub scale_count: usize,
    /// normalized anchor sides, smallest first
    pub anchor_sizes: Vec<f64>,
    pub lambda: f64,
    pub grid: usize,
    /// masked only: the previous layer's mask logits `[Hm, Wm]` for this query
    pub prev_mask: Option<&'a Tensor>,
}

/// One query's attention output by direct transcription of the
/// mechanism. `tag` is `box`, `fixed`, `adaptive` or `masked`. `reference`
/// is the query's window for `box` and `masked`; for `fixed` and
/// `adaptive` only its center is used and the anchors supply the sizes.
pub fn oracle_attention(
    tag: &str,
    query: &[f64],
    reference: [f64; 4],
    map: &Tensor,
    params: &AttentionParams,
    s: &OracleSetting,
) -> Result<Vec<f64>> {
    let (h, w, d) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let n = s.heads;
    let dh = d / n;
    let g = s.grid;
    let m = s.scale_count;
    // value map, texel by texel
    let mut vmap = vec![0.0; h * w * d];
    for t in 0..h * w {
        let v = affine(&map.data()[t * d..(t + 1) * d], &params.value);
        vmap[t * d..(t + 1) * d].copy_from_slice(&v);
    }
    let vmap = Tensor::new([h, w, d], vmap)?;
    let off = affine(query, &params.offsets);

    // (window, temperature, offset slice) per head per set
    let sets: Vec<Vec<([f64; 4], f64, [f64; 4])>> = (0..n)
        .map(|i| match tag {
            "box" | "masked" => {
                let o = [off[i * 4], off[i * 4 + 1], off[i * 4 + 2], off[i * 4 + 3]];
                Ok(vec![(reference, 1.0, o)])
            }
            "fixed" => {
                let a = s.anchor_sizes[i % m];
                let o = [off[i * 4], off[i * 4 + 1], off[i * 4 + 2], off[i * 4 + 3]];
                Ok(vec![([reference[0], reference[1], a, a], 1.0, o)])
            }
            "adaptive" => {
                let shared = off.len() == n * 4;
                Ok((0..m)
                    .map(|j| {
                        let b = if shared { i * 4 } else { (i * m + j) * 4 };
                        let a = s.anchor_sizes[j];
                        let tau = 2f64.powi(j as i32) / s.lambda;
                        (
                            [reference[0], reference[1], a, a],
                            tau,
                            [off[b], off[b + 1], off[b + 2], off[b + 3]],
                        )
                    })
                    .collect())
            }
            other => Err(Error::InvalidArgument(format!(
                "unknown attention tag {other:?}"
            ))),
        })
        .collect::<Result<_>>()?;

    let mut heads_out = vec![0.0; d];
    for i in 0..n {
        let mut per_set = Vec::new();
        for &(win, tau, o) in &sets[i] {
            let nx = win[0] + o[0] * tau * win[2];
            let ny = win[1] + o[1] * tau * win[3];
            let nw = (win[2] + o[2] * tau * win[2]).max(1.0 / w as f64);
            let nh = (win[3] + o[3] * tau * win[3]).max(1.0 / h as f64);
            let mut pts = Vec::new();
            for r in 0..g {
                for c in 0..g {
                    pts.push((
                        nx - nw / 2.0 + (c as f64 + 0.5) * nw / g as f64,
                        ny - nh / 2.0 + (r as f64 + 0.5) * nh / g as f64,
                        r,
                        c,
                    ));
                }
            }
            let mut scores: Vec<f64> = Vec::new();
            if tag == "masked" {
                let bins = affine(
                    query,
                    params
                        .extra
                        .as_ref()
                        .ok_or_else(|| Error::InvalidArgument("no bin params".into()))?,
                );
                for &(_, _, r, c) in &pts {
                    let bin = (r / (g / 2)) * 2 + c / (g / 2);
                    scores.push(bins[i * 4 + bin]);
                }
                if let Some(prev) = s.prev_mask {
                    let pm =
                        Tensor::new([prev.shape()[0], prev.shape()[1], 1], prev.data().to_vec())?;
                    let masked: Vec<bool> = pts
                        .iter()
                        .map(|p| oracle_bilinear(&pm, p.0, p.1)[0] <= 0.0)
                        .collect();
                    if !masked.iter().all(|&x| x) {
                        for (sc, mk) in scores.iter_mut().zip(&masked) {
                            if *mk {
                                *sc += -1e9;
                            }
                        }
                    }
                }
            } else {
                for cell in 0..g * g {
                    scores.push(
                        query
                            .iter()
                            .zip(&params.relpos[i][cell])
                            .map(|(a, b)| a * b)
                            .sum(),
                    );
                }
            }
            let alpha = softmax(&scores);
            let mut f = vec![0.0; dh];
            for (p, a) in pts.iter().zip(&alpha) {
                let v = oracle_bilinear(&vmap, p.0, p.1);
                for (fc, vc) in f.iter_mut().zip(&v[i * dh..(i + 1) * dh]) {
                    *fc += a * vc;
                }
            }
            per_set.push(f);
        }
        let head = if tag == "adaptive" {
            let logits = affine(
                query,
                params
                    .extra
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("no scale params".into()))?,
            );
            let wts = softmax(&logits[i * m..(i + 1) * m]);
            let mut f = vec![0.0; dh];
            for (set, wj) in per_set.iter().zip(&wts) {
                for (fc, v) in f.iter_mut().zip(set) {
                    *fc += wj * v;
                }
            }
            f
        } else {
            per_set.remove(0)
        };
        heads_out[i * dh..(i + 1) * dh].copy_from_slice(&head);
    }
    Ok(affine(&heads_out, &params.output))
}

/// Minimum-cost assignment of every target (column) to a distinct query
/// (row) by enumeration; the first optimum in lexicographic order of the
/// query sequence wins. At most 7 targets.
pub fn oracle_assignment(cost: &Tensor) -> Result<MatchResult> {
    let (k, t) = (cost.shape()[0], cost.shape()[1]);
    if t > 7 {
        return Err(Error::InvalidArgument(format!(
            "enumeration oracle takes at most 7 targets, got {t}"
        )));
    }
    if t > k {
        return Err(Error::InvalidArgument(format!(
            "{t} targets exceed {k} queries"
        )));
    }
    let c = |q: usize, j: usize| cost.data()[q * t + j];
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut cur = Vec::with_capacity(t);
    fn rec(
        k: usize,
        t: usize,
        cur: &mut Vec<usize>,
        c: &dyn Fn(usize, usize) -> f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if cur.len() == t {
            let total: f64 = cur.iter().enumerate().map(|(j, &q)| c(q, j)).sum();
            let better = match best {
                None => true,
                Some((b, _)) => total < *b - 1e-9 * b.abs().max(1.0),
            };
            if better {
                *best = Some((total, cur.clone()));
            }
            return;
        }
        for q in 0..k {
            if !cur.contains(&q) {
                cur.push(q);
                rec(k, t, cur, c, best);
                cur.pop();
            }
        }
    }
    rec(k, t, &mut cur, &c, &mut best);
    let (total_cost, qs) = best.unwrap_or((0.0, vec![]));
    Ok(MatchResult {
        pairs: qs.iter().enumerate().map(|(j, &q)| (q, j)).collect(),
        unmatched: (0..k).filter(|q| !qs.contains(q)).collect(),
        total_cost,
    })
}

/// Per-texel brute-force panoptic merge returning the id map (0 = void):
/// argmax of `score * mask` over queries with score `>= min_score` (first
/// query wins ties), things one segment per query, stuff one per class,
/// segments below `min_area` voided, ids by lowest contributing query.
pub fn oracle_panoptic(
    mask_probs: &Tensor,
    class_probs: &Tensor,
    min_area: usize,
    min_score: f64,
    first_stuff_class: usize,
) -> Vec<usize> {
    let (k, h, w) = (
        mask_probs.shape()[0],
        mask_probs.shape()[1],
        mask_probs.shape()[2],
    );
    let nc = class_probs.shape()[1];
    let best_class = |q: usize| {
        let row = &class_probs.data()[q * nc..(q + 1) * nc];
        let mut b = 0;
        for c in 0..nc {
            if row[c] > row[b] {
                b = c;
            }
        }
        (b, row[b])
    };
    let winner: Vec<Option<usize>> = (0..h * w)
        .map(|t| {
            let mut win = None;
            let mut val = 0.0;
            for q in 0..k {
                let (_, sc) = best_class(q);
                if sc < min_score {
                    continue;
                }
                let v = sc * mask_probs.data()[q * h * w + t];
                if v > val {
                    val = v;
                    win = Some(q);
                }
            }
            win
        })
        .collect();
    // segment key of a query: stuff merges by class
    let key = |q: usize| {
        let (c, _) = best_class(q);
        if c >= first_stuff_class {
            k + c
        } else {
            q
        }
    };
    let mut keys: Vec<(usize, usize)> = Vec::new(); // (lowest contributing query, key)
    for q in 0..k {
        let kq = key(q);
        let owns = winner.contains(&Some(q));
        let area = winner.iter().filter(|wq| wq.map(key) == Some(kq)).count();
        if owns && area >= min_area && !keys.iter().any(|e| e.1 == kq) {
            keys.push((q, kq));
        }
    }
    winner
        .iter()
        .map(|wq| match wq {
            Some(q) => keys
                .iter()
                .position(|e| e.1 == key(*q))
                .map_or(0, |i| i + 1),
            None => 0,
        })
        .collect()
}

/// A prediction or ground-truth region for the AP oracle.
#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    /// corner form `[x0, y0, x1, y1]`
    Box([f64; 4]),
    Mask(Vec<bool>),
}

fn region_iou(a: &Region, b: &Region) -> f64 {
    match (a, b) {
        (Region::Box(a), Region::Box(b)) => {
            let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
            let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
            let u = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - iw * ih;
            if u > 0.0 {
                iw * ih / u
            } else {
                0.0
            }
        }
        (Region::Mask(a), Region::Mask(b)) => {
            let i = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
            let u = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
            if u > 0 {
                i as f64 / u as f64
            } else {
                0.0
            }
        }
        _ => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleDetection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub region: Region,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleTruth {
    pub image: usize,
    pub class: usize,
    pub region: Region,
}

/// Mean over classes with ground truth of the 101-point interpolated AP.
/// Detections are visited by descending score (input order on ties) and
/// each takes the highest-IoU unmatched truth of its image and class with
/// IoU at or above the threshold. Precision at every recall level is
/// recounted from scratch.
pub fn oracle_ap(
    dets: &[OracleDetection],
    truths: &[OracleTruth],
    iou_threshold: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&iou_threshold) || iou_threshold.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold {iou_threshold} outside [0, 1]"
        )));
    }
    let mut classes: Vec<usize> = truths.iter().map(|t| t.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &cls in &classes {
        let gts: Vec<&OracleTruth> = truths.iter().filter(|t| t.class == cls).collect();
        let mut ds: Vec<(usize, &OracleDetection)> = dets
            .iter()
            .enumerate()
            .filter(|(_, d)| d.class == cls)
            .collect();
        ds.sort_by(|a, b| {
            b.1.score
                .partial_cmp(&a.1.score)
                .unwrap()
                .then(a.0.cmp(&b.0))
        });
        let mut used = vec![false; gts.len()];
        let mut tp = Vec::with_capacity(ds.len());
        for (_, d) in &ds {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.image != d.image {
                    continue;
                }
                let iou = region_iou(&d.region, &gt.region);
                if iou >= iou_threshold && best.is_none_or(|b| iou > b.1) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
            }
            tp.push(best.is_some());
        }
        // (recall, precision) after each rank, counted directly
        let points: Vec<(f64, f64)> = (1..=tp.len())
            .map(|r| {
                let hits = tp[..r].iter().filter(|&&x| x).count() as f64;
                (hits / gts.len() as f64, hits / r as f64)
            })
            .collect();
        let mut ap = 0.0;
        for step in 0..=100 {
            let level = step as f64 / 100.0;
            let p = points
                .iter()
                .filter(|(r, _)| *r >= level - 1e-12)
                .map(|p| p.1)
                .fold(0.0, f64::max);
            ap += p;
        }
        total += ap / 101.0;
    }
    Ok(total / classes.len() as f64)
}

/// `logits[q, y, x] = sum_c embed[q, c] * pixel[y, x, c]` by explicit loops.
pub fn oracle_predict_masks(embed: &Tensor, pixel: &Tensor) -> Tensor {
    let (k, d) = (embed.shape()[0], embed.shape()[1]);
    let (h, w) = (pixel.shape()[0], pixel.shape()[1]);
    let mut out = vec![0.0; k * h * w];
    for q in 0..k {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for c in 0..d {
                    s += embed.data()[q * d + c] * pixel.data()[(y * w + x) * d + c];
                }
                out[(q * h + y) * w + x] = s;
            }
        }
    }
    Tensor::new([k, h, w], out).unwrap()
}

/// Stride-2 kernel-2 transposed convolution by scattering each input
/// texel into its 2x2 output block. `weight[c_in, 4*c_out]` is ordered
/// `(dy, dx, c_out)`.
pub fn oracle_deconv2x(x: &Tensor, weight: &Tensor, bias: &[f64]) -> Tensor {
    let (h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = bias.len();
    let mut out = vec![0.0; 4 * h * w * co];
    for r in 0..h {
        for c in 0..w {
            for dy in 0..2 {
                for dx in 0..2 {
                    for o in 0..co {
                        let mut s = bias[o];
                        for i in 0..ci {
                            s += x.data()[(r * w + c) * ci + i]
                                * weight.data()[i * 4 * co + (dy * 2 + dx) * co + o];
                        }
                        out[((2 * r + dy) * 2 * w + 2 * c + dx) * co + o] = s;
                    }
                }
            }
        }
    }
    Tensor::new([2 * h, 2 * w, co], out).unwrap()
}

/// Two-pass layer norm over the last axis.
pub fn oracle_layer_norm(x: &Tensor, gain: &[f64], shift: &[f64], eps: f64) -> Tensor {
    let d = gain.len();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) / (var + eps).sqrt() * gain[i] + shift[i];
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_basics() {
        let map = Tensor::new([1, 2, 1], vec![2.0, 4.0]).unwrap();
        assert_eq!(oracle_bilinear(&map, 0.25, 0.5), vec![2.0]);
        assert_eq!(oracle_bilinear(&map, 0.5, 0.5), vec![3.0]);
        assert_eq!(oracle_bilinear(&map, 0.0, 0.0), vec![2.0]);
    }

    #[test]
    fn assignment_examples() {
        let c = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let m = oracle_assignment(&c).unwrap();
        assert_eq!((m.pairs, m.total_cost), (vec![(0, 0), (1, 1)], 2.0));
        let diag = Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 0.0 } else { 1.0 });
        assert_eq!(
            oracle_assignment(&diag).unwrap().pairs,
            (0..4).map(|i| (i, i)).collect::<Vec<_>>()
        );
        assert!(oracle_assignment(&Tensor::zeros([8, 8])).is_err());
    }

    #[test]
    fn ap_examples() {
        let gt = vec![OracleTruth {
            image: 0,
            class: 0,
            region: Region::Box([0.0, 0.0, 1.0, 1.0]),
        }];
        let tp = OracleDetection {
            image: 0,
            class: 0,
            score: 0.5,
            region: Region::Box([0.0, 0.0, 1.0, 1.0]),
        };
        let fp = OracleDetection {
            image: 0,
            class: 0,
            score: 0.9,
            region: Region::Box([5.0, 5.0, 6.0, 6.0]),
        };
        assert_eq!(oracle_ap(std::slice::from_ref(&tp), &gt, 0.5).unwrap(), 1.0);
        assert_eq!(oracle_ap(&[], &gt, 0.5).unwrap(), 0.0);
        assert!((oracle_ap(&[tp, fp], &gt, 0.5).unwrap() - 0.5).abs() < 1e-12);
        assert!(oracle_ap(&[], &gt, 1.5).is_err());
    }

    #[test]
    fn unknown_tag_is_rejected() {
        let map = Tensor::zeros([2, 2, 2]);
        let p = AttentionParams {
            offsets: (vec![vec![0.0; 4]; 2], vec![0.0; 4]),
            value: (vec![vec![0.0; 2]; 2], vec![0.0; 2]),
            output: (vec![vec![0.0; 2]; 2], vec![0.0; 2]),
            relpos: vec![vec![vec![0.0; 2]; 4]],
            extra: None,
        };
        let s = OracleSetting {
            heads: 1,
            scale_count: 1,
            anchor_sizes: vec![0.5],
            lambda: 1.0,
            grid: 2,
            prev_mask: None,
        };
        assert!(oracle_attention("nope", &[0.0, 0.0], [0.5, 0.5, 0.5, 0.5], &map, &p, &s).is_err());
        assert!(oracle_attention("box", &[0.0, 0.0], [0.5, 0.5, 0.5, 0.5], &map, &p, &s).is_ok());
    }
}
