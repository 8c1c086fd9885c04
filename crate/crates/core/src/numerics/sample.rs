//! Bilinear sampling and the window geometry that feeds it.
//!
//! Coordinates are normalized with (0, 0) at the top-left image corner and
//! texel `i` of an extent-`W` axis centered at `(i + 0.5) / W`. Points
//! outside the texel-center range are clamped to it (border replication).

use crate::error::{shape_err, Error, Result};
use crate::numerics::tape::{Op, Tape, Var};
use crate::numerics::Tensor;

/// Left neighbor and fractional weight along one axis, plus the derivative
/// of the continuous texel coordinate w.r.t. the normalized one (zero where
/// the point was clamped).
#[inline]
fn axis_lerp(x: f64, extent: usize) -> (usize, usize, f64, f64) {
    let n = extent as f64;
    let u = x * n - 0.5;
    let hi = (extent - 1) as f64;
    let (u, du) = if u < 0.0 {
        (0.0, 0.0)
    } else if u > hi {
        (hi, 0.0)
    } else {
        (u, n)
    };
    if extent == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let i0 = (u.floor() as usize).min(extent - 2);
    (i0, i0 + 1, u - i0 as f64, du)
}

/// Per-head bilinear sampling: `map[H, W, heads * c]` at
/// `points[k, heads, s, 2]` gives `[k, heads, s, c]`; head `i` reads
/// channels `i*c .. (i+1)*c`.
struct SampleHeads;

fn sample_shapes(
    map: &[usize],
    pts: &[usize],
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if map.len() != 3 || pts.len() != 4 || pts[3] != 2 {
        return shape_err(format!("sample map {map:?} at points {pts:?}"));
    }
    let (h, w, ch) = (map[0], map[1], map[2]);
    let (k, heads, s) = (pts[0], pts[1], pts[2]);
    if h < 1 || w < 1 {
        return shape_err(format!("cannot sample an empty map {map:?}"));
    }
    if heads == 0 || ch % heads != 0 {
        return shape_err(format!("{ch} channels do not split into {heads} heads"));
    }
    Ok((h, w, ch, k, heads, s))
}

impl Op for SampleHeads {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (map, pts) = (inputs[0], inputs[1]);
        let (h, w, ch, k, heads, s) = sample_shapes(map.shape(), pts.shape())?;
        let c = ch / heads;
        let mut out = Tensor::zeros([k, heads, s, c]);
        let md = map.data();
        let od = out.data_mut();
        for (p, xy) in pts.data().chunks_exact(2).enumerate() {
            let head = (p / s) % heads;
            let (x0, x1, fx, _) = axis_lerp(xy[0], w);
            let (y0, y1, fy, _) = axis_lerp(xy[1], h);
            let wts = [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ];
            let offs = [(y0 * w + x0), (y0 * w + x1), (y1 * w + x0), (y1 * w + x1)];
            let dst = &mut od[p * c..(p + 1) * c];
            for (wt, off) in wts.iter().zip(offs) {
                if *wt == 0.0 {
                    continue;
                }
                let src = &md[off * ch + head * c..off * ch + (head + 1) * c];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += wt * v;
                }
            }
        }
        Ok(out)
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (map, pts) = (inputs[0], inputs[1]);
        let (h, w, ch, _, heads, s) = sample_shapes(map.shape(), pts.shape())?;
        let c = ch / heads;
        let mut gmap = needs[0].then(|| Tensor::zeros(map.shape().to_vec()));
        let mut gpts = needs[1].then(|| Tensor::zeros(pts.shape().to_vec()));
        let md = map.data();
        let g = grad.data();
        for (p, xy) in pts.data().chunks_exact(2).enumerate() {
            let head = (p / s) % heads;
            let (x0, x1, fx, dux) = axis_lerp(xy[0], w);
            let (y0, y1, fy, duy) = axis_lerp(xy[1], h);
            let gp = &g[p * c..(p + 1) * c];
            let base = |off: usize| off * ch + head * c;
            let offs = [(y0 * w + x0), (y0 * w + x1), (y1 * w + x0), (y1 * w + x1)];
            if let Some(gm) = gmap.as_mut() {
                let wts = [
                    (1.0 - fx) * (1.0 - fy),
                    fx * (1.0 - fy),
                    (1.0 - fx) * fy,
                    fx * fy,
                ];
                let gd = gm.data_mut();
                for (wt, off) in wts.iter().zip(offs) {
                    if *wt == 0.0 {
                        continue;
                    }
                    for (d, gv) in gd[base(off)..base(off) + c].iter_mut().zip(gp) {
                        *d += wt * gv;
                    }
                }
            }
            if let Some(gq) = gpts.as_mut() {
                let dot = |off: usize| -> f64 {
                    md[base(off)..base(off) + c]
                        .iter()
                        .zip(gp)
                        .map(|(a, b)| a * b)
                        .sum()
                };
                let (v00, v01, v10, v11) = (dot(offs[0]), dot(offs[1]), dot(offs[2]), dot(offs[3]));
                let dfx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
                let dfy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
                gq.data_mut()[2 * p] = dfx * dux;
                gq.data_mut()[2 * p + 1] = dfy * duy;
            }
        }
        Ok(vec![gmap, gpts])
    }
}

/// Window refinement over rows of `[N, 4]` center-size boxes:
/// `x + dx * t * w`, `y + dy * t * h`, `max(w + dw * t * w, min_w)`, same for h.
struct RefineWindows {
    temperature: Vec<f64>,
    min_size: (f64, f64),
}

impl Op for RefineWindows {
    fn name(&self) -> &'static str {
        "refine_windows"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (win, off) = (inputs[0], inputs[1]);
        let n = self.temperature.len();
        if win.shape() != [n, 4] || off.shape() != [n, 4] {
            return shape_err(format!(
                "refine windows {:?} with offsets {:?} for {n} temperatures",
                win.shape(),
                off.shape()
            ));
        }
        off.ensure_finite("window offsets")?;
        let mut out = Tensor::zeros([n, 4]);
        let (wd, od) = (win.data(), off.data());
        for r in 0..n {
            let t = self.temperature[r];
            let (x, y, w, h) = (wd[4 * r], wd[4 * r + 1], wd[4 * r + 2], wd[4 * r + 3]);
            let o = &od[4 * r..4 * r + 4];
            let dst = &mut out.data_mut()[4 * r..4 * r + 4];
            dst[0] = x + o[0] * t * w;
            dst[1] = y + o[1] * t * h;
            dst[2] = (w + o[2] * t * w).max(self.min_size.0);
            dst[3] = (h + o[3] * t * h).max(self.min_size.1);
        }
        Ok(out)
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (win, off) = (inputs[0], inputs[1]);
        let n = self.temperature.len();
        let mut gw = Tensor::zeros([n, 4]);
        let mut go = Tensor::zeros([n, 4]);
        let (wd, od, out, g) = (win.data(), off.data(), output.data(), grad.data());
        for r in 0..n {
            let t = self.temperature[r];
            let i = 4 * r;
            let (w, h) = (wd[i + 2], wd[i + 3]);
            // translation
            gw.data_mut()[i] += g[i];
            gw.data_mut()[i + 2] += g[i] * od[i] * t;
            go.data_mut()[i] = g[i] * t * w;
            gw.data_mut()[i + 1] += g[i + 1];
            gw.data_mut()[i + 3] += g[i + 1] * od[i + 1] * t;
            go.data_mut()[i + 1] = g[i + 1] * t * h;
            // scaling; zero gradient where the minimum size took over
            let live_w = w + od[i + 2] * t * w == out[i + 2];
            if live_w {
                gw.data_mut()[i + 2] += g[i + 2] * (1.0 + od[i + 2] * t);
                go.data_mut()[i + 2] = g[i + 2] * t * w;
            }
            let live_h = h + od[i + 3] * t * h == out[i + 3];
            if live_h {
                gw.data_mut()[i + 3] += g[i + 3] * (1.0 + od[i + 3] * t);
                go.data_mut()[i + 3] = g[i + 3] * t * h;
            }
        }
        Ok(vec![needs[0].then_some(gw), needs[1].then_some(go)])
    }
}

/// Cell centers of a `g x g` grid spanning each `[N, 4]` window, row-major,
/// giving `[N, g*g, 2]`.
struct GridPoints(usize);

impl Op for GridPoints {
    fn name(&self) -> &'static str {
        "grid_points"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let win = inputs[0];
        let g = self.0;
        if win.rank() != 2 || win.shape()[1] != 4 {
            return shape_err(format!(
                "grid windows must be [N, 4], got {:?}",
                win.shape()
            ));
        }
        let n = win.shape()[0];
        let mut out = Tensor::zeros([n, g * g, 2]);
        for (r, b) in win.data().chunks_exact(4).enumerate() {
            for cy in 0..g {
                for cx in 0..g {
                    let fx = (cx as f64 + 0.5) / g as f64 - 0.5;
                    let fy = (cy as f64 + 0.5) / g as f64 - 0.5;
                    let o = (r * g * g + cy * g + cx) * 2;
                    out.data_mut()[o] = b[0] + fx * b[2];
                    out.data_mut()[o + 1] = b[1] + fy * b[3];
                }
            }
        }
        Ok(out)
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let g = self.0;
        let n = inputs[0].shape()[0];
        let mut gw = Tensor::zeros([n, 4]);
        let gd = grad.data();
        for r in 0..n {
            for cy in 0..g {
                for cx in 0..g {
                    let fx = (cx as f64 + 0.5) / g as f64 - 0.5;
                    let fy = (cy as f64 + 0.5) / g as f64 - 0.5;
                    let o = (r * g * g + cy * g + cx) * 2;
                    let d = gw.data_mut();
                    d[4 * r] += gd[o];
                    d[4 * r + 2] += fx * gd[o];
                    d[4 * r + 1] += gd[o + 1];
                    d[4 * r + 3] += fy * gd[o + 1];
                }
            }
        }
        Ok(vec![Some(gw)])
    }
}

/// Expands `[..., 4]` bin scores (a 2x2 layout) onto a `g x g` grid,
/// giving `[..., g*g]`; each bin covers a `g/2 x g/2` quadrant.
struct RepeatBins(usize);

fn bin_of(cell: usize, g: usize) -> usize {
    let (r, c) = (cell / g, cell % g);
    (r / (g / 2)) * 2 + c / (g / 2)
}

impl Op for RepeatBins {
    fn name(&self) -> &'static str {
        "repeat_bins"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let g = self.0;
        if g < 2 || !g.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "bin grid size must be even, got {g}"
            )));
        }
        if x.shape().last() != Some(&4) {
            return shape_err(format!("bin scores must end in 4, got {:?}", x.shape()));
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = g * g;
        let data = x
            .data()
            .chunks_exact(4)
            .flat_map(|b| (0..g * g).map(move |cell| b[bin_of(cell, g)]))
            .collect();
        Tensor::new(shape, data)
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let g = self.0;
        let mut gx = Tensor::zeros(inputs[0].shape().to_vec());
        for (row, gr) in gx
            .data_mut()
            .chunks_exact_mut(4)
            .zip(grad.data().chunks_exact(g * g))
        {
            for (cell, v) in gr.iter().enumerate() {
                row[bin_of(cell, g)] += v;
            }
        }
        Ok(vec![Some(gx)])
    }
}

impl Tape {
    /// `map[H, W, c]` sampled at `points[k, 2]`, giving `[k, c]`.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        let ps = self.shape(points).to_vec();
        if ps.len() != 2 || ps[1] != 2 {
            return shape_err(format!("points must be [k, 2], got {ps:?}"));
        }
        let c = *self.shape(map).last().unwrap_or(&0);
        let p4 = self.reshape(points, &[ps[0], 1, 1, 2])?;
        let out = self.apply(SampleHeads, &[map, p4])?;
        self.reshape(out, &[ps[0], c])
    }

    /// Per-head sampling; see the module docs for the layout.
    pub fn sample_heads(&mut self, map: Var, points: Var) -> Result<Var> {
        self.apply(SampleHeads, &[map, points])
    }

    pub fn refine_windows(
        &mut self,
        windows: Var,
        offsets: Var,
        temperature: Vec<f64>,
        min_size: (f64, f64),
    ) -> Result<Var> {
        self.apply(
            RefineWindows {
                temperature,
                min_size,
            },
            &[windows, offsets],
        )
    }

    pub fn grid_points(&mut self, windows: Var, g: usize) -> Result<Var> {
        if g == 0 {
            return Err(Error::Config("grid size must be at least 1".into()));
        }
        self.apply(GridPoints(g), &[windows])
    }

    pub fn repeat_bins(&mut self, scores: Var, g: usize) -> Result<Var> {
        self.apply(RepeatBins(g), &[scores])
    }
}

/// Value-only bilinear interpolation of a `[H, W, c]` map at one point.
pub fn sample_point(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let (x0, x1, fx, _) = axis_lerp(x, w);
    let (y0, y1, fy, _) = axis_lerp(y, h);
    let at = |yy: usize, xx: usize, ch: usize| map.data()[(yy * w + xx) * c + ch];
    (0..c)
        .map(|ch| {
            (1.0 - fy) * ((1.0 - fx) * at(y0, x0, ch) + fx * at(y0, x1, ch))
                + fy * ((1.0 - fx) * at(y1, x0, ch) + fx * at(y1, x1, ch))
        })
        .collect()
}
