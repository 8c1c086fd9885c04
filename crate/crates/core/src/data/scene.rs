//! Seeded synthetic scenes: shapes ("things") over a sky/ground split
//! ("stuff"), rasterized without anti-aliasing.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const THING_NAMES: [&str; 3] = ["rect", "ellipse", "triangle"];
pub const STUFF_NAMES: [&str; 2] = ["sky", "ground"];
/// Stuff id of padding introduced by augmentation.
pub const VOID: u8 = u8::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Rect,
    Ellipse,
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Rect, ShapeClass::Ellipse, ShapeClass::Triangle];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no shape class {id}")))
    }
}

/// Size bucket by visible area in texels at 64x64.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

pub const SMALL_AREA: f64 = 64.0;
pub const LARGE_AREA: f64 = 256.0;

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn of_area(area: f64) -> Self {
        if area < SMALL_AREA {
            SizeBucket::Small
        } else if area < LARGE_AREA {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: ShapeClass,
    /// tight box of `mask`, normalized center-size
    pub bbox: [f64; 4],
    /// `[H, W]`, 0 or 1, visible region only
    pub mask: Tensor,
}

impl Instance {
    pub fn area(&self) -> f64 {
        self.mask.sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub seed: u64,
    /// `[H, W, 3]` in `[0, 1]`
    pub image: Tensor,
    /// in z-order, earliest first
    pub instances: Vec<Instance>,
    /// stuff id per texel over the whole image (things drawn on top)
    pub stuff: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub max_instances: usize,
    /// range of the longer side of a shape's box, in texels (log-uniform)
    pub size_range: (f64, f64),
    /// largest fraction of any instance's area another may cover
    pub overlap_limit: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            max_instances: 5,
            size_range: (4.0, 44.0),
            overlap_limit: 0.3,
        }
    }
}

impl SceneConfig {
    /// The default scene layout scaled to a `side x side` canvas.
    pub fn square(side: usize) -> Self {
        let d = Self::default();
        let f = side as f64 / d.height as f64;
        Self {
            height: side,
            width: side,
            size_range: ((d.size_range.0 * f).max(1.0), d.size_range.1 * f),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!(
                "scene {}x{} too small",
                self.height, self.width
            )));
        }
        if self.max_instances == 0 {
            return Err(Error::Config("max_instances must be at least 1".into()));
        }
        if !(lo >= 1.0 && hi >= lo && hi <= self.height.min(self.width) as f64) {
            return Err(Error::Config(format!(
                "size range {:?} invalid for {}x{}",
                self.size_range, self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap_limit) {
            return Err(Error::Config(format!(
                "overlap limit {} outside [0, 1]",
                self.overlap_limit
            )));
        }
        Ok(())
    }
}

/// Multiples of 1/256, exact in f32.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 256.0
}

fn color(rng: &mut Rng, base: [f64; 3], jitter: f64) -> [f64; 3] {
    base.map(|b| quantize(b + rng.range(-jitter, jitter)))
}

fn rasterize(
    class: ShapeClass,
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    flip: bool,
    hh: usize,
    ww: usize,
) -> Vec<bool> {
    let mut m = vec![false; hh * ww];
    for r in 0..hh {
        for c in 0..ww {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let (u, v) = ((px - x0) / w, (py - y0) / h);
            if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
                continue;
            }
            m[r * ww + c] = match class {
                ShapeClass::Rect => true,
                ShapeClass::Ellipse => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
                ShapeClass::Triangle => {
                    // apex at top center (bottom when flipped)
                    let v = if flip { 1.0 - v } else { v };
                    (u - 0.5).abs() <= 0.5 * v
                }
            };
        }
    }
    m
}

/// Tight normalized center-size box of a binary mask, or `None` if empty.
pub fn tight_box(mask: &[bool], h: usize, w: usize) -> Option<[f64; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..h {
        for c in 0..w {
            if mask[r * w + c] {
                x0 = x0.min(c);
                y0 = y0.min(r);
                x1 = x1.max(c + 1);
                y1 = y1.max(r + 1);
            }
        }
    }
    (x0 != usize::MAX).then(|| {
        let (w, h) = (w as f64, h as f64);
        [
            (x0 + x1) as f64 / 2.0 / w,
            (y0 + y1) as f64 / 2.0 / h,
            (x1 - x0) as f64 / w,
            (y1 - y0) as f64 / h,
        ]
    })
}

fn mask_tensor(m: &[bool], h: usize, w: usize) -> Tensor {
    Tensor::new(
        [h, w],
        m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap()
}

/// Deterministic scene for `seed`. Instances that cannot be placed within
/// the overlap limit in 100 attempts are skipped.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneRecord> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = Rng::new(seed);

    let horizon = rng.range(0.3, 0.7) * h as f64;
    let slope = rng.range(-0.3, 0.3);
    let sky = color(&mut rng, [0.55, 0.7, 0.9], 0.08);
    let ground = color(&mut rng, [0.45, 0.35, 0.2], 0.08);
    let mut stuff = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let line = horizon + slope * (c as f64 + 0.5 - w as f64 / 2.0);
            stuff[r * w + c] = u8::from(r as f64 + 0.5 > line);
        }
    }

    let wanted = rng.index(1, cfg.max_instances + 1);
    let (lo, hi) = cfg.size_range;
    // visible masks so far, z-order
    let mut placed: Vec<(ShapeClass, Vec<bool>, [f64; 3])> = Vec::new();
    for _ in 0..wanted {
        let class = ShapeClass::ALL[rng.index(0, 3)];
        let base = match class {
            ShapeClass::Rect => [0.85, 0.2, 0.2],
            ShapeClass::Ellipse => [0.2, 0.75, 0.25],
            ShapeClass::Triangle => [0.95, 0.85, 0.15],
        };
        let col = color(&mut rng, base, 0.1);
        for _attempt in 0..100 {
            let side = (lo.ln() + rng.uniform() * (hi / lo).ln()).exp();
            let aspect = rng.range(0.6, 1.0);
            let (bw, bh) = if rng.uniform() < 0.5 {
                (side, side * aspect)
            } else {
                (side * aspect, side)
            };
            let bw = bw.max(2.0);
            let bh = bh.max(2.0);
            let x0 = rng.range(0.0, w as f64 - bw);
            let y0 = rng.range(0.0, h as f64 - bh);
            let flip = rng.uniform() < 0.5;
            let m = rasterize(class, x0, y0, bw, bh, flip, h, w);
            let area = m.iter().filter(|&&b| b).count();
            if area == 0 {
                continue;
            }
            let ok = placed.iter().all(|(_, other, _)| {
                let oa = other.iter().filter(|&&b| b).count();
                let inter = other.iter().zip(&m).filter(|(a, b)| **a && **b).count();
                inter as f64 <= cfg.overlap_limit * oa.min(area) as f64
            });
            if ok {
                for (_, other, _) in &mut placed {
                    for (o, &n) in other.iter_mut().zip(&m) {
                        *o &= !n;
                    }
                }
                placed.push((class, m, col));
                break;
            }
        }
    }

    let mut image = Tensor::zeros([h, w, 3]);
    for t in 0..h * w {
        let c = if stuff[t] == 0 { sky } else { ground };
        image.data_mut()[t * 3..t * 3 + 3].copy_from_slice(&c);
    }
    let mut instances = Vec::new();
    for (class, m, col) in placed {
        let Some(bbox) = tight_box(&m, h, w) else {
            continue;
        };
        for t in 0..h * w {
            if m[t] {
                image.data_mut()[t * 3..t * 3 + 3].copy_from_slice(&col);
            }
        }
        instances.push(Instance {
            class,
            bbox,
            mask: mask_tensor(&m, h, w),
        });
    }
    Ok(SceneRecord {
        seed,
        image,
        instances,
        stuff,
        height: h,
        width: w,
    })
}

impl SceneRecord {
    /// Stuff id per texel where no thing is visible, `None` under things.
    pub fn visible_stuff(&self) -> Vec<Option<u8>> {
        let mut out: Vec<Option<u8>> = self.stuff.iter().map(|&s| Some(s)).collect();
        for inst in &self.instances {
            for (o, &m) in out.iter_mut().zip(inst.mask.data()) {
                if m > 0.5 {
                    *o = None;
                }
            }
        }
        out
    }
}
