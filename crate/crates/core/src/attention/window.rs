use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

/// Center-size box `[x, y, w, h]` normalized by image size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceWindow {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl ReferenceWindow {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }
}

/// Applies offsets `[dx, dy, dw, dh]` damped by `temperature`:
/// `[x + dx*t, y + dy*t, w + dw*t, h + dh*t]`, with `w`, `h` floored at
/// `min_size`.
///
/// Inside the attention blocks the raw predicted offsets are first scaled
/// by the source window's extent (so `dx = 0.1` moves a tenth of a window),
/// which is this function applied to `[dx*w, dy*h, dw*w, dh*h]`.
pub fn refine_window(
    r: ReferenceWindow,
    offsets: [f64; 4],
    temperature: f64,
    min_size: f64,
) -> Result<ReferenceWindow> {
    if offsets.iter().any(|o| !o.is_finite()) {
        return Err(Error::NonFinite("window offsets".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let t = temperature;
    Ok(ReferenceWindow {
        x: r.x + offsets[0] * t,
        y: r.y + offsets[1] * t,
        w: (r.w + offsets[2] * t).max(min_size),
        h: (r.h + offsets[3] * t).max(min_size),
    })
}

/// Square anchors of side `s * 2^j` pixels, `j = 0..m`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorSet {
    pub base_size: f64,
    pub scale_count: usize,
    pub image_size: usize,
}

impl AnchorSet {
    pub fn new(base_size: f64, scale_count: usize, image_size: usize) -> Result<Self> {
        if scale_count < 1 {
            return Err(Error::Config("anchor set needs at least one scale".into()));
        }
        if !(base_size > 0.0) || image_size == 0 {
            return Err(Error::Config(format!(
                "invalid anchor base size {base_size} for image {image_size}"
            )));
        }
        Ok(Self {
            base_size,
            scale_count,
            image_size,
        })
    }

    /// Normalized side lengths, smallest first.
    pub fn sizes(&self) -> Vec<f64> {
        (0..self.scale_count)
            .map(|j| self.base_size * 2f64.powi(j as i32) / self.image_size as f64)
            .collect()
    }

    pub fn size(&self, j: usize) -> f64 {
        self.base_size * 2f64.powi(j as i32) / self.image_size as f64
    }
}

/// Round-robin head-to-scale map used by fixed-scale attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadScaleAssignment {
    scale_of_head: Vec<usize>,
    scale_count: usize,
}

impl HeadScaleAssignment {
    pub fn round_robin(heads: usize, scale_count: usize) -> Result<Self> {
        if scale_count == 0 || !heads.is_multiple_of(scale_count) {
            return Err(Error::Config(format!(
                "{heads} heads cannot be split evenly over {scale_count} scales"
            )));
        }
        Ok(Self {
            scale_of_head: (0..heads).map(|i| i % scale_count).collect(),
            scale_count,
        })
    }

    pub fn scale_of(&self, head: usize) -> usize {
        self.scale_of_head[head]
    }

    pub fn heads_for(&self, scale: usize) -> Vec<usize> {
        (0..self.scale_of_head.len())
            .filter(|&i| self.scale_of_head[i] == scale)
            .collect()
    }

    /// Number of heads assigned to each scale.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.scale_count];
        for &s in &self.scale_of_head {
            c[s] += 1;
        }
        c
    }
}

/// `g x g` samples of `feature_map[H, W, c]` at the cell centers of a
/// uniform grid spanning `r`, row-major, giving `[g*g, c]`.
pub fn sample_grid(feature_map: &Tensor, r: ReferenceWindow, g: usize) -> Result<Tensor> {
    if !r.is_valid() {
        return Err(Error::InvalidArgument(format!("degenerate window {r:?}")));
    }
    let mut tape = Tape::inference();
    let map = tape.constant(feature_map.clone());
    let win = tape.constant(Tensor::new([1, 4], r.to_array().to_vec())?);
    let pts = tape.grid_points(win, g)?;
    let pts = tape.reshape(pts, &[g * g, 2])?;
    let out = tape.bilinear_sample(map, pts)?;
    Ok(tape.value(out).clone())
}
