use crate::data::scene::{tight_box, Instance, SceneRecord, VOID};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Resizes by `scale` (nearest neighbour) and places the result with its
/// top-left corner at `offset` in an image of the original size; the rest
/// is cropped or padded (black image, void stuff). Instances with no
/// visible texel left are dropped; boxes are re-tightened.
pub fn jitter_with(scene: &SceneRecord, scale: f64, offset: (i64, i64)) -> Result<SceneRecord> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "jitter scale must be positive, got {scale}"
        )));
    }
    let (h, w) = (scene.height, scene.width);
    let (sh, sw) = (
        ((h as f64 * scale).round() as i64).max(1),
        ((w as f64 * scale).round() as i64).max(1),
    );
    // source texel for each output texel, if any
    let src = |r: usize, c: usize| -> Option<usize> {
        let (rr, cc) = (r as i64 - offset.1, c as i64 - offset.0);
        if rr < 0 || cc < 0 || rr >= sh || cc >= sw {
            return None;
        }
        let sr = (((rr as f64 + 0.5) * h as f64 / sh as f64) as usize).min(h - 1);
        let sc = (((cc as f64 + 0.5) * w as f64 / sw as f64) as usize).min(w - 1);
        Some(sr * w + sc)
    };
    let map: Vec<Option<usize>> = (0..h * w).map(|t| src(t / w, t % w)).collect();

    let mut image = Tensor::zeros([h, w, 3]);
    let mut stuff = vec![VOID; h * w];
    for (t, s) in map.iter().enumerate() {
        if let Some(s) = *s {
            image.data_mut()[t * 3..t * 3 + 3]
                .copy_from_slice(&scene.image.data()[s * 3..s * 3 + 3]);
            stuff[t] = scene.stuff[s];
        }
    }
    let mut instances = Vec::new();
    for inst in &scene.instances {
        let m: Vec<bool> = map
            .iter()
            .map(|s| s.is_some_and(|s| inst.mask.data()[s] > 0.5))
            .collect();
        if let Some(bbox) = tight_box(&m, h, w) {
            let mask = Tensor::new(
                [h, w],
                m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )?;
            instances.push(Instance {
                class: inst.class,
                bbox,
                mask,
            });
        }
    }
    Ok(SceneRecord {
        seed: scene.seed,
        image,
        instances,
        stuff,
        height: h,
        width: w,
    })
}

/// Large-scale jitter: a uniform scale from `range`, then a random crop
/// (when enlarged) or random placement on padding (when shrunk).
pub fn large_scale_jitter(
    scene: &SceneRecord,
    rng: &mut Rng,
    range: (f64, f64),
) -> Result<SceneRecord> {
    if !(range.0 > 0.0 && range.1 >= range.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid jitter range {range:?}"
        )));
    }
    let scale = rng.range(range.0, range.1);
    let (h, w) = (scene.height as i64, scene.width as i64);
    let (sh, sw) = (
        ((h as f64 * scale).round() as i64).max(1),
        ((w as f64 * scale).round() as i64).max(1),
    );
    let pick = |rng: &mut Rng, big: i64, small: i64| -> i64 {
        let (lo, hi) = if big >= small {
            (small - big, 0)
        } else {
            (0, small - big)
        };
        lo + rng.index(0, (hi - lo) as usize + 1) as i64
    };
    let ox = pick(rng, sw, w);
    let oy = pick(rng, sh, h);
    jitter_with(scene, scale, (ox, oy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_scene, SceneConfig};

    #[test]
    fn unit_scale_is_identity() {
        let s = generate_scene(3, &SceneConfig::default()).unwrap();
        assert_eq!(jitter_with(&s, 1.0, (0, 0)).unwrap(), s);
    }

    #[test]
    fn deterministic_under_seed() {
        let s = generate_scene(4, &SceneConfig::default()).unwrap();
        let a = large_scale_jitter(&s, &mut Rng::new(1), (0.1, 2.0)).unwrap();
        let b = large_scale_jitter(&s, &mut Rng::new(1), (0.1, 2.0)).unwrap();
        assert_eq!(a, b);
    }
}
