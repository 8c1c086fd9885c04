//! Mini-batch training: per-sample tapes run across the worker pool, their
//! gradients are reduced in sample order (so results do not depend on the
//! thread count), clipped, and applied with AdamW.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{large_scale_jitter, scene_targets, SceneRecord};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::model::{save_checkpoint, Model};
use crate::numerics::{AdamW, Rng, Tape, Tensor};
use crate::parallel::map_indexed;

pub const LOG_COLUMNS: [&str; 9] = [
    "step",
    "lr",
    "total",
    "cls",
    "l1",
    "giou",
    "mask_focal",
    "mask_dice",
    "grad_norm",
];

/// One optimizer step. Loss terms are batch means of the weighted
/// contributions, so `cls + l1 + giou + mask_focal + mask_dice = total`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub mask_focal: f64,
    pub mask_dice: f64,
    /// before clipping
    pub grad_norm: f64,
}

impl StepLog {
    fn record(&self) -> Vec<String> {
        let mut r = vec![self.step.to_string()];
        r.extend(
            [
                self.lr,
                self.total,
                self.cls,
                self.l1,
                self.giou,
                self.mask_focal,
                self.mask_dice,
                self.grad_norm,
            ]
            .map(|v| format!("{v:e}")),
        );
        r
    }
}

pub fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LOG_COLUMNS)?;
    for s in log {
        w.write_record(s.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| {
                Error::Format(format!(
                    "training log row {}: bad column {}",
                    out.len(),
                    LOG_COLUMNS[i]
                ))
            })
        };
        out.push(StepLog {
            step: f(0)? as usize,
            lr: f(1)?,
            total: f(2)?,
            cls: f(3)?,
            l1: f(4)?,
            giou: f(5)?,
            mask_focal: f(6)?,
            mask_dice: f(7)?,
            grad_norm: f(8)?,
        });
    }
    Ok(out)
}

/// Mean of the last and first `window` totals.
pub fn moving_average_ends(log: &[StepLog], window: usize) -> Option<(f64, f64)> {
    if window == 0 || log.len() < window {
        return None;
    }
    let mean = |s: &[StepLog]| s.iter().map(|l| l.total).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..window]), mean(&log[log.len() - window..])))
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
    /// where the final checkpoint went, if an output directory was used
    pub checkpoint: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

/// Order in which training scenes are visited: a fresh shuffle per epoch.
fn batch_indices(
    rng: &mut Rng,
    n: usize,
    order: &mut Vec<usize>,
    cursor: &mut usize,
    b: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(b);
    while out.len() < b {
        if *cursor == 0 {
            order.clear();
            order.extend(0..n);
            for i in (1..n).rev() {
                let j = rng.index(0, i + 1);
                order.swap(i, j);
            }
        }
        out.push(order[*cursor]);
        *cursor = (*cursor + 1) % n;
    }
    out
}

struct SampleResult {
    grads: Vec<Option<Tensor>>,
    terms: [f64; 6],
}

fn sample_step(
    model: &Model,
    scene: &SceneRecord,
    jitter: Option<(f64, f64)>,
    key: u64,
) -> Result<SampleResult> {
    let scene = match jitter {
        Some(range) => large_scale_jitter(scene, &mut Rng::new(key), range)?,
        None => scene.clone(),
    };
    let targets = scene_targets(&scene, model.config.task, model.config.mask_side())?;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &scene.image)?;
    let (loss, report) = model.loss(&mut tape, &out, &targets)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss of scene {}",
            scene.seed
        )));
    }
    let grads = tape.backward(loss)?.into_param_grads(model.store.len());
    let w = |name: &str| {
        report
            .weighted
            .iter()
            .find(|(n, _)| *n == name)
            .map_or(0.0, |(_, v)| *v)
    };
    Ok(SampleResult {
        grads,
        terms: [
            report.total,
            w("cls"),
            w("l1"),
            w("giou"),
            w("mask_focal"),
            w("mask_dice"),
        ],
    })
}

/// Trains from `Model::new(cfg.model, cfg.seed)`. `observer` sees every
/// step after the update and returns whether to keep going; stopping early
/// still writes the final checkpoint. With `out_dir`, the log and periodic checkpoints
/// are written there; a checkpoint is only ever written from finite
/// parameters, so a non-finite step leaves the last good one in place.
pub fn train(
    cfg: &RunConfig,
    scenes: &[SceneRecord],
    out_dir: Option<&Path>,
    observer: &mut dyn FnMut(&StepLog, &mut Model) -> bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no training scenes".into()));
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut rng = Rng::derive(cfg.seed, 0x7261_696e);
    let mut order = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::with_capacity(cfg.steps);
    let ckpt = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let mut log_writer = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            let mut w = csv::Writer::from_path(d.join(LOG_FILE))?;
            w.write_record(LOG_COLUMNS)?;
            Some(w)
        }
        None => None,
    };

    for step in 0..cfg.steps {
        let idx = batch_indices(
            &mut rng,
            scenes.len(),
            &mut order,
            &mut cursor,
            cfg.batch_size,
        );
        let b = idx.len();
        let m = &model;
        let results = map_indexed(b, |i| {
            let key =
                cfg.seed ^ ((step as u64) << 20) ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            sample_step(m, &scenes[idx[i]], cfg.jitter, key)
        });
        let mut terms = [0.0; 6];
        for r in results {
            let mut r = r?;
            for g in r.grads.iter_mut().flatten() {
                g.scale(1.0 / b as f64);
            }
            model.store.accumulate(&r.grads)?;
            for (t, v) in terms.iter_mut().zip(r.terms) {
                *t += v / b as f64;
            }
        }
        let grad_norm = if cfg.clip > 0.0 {
            model.store.clip_grad_norm(cfg.clip)
        } else {
            model.store.grad_norm()
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        let lr = cfg.lr_at(step);
        opt.step(&mut model.store, lr, step as u64 + 1)?;
        let entry = StepLog {
            step,
            lr,
            total: terms[0],
            cls: terms[1],
            l1: terms[2],
            giou: terms[3],
            mask_focal: terms[4],
            mask_dice: terms[5],
            grad_norm,
        };
        if let Some(w) = log_writer.as_mut() {
            w.write_record(entry.record())?;
            w.flush()?;
        }
        let go_on = observer(&entry, &mut model);
        log.push(entry);
        let last = step + 1 == cfg.steps || !go_on;
        if let Some(path) = &ckpt {
            if last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
                write_checkpoint_atomic(&model, path)?;
            }
        }
        if !go_on {
            break;
        }
    }
    if let Some(d) = out_dir {
        let mut f = std::fs::File::create(d.join("run.conf"))?;
        f.write_all(cfg.to_kv().render().as_bytes())?;
    }
    Ok(TrainOutcome {
        model,
        log,
        checkpoint: ckpt,
    })
}

fn write_checkpoint_atomic(model: &Model, path: &Path) -> Result<()> {
    if !model.store.iter().all(|(_, p)| p.value.is_finite()) {
        return Err(Error::NonFinite(
            "parameters; previous checkpoint kept".into(),
        ));
    }
    let tmp = path.with_extension("tmp");
    save_checkpoint(model, &tmp)?;
    std::fs::rename(
        crate::model::checkpoint::sidecar_path(&tmp),
        crate::model::checkpoint::sidecar_path(path),
    )?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
