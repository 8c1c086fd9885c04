//! Registered finite-difference suites. Each check reduces its block to a
//! scalar through a fixed random projection (so softmax-style outputs do
//! not collapse to zero gradient) and compares tape gradients with central
//! differences.
//!
//! Sampling is piecewise bilinear, so zero-initialized offset projections
//! are replaced by small random values first; otherwise grid points can sit
//! exactly on texel boundaries where the one-sided and central derivatives
//! legitimately differ.

use std::io::Write;
use std::time::Instant;

use crate::attention::{
    AnchorSet, AttentionConfig, GridAttention, MaskedConfig, MaskedInstanceAttention, Mechanism,
    SelfAttention,
};
use crate::data::{generate_scene, scene_targets, SceneConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::gradcheck::{check_params, finite_difference_check, FdOptions, FdReport};
use crate::numerics::{ParamStore, Rng, Tape, Tensor, Var};
use crate::objective::boxes::giou_tape;
use crate::objective::{
    composite_loss, dice_loss, focal_loss, LossWeights, PredictionSet, ProposalSet, TargetSet, Task,
};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    Ops,
    Attention,
    Model,
    Loss,
    All,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ops" => Scope::Ops,
            "attention" => Scope::Attention,
            "model" => Scope::Model,
            "loss" => Scope::Loss,
            "all" => Scope::All,
            _ => {
                return Err(Error::Config(format!(
                    "unknown gradcheck scope {s:?} (ops|attention|model|loss|all)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Attention => "attention",
            Scope::Model => "model",
            Scope::Loss => "loss",
            Scope::All => "all",
        }
    }

    pub fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

pub type CheckFn = Box<dyn Fn() -> Result<FdReport> + Send + Sync>;

pub struct GradCheck {
    pub scope: Scope,
    pub name: String,
    pub run: CheckFn,
}

impl GradCheck {
    pub fn new(
        scope: Scope,
        name: impl Into<String>,
        run: impl Fn() -> Result<FdReport> + Send + Sync + 'static,
    ) -> Self {
        Self {
            scope,
            name: name.into(),
            run: Box::new(run),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub scope: Scope,
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub seconds: f64,
    pub passed: bool,
    /// set when the check itself failed to run
    pub error: Option<String>,
}

/// Runs the checks in `scope`, in registration order.
pub fn run_checks(checks: &[GradCheck], scope: Scope, tolerance: f64) -> Vec<CheckRow> {
    let selected: Vec<&GradCheck> = checks.iter().filter(|c| scope.includes(c.scope)).collect();
    crate::parallel::map_indexed(selected.len(), |i| {
        let c = selected[i];
        let start = Instant::now();
        let r = (c.run)();
        let seconds = start.elapsed().as_secs_f64();
        match r {
            Ok(rep) => CheckRow {
                scope: c.scope,
                name: c.name.clone(),
                max_rel_error: rep.max_rel_error,
                coords: rep.coords_checked,
                seconds,
                passed: rep.max_rel_error < tolerance && rep.coords_checked > 0,
                error: None,
            },
            Err(e) => CheckRow {
                scope: c.scope,
                name: c.name.clone(),
                max_rel_error: f64::NAN,
                coords: 0,
                seconds,
                passed: false,
                error: Some(e.to_string()),
            },
        }
    })
}

pub fn write_rows<W: Write>(rows: &[CheckRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "scope",
        "check",
        "max_rel_error",
        "coords",
        "seconds",
        "status",
    ])?;
    for r in rows {
        let status = match (&r.error, r.passed) {
            (Some(e), _) => format!("error: {e}"),
            (None, true) => "pass".into(),
            (None, false) => "fail".into(),
        };
        wr.write_record([
            r.scope.name().to_string(),
            r.name.clone(),
            format!("{:e}", r.max_rel_error),
            r.coords.to_string(),
            format!("{:.3}", r.seconds),
            status,
        ])?;
    }
    wr.flush()?;
    Ok(())
}

fn random(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.range(lo, hi))
}

/// `sum(y * R)` for a fixed random `R` drawn from `seed`.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::derive(seed, 0x70_726f_6a);
    let r = random(tape.shape(y), &mut rng, -1.0, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn opts() -> FdOptions {
    FdOptions::default()
}

/// Wraps a check of `f` at inputs drawn once from `make(rng)`.
fn op_check<M, F>(name: &str, seed: u64, make: M, f: F) -> GradCheck
where
    M: Fn(&mut Rng) -> Vec<Tensor> + Send + Sync + 'static,
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
{
    GradCheck::new(Scope::Ops, name, move || {
        let inputs = make(&mut Rng::new(seed));
        finite_difference_check(
            |t, v| {
                let y = f(t, v)?;
                project(t, y, seed)
            },
            &inputs,
            &opts(),
        )
    })
}

fn shapes(rng: &mut Rng, list: &[&[usize]], lo: f64, hi: f64) -> Vec<Tensor> {
    list.iter().map(|s| random(s, rng, lo, hi)).collect()
}

/// Random values kept at least `gap` away from zero.
fn away_from_zero(shape: &[usize], rng: &mut Rng, gap: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.range(gap, 1.5);
        if rng.uniform() < 0.5 {
            -v
        } else {
            v
        }
    })
}

pub fn op_checks() -> Vec<GradCheck> {
    vec![
        op_check(
            "add",
            1,
            |r| shapes(r, &[&[3, 4], &[4]], -1.0, 1.0),
            |t, x| t.add(x[0], x[1]),
        ),
        op_check(
            "sub",
            2,
            |r| shapes(r, &[&[3, 4], &[3, 1]], -1.0, 1.0),
            |t, x| t.sub(x[0], x[1]),
        ),
        op_check(
            "mul",
            3,
            |r| shapes(r, &[&[2, 3, 4], &[3, 4]], -1.0, 1.0),
            |t, x| t.mul(x[0], x[1]),
        ),
        op_check(
            "div",
            4,
            |r| vec![random(&[3, 4], r, -1.0, 1.0), random(&[3, 4], r, 0.5, 2.0)],
            |t, x| t.div(x[0], x[1]),
        ),
        op_check(
            "maximum",
            5,
            |r| {
                let a = away_from_zero(&[3, 4], r, 0.2);
                vec![a.clone(), a.map(|x| -x)]
            },
            |t, x| t.maximum(x[0], x[1]),
        ),
        op_check(
            "minimum",
            6,
            |r| {
                let a = away_from_zero(&[3, 4], r, 0.2);
                vec![a.clone(), a.map(|x| -x)]
            },
            |t, x| t.minimum(x[0], x[1]),
        ),
        op_check(
            "neg",
            7,
            |r| shapes(r, &[&[5]], -1.0, 1.0),
            |t, x| t.neg(x[0]),
        ),
        op_check(
            "scale",
            8,
            |r| shapes(r, &[&[5]], -1.0, 1.0),
            |t, x| t.scale(x[0], -2.5),
        ),
        op_check(
            "add_scalar",
            9,
            |r| shapes(r, &[&[5]], -1.0, 1.0),
            |t, x| t.add_scalar(x[0], 0.7),
        ),
        op_check(
            "exp",
            10,
            |r| shapes(r, &[&[5]], -2.0, 2.0),
            |t, x| t.exp(x[0]),
        ),
        op_check(
            "log",
            11,
            |r| shapes(r, &[&[5]], 0.2, 3.0),
            |t, x| t.log(x[0]),
        ),
        op_check(
            "sigmoid",
            12,
            |r| shapes(r, &[&[6]], -4.0, 4.0),
            |t, x| t.sigmoid(x[0]),
        ),
        op_check(
            "gelu",
            13,
            |r| shapes(r, &[&[6]], -3.0, 3.0),
            |t, x| t.gelu(x[0]),
        ),
        op_check(
            "abs",
            14,
            |r| vec![away_from_zero(&[6], r, 0.1)],
            |t, x| t.abs(x[0]),
        ),
        op_check(
            "square",
            15,
            |r| shapes(r, &[&[6]], -2.0, 2.0),
            |t, x| t.square(x[0]),
        ),
        op_check(
            "sqrt",
            16,
            |r| shapes(r, &[&[6]], 0.2, 3.0),
            |t, x| t.sqrt(x[0]),
        ),
        op_check(
            "inverse_sigmoid",
            17,
            |r| shapes(r, &[&[6]], 0.05, 0.95),
            |t, x| t.inverse_sigmoid(x[0]),
        ),
        op_check(
            "reshape",
            18,
            |r| shapes(r, &[&[2, 6]], -1.0, 1.0),
            |t, x| t.reshape(x[0], &[3, 4]),
        ),
        op_check(
            "permute",
            19,
            |r| shapes(r, &[&[2, 3, 4]], -1.0, 1.0),
            |t, x| t.permute(x[0], &[2, 0, 1]),
        ),
        op_check(
            "transpose",
            20,
            |r| shapes(r, &[&[3, 4]], -1.0, 1.0),
            |t, x| t.transpose(x[0]),
        ),
        op_check(
            "broadcast_to",
            21,
            |r| shapes(r, &[&[3, 1]], -1.0, 1.0),
            |t, x| t.broadcast_to(x[0], &[2, 3, 4]),
        ),
        op_check(
            "concat",
            22,
            |r| shapes(r, &[&[2, 3], &[2, 2]], -1.0, 1.0),
            |t, x| t.concat(&[x[0], x[1]], -1),
        ),
        op_check(
            "narrow",
            23,
            |r| shapes(r, &[&[4, 5]], -1.0, 1.0),
            |t, x| t.narrow(x[0], 1, 1, 3),
        ),
        op_check(
            "index_select",
            24,
            |r| shapes(r, &[&[4, 3]], -1.0, 1.0),
            |t, x| t.index_select(x[0], &[2, 0, 2]),
        ),
        op_check(
            "sum",
            25,
            |r| shapes(r, &[&[3, 4]], -1.0, 1.0),
            |t, x| {
                let s = t.sum(x[0])?;
                t.square(s)
            },
        ),
        op_check(
            "mean",
            26,
            |r| shapes(r, &[&[3, 4]], -1.0, 1.0),
            |t, x| {
                let s = t.mean(x[0])?;
                t.square(s)
            },
        ),
        op_check(
            "sum_axis",
            27,
            |r| shapes(r, &[&[2, 3, 4]], -1.0, 1.0),
            |t, x| t.sum_axis(x[0], 1),
        ),
        op_check(
            "softmax",
            28,
            |r| shapes(r, &[&[3, 5]], -2.0, 2.0),
            |t, x| t.softmax(x[0], -1),
        ),
        op_check(
            "softmax_axis0",
            29,
            |r| shapes(r, &[&[3, 5]], -2.0, 2.0),
            |t, x| t.softmax(x[0], 0),
        ),
        op_check(
            "matmul",
            30,
            |r| shapes(r, &[&[3, 4], &[4, 2]], -1.0, 1.0),
            |t, x| t.matmul(x[0], x[1]),
        ),
        op_check(
            "matmul_batched",
            31,
            |r| shapes(r, &[&[2, 3, 4], &[2, 4, 2]], -1.0, 1.0),
            |t, x| t.matmul(x[0], x[1]),
        ),
        op_check(
            "matmul_broadcast",
            32,
            |r| shapes(r, &[&[2, 3, 4], &[4, 2]], -1.0, 1.0),
            |t, x| t.matmul(x[0], x[1]),
        ),
        op_check(
            "linear",
            33,
            |r| shapes(r, &[&[2, 3, 4], &[4, 5], &[5]], -1.0, 1.0),
            |t, x| t.linear(x[0], x[1], Some(x[2])),
        ),
        op_check(
            "patchify",
            34,
            |r| shapes(r, &[&[4, 4, 2]], -1.0, 1.0),
            |t, x| t.patchify(x[0], 2),
        ),
        op_check(
            "conv2d_patchify",
            35,
            |r| shapes(r, &[&[4, 4, 2], &[8, 3], &[3]], -1.0, 1.0),
            |t, x| t.conv2d_patchify(x[0], x[1], Some(x[2]), 2),
        ),
        op_check(
            "depth_to_space2",
            36,
            |r| shapes(r, &[&[2, 3, 8]], -1.0, 1.0),
            |t, x| t.depth_to_space2(x[0]),
        ),
        op_check(
            "deconv2x",
            37,
            |r| shapes(r, &[&[2, 2, 3], &[3, 8], &[2]], -1.0, 1.0),
            |t, x| t.deconv2x(x[0], x[1], Some(x[2])),
        ),
        op_check(
            "layer_norm",
            38,
            |r| shapes(r, &[&[3, 6], &[6], &[6]], -1.0, 1.0),
            |t, x| t.layer_norm(x[0], x[1], x[2], 1e-6),
        ),
        op_check(
            "group_norm",
            39,
            |r| shapes(r, &[&[3, 3, 6], &[6], &[6]], -1.0, 1.0),
            |t, x| t.group_norm(x[0], 3, x[1], x[2], 1e-6),
        ),
        op_check(
            "sigmoid_focal",
            40,
            |r| shapes(r, &[&[3, 4]], -3.0, 3.0),
            |t, x| {
                let targets = Tensor::from_fn([3, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
                t.sigmoid_focal(x[0], targets, Some(0.25), 2.0)
            },
        ),
        op_check(
            "bilinear_sample",
            41,
            |r| {
                vec![
                    random(&[4, 5, 3], r, -1.0, 1.0),
                    random(&[6, 2], r, 0.05, 0.95),
                ]
            },
            |t, x| t.bilinear_sample(x[0], x[1]),
        ),
        op_check(
            "sample_heads",
            42,
            |r| {
                vec![
                    random(&[4, 4, 4], r, -1.0, 1.0),
                    random(&[2, 2, 3, 2], r, 0.05, 0.95),
                ]
            },
            |t, x| t.sample_heads(x[0], x[1]),
        ),
        op_check(
            "refine_windows",
            43,
            |r| {
                let w = Tensor::from_fn([3, 4], |i| {
                    if i % 4 < 2 {
                        r.range(0.3, 0.7)
                    } else {
                        r.range(0.2, 0.4)
                    }
                });
                vec![w, random(&[3, 4], r, -0.3, 0.3)]
            },
            |t, x| t.refine_windows(x[0], x[1], vec![1.0, 0.5, 0.25], (0.01, 0.01)),
        ),
        op_check(
            "grid_points",
            44,
            |r| {
                vec![Tensor::from_fn([2, 4], |i| {
                    if i % 4 < 2 {
                        r.range(0.3, 0.7)
                    } else {
                        r.range(0.1, 0.3)
                    }
                })]
            },
            |t, x| t.grid_points(x[0], 3),
        ),
        op_check(
            "repeat_bins",
            45,
            |r| shapes(r, &[&[2, 3, 4]], -1.0, 1.0),
            |t, x| t.repeat_bins(x[0], 4),
        ),
    ]
}

/// Replaces every all-zero parameter (zero-initialized projections) with
/// small random values.
pub fn randomize_zero_params(store: &mut ParamStore, seed: u64, amplitude: f64) {
    let mut rng = Rng::derive(seed, 0x7a65_726f);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.value_mut(id);
        if t.data().iter().all(|&x| x == 0.0) {
            for x in t.data_mut() {
                *x = rng.range(-amplitude, amplitude);
            }
        }
    }
}

fn attention_check(name: &'static str, mechanism: Mechanism, seed: u64) -> GradCheck {
    GradCheck::new(Scope::Attention, name, move || {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::new(8, 2, 2)?;
        let attn = GridAttention::new(&mut store, "attn", mechanism, cfg, &mut rng)?;
        randomize_zero_params(&mut store, seed, 0.2);
        let anchors = AnchorSet::new(3.0, 2, 16)?;
        let map = random(&[4, 4, 8], &mut rng, -1.0, 1.0);
        let q = random(&[3, 8], &mut rng, -1.0, 1.0);
        let positions = random(&[3, 2], &mut rng, 0.2, 0.8);
        let windows = Tensor::from_fn([3, 4], |i| {
            if i % 4 < 2 {
                positions.data()[(i / 4) * 2 + i % 4]
            } else {
                0.3
            }
        });
        check_params(
            &store,
            None,
            &[map, q],
            |t, s, x| {
                let out = match mechanism {
                    Mechanism::Base => {
                        let w = t.constant(windows.clone());
                        attn.forward_windows(t, s, x[0], x[1], w)?
                    }
                    _ => attn.forward_at(t, s, x[0], x[1], &positions, &anchors)?,
                };
                project(t, out.output, seed)
            },
            &opts(),
        )
    })
}

pub fn attention_checks() -> Vec<GradCheck> {
    vec![
        attention_check("box_attention", Mechanism::Base, 101),
        attention_check("fixed_scale_attention", Mechanism::Fixed, 102),
        attention_check("adaptive_scale_attention", Mechanism::Adaptive, 103),
        GradCheck::new(Scope::Attention, "masked_instance_attention", || {
            let seed = 104;
            let mut rng = Rng::new(seed);
            let mut store = ParamStore::new();
            let attn = MaskedInstanceAttention::new(
                &mut store,
                "masked",
                MaskedConfig::new(8, 2, 4)?,
                &mut rng,
            );
            randomize_zero_params(&mut store, seed, 0.2);
            let map = random(&[4, 4, 8], &mut rng, -1.0, 1.0);
            let q = random(&[2, 8], &mut rng, -1.0, 1.0);
            let windows = Tensor::from_fn([2, 4], |i| {
                if i % 4 < 2 {
                    rng.range(0.35, 0.65)
                } else {
                    rng.range(0.4, 0.6)
                }
            });
            let prev = random(&[2, 4, 4], &mut rng, -1.0, 1.0);
            check_params(
                &store,
                None,
                &[map, q, windows],
                |t, s, x| {
                    let out = attn.forward(t, s, x[0], x[1], x[2], Some(&prev))?;
                    project(t, out.output, seed)
                },
                &opts(),
            )
        }),
        GradCheck::new(Scope::Attention, "self_attention", || {
            let seed = 105;
            let mut rng = Rng::new(seed);
            let mut store = ParamStore::new();
            let attn = SelfAttention::new(&mut store, "self", 8, 2, &mut rng)?;
            let x = random(&[2, 3, 8], &mut rng, -1.0, 1.0);
            check_params(
                &store,
                None,
                &[x],
                |t, s, x| {
                    let y = attn.forward(t, s, x[0])?;
                    project(t, y, seed)
                },
                &opts(),
            )
        }),
    ]
}

fn model_check(name: &'static str, config: ModelConfig, seed: u64, max_coords: usize) -> GradCheck {
    GradCheck::new(Scope::Model, name, move || {
        let mut model = Model::new(config.clone(), seed)?;
        randomize_zero_params(&mut model.store, seed, 0.05);
        let scene_cfg = SceneConfig::square(config.image_size);
        let scene = generate_scene(seed, &scene_cfg)?;
        let targets = scene_targets(&scene, config.task, config.mask_side())?;
        let o = FdOptions {
            max_coords: Some(max_coords),
            seed,
            ..opts()
        };
        check_params(
            &model.store,
            None,
            std::slice::from_ref(&scene.image),
            |t, _, x| {
                let out = model.forward_var(t, x[0])?;
                Ok(model.loss(t, &out, &targets)?.0)
            },
            &o,
        )
    })
}

pub fn model_checks() -> Vec<GradCheck> {
    vec![
        model_check("femto_detect_end_to_end", ModelConfig::femto(), 201, 2),
        model_check(
            "tiny_instance_end_to_end",
            ModelConfig::tiny(Task::Instance),
            202,
            4,
        ),
        model_check(
            "tiny_panoptic_end_to_end",
            ModelConfig::tiny(Task::Panoptic),
            203,
            4,
        ),
    ]
}

pub fn loss_checks() -> Vec<GradCheck> {
    vec![
        GradCheck::new(Scope::Loss, "focal", || {
            let mut rng = Rng::new(301);
            let y = Tensor::from_fn([4, 3], |_| (rng.uniform() < 0.4) as u8 as f64);
            let x = random(&[4, 3], &mut rng, -3.0, 3.0);
            finite_difference_check(
                |t, v| focal_loss(t, v[0], &y, Some(0.25), 2.0),
                &[x],
                &opts(),
            )
        }),
        GradCheck::new(Scope::Loss, "dice", || {
            let mut rng = Rng::new(302);
            let y = Tensor::from_fn([10], |_| (rng.uniform() < 0.5) as u8 as f64);
            let x = random(&[10], &mut rng, -3.0, 3.0);
            finite_difference_check(|t, v| dice_loss(t, v[0], &y), &[x], &opts())
        }),
        GradCheck::new(Scope::Loss, "giou", || {
            let mut rng = Rng::new(303);
            let target = Tensor::from_fn([3, 4], |i| {
                if i % 4 < 2 {
                    rng.range(0.3, 0.7)
                } else {
                    rng.range(0.1, 0.4)
                }
            });
            let pred = Tensor::from_fn([3, 4], |i| {
                if i % 4 < 2 {
                    rng.range(0.3, 0.7)
                } else {
                    rng.range(0.1, 0.4)
                }
            });
            finite_difference_check(
                |t, v| {
                    let g = giou_tape(t, v[0], &target)?;
                    project(t, g, 303)
                },
                &[pred],
                &opts(),
            )
        }),
        GradCheck::new(Scope::Loss, "composite_instance", || {
            composite_check(Task::Instance, 304)
        }),
        GradCheck::new(Scope::Loss, "composite_panoptic", || {
            composite_check(Task::Panoptic, 305)
        }),
    ]
}

fn composite_check(task: Task, seed: u64) -> Result<FdReport> {
    let mut rng = Rng::new(seed);
    let (k, c, n, t, p) = (5, if task == Task::Panoptic { 5 } else { 3 }, 16, 3, 7);
    let boxes = |rng: &mut Rng, rows: usize| {
        Tensor::from_fn([rows, 4], |i| {
            if i % 4 < 2 {
                rng.range(0.25, 0.75)
            } else {
                rng.range(0.1, 0.4)
            }
        })
    };
    let targets = TargetSet {
        classes: (0..t).map(|_| rng.index(0, c)).collect(),
        boxes: boxes(&mut rng, t),
        masks: Some(Tensor::from_fn([t, n], |_| {
            (rng.uniform() < 0.4) as u8 as f64
        })),
    };
    let inputs = vec![
        random(&[k, c], &mut rng, -2.0, 2.0),
        boxes(&mut rng, k),
        random(&[k, 4, 4], &mut rng, -2.0, 2.0),
        random(&[k, c], &mut rng, -2.0, 2.0),
        boxes(&mut rng, k),
        random(&[k, 4, 4], &mut rng, -2.0, 2.0),
        random(&[p], &mut rng, -2.0, 2.0),
        boxes(&mut rng, p),
    ];
    let weights = LossWeights::for_task(task);
    finite_difference_check(
        |tape, v| {
            let layers = [
                PredictionSet {
                    logits: v[0],
                    boxes: v[1],
                    masks: Some(v[2]),
                },
                PredictionSet {
                    logits: v[3],
                    boxes: v[4],
                    masks: Some(v[5]),
                },
            ];
            let props = ProposalSet {
                logits: v[6],
                boxes: v[7],
            };
            Ok(composite_loss(tape, &layers, Some(&props), &targets, &weights, task, true)?.0)
        },
        &inputs,
        &opts(),
    )
}

/// Every built-in check.
pub fn registry() -> Vec<GradCheck> {
    let mut all = op_checks();
    all.extend(attention_checks());
    all.extend(model_checks());
    all.extend(loss_checks());
    all
}
