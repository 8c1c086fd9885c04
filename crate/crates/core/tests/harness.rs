//! Metrics, training loop, gradient-check harness, ablation grids and
//! scale profiles.

use simplr::attention::Mechanism;
use simplr::data::{generate_scenes, SceneConfig};
use simplr::harness::ablate::{read_ablation, run_ablation, write_ablation, Grid};
use simplr::harness::gradcheck::{registry, run_checks, GradCheck, Scope, TOLERANCE};
use simplr::harness::metrics::{
    average_precision, average_precision_ignoring, evaluate_predictions, ground_truth_predictions,
    ImagePrediction, MetricReport, Region, Scored, Truth,
};
use simplr::harness::profile::{scale_profile, write_profile};
use simplr::harness::train::{read_log, train, StepLog, CHECKPOINT_FILE, LOG_FILE};
use simplr::harness::RunConfig;
use simplr::model::{load_checkpoint, Model, ModelConfig};
use simplr::numerics::gradcheck::{finite_difference_check, FdOptions};
use simplr::numerics::Op;
use simplr::objective::Task;
use simplr::oracle::{self, oracle_ap, OracleDetection, OracleTruth};
use simplr::{Error, Rng, Tensor};

fn random_box(rng: &mut Rng) -> [f64; 4] {
    let (x, y) = (rng.range(0.0, 0.8), rng.range(0.0, 0.8));
    [x, y, x + rng.range(0.02, 0.2), y + rng.range(0.02, 0.2)]
}

#[test]
fn ap_matches_exhaustive_reference() {
    let mut rng = Rng::new(99);
    for case in 0..50 {
        let images = rng.index(1, 4);
        let masks = case % 5 == 4;
        let mut truths = Vec::new();
        let mut dets = Vec::new();
        for image in 0..images {
            for _ in 0..rng.index(0, 6) {
                let class = rng.index(0, 3);
                let region = if masks {
                    Region::Mask((0..36).map(|_| rng.uniform() < 0.4).collect())
                } else {
                    Region::Box(random_box(&mut rng))
                };
                // a perturbed copy, a decoy or nothing
                match rng.index(0, 3) {
                    0 => {}
                    1 => {
                        let r = match &region {
                            Region::Box(b) => {
                                let j = rng.range(-0.03, 0.03);
                                Region::Box([b[0] + j, b[1] - j, b[2] + j, b[3]])
                            }
                            Region::Mask(m) => Region::Mask(
                                m.iter().map(|&v| v ^ (rng.uniform() < 0.15)).collect(),
                            ),
                        };
                        dets.push(Scored {
                            image,
                            class,
                            score: (rng.range(0.0, 1.0) * 8.0).round() / 8.0,
                            region: r,
                        });
                    }
                    _ => dets.push(Scored {
                        image,
                        class: rng.index(0, 3),
                        score: rng.uniform(),
                        region: if masks {
                            Region::Mask((0..36).map(|_| rng.uniform() < 0.4).collect())
                        } else {
                            Region::Box(random_box(&mut rng))
                        },
                    }),
                }
                truths.push(Truth {
                    image,
                    class,
                    region,
                });
            }
        }
        let conv = |r: &Region| match r {
            Region::Box(b) => oracle::Region::Box(*b),
            Region::Mask(m) => oracle::Region::Mask(m.clone()),
        };
        let od: Vec<OracleDetection> = dets
            .iter()
            .map(|d| OracleDetection {
                image: d.image,
                class: d.class,
                score: d.score,
                region: conv(&d.region),
            })
            .collect();
        let ot: Vec<OracleTruth> = truths
            .iter()
            .map(|t| OracleTruth {
                image: t.image,
                class: t.class,
                region: conv(&t.region),
            })
            .collect();
        for thr in [0.3, 0.5, 0.75] {
            let fast = average_precision(&dets, &truths, thr).unwrap();
            let slow = oracle_ap(&od, &ot, thr).unwrap();
            assert!(
                (fast - slow).abs() < 1e-6,
                "case {case} thr {thr}: {fast} vs {slow}"
            );
        }
    }
}

#[test]
fn ground_truth_scores_perfectly_for_every_task() {
    let scenes = generate_scenes(&(500..520).collect::<Vec<_>>(), &SceneConfig::default()).unwrap();
    for task in [Task::Detect, Task::Instance, Task::Panoptic] {
        let preds: Vec<ImagePrediction> = scenes
            .iter()
            .map(|s| ground_truth_predictions(s, task, 16).unwrap())
            .collect();
        let r = evaluate_predictions(&preds, &scenes, task, 16).unwrap();
        assert_eq!((r.ap50, r.ap75), (1.0, 1.0), "{task:?}");
        for size in [r.ap_small, r.ap_medium, r.ap_large].into_iter().flatten() {
            assert_eq!(size, 1.0);
        }
        match task {
            Task::Detect => assert_eq!((r.mask_ap50, r.pq), (None, None)),
            Task::Instance => assert_eq!(r.mask_ap50, Some(1.0)),
            Task::Panoptic => {
                assert_eq!(r.mask_ap50, Some(1.0));
                assert_eq!((r.pq, r.pq_th, r.pq_st), (Some(1.0), Some(1.0), Some(1.0)));
            }
        }
    }
}

#[test]
fn ignored_truth_neither_helps_nor_hurts() {
    let b = |x: f64| Region::Box([x, 0.0, x + 0.1, 0.1]);
    let truths = vec![
        Truth {
            image: 0,
            class: 0,
            region: b(0.0),
        },
        Truth {
            image: 0,
            class: 0,
            region: b(0.5),
        },
    ];
    let dets = vec![
        Scored {
            image: 0,
            class: 0,
            score: 0.9,
            region: b(0.5),
        },
        Scored {
            image: 0,
            class: 0,
            score: 0.8,
            region: b(0.0),
        },
        Scored {
            image: 0,
            class: 0,
            score: 0.7,
            region: b(0.8),
        },
    ];
    // the top detection hits an ignored truth and the stray one is ignored
    let ap = average_precision_ignoring(&dets, &truths, 0.5, &[false, true], &[false, false, true])
        .unwrap();
    assert_eq!(ap, 1.0);
    // the stray one counts when it is not ignored, but ranks below the hit
    let ap = average_precision_ignoring(&dets, &truths, 0.5, &[false, true], &[false; 3]).unwrap();
    assert_eq!(ap, 1.0);
    let plain = average_precision(&dets, &truths, 0.5).unwrap();
    assert_eq!(
        plain,
        average_precision_ignoring(&dets, &truths, 0.5, &[false; 2], &[false; 3]).unwrap()
    );
    // nothing left to find
    assert_eq!(
        average_precision_ignoring(&dets, &truths, 0.5, &[true, true], &[false; 3]).unwrap(),
        0.0
    );
}

#[test]
fn no_detections_score_zero() {
    let scenes = generate_scenes(&[1, 2, 3], &SceneConfig::default()).unwrap();
    let preds = vec![
        ImagePrediction {
            detections: vec![],
            panoptic: None
        };
        3
    ];
    let r = evaluate_predictions(&preds, &scenes, Task::Instance, 16).unwrap();
    assert_eq!((r.ap50, r.ap75, r.mask_ap50), (0.0, 0.0, Some(0.0)));
    assert!(evaluate_predictions(&preds, &scenes, Task::Panoptic, 16).is_err());
    assert!(evaluate_predictions(&preds[..2], &scenes, Task::Detect, 16).is_err());
}

#[test]
fn metric_report_csv_round_trip() {
    let r = MetricReport {
        task: Task::Panoptic,
        images: 50,
        ap50: 0.5123456,
        ap75: 0.25,
        mask_ap50: Some(0.4),
        pq: Some(0.3),
        pq_th: Some(0.2),
        pq_st: Some(0.1),
        ap_small: None,
        ap_medium: Some(0.7),
        ap_large: Some(0.9),
        final_loss: Some(1.25),
    };
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let back = MetricReport::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back, r.rounded());
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("metric,value\ntask,panoptic\n"));
    assert!(text.contains("ap_small,\n"));
}

fn small_run(steps: usize) -> RunConfig {
    RunConfig {
        train_scenes: 12,
        eval_scenes: 4,
        steps,
        batch_size: 2,
        warmup: 2,
        lr: 5e-4,
        checkpoint_every: 2,
        ..RunConfig::default()
    }
}

fn scenes_for(cfg: &RunConfig) -> Vec<simplr::data::SceneRecord> {
    generate_scenes(&cfg.train_seeds(), &cfg.scenes).unwrap()
}

fn keep_going(_: &StepLog, _: &mut Model) -> bool {
    true
}

#[test]
fn short_run_logs_every_step_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(10);
    let scenes = scenes_for(&cfg);
    let out = train(&cfg, &scenes, Some(dir.path()), &mut keep_going).unwrap();
    assert_eq!(out.log.len(), 10);
    let logged = read_log(&dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(logged.len(), 10);
    for (a, b) in logged.iter().zip(&out.log) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.total, b.total);
        let parts = a.cls + a.l1 + a.giou + a.mask_focal + a.mask_dice;
        assert!((parts - a.total).abs() < 1e-9 * a.total.abs().max(1.0));
        assert!(a.grad_norm.is_finite() && a.grad_norm > 0.0);
    }
    assert_eq!(logged[0].lr, cfg.lr_at(0));
    let ckpt = out.checkpoint.unwrap();
    assert_eq!(ckpt, dir.path().join(CHECKPOINT_FILE));
    let loaded = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded.config, cfg.model);
    for ((_, a), (_, b)) in loaded.store.iter().zip(out.model.store.iter()) {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
    let conf = std::fs::read_to_string(dir.path().join("run.conf")).unwrap();
    let back = RunConfig::from_kv(&simplr::textconf::KeyValues::parse(&conf).unwrap()).unwrap();
    assert_eq!(back.model, cfg.model);
    assert_eq!(back.steps, 10);
}

#[test]
fn same_seed_same_run_and_other_seed_differs() {
    let cfg = small_run(4);
    let scenes = scenes_for(&cfg);
    let a = train(&cfg, &scenes, None, &mut keep_going).unwrap();
    let b = train(&cfg, &scenes, None, &mut keep_going).unwrap();
    assert_eq!(a.log, b.log);
    for ((_, x), (_, y)) in a.model.store.iter().zip(b.model.store.iter()) {
        assert_eq!(x.value, y.value);
    }
    let c = train(
        &RunConfig { seed: 1, ..cfg },
        &scenes,
        None,
        &mut keep_going,
    )
    .unwrap();
    assert_ne!(a.log[0].total, c.log[0].total);
}

#[test]
fn observer_can_stop_early() {
    let cfg = small_run(10);
    let scenes = scenes_for(&cfg);
    let full = train(&cfg, &scenes, None, &mut keep_going).unwrap();
    let part = train(&cfg, &scenes, None, &mut |s: &StepLog, _: &mut Model| {
        s.step < 3
    })
    .unwrap();
    assert_eq!(part.log.len(), 4);
    assert_eq!(part.log[..], full.log[..4]);
}

#[test]
fn non_finite_step_aborts_and_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(10);
    let scenes = scenes_for(&cfg);
    let mut snapshot: Option<Vec<Tensor>> = None;
    let err = train(
        &cfg,
        &scenes,
        Some(dir.path()),
        &mut |s: &StepLog, m: &mut Model| {
            if s.step == 3 {
                // the checkpoint written after this step is the last good one
                snapshot = Some(m.store.iter().map(|(_, p)| p.value.clone()).collect());
            }
            if s.step == 4 {
                let id = m.store.ids().next().unwrap();
                m.store.value_mut(id).data_mut()[0] = f64::NAN;
            }
            true
        },
    )
    .err()
    .expect("training must fail");
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let log = read_log(&dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.len(), 5);
    let loaded = load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();
    let snapshot = snapshot.unwrap();
    for ((_, p), want) in loaded.store.iter().zip(&snapshot) {
        assert!(p.value.is_finite());
        for (x, y) in p.value.data().iter().zip(want.data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
    assert!(!dir.path().join("model.tmp").exists());
}

/// `2x` with a deliberately wrong cotangent.
struct BrokenDouble;

impl Op for BrokenDouble {
    fn name(&self) -> &'static str {
        "broken_double"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> simplr::Result<Tensor> {
        Ok(inputs[0].map(|v| 2.0 * v))
    }

    fn vjp(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> simplr::Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.map(|g| 2.1 * g))])
    }
}

#[test]
fn gradcheck_flags_a_wrong_backward() {
    let check = GradCheck::new(Scope::Ops, "broken_double", || {
        let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        finite_difference_check(
            |t, v| {
                let y = t.apply(BrokenDouble, &[v[0]])?;
                let y = t.mul(y, v[0])?;
                t.sum(y)
            },
            &[x],
            &FdOptions::default(),
        )
    });
    let rows = run_checks(&[check], Scope::All, TOLERANCE);
    assert_eq!(rows.len(), 1);
    assert!(!rows[0].passed);
    assert!(rows[0].max_rel_error > 0.01);

    let failing = GradCheck::new(Scope::Loss, "errors", || {
        Err(Error::InvalidArgument("boom".into()))
    });
    let rows = run_checks(&[failing], Scope::Loss, TOLERANCE);
    assert!(!rows[0].passed && rows[0].error.as_deref().is_some_and(|e| e.contains("boom")));
}

#[test]
fn registry_covers_every_block_and_ops_pass() {
    let checks = registry();
    let names: Vec<&str> = checks.iter().map(|c| c.name.as_str()).collect();
    for want in [
        "box",
        "fixed",
        "adaptive",
        "masked",
        "femto_detect",
        "composite_instance",
        "composite_panoptic",
    ] {
        assert!(
            names.iter().any(|n| n.contains(want)),
            "no check named like {want}: {names:?}"
        );
    }
    assert!(checks.iter().filter(|c| c.scope == Scope::Ops).count() >= 30);
    let rows = run_checks(&checks, Scope::Ops, TOLERANCE);
    for r in &rows {
        assert!(
            r.passed,
            "{} failed: {:e} {:?}",
            r.name, r.max_rel_error, r.error
        );
    }
    assert!(Scope::parse("everything").is_err());
}

fn ablation_base() -> RunConfig {
    RunConfig {
        train_scenes: 6,
        eval_scenes: 3,
        steps: 3,
        batch_size: 2,
        warmup: 1,
        ..RunConfig::default()
    }
}

#[test]
fn ablation_grid_parsing() {
    assert_eq!(
        Grid::parse("mechanism").unwrap(),
        Grid::Mechanism(vec![Mechanism::Base, Mechanism::Fixed, Mechanism::Adaptive])
    );
    assert_eq!(
        Grid::parse("m=2,4,6").unwrap(),
        Grid::ScaleCount(vec![2, 4, 6])
    );
    assert_eq!(
        Grid::parse("s").unwrap(),
        Grid::BaseSize(vec![2.0, 4.0, 8.0])
    );
    assert_eq!(
        Grid::parse("lambda=1,3").unwrap(),
        Grid::Lambda(vec![1.0, 3.0])
    );
    let fs = Grid::parse("feature_scale=1/4,1/8,1/16").unwrap();
    assert_eq!(fs.axis(), "feature_scale");
    assert!(matches!(Grid::parse("depth"), Err(Error::Config(_))));
    assert!(matches!(Grid::parse("m=two"), Err(Error::Config(_))));
}

#[test]
fn infeasible_cells_are_skipped_with_a_reason() {
    let mut base = ablation_base();
    base.model.mechanism = Mechanism::Fixed;
    let cells = Grid::ScaleCount(vec![2, 3]).cells(&base);
    assert!(cells[0].1.is_ok());
    assert!(cells[1].1.as_ref().unwrap_err().contains("3"));
}

#[test]
fn ablation_rows_round_trip_and_rerun_from_their_config() {
    let base = ablation_base();
    let train_scenes = generate_scenes(&base.train_seeds(), &base.scenes).unwrap();
    let eval = generate_scenes(&base.eval_seeds(), &base.scenes).unwrap();
    let grid = Grid::Mechanism(vec![Mechanism::Base, Mechanism::Adaptive]);
    let mut seen = Vec::new();
    let rows = run_ablation(&base, &grid, &train_scenes, &eval, &mut |a, v, s| {
        if s.is_some_and(|s| s.step == 0) {
            seen.push(format!("{a}={v}"));
        }
    })
    .unwrap();
    assert_eq!(seen, ["mechanism=base", "mechanism=adaptive"]);
    assert_eq!(rows.len(), 2);
    assert!(rows
        .iter()
        .all(|r| r.skipped.is_none() && r.ap50.is_some() && r.final_loss.unwrap().is_finite()));

    let mut buf = Vec::new();
    write_ablation(&rows, &mut buf).unwrap();
    let back = read_ablation(buf.as_slice()).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[1].config, rows[1].config);
    assert_eq!(back[1].value, "adaptive");

    // a row carries everything needed to reproduce its cell
    let cfg = back[1].run_config().unwrap();
    assert_eq!(cfg.model.mechanism, Mechanism::Adaptive);
    let again = train(&cfg, &train_scenes, None, &mut keep_going).unwrap();
    let r = simplr::harness::evaluate_model(&again.model, &eval).unwrap();
    assert_eq!(Some(r.ap50), rows[1].ap50);
    let tail = &again.log[again.log.len().saturating_sub(20)..];
    assert_eq!(
        Some(tail.iter().map(|s| s.total).sum::<f64>() / tail.len() as f64),
        rows[1].final_loss
    );
}

#[test]
fn scale_profile_of_untrained_mixer_is_uniform() {
    let mut model = Model::new(ModelConfig::femto(), 3).unwrap();
    assert_eq!(model.config.mechanism, Mechanism::Adaptive);
    // zero scale logits: every anchor gets weight 1/m everywhere
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.contains("scale_logits"))
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        model.store.value_mut(id).data_mut().fill(0.0);
    }
    let scenes = generate_scenes(&(0..12).collect::<Vec<_>>(), &SceneConfig::default()).unwrap();
    let p = scale_profile(&model, &scenes).unwrap();
    let m = model.config.scale_count;
    assert_eq!(p.anchor_px.len(), m);
    assert_eq!(p.rows.len(), 3);
    assert!(p.rows.iter().map(|r| r.count).sum::<usize>() > 0);
    for r in &p.rows {
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for w in &r.weights {
            assert!((w - 1.0 / m as f64).abs() < 1e-12, "{:?}", r.weights);
        }
    }
    let mut buf = Vec::new();
    write_profile(&p, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("bucket,count,anchor_"));
}

#[test]
fn scale_profile_needs_adaptive_attention() {
    let cfg = ModelConfig {
        mechanism: Mechanism::Fixed,
        ..ModelConfig::femto()
    };
    let model = Model::new(cfg, 0).unwrap();
    let scenes = generate_scenes(&[0], &SceneConfig::default()).unwrap();
    assert!(matches!(
        scale_profile(&model, &scenes),
        Err(Error::Config(_))
    ));
}
