//! Acceptance suite: one test per criterion, each printing a single
//! `PASS`/`FAIL` line with the measured numbers.
//!
//! The toy-training run is shared: the first test that needs it trains
//! the femto model (and a same-seed rerun), the others wait for it.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use simplr::attention::{
    refine_window, AnchorSet, AttentionConfig, GridAttention, HeadScaleAssignment, MaskedConfig,
    MaskedInstanceAttention, Mechanism, ReferenceWindow,
};
use simplr::data::{export_dataset, generate_scenes, import_dataset, SceneConfig, SizeBucket};
use simplr::harness::ablate::{run_ablation, write_ablation, AblationRow, Grid};
use simplr::harness::gradcheck::{registry, run_checks, Scope, TOLERANCE};
use simplr::harness::metrics::{average_precision, Region, Scored, Truth};
use simplr::harness::profile::{scale_profile, write_profile};
use simplr::harness::train::{moving_average_ends, train, StepLog, TrainOutcome};
use simplr::harness::{evaluate_model, MetricReport, RunConfig};
use simplr::model::{
    load_checkpoint, panoptic_merge, save_checkpoint, MergeConfig, Model, ModelConfig,
};
use simplr::numerics::sample_point;
use simplr::objective::{
    composite_loss, focal_loss_sum, hungarian_match, LossWeights, PredictionSet, TargetSet, Task,
};
use simplr::oracle::{
    self, oracle_ap, oracle_assignment, oracle_attention, oracle_bilinear, oracle_panoptic,
    AttentionParams, OracleDetection, OracleSetting, OracleTruth,
};
use simplr::{ParamStore, Rng, Tape, Tensor};

/// AP@0.5 floor for the femto toy run. The reference run (seed 0, 200
/// training scenes, 2000 steps, held-out seeds 100000..100050) reached
/// 0.605; the floor is about 0.9 of that.
const AP50_FLOOR: f64 = 0.54;

/// Written straight to stderr so the line shows even for passing tests.
fn report(n: usize, name: &str, ok: bool, detail: &str) {
    let line = format!(
        "[{n}] {} {name}: {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn randomize(store: &mut ParamStore, rng: &mut Rng, amp: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.range(-amp, amp);
        }
    }
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.range(-1.0, 1.0))
}

fn grid_block(mech: Mechanism, cfg: AttentionConfig, seed: u64) -> (GridAttention, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let block = GridAttention::new(&mut store, "a", mech, cfg, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.4);
    (block, store)
}

fn masked_block(seed: u64) -> (MaskedInstanceAttention, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let block = MaskedInstanceAttention::new(
        &mut store,
        "m",
        MaskedConfig::new(8, 4, 4).unwrap(),
        &mut rng,
    );
    randomize(&mut store, &mut rng, 0.4);
    (block, store)
}

#[test]
fn c1_gradient_integrity() {
    let start = Instant::now();
    let rows = run_checks(&registry(), Scope::All, TOLERANCE);
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| {
            format!(
                "{} ({:e}{})",
                r.name,
                r.max_rel_error,
                r.error
                    .as_deref()
                    .map_or(String::new(), |e| format!(", {e}"))
            )
        })
        .collect();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let ok = failed.is_empty() && secs < 300.0;
    report(
        1,
        "gradient integrity",
        ok,
        &format!(
            "{} checks, worst relative error {worst:.2e}, {secs:.1} s, failing: {failed:?}",
            rows.len()
        ),
    );
    assert!(ok);
}

/// Worst deviation of each mechanism from the dense reference.
fn attention_deviation() -> [f64; 4] {
    let mut worst = [0.0f64; 4];
    for seed in 0..4 {
        let mut rng = Rng::new(seed + 300);
        let map = random(&[6, 6, 8], &mut rng);
        let k = 5;
        let q = random(&[k, 8], &mut rng);
        let pos = Tensor::from_fn([k, 2], |_| rng.range(0.0, 1.0));
        for (slot, mech, m) in [
            (0, Mechanism::Base, 1),
            (1, Mechanism::Fixed, 2),
            (2, Mechanism::Adaptive, 3),
        ] {
            let cfg = AttentionConfig::new(8, 4, m).unwrap();
            let (block, store) = grid_block(mech, cfg, seed);
            let anchors = AnchorSet::new(1.5, m, 6).unwrap();
            let mut tape = Tape::new();
            let (mv, qv) = (tape.constant(map.clone()), tape.constant(q.clone()));
            let out = block
                .forward_at(&mut tape, &store, mv, qv, &pos, &anchors)
                .unwrap();
            let out = tape.value(out.output).clone();
            let params = AttentionParams::from_grid(&block, &store);
            let s = OracleSetting {
                heads: 4,
                scale_count: m,
                anchor_sizes: anchors.sizes(),
                lambda: cfg.lambda,
                grid: cfg.grid,
                prev_mask: None,
            };
            let tag = ["box", "fixed", "adaptive"][slot];
            for i in 0..k {
                let r = [
                    pos.at(&[i, 0]),
                    pos.at(&[i, 1]),
                    anchors.size(0),
                    anchors.size(0),
                ];
                let want = oracle_attention(tag, q.row(i), r, &map, &params, &s).unwrap();
                worst[slot] = worst[slot].max(max_diff(out.row(i), &want));
            }
        }
        let (block, store) = masked_block(seed);
        let windows = Tensor::from_fn([k, 4], |i| {
            if i % 4 < 2 {
                rng.range(0.2, 0.8)
            } else {
                rng.range(0.2, 0.9)
            }
        });
        let prev = random(&[k, 6, 6], &mut rng);
        let mut tape = Tape::new();
        let (mv, qv, wv) = (
            tape.constant(map.clone()),
            tape.constant(q.clone()),
            tape.constant(windows.clone()),
        );
        let out = block
            .forward(&mut tape, &store, mv, qv, wv, Some(&prev))
            .unwrap();
        let out = tape.value(out.output).clone();
        let params = AttentionParams::from_masked(&block, &store);
        for i in 0..k {
            let pm = Tensor::new([6, 6], prev.data()[i * 36..(i + 1) * 36].to_vec()).unwrap();
            let s = OracleSetting {
                heads: 4,
                scale_count: 1,
                anchor_sizes: vec![],
                lambda: 1.0,
                grid: 4,
                prev_mask: Some(&pm),
            };
            let r: [f64; 4] = windows.row(i).try_into().unwrap();
            let want = oracle_attention("masked", q.row(i), r, &map, &params, &s).unwrap();
            worst[3] = worst[3].max(max_diff(out.row(i), &want));
        }
    }
    worst
}

#[test]
fn c2_oracle_equivalence() {
    let mut rng = Rng::new(2);
    // bilinear sampler
    let map = random(&[5, 7, 3], &mut rng);
    let mut bilinear = 0.0f64;
    for _ in 0..500 {
        let (x, y) = (rng.range(-0.2, 1.2), rng.range(-0.2, 1.2));
        bilinear = bilinear.max(max_diff(
            &sample_point(&map, x, y),
            &oracle_bilinear(&map, x, y),
        ));
    }
    let attention = attention_deviation();

    // matcher, 100 random instances with up to 7 targets
    let mut matcher = 0.0f64;
    let mut same_pairs = true;
    for _ in 0..100 {
        let t = rng.index(1, 8);
        let k = t + rng.index(0, 3);
        let cost = Tensor::from_fn([k, t], |_| rng.range(-3.0, 3.0));
        let (a, b) = (
            hungarian_match(&cost).unwrap(),
            oracle_assignment(&cost).unwrap(),
        );
        matcher = matcher.max((a.total_cost - b.total_cost).abs());
        same_pairs &= a.pairs == b.pairs;
    }

    // panoptic merge
    let mut merge_ok = true;
    for case in 0..40 {
        let (k, h, w) = (rng.index(1, 6), rng.index(3, 9), rng.index(3, 9));
        let masks = Tensor::from_fn([k, h, w], |_| rng.uniform().powi(3));
        let classes = Tensor::from_fn([k, 5], |_| rng.uniform());
        let (min_area, min_score) = ([0, 2, 5][case % 3], [0.0, 0.5][case % 2]);
        let cfg = MergeConfig {
            min_area,
            min_score,
            first_stuff_class: 3,
        };
        merge_ok &= panoptic_merge(&masks, &classes, &cfg).unwrap().ids
            == oracle_panoptic(&masks, &classes, min_area, min_score, 3);
    }

    // AP
    let mut ap = 0.0f64;
    for _ in 0..50 {
        let mut dets = Vec::new();
        let mut truths = Vec::new();
        for image in 0..3 {
            for _ in 0..rng.index(0, 5) {
                let (x, y) = (rng.range(0.0, 0.7), rng.range(0.0, 0.7));
                let b = [x, y, x + rng.range(0.05, 0.3), y + rng.range(0.05, 0.3)];
                let class = rng.index(0, 3);
                truths.push(Truth {
                    image,
                    class,
                    region: Region::Box(b),
                });
                if rng.uniform() < 0.7 {
                    let j = rng.range(-0.05, 0.05);
                    dets.push(Scored {
                        image,
                        class,
                        score: rng.uniform(),
                        region: Region::Box([b[0] + j, b[1], b[2], b[3] + j]),
                    });
                }
                if rng.uniform() < 0.3 {
                    dets.push(Scored {
                        image,
                        class: rng.index(0, 3),
                        score: rng.uniform(),
                        region: Region::Box(b),
                    });
                }
            }
        }
        let conv = |r: &Region| match r {
            Region::Box(b) => oracle::Region::Box(*b),
            Region::Mask(m) => oracle::Region::Mask(m.clone()),
        };
        let od: Vec<_> = dets
            .iter()
            .map(|d| OracleDetection {
                image: d.image,
                class: d.class,
                score: d.score,
                region: conv(&d.region),
            })
            .collect();
        let ot: Vec<_> = truths
            .iter()
            .map(|t| OracleTruth {
                image: t.image,
                class: t.class,
                region: conv(&t.region),
            })
            .collect();
        for thr in [0.5, 0.75] {
            ap = ap.max(
                (average_precision(&dets, &truths, thr).unwrap()
                    - oracle_ap(&od, &ot, thr).unwrap())
                .abs(),
            );
        }
    }

    let ok = bilinear < 1e-9
        && attention.iter().all(|d| *d < 1e-9)
        && matcher < 1e-9
        && same_pairs
        && merge_ok
        && ap < 1e-6;
    report(
        2,
        "oracle equivalence",
        ok,
        &format!(
            "bilinear {bilinear:.1e}, box/fixed/adaptive/masked {:.1e}/{:.1e}/{:.1e}/{:.1e}, matcher {matcher:.1e} (same pairs: {same_pairs}), panoptic identical: {merge_ok}, AP {ap:.1e}",
            attention[0], attention[1], attention[2], attention[3]
        ),
    );
    assert!(ok);
}

fn transplant(from: &ParamStore, to: &mut ParamStore) {
    for (_, p) in from.iter() {
        if let Some(id) = to.id(&p.name) {
            *to.value_mut(id) = p.value.clone();
        }
    }
}

#[test]
fn c3_degenerate_reductions() {
    let mut rng = Rng::new(3);
    let map = random(&[8, 8, 8], &mut rng);
    let q = random(&[6, 8], &mut rng);
    let pos = Tensor::from_fn([6, 2], |_| rng.range(0.0, 1.0));
    let run_at = |block: &GridAttention, store: &ParamStore, anchors: &AnchorSet| {
        let mut tape = Tape::new();
        let (mv, qv) = (tape.constant(map.clone()), tape.constant(q.clone()));
        let o = block
            .forward_at(&mut tape, store, mv, qv, &pos, anchors)
            .unwrap();
        tape.value(o.output).clone()
    };

    let mut cfg = AttentionConfig::new(8, 4, 1).unwrap();
    cfg.lambda = 1.0;
    let anchors = AnchorSet::new(2.0, 1, 8).unwrap();
    let (boxed, box_store) = grid_block(Mechanism::Base, cfg, 10);
    let (adaptive, mut ad_store) = grid_block(Mechanism::Adaptive, cfg, 11);
    transplant(&box_store, &mut ad_store);
    let adaptive_gap = max_diff(
        run_at(&boxed, &box_store, &anchors).data(),
        run_at(&adaptive, &ad_store, &anchors).data(),
    );

    let (fixed, fixed_store) = grid_block(Mechanism::Fixed, cfg, 12);
    let mut box_store2 = box_store.clone();
    transplant(&fixed_store, &mut box_store2);
    let side = anchors.size(0);
    let windows = Tensor::from_fn([6, 4], |i| {
        if i % 4 < 2 {
            pos.data()[(i / 4) * 2 + i % 4]
        } else {
            side
        }
    });
    let mut tape = Tape::new();
    let (mv, qv, wv) = (
        tape.constant(map.clone()),
        tape.constant(q.clone()),
        tape.constant(windows),
    );
    let via_windows = boxed
        .forward_windows(&mut tape, &box_store2, mv, qv, wv)
        .unwrap();
    let via_windows = tape.value(via_windows.output).clone();
    let fixed_gap = max_diff(
        run_at(&fixed, &fixed_store, &anchors).data(),
        via_windows.data(),
    );

    let logits = Tensor::from_fn([200], |_| rng.range(-10.0, 10.0));
    let targets = Tensor::from_fn([200], |i| (i % 4 == 1) as u8 as f64);
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let f = focal_loss_sum(&mut tape, z, &targets, None, 0.0).unwrap();
    let focal = tape.value(f).item().unwrap();
    let bce: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&z, &y)| {
            let p: f64 = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    let focal_gap = (focal - bce).abs();

    let ok = adaptive_gap < 1e-6 && fixed_gap < 1e-9 && focal_gap < 1e-9;
    report(
        3,
        "degenerate reductions",
        ok,
        &format!("adaptive(m=1, lambda=1) vs box {adaptive_gap:.1e}; fixed(m=1) vs box on anchor windows {fixed_gap:.1e}; focal(gamma=0) vs BCE {focal_gap:.1e}"),
    );
    assert!(ok);
}

#[test]
fn c4_mechanism_invariants() {
    let mut rng = Rng::new(4);
    let map = random(&[8, 8, 8], &mut rng);
    let q = random(&[5, 8], &mut rng);
    let pos = Tensor::from_fn([5, 2], |_| rng.range(0.0, 1.0));

    // weights sum to one over their support
    let mut sum_err = 0.0f64;
    for (mech, m) in [
        (Mechanism::Base, 1),
        (Mechanism::Fixed, 2),
        (Mechanism::Adaptive, 4),
    ] {
        let (block, mut store) = grid_block(mech, AttentionConfig::new(8, 4, m).unwrap(), 40);
        randomize(&mut store, &mut rng, 2.0);
        let anchors = AnchorSet::new(1.0, m, 8).unwrap();
        let mut tape = Tape::new();
        let (mv, qv) = (tape.constant(map.clone()), tape.constant(q.clone()));
        let o = block
            .forward_at(&mut tape, &store, mv, qv, &pos, &anchors)
            .unwrap();
        let mut ws = vec![tape.value(o.grid_weights).clone()];
        ws.extend(o.scale_weights.map(|s| tape.value(s).clone()));
        for w in ws {
            let last = *w.shape().last().unwrap();
            for row in w.data().chunks_exact(last) {
                sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    // masked cells: zero weight, and their texels do not matter
    let (block, mut store) = masked_block(41);
    for name in ["m.offsets.weight", "m.offsets.bias"] {
        let id = store.id(name).unwrap();
        store.value_mut(id).data_mut().fill(0.0);
    }
    let windows = Tensor::from_fn([5, 4], |i| if i % 4 < 2 { 0.5 } else { 1.0 });
    let prev = Tensor::from_fn([5, 8, 8], |i| if i % 8 < 4 { -1.0 } else { 1.0 });
    let run = |map: &Tensor| {
        let mut tape = Tape::new();
        let (mv, qv, wv) = (
            tape.constant(map.clone()),
            tape.constant(q.clone()),
            tape.constant(windows.clone()),
        );
        let o = block
            .forward(&mut tape, &store, mv, qv, wv, Some(&prev))
            .unwrap();
        (tape.value(o.output).clone(), tape.value(o.weights).clone())
    };
    let (out, weights) = run(&map);
    for row in weights.data().chunks_exact(16) {
        sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    let masked_zero = weights
        .data()
        .iter()
        .enumerate()
        .all(|(i, w)| (i % 4 >= 2) || *w == 0.0);
    let mut perturbed = map.clone();
    for t in 0..64 {
        if t % 8 < 4 {
            for c in 0..8 {
                perturbed.data_mut()[t * 8 + c] += rng.range(-100.0, 100.0);
            }
        }
    }
    let drift = max_diff(out.data(), run(&perturbed).0.data());

    // round robin
    let mut even = true;
    for n in 1..=16 {
        for m in (1..=n).filter(|m| n % m == 0) {
            even &= HeadScaleAssignment::round_robin(n, m).unwrap().counts() == vec![n / m; m];
        }
    }

    // temperature ratios
    let mut exact = true;
    for m in 1..=6 {
        for lambda in [1.0, 2.0, 4.0, simplr::attention::default_lambda(m)] {
            let mut cfg = AttentionConfig::new(8, 4, m).unwrap();
            cfg.lambda = lambda;
            let o = [rng.range(-0.5, 0.5), rng.range(-0.5, 0.5), 0.0, 0.0];
            let origin = ReferenceWindow::new(0.0, 0.0, 1.0, 1.0);
            for j in 0..m {
                let ratio = 2f64.powi(j as i32) / lambda;
                let d = refine_window(origin, o, cfg.temperature(j), 0.0).unwrap();
                exact &= cfg.temperature(j) == ratio && d.x == o[0] * ratio && d.y == o[1] * ratio;
            }
        }
    }

    let ok = sum_err <= 1e-9 && masked_zero && drift <= 1e-12 && even && exact;
    report(
        4,
        "mechanism invariants",
        ok,
        &format!("weight-sum error {sum_err:.1e}; masked weights zero: {masked_zero}; masked-texel drift {drift:.1e}; round robin n/m: {even}; temperatures 2^j/lambda exact: {exact}"),
    );
    assert!(ok);
}

struct ToyRun {
    cfg: RunConfig,
    outcome: TrainOutcome,
    seconds: f64,
    report: MetricReport,
    rerun_identical: bool,
    _dir: tempfile::TempDir,
    checkpoint: PathBuf,
}

fn fingerprint(model: &Model) -> Vec<u64> {
    model
        .store
        .iter()
        .flat_map(|(_, p)| {
            p.value
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        })
        .collect()
}

fn toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let scenes = generate_scenes(&cfg.train_seeds(), &cfg.scenes).unwrap();
        let start = Instant::now();
        let outcome = train(
            &cfg,
            &scenes,
            Some(dir.path()),
            &mut |s: &StepLog, _: &mut Model| {
                if s.step.is_multiple_of(250) {
                    let _ = std::io::stderr().write_all(
                        format!("    toy run step {} loss {:.4}\n", s.step, s.total).as_bytes(),
                    );
                }
                true
            },
        )
        .unwrap();
        let seconds = start.elapsed().as_secs_f64();
        let eval = generate_scenes(&cfg.eval_seeds(), &cfg.scenes).unwrap();
        let report = evaluate_model(&outcome.model, &eval).unwrap();
        let rerun = train(&cfg, &scenes, None, &mut |_: &StepLog, _: &mut Model| true).unwrap();
        let rerun_identical =
            rerun.log == outcome.log && fingerprint(&rerun.model) == fingerprint(&outcome.model);
        let checkpoint = outcome.checkpoint.clone().unwrap();
        ToyRun {
            cfg,
            outcome,
            seconds,
            report,
            rerun_identical,
            _dir: dir,
            checkpoint,
        }
    })
}

#[test]
fn c5_toy_training() {
    let run = toy_run();
    let (start, end) = moving_average_ends(&run.outcome.log, 20).unwrap();
    let decreased = end < start;
    let above_floor = run.report.ap50 > AP50_FLOOR;
    let in_time = Duration::from_secs_f64(run.seconds) <= Duration::from_secs(30 * 60);
    let ok = decreased && above_floor && in_time && run.rerun_identical;
    report(
        5,
        "toy training",
        ok,
        &format!(
            "{} steps in {:.0} s; 20-step mean loss {start:.4} -> {end:.4}; held-out AP50 {:.4} (floor {AP50_FLOOR}), AP75 {:.4}; same-seed rerun bit-identical: {}",
            run.cfg.steps, run.seconds, run.report.ap50, run.report.ap75, run.rerun_identical
        ),
    );
    assert!(ok);
}

fn ablation_base() -> RunConfig {
    RunConfig {
        train_scenes: 16,
        eval_scenes: 8,
        steps: 24,
        batch_size: 2,
        warmup: 3,
        lr: 3e-4,
        ..RunConfig::default()
    }
}

fn cells_line(rows: &[AblationRow]) -> String {
    rows.iter()
        .map(|r| match (&r.skipped, r.ap50) {
            (None, Some(ap)) => format!(
                "{}={}: AP50 {ap:.3} loss {:.3}",
                r.axis,
                r.value,
                r.final_loss.unwrap_or(f64::NAN)
            ),
            (Some(why), _) => format!("{}={}: skipped ({why})", r.axis, r.value),
            _ => format!("{}={}: ?", r.axis, r.value),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[test]
fn c6_ablation_harness() {
    let base = ablation_base();
    let train_scenes = generate_scenes(&base.train_seeds(), &base.scenes).unwrap();
    let eval = generate_scenes(&base.eval_seeds(), &base.scenes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut complete = true;
    let mut mechanism_rows = Vec::new();
    for spec in ["mechanism", "m=2,4,6", "s", "feature_scale=1/4,1/8,1/16"] {
        let grid = Grid::parse(spec).unwrap();
        let rows = run_ablation(&base, &grid, &train_scenes, &eval, &mut |_, _, _| {}).unwrap();
        write_ablation(
            &rows,
            std::fs::File::create(dir.path().join(format!("ablation_{}.csv", grid.axis())))
                .unwrap(),
        )
        .unwrap();
        complete &= rows.len() == 3
            && rows.iter().all(|r| {
                r.skipped.is_none()
                    && r.ap50.is_some_and(f64::is_finite)
                    && r.final_loss.is_some_and(f64::is_finite)
            });
        lines.push(cells_line(&rows));
        if grid.axis() == "mechanism" {
            mechanism_rows = rows;
        }
    }
    let again = run_ablation(
        &base,
        &Grid::parse("mechanism").unwrap(),
        &train_scenes,
        &eval,
        &mut |_, _, _| {},
    )
    .unwrap();
    let deterministic = again == mechanism_rows;
    let ap = |v: &str| {
        mechanism_rows
            .iter()
            .find(|r| r.value == v)
            .and_then(|r| r.ap50)
            .unwrap_or(f64::NAN)
    };
    let direction = if ap("adaptive") >= ap("base") {
        "adaptive >= base"
    } else {
        "adaptive < base"
    };
    let ok = complete && deterministic;
    report(
        6,
        "ablation harness",
        ok,
        &format!(
            "4 grids, all cells complete: {complete}; mechanism grid rerun identical: {deterministic}; observed {direction} at this budget | {}",
            lines.join(" | ")
        ),
    );
    assert!(ok);
}

#[test]
fn c7_scale_profile() {
    let run = toy_run();
    let model = load_checkpoint(&run.checkpoint).unwrap();
    let eval = generate_scenes(&run.cfg.eval_seeds(), &run.cfg.scenes).unwrap();
    let profile = scale_profile(&model, &eval).unwrap();
    let sums: Vec<f64> = profile
        .rows
        .iter()
        .map(|r| r.weights.iter().sum())
        .collect();
    let normalized = sums.iter().all(|s| (s - 1.0).abs() <= 1e-6);
    let mut csv = Vec::new();
    write_profile(&profile, &mut csv).unwrap();
    let small = profile.row(SizeBucket::Small);
    let soft = match profile.small_prefers_smallest() {
        Some(true) => "small objects favour the smallest anchor, as expected".to_string(),
        Some(false) => format!(
            "small objects favour anchor {} ({} px), not the smallest (soft check, not fatal)",
            small.modal_anchor(),
            profile.anchor_px[small.modal_anchor()]
        ),
        None => "no small objects matched (soft check skipped)".to_string(),
    };
    let rows: Vec<String> = profile
        .rows
        .iter()
        .map(|r| {
            format!(
                "{} n={} [{}]",
                r.bucket.name(),
                r.count,
                r.weights
                    .iter()
                    .map(|w| format!("{w:.3}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            )
        })
        .collect();
    let ok = normalized && profile.rows.len() == 3;
    report(
        7,
        "scale profile",
        ok,
        &format!(
            "rows sum to 1: {normalized} ({sums:?}); {}; {soft}",
            rows.join("; ")
        ),
    );
    assert!(ok);
}

#[test]
fn c8_loss_recipe() {
    let mut proportional = true;
    let mut recipe = true;
    let mut worst = 0.0f64;
    for task in [Task::Detect, Task::Instance, Task::Panoptic] {
        let w = LossWeights::for_task(task);
        recipe &= (w.focal, w.dice, w.l1, w.giou) == (5.0, 5.0, 5.0, 2.0)
            && w.cls == if task == Task::Panoptic { 4.0 } else { 2.0 };
        let loss = |w: &LossWeights| {
            let targets = TargetSet {
                classes: vec![1, 0],
                boxes: Tensor::new([2, 4], vec![0.3, 0.3, 0.2, 0.2, 0.7, 0.6, 0.3, 0.4]).unwrap(),
                masks: task.supervises_masks().then(|| {
                    Tensor::from_fn([2, 16], |i| ((i / 16 == 0) == (i % 16 < 6)) as u8 as f64)
                }),
            };
            let mut tape = Tape::new();
            let logits = tape.constant(
                Tensor::new(
                    [3, 3],
                    vec![-2.0, 1.0, -3.0, 1.2, -2.0, -2.0, -1.0, -1.0, -1.0],
                )
                .unwrap(),
            );
            let boxes = tape.constant(
                Tensor::new(
                    [3, 4],
                    vec![
                        0.31, 0.29, 0.22, 0.18, 0.69, 0.61, 0.28, 0.41, 0.1, 0.9, 0.1, 0.1,
                    ],
                )
                .unwrap(),
            );
            let masks = task.supervises_masks().then(|| {
                tape.constant(Tensor::from_fn([3, 16], |i| {
                    if (i / 16 == 0) == (i % 16 < 7) {
                        1.5
                    } else {
                        -1.0
                    }
                }))
            });
            composite_loss(
                &mut tape,
                &[PredictionSet {
                    logits,
                    boxes,
                    masks,
                }],
                None,
                &targets,
                w,
                task,
                true,
            )
            .unwrap()
            .1
        };
        let r0 = loss(&w);
        let raw = [
            r0.raw.focal,
            r0.raw.dice,
            r0.raw.l1,
            r0.raw.giou,
            r0.raw.cls,
        ];
        for (i, term) in raw.iter().enumerate() {
            if !task.supervises_masks() && i < 2 {
                continue;
            }
            let mut w1 = w;
            let delta = 0.5;
            match i {
                0 => w1.focal += delta,
                1 => w1.dice += delta,
                2 => w1.l1 += delta,
                3 => w1.giou += delta,
                _ => w1.cls += delta,
            }
            let r1 = loss(&w1);
            let gap = ((r1.total - r0.total) - delta * term).abs();
            worst = worst.max(gap);
            proportional &= r1.matches[0].pairs == r0.matches[0].pairs
                && gap <= 1e-12 * r0.total.max(1.0)
                && *term > 0.0;
        }
    }
    let ok = recipe && proportional;
    report(
        8,
        "loss recipe",
        ok,
        &format!("weights focal=dice=l1=5, giou=2, cls=2/2/4 (detect/instance/panoptic): {recipe}; +0.5 on each weight moves the total by 0.5 x its raw term (worst gap {worst:.1e}): {proportional}"),
    );
    assert!(ok);
}

#[test]
fn c9_serialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        task: Task::Panoptic,
        ..ModelConfig::femto()
    };
    let model = Model::new(cfg.clone(), 9).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let params_exact = model
        .store
        .iter()
        .zip(loaded.store.iter())
        .all(|((_, a), (_, b))| {
            a.value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| (*x as f32 as f64).to_bits() == y.to_bits())
        });
    let resave = dir.path().join("again.ckpt");
    save_checkpoint(&loaded, &resave).unwrap();
    let ckpt_bytes = std::fs::read(&path).unwrap() == std::fs::read(&resave).unwrap();
    let scenes = generate_scenes(&[100_000, 100_001], &SceneConfig::default()).unwrap();
    let mut out_gap = 0.0f64;
    for s in &scenes {
        let (p, q) = (
            model.predict(&s.image).unwrap(),
            loaded.predict(&s.image).unwrap(),
        );
        out_gap = out_gap.max(max_diff(p.class_probs.data(), q.class_probs.data()));
        out_gap = out_gap.max(max_diff(p.boxes.data(), q.boxes.data()));
        out_gap = out_gap.max(max_diff(
            p.mask_probs.as_ref().unwrap().data(),
            q.mask_probs.as_ref().unwrap().data(),
        ));
    }

    let data = dir.path().join("eval.splr");
    let written =
        export_dataset(&[100_000, 100_001, 100_002], &SceneConfig::default(), &data).unwrap();
    let read = import_dataset(&data).unwrap();
    let data_exact = written.iter().zip(&read).all(|(a, b)| {
        a.seed == b.seed
            && a.stuff == b.stuff
            && a.instances
                .iter()
                .zip(&b.instances)
                .all(|(x, y)| x.class == y.class && x.bbox == y.bbox && x.mask == y.mask)
            && a.image
                .data()
                .iter()
                .zip(b.image.data())
                .all(|(x, y)| (*x as f32 as f64).to_bits() == y.to_bits())
    }) && written.len() == read.len();
    let again = dir.path().join("again.splr");
    simplr::data::export_scenes(&read, &again).unwrap();
    let data_bytes = std::fs::read(&data).unwrap() == std::fs::read(&again).unwrap();

    let ok = params_exact && ckpt_bytes && out_gap < 1e-5 && data_exact && data_bytes;
    report(
        9,
        "serialization",
        ok,
        &format!("checkpoint exact at f32: {params_exact}, re-save byte-identical: {ckpt_bytes}; output drift {out_gap:.1e}; dataset exact: {data_exact}, re-export byte-identical: {data_bytes}"),
    );
    assert!(ok);
}
