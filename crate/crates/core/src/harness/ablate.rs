//! Ablation grids: one axis of the model config swept with everything else
//! (seed, data, step budget) held fixed. Cells run one after another.

use std::io::Write;

use crate::attention::Mechanism;
use crate::data::SceneRecord;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::metrics::evaluate_model;
use crate::harness::train::{train, StepLog};
use crate::model::{FeatureScale, Model};
use crate::textconf::{parse_list, KeyValues};

#[derive(Clone, Debug, PartialEq)]
pub enum Grid {
    Mechanism(Vec<Mechanism>),
    /// anchor scale count
    ScaleCount(Vec<usize>),
    /// smallest anchor side in pixels
    BaseSize(Vec<f64>),
    Lambda(Vec<f64>),
    FeatureScale(Vec<FeatureScale>),
}

impl Grid {
    /// `axis` alone takes the default values; `axis=v1,v2,...` lists them.
    pub fn parse(spec: &str) -> Result<Self> {
        let (axis, values) = match spec.split_once('=') {
            Some((a, v)) => (a.trim(), Some(v.trim())),
            None => (spec.trim(), None),
        };
        let bad = |e: Error| Error::Config(format!("grid {spec:?}: {e}"));
        Ok(match axis {
            "mechanism" => Grid::Mechanism(match values {
                Some(v) => v
                    .split(',')
                    .map(|s| Mechanism::parse(s.trim()))
                    .collect::<Result<_>>()
                    .map_err(bad)?,
                None => vec![Mechanism::Base, Mechanism::Fixed, Mechanism::Adaptive],
            }),
            "m" | "scale_count" => Grid::ScaleCount(match values {
                Some(v) => parse_list(v).map_err(bad)?,
                None => vec![2, 4, 6],
            }),
            "s" | "base_size" => Grid::BaseSize(match values {
                Some(v) => parse_list(v).map_err(bad)?,
                None => vec![2.0, 4.0, 8.0],
            }),
            "lambda" => Grid::Lambda(match values {
                Some(v) => parse_list(v).map_err(bad)?,
                None => vec![1.0, 2.0, 4.0, 8.0],
            }),
            "feature_scale" => Grid::FeatureScale(match values {
                Some(v) => v
                    .split(',')
                    .map(|s| FeatureScale::parse(s.trim()))
                    .collect::<Result<_>>()
                    .map_err(bad)?,
                None => vec![
                    FeatureScale::Quarter,
                    FeatureScale::Eighth,
                    FeatureScale::Sixteenth,
                ],
            }),
            _ => {
                return Err(Error::Config(format!(
                    "unknown grid axis {axis:?} (mechanism|m|s|lambda|feature_scale)"
                )))
            }
        })
    }

    pub fn axis(&self) -> &'static str {
        match self {
            Grid::Mechanism(_) => "mechanism",
            Grid::ScaleCount(_) => "m",
            Grid::BaseSize(_) => "s",
            Grid::Lambda(_) => "lambda",
            Grid::FeatureScale(_) => "feature_scale",
        }
    }

    /// `(label, cell config)` per value. Errors are per cell: an infeasible
    /// value yields its reason instead of a config.
    pub fn cells(&self, base: &RunConfig) -> Vec<(String, std::result::Result<RunConfig, String>)> {
        let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            let checked = c.validate().map(|_| c).map_err(|e| e.to_string());
            (label, checked)
        };
        match self {
            Grid::Mechanism(v) => v
                .iter()
                .map(|&m| with(m.name().into(), &|c| c.model.mechanism = m))
                .collect(),
            Grid::ScaleCount(v) => v
                .iter()
                .map(|&m| {
                    with(m.to_string(), &|c| {
                        c.model.scale_count = m;
                        c.model.lambda = crate::attention::default_lambda(m);
                    })
                })
                .collect(),
            Grid::BaseSize(v) => v
                .iter()
                .map(|&s| with(s.to_string(), &|c| c.model.base_size = s))
                .collect(),
            Grid::Lambda(v) => v
                .iter()
                .map(|&l| with(l.to_string(), &|c| c.model.lambda = l))
                .collect(),
            Grid::FeatureScale(v) => v
                .iter()
                .map(|&f| with(f.to_string(), &|c| c.model.feature_scale = f))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    /// `None` when the cell ran; otherwise why it was skipped
    pub skipped: Option<String>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub mask_ap50: Option<f64>,
    /// mean total loss over the last 20 steps
    pub final_loss: Option<f64>,
    /// the cell's full run config, `key=value` pairs joined by `;`
    pub config: String,
}

impl AblationRow {
    /// The run config recorded in this row.
    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_kv(&KeyValues::parse(&self.config.replace(';', "\n"))?)
    }
}

fn encode_config(c: &RunConfig) -> String {
    c.to_kv()
        .render()
        .lines()
        .map(|l| l.replace(" = ", "="))
        .collect::<Vec<_>>()
        .join(";")
}

/// Warmup used by a cell: the base warmup, shortened for small budgets.
pub fn cell_warmup(base_warmup: usize, steps: usize) -> usize {
    base_warmup.min(steps / 8)
}

/// Trains and evaluates every cell of `grid`.
pub fn run_ablation(
    base: &RunConfig,
    grid: &Grid,
    train_scenes: &[SceneRecord],
    eval_scenes: &[SceneRecord],
    progress: &mut dyn FnMut(&str, &str, Option<&StepLog>),
) -> Result<Vec<AblationRow>> {
    let mut base = base.clone();
    base.warmup = cell_warmup(base.warmup, base.steps);
    let mut rows = Vec::new();
    for (label, cell) in grid.cells(&base) {
        let cfg = match cell {
            Ok(c) => c,
            Err(reason) => {
                progress(grid.axis(), &label, None);
                rows.push(AblationRow {
                    axis: grid.axis().into(),
                    value: label,
                    skipped: Some(reason),
                    ap50: None,
                    ap75: None,
                    mask_ap50: None,
                    final_loss: None,
                    config: String::new(),
                });
                continue;
            }
        };
        let outcome = train(
            &cfg,
            train_scenes,
            None,
            &mut |s: &StepLog, _: &mut Model| {
                progress(grid.axis(), &label, Some(s));
                true
            },
        )?;
        let report = evaluate_model(&outcome.model, eval_scenes)?;
        let tail = &outcome.log[outcome.log.len().saturating_sub(20)..];
        rows.push(AblationRow {
            axis: grid.axis().into(),
            value: label,
            skipped: None,
            ap50: Some(report.ap50),
            ap75: Some(report.ap75),
            mask_ap50: report.mask_ap50,
            final_loss: Some(tail.iter().map(|s| s.total).sum::<f64>() / tail.len() as f64),
            config: encode_config(&cfg),
        });
    }
    Ok(rows)
}

pub const ABLATION_COLUMNS: [&str; 8] = [
    "axis",
    "value",
    "status",
    "ap50",
    "ap75",
    "mask_ap50",
    "final_loss",
    "config",
];

pub fn write_ablation<W: Write>(rows: &[AblationRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(ABLATION_COLUMNS)?;
    let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for r in rows {
        let status = r
            .skipped
            .as_ref()
            .map_or("ok".to_string(), |s| format!("skipped: {s}"));
        wr.write_record([
            r.axis.clone(),
            r.value.clone(),
            status,
            f(r.ap50),
            f(r.ap75),
            f(r.mask_ap50),
            f(r.final_loss),
            r.config.clone(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_ablation<R: std::io::Read>(r: R) -> Result<Vec<AblationRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let opt = |i: usize| -> Result<Option<f64>> {
            match &rec[i] {
                "" => Ok(None),
                s => s
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::Format(format!("bad {}: {s}", ABLATION_COLUMNS[i]))),
            }
        };
        let status = &rec[2];
        rows.push(AblationRow {
            axis: rec[0].to_string(),
            value: rec[1].to_string(),
            skipped: status.strip_prefix("skipped: ").map(str::to_string),
            ap50: opt(3)?,
            ap75: opt(4)?,
            mask_ap50: opt(5)?,
            final_loss: opt(6)?,
            config: rec[7].to_string(),
        });
    }
    Ok(rows)
}
