use std::path::PathBuf;

use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::Task;
use crate::textconf::{parse_list, KeyValues};

/// Everything a training run needs. Read from a `key = value` file whose
/// model keys (see [`ModelConfig::to_kv`]) sit alongside the run keys.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scenes: SceneConfig,
    pub train_scenes: usize,
    pub train_seed_offset: u64,
    pub eval_scenes: usize,
    pub eval_seed_offset: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    /// global gradient-norm clip; 0 disables
    pub clip: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// large-scale jitter range, if enabled
    pub jitter: Option<(f64, f64)>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::femto(),
            scenes: SceneConfig::default(),
            train_scenes: 200,
            train_seed_offset: 0,
            eval_scenes: 50,
            eval_seed_offset: 100_000,
            steps: 2000,
            batch_size: 8,
            // 1e-4 is the recipe for a pretrained ViT-B; a from-scratch femto
            // model is badly undertrained at that rate in 2000 steps
            lr: 2e-3,
            warmup: 250,
            weight_decay: 1e-4,
            clip: 1.0,
            seed: 0,
            checkpoint_every: 500,
            jitter: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn task(&self) -> Task {
        self.model.task
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.train_scenes as u64)
            .map(|i| self.train_seed_offset + i)
            .collect()
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.eval_scenes as u64)
            .map(|i| self.eval_seed_offset + i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scenes.validate()?;
        if self.steps <= self.warmup {
            return Err(Error::Config(format!(
                "steps ({}) must exceed warmup ({})",
                self.steps, self.warmup
            )));
        }
        if self.batch_size == 0 || self.train_scenes == 0 {
            return Err(Error::Config(
                "batch size and training set must be non-empty".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.scenes.height != self.model.image_size || self.scenes.width != self.model.image_size
        {
            return Err(Error::Config(format!(
                "scenes are {}x{} but the model takes {} px images",
                self.scenes.height, self.scenes.width, self.model.image_size
            )));
        }
        Ok(())
    }

    /// Linear warmup, then x0.1 at 90% and again at 95% of the run.
    pub fn lr_at(&self, step: usize) -> f64 {
        lr_schedule(self.lr, step, self.steps, self.warmup)
    }

    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = kv.get(stringify!($field))? {
                    self.$field = v;
                }
            };
        }
        self.model.apply_kv(kv)?;
        take!(train_scenes);
        take!(train_seed_offset);
        take!(eval_scenes);
        take!(eval_seed_offset);
        take!(steps);
        take!(batch_size);
        take!(lr);
        take!(warmup);
        take!(weight_decay);
        take!(clip);
        take!(seed);
        take!(checkpoint_every);
        if let Some(j) = kv.get_str("jitter") {
            self.jitter = match j {
                "" | "off" | "none" => None,
                s => {
                    let r: Vec<f64> = parse_list(s)?;
                    match r.as_slice() {
                        [lo, hi] => Some((*lo, *hi)),
                        _ => return Err(Error::Config(format!("jitter needs lo,hi, got {s:?}"))),
                    }
                }
            };
        }
        if let Some(m) = kv.get("max_instances")? {
            self.scenes.max_instances = m;
        }
        if let Some(o) = kv.get_str("out_dir") {
            self.out_dir = PathBuf::from(o);
        }
        if self.scenes.height != self.model.image_size || self.scenes.width != self.model.image_size
        {
            self.scenes = SceneConfig {
                max_instances: self.scenes.max_instances,
                ..SceneConfig::square(self.model.image_size)
            };
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.model.to_kv();
        kv.set("train_scenes", self.train_scenes);
        kv.set("train_seed_offset", self.train_seed_offset);
        kv.set("eval_scenes", self.eval_scenes);
        kv.set("eval_seed_offset", self.eval_seed_offset);
        kv.set("steps", self.steps);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("warmup", self.warmup);
        kv.set("weight_decay", self.weight_decay);
        kv.set("clip", self.clip);
        kv.set("seed", self.seed);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("max_instances", self.scenes.max_instances);
        kv.set(
            "jitter",
            self.jitter
                .map_or("off".to_string(), |(a, b)| format!("{a},{b}")),
        );
        kv.set("out_dir", self.out_dir.display());
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(kv)?;
        c.validate()?;
        Ok(c)
    }
}

pub fn lr_schedule(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    let warm = if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else {
        1.0
    };
    let frac = step as f64 / total as f64;
    let decay = if frac >= 0.95 {
        0.01
    } else if frac >= 0.9 {
        0.1
    } else {
        1.0
    };
    base * warm * decay
}
