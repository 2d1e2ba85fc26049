//! Synthetic Gaussian class-mixture tasks and their on-disk format.
//!
//! Files are JSON with a format tag and version:
//! `{"format": "clbp-task", "version": 1, "task": {...}}`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist;
use crate::tensor::Tensor;

pub const FORMAT: &str = "clbp-task";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Radius of the sphere the class means are drawn on.
    pub separation: f64,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Affinely rescale every coordinate into `[0, 1]`.
    pub unit_range: bool,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            input_dim: 64,
            separation: 6.0,
            noise_std: 1.0,
            n_train: 800,
            n_test: 500,
            unit_range: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub xs: Vec<Tensor>,
    pub ys: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn take(&self, n: usize) -> Split {
        Split {
            xs: self.xs.iter().take(n).cloned().collect(),
            ys: self.ys.iter().take(n).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub means: Vec<Tensor>,
    pub train: Split,
    pub test: Split,
}

/// Draws class means on a sphere of radius `separation` and samples
/// `mean + noise_std * N(0, I)` with classes assigned round-robin.
pub fn make_gaussian_task(cfg: &TaskConfig) -> Result<SyntheticTask> {
    if !(cfg.separation > 0.0) || cfg.num_classes == 0 || cfg.input_dim == 0 {
        return Err(Error::config("task needs separation > 0 and non-zero sizes"));
    }
    if cfg.noise_std < 0.0 {
        return Err(Error::config("task.noise_std must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means: Vec<Tensor> = (0..cfg.num_classes)
        .map(|_| {
            let g = Tensor::randn(&[cfg.input_dim], 1.0, &mut rng);
            let n = g.norm_l2();
            g.map(|v| v * cfg.separation / n)
        })
        .collect();
    let mut draw = |n: usize| {
        let mut split = Split::default();
        for i in 0..n {
            let y = i % cfg.num_classes;
            let noise = Tensor::randn(&[cfg.input_dim], cfg.noise_std, &mut rng);
            split.xs.push(means[y].zip_map(&noise, |m, e| m + e).expect("same shape"));
            split.ys.push(y);
        }
        split
    };
    let mut train = draw(cfg.n_train);
    let mut test = draw(cfg.n_test);
    if cfg.unit_range {
        let all = train.xs.iter().chain(&test.xs);
        let (lo, hi) = all
            .flat_map(|x| x.data())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for x in train.xs.iter_mut().chain(test.xs.iter_mut()) {
            x.data_mut().iter_mut().for_each(|v| *v = (*v - lo) / span);
        }
    }
    Ok(SyntheticTask {
        config: cfg.clone(),
        means,
        train,
        test,
    })
}

impl SyntheticTask {
    /// Per-coordinate standard deviation pooled over the training split.
    pub fn coordinate_std(&self) -> f64 {
        let n = self.train.len();
        if n < 2 {
            return 0.0;
        }
        let d = self.config.input_dim;
        let mut total = 0.0;
        for j in 0..d {
            let mean = self.train.xs.iter().map(|x| x.data()[j]).sum::<f64>() / n as f64;
            total += self
                .train
                .xs
                .iter()
                .map(|x| (x.data()[j] - mean).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
        }
        (total / d as f64).sqrt()
    }
}

#[derive(Serialize, Deserialize)]
struct TaskFile {
    format: String,
    version: u32,
    task: SyntheticTask,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub fn to_json(task: &SyntheticTask) -> String {
    serde_json::to_string(&TaskFile {
        format: FORMAT.into(),
        version: VERSION,
        task: task.clone(),
    })
    .expect("task serializes")
}

pub fn from_json(text: &str) -> Result<SyntheticTask> {
    let header: Header = serde_json::from_str(text).map_err(|e| Error::from_json(e, text))?;
    if header.format != FORMAT {
        return Err(Error::Parse {
            offset: 0,
            message: format!("not a task file: format {:?}", header.format),
        });
    }
    if header.version != VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: VERSION,
        });
    }
    let file: TaskFile = serde_json::from_str(text).map_err(|e| Error::from_json(e, text))?;
    Ok(file.task)
}

pub fn save_task(task: &SyntheticTask, path: &Path) -> Result<()> {
    persist::write_atomic(path, to_json(task).as_bytes())
}

pub fn load_task(path: &Path) -> Result<SyntheticTask> {
    from_json(&persist::read_to_string(path)?)
}
