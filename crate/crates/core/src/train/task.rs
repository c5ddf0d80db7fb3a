use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Streams;
use crate::tensor::{matmul, DenseTensor};

/// Matrix roles inside one block, in forward order.
pub const ROLES: [&str; 2] = ["proj", "ffn"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Rank of the teacher's additive perturbation.
    pub teacher_rank: usize,
    /// Spectral scale of each perturbation.
    pub teacher_scale: f64,
    pub perturb_roles: Vec<String>,
    /// Layers whose `perturb_roles` matrices are perturbed; `None` means all.
    pub perturb_layers: Option<Vec<usize>>,
    pub noise_std: f64,
    pub train_size: usize,
    pub eval_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 32,
            teacher_rank: 2,
            teacher_scale: 1.0,
            perturb_roles: vec!["proj".into()],
            perturb_layers: None,
            noise_std: 0.01,
            train_size: 4096,
            eval_size: 1024,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::Config("task sizes must be positive".into()));
        }
        if let Some(r) = self.perturb_roles.iter().find(|r| !ROLES.contains(&r.as_str())) {
            return Err(Error::Config(format!("unknown role {r:?}")));
        }
        if self.teacher_rank == 0 || self.teacher_rank > self.hidden {
            return Err(Error::Config("teacher_rank must be in 1..=hidden".into()));
        }
        if !(self.noise_std >= 0.0) || !self.teacher_scale.is_finite() {
            return Err(Error::Config("noise_std and teacher_scale must be finite, noise_std >= 0".into()));
        }
        Ok(())
    }
}

/// Stack of `proj -> tanh -> ffn` blocks with frozen square weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    hidden: usize,
    blocks: Vec<[DenseTensor; 2]>,
}

impl Backbone {
    pub fn new(hidden: usize, blocks: Vec<[DenseTensor; 2]>) -> Result<Self> {
        for b in &blocks {
            for w in b {
                if w.dims() != [hidden, hidden] {
                    return Err(Error::ShapeMismatch(format!(
                        "block weight {:?}, hidden {hidden}",
                        w.dims()
                    )));
                }
            }
        }
        Ok(Self { hidden, blocks })
    }

    pub fn random(streams: &Streams, layers: usize, hidden: usize) -> Self {
        let std = 1.0 / (hidden as f64).sqrt();
        let blocks = (0..layers)
            .map(|l| {
                ROLES.map(|role| streams.normal("backbone", &format!("layer{l}.{role}"), &[hidden, hidden], std))
            })
            .collect();
        Self { hidden, blocks }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn weight(&self, layer: usize, role: usize) -> &DenseTensor {
        &self.blocks[layer][role]
    }

    pub fn weight_mut(&mut self, layer: usize, role: usize) -> &mut DenseTensor {
        &mut self.blocks[layer][role]
    }

    /// `(base_ref, matrix)` for every weight in forward order.
    pub fn named_weights(&self) -> impl Iterator<Item = (String, &DenseTensor)> {
        self.blocks.iter().enumerate().flat_map(|(l, b)| {
            b.iter()
                .enumerate()
                .map(move |(r, w)| (format!("layer{l}.{}", ROLES[r]), w))
        })
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().flatten().map(DenseTensor::len).sum()
    }

    /// Forward pass for `x` of shape `[hidden, n]`.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let mut h = x.clone();
        for [proj, ffn] in &self.blocks {
            let z = matmul(proj, &h)?.map(f64::tanh);
            h = matmul(ffn, &z)?;
        }
        Ok(h)
    }
}

/// A dataset split, stored sample-major as `[n, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: DenseTensor,
    pub targets: DenseTensor,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Columns-as-samples `[hidden, k]` matrices for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(DenseTensor, DenseTensor)> {
        Ok((gather_columns(&self.inputs, indices)?, gather_columns(&self.targets, indices)?))
    }

    pub fn all(&self) -> Result<(DenseTensor, DenseTensor)> {
        Ok((self.inputs.transpose()?, self.targets.transpose()?))
    }
}

fn gather_columns(rows: &DenseTensor, indices: &[usize]) -> Result<DenseTensor> {
    let (_, h) = rows.shape2()?;
    let k = indices.len();
    let mut out = vec![0.0; h * k];
    for (c, &i) in indices.iter().enumerate() {
        for r in 0..h {
            out[r * k + c] = rows.data()[i * h + r];
        }
    }
    DenseTensor::new(vec![h, k], out)
}

/// Frozen backbone, teacher network and train/eval data drawn from the teacher.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub backbone: Backbone,
    pub teacher: Backbone,
    pub train: Split,
    pub eval: Split,
    streams: Streams,
}

impl SyntheticTask {
    pub fn generate(config: &TaskConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let streams = Streams::new(seed);
        let h = config.hidden;
        let backbone = Backbone::random(&streams, config.layers, h);
        let mut teacher = backbone.clone();
        for l in 0..config.layers {
            if let Some(layers) = &config.perturb_layers {
                if !layers.contains(&l) {
                    continue;
                }
            }
            for (r, role) in ROLES.iter().enumerate() {
                if !config.perturb_roles.iter().any(|p| p == role) {
                    continue;
                }
                let id = format!("layer{l}.{role}");
                let std = 1.0 / (h as f64).sqrt();
                let u = streams.normal("teacher-u", &id, &[h, config.teacher_rank], std);
                let v = streams.normal("teacher-v", &id, &[config.teacher_rank, h], std);
                let scale = config.teacher_scale / (config.teacher_rank as f64).sqrt();
                let delta = matmul(&u, &v)?.scale(scale);
                let w = teacher.weight_mut(l, r);
                *w = w.add(&delta)?;
            }
        }
        let mut task = Self {
            config: config.clone(),
            backbone,
            teacher,
            train: Split {
                inputs: DenseTensor::scalar(0.0),
                targets: DenseTensor::scalar(0.0),
            },
            eval: Split {
                inputs: DenseTensor::scalar(0.0),
                targets: DenseTensor::scalar(0.0),
            },
            streams,
        };
        task.train = task.sample("train", config.train_size)?;
        task.eval = task.sample("eval", config.eval_size)?;
        Ok(task)
    }

    /// Fresh teacher-labelled samples from the named stream.
    pub fn sample(&self, name: &str, n: usize) -> Result<Split> {
        let h = self.config.hidden;
        let inputs = self.streams.normal("inputs", name, &[n, h], 1.0);
        let clean = self.teacher.forward(&inputs.transpose()?)?.transpose()?;
        let noise = self.streams.normal("noise", name, &[n, h], self.config.noise_std);
        Ok(Split {
            inputs,
            targets: clean.add(&noise)?,
        })
    }

    pub fn streams(&self) -> &Streams {
        &self.streams
    }
}
