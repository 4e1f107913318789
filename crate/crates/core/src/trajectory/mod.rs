//! Snapshot-ensemble training along one optimization trajectory, the
//! independently trained ensemble baseline, and the homogenization measure.

mod schedule;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use schedule::{ccls_lr, CclsConfig, Schedule};

use crate::error::{Error, Result};
use crate::grid::{Image, ProbMap};
use crate::gridnet::{ensemble_forward, read_checkpoint, write_checkpoint, Architecture, GridNet, Gradients, Sgd};
use crate::labels::SparseLabels;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub momentum: f64,
    /// Images per iteration; capped at the number of labeled images.
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Rescale the batch gradient when its L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            batch_size: 1,
            shuffle_seed: 0,
            clip_norm: Some(0.2),
        }
    }
}

/// An image with its supervised pixels flattened to `(index, target)`.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub image: &'a Image,
    pub targets: Vec<(usize, f64)>,
}

impl<'a> Example<'a> {
    pub fn new(image: &'a Image, labels: &SparseLabels) -> Result<Self> {
        if (image.height(), image.width()) != (labels.height(), labels.width()) {
            return Err(Error::shape(
                format!("{}x{} labels", image.height(), image.width()),
                format!("{}x{}", labels.height(), labels.width()),
            ));
        }
        Ok(Self {
            image,
            targets: labels.targets(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub snapshots: Vec<GridNet>,
    pub snapshot_iterations: Vec<usize>,
    /// Weight updates performed in this run, counted in images.
    pub update_count: u64,
    pub schedule_trace: Vec<f64>,
    /// Mean training loss of each iteration.
    pub loss_trace: Vec<f64>,
}

impl Trajectory {
    pub fn last(&self) -> &GridNet {
        self.snapshots.last().expect("trajectory has at least one snapshot")
    }

    pub fn predict(&self, image: &Image) -> Result<ProbMap> {
        ensemble_predict(&self.snapshots, image)
    }

    /// One checkpoint per snapshot plus `index.tsv` with `cycle<TAB>iteration<TAB>eta`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = String::new();
        for (k, (model, &it)) in self.snapshots.iter().zip(&self.snapshot_iterations).enumerate() {
            write_checkpoint(model, &dir.join(format!("snapshot_{k}.gnet")))?;
            let eta = self.schedule_trace.get(it.wrapping_sub(1)).copied().unwrap_or(f64::NAN);
            index += &format!("{}\t{it}\t{eta}\n", k + 1);
        }
        let path = dir.join("index.tsv");
        std::fs::write(&path, index).map_err(|e| Error::io(&path, e))
    }

    /// Reads back the snapshots written by [`Trajectory::save`]. Traces are
    /// only partially recoverable: the returned schedule trace holds the
    /// snapshot learning rates, the loss trace is empty and `update_count` is
    /// the lifetime counter of the last snapshot.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.tsv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut snapshots = Vec::new();
        let mut snapshot_iterations = Vec::new();
        let mut etas = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::Parse {
                offset: start,
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(err("expected cycle, iteration and eta"));
            }
            let cycle: usize = f[0].parse().map_err(|_| err("bad cycle"))?;
            if cycle != snapshots.len() + 1 {
                return Err(err("cycles out of order"));
            }
            snapshot_iterations.push(f[1].parse().map_err(|_| err("bad iteration"))?);
            etas.push(f[2].parse().map_err(|_| err("bad eta"))?);
            snapshots.push(read_checkpoint(&dir.join(format!("snapshot_{}.gnet", cycle - 1)))?);
        }
        if snapshots.is_empty() {
            return Err(Error::InvalidInput(format!("{} lists no snapshots", path.display())));
        }
        let update_count = snapshots.last().map_or(0, GridNet::update_count);
        Ok(Self {
            snapshots,
            snapshot_iterations,
            update_count,
            schedule_trace: etas,
            loss_trace: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleBaseline {
    pub members: Vec<GridNet>,
    pub update_count: u64,
}

impl EnsembleBaseline {
    pub fn predict(&self, image: &Image) -> Result<ProbMap> {
        ensemble_predict(&self.members, image)
    }
}

/// Mean of the members' probability maps.
pub fn ensemble_predict(models: &[GridNet], image: &Image) -> Result<ProbMap> {
    ensemble_forward(models, image)
}

fn clip(grads: &mut Gradients, max_norm: Option<f64>) {
    let Some(max_norm) = max_norm else { return };
    let norm = grads.values.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.values.iter_mut().for_each(|g| *g *= s);
    }
}

/// Trains a copy of `model` under `schedule`, returning the
/// snapshots taken at the end of every cycle. The live model is never
/// re-initialized between cycles.
pub fn train(mut model: GridNet, examples: &[Example<'_>], schedule: &Schedule, opts: &TrainOptions) -> Result<Trajectory> {
    schedule.validate()?;
    if !(opts.momentum >= 0.0 && opts.momentum < 1.0) {
        return Err(Error::Config(format!("momentum {} outside [0,1)", opts.momentum)));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let pool: Vec<&Example<'_>> = examples.iter().filter(|e| !e.targets.is_empty()).collect();
    if pool.is_empty() {
        return Err(Error::InvalidInput("no labeled pixels to train on".into()));
    }
    let batch = opts.batch_size.min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.shuffle_seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut cursor = order.len();

    let total = schedule.total_iterations();
    let snapshot_at = schedule.snapshot_iterations();
    let mut snapshots = Vec::with_capacity(snapshot_at.len());
    let mut schedule_trace = Vec::with_capacity(total);
    let mut loss_trace = Vec::with_capacity(total);
    let mut sgd = Sgd::new(&model);
    let start_count = model.update_count();

    for i in 1..=total {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(pool[order[cursor]]);
            cursor += 1;
        }
        let results = picked
            .par_iter()
            .map(|e| model.backprop(e.image, &e.targets, false))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = Gradients::zeros(model.params().len());
        let mut loss = 0.0;
        for r in &results {
            grads.accumulate(&r.weights);
            loss += r.loss;
        }
        clip(&mut grads, opts.clip_norm);
        let lr = schedule.lr(i)?;
        sgd.step(&mut model, &grads, lr, opts.momentum)?;
        schedule_trace.push(lr);
        loss_trace.push(loss / results.len() as f64);
        if snapshot_at.contains(&i) {
            snapshots.push(model.clone());
        }
    }
    Ok(Trajectory {
        snapshots,
        snapshot_iterations: snapshot_at,
        update_count: model.update_count() - start_count,
        schedule_trace,
        loss_trace,
    })
}

/// Cyclic-cosine training with one snapshot per cycle.
pub fn train_with_snapshots(model: GridNet, examples: &[Example<'_>], cfg: &CclsConfig, opts: &TrainOptions) -> Result<Trajectory> {
    train(model, examples, &Schedule::Cyclic(*cfg), opts)
}

/// Independently initialized and trained members at a constant rate.
#[allow(clippy::too_many_arguments)]
pub fn train_den(
    seeds: &[u64],
    arch: &Architecture,
    in_channels: usize,
    examples: &[Example<'_>],
    iterations: usize,
    lr: f64,
    opts: &TrainOptions,
) -> Result<EnsembleBaseline> {
    if seeds.len() < 2 {
        return Err(Error::InvalidInput(format!("ensemble needs at least 2 members, got {}", seeds.len())));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput("ensemble seeds must be distinct".into()));
    }
    let members = seeds
        .par_iter()
        .map(|&seed| {
            let model = GridNet::new(arch, in_channels, seed);
            if iterations == 0 {
                return Ok(model);
            }
            let schedule = Schedule::Constant {
                lr,
                total_iterations: iterations,
                cycles: 1,
            };
            let opts = TrainOptions {
                shuffle_seed: derive_seed(opts.shuffle_seed, seed),
                ..*opts
            };
            Ok(train(model, examples, &schedule, &opts)?.snapshots.pop().expect("one cycle"))
        })
        .collect::<Result<Vec<_>>>()?;
    let update_count = members.iter().map(GridNet::update_count).sum();
    Ok(EnsembleBaseline { members, update_count })
}

/// Mean absolute output change between consecutive models, averaged over
/// the `τ = models.len() - 1` pairs and over the probe images.
pub fn homogenization(models: &[GridNet], probes: &[Image]) -> Result<f64> {
    if models.len() < 2 {
        return Err(Error::InvalidInput("homogenization needs at least 2 snapshots".into()));
    }
    if probes.is_empty() {
        return Err(Error::InvalidInput("homogenization needs at least one probe image".into()));
    }
    let per_probe = probes
        .par_iter()
        .map(|img| {
            let outs = models.iter().map(|m| m.forward(img)).collect::<Result<Vec<_>>>()?;
            let sum: f64 = outs
                .windows(2)
                .map(|w| {
                    let n = w[0].data().len() as f64;
                    w[0].data().iter().zip(w[1].data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
                })
                .sum();
            Ok(sum / (models.len() - 1) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_probe.iter().sum::<f64>() / probes.len() as f64)
}
