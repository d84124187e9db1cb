//! Desk-scale training: Adam with global-norm clipping, PIT SI-SDR loss,
//! plateau learning-rate halving, evaluation, and resumable checkpoints.

mod eval;
mod state;

pub(crate) use eval::csv_err;
pub use eval::{evaluate, EvalReport, EvalRow};
pub use state::{load_checkpoint, save_checkpoint, Adam, TrainState};

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mixsim::{derive_seed, dynamic_remix, Manifest, MixtureExample};
use crate::numcore::Grads;
use crate::objective::pit_loss_with_grad;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub dynamic_mixing: bool,
    /// Evaluate every this many epochs.
    pub eval_interval: usize,
    /// Evaluations without improvement before the learning rate is halved.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            seed: 0,
            dynamic_mixing: false,
            eval_interval: 1,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_interval == 0 || self.patience == 0 {
            return Err(Error::Config(
                "train.epochs, train.batch_size, train.eval_interval and train.patience must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!(
                "train.clip_norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

/// One optimizer step, as recorded in the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: Vec<StepRecord>,
}

fn item_gradient(state: &TrainState, ex: &MixtureExample) -> Result<(f64, Grads)> {
    let model = &state.model;
    let pass = model.forward(&ex.mixture)?;
    let (outcome, g_est) = pit_loss_with_grad(&pass.estimates, &ex.direct_targets)?;
    let mut grads = model.params.zero_grads();
    model.backward(&pass.cache, &g_est, &mut grads)?;
    Ok((outcome.loss, grads))
}

/// Gradient of the mean PIT loss over a batch. Items run in parallel and are
/// summed in batch order.
pub fn batch_gradient(state: &TrainState, batch: &[&MixtureExample]) -> Result<(f64, Grads)> {
    let items = batch
        .par_iter()
        .map(|ex| item_gradient(state, ex))
        .collect::<Result<Vec<_>>>()?;
    let mut total = state.model.params.zero_grads();
    let mut loss = 0.0;
    for (l, g) in &items {
        loss += l;
        total.accumulate(g);
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    Ok((loss * scale, total))
}

/// One optimizer step on `batch`.
pub fn train_step(state: &mut TrainState, batch: &[&MixtureExample], cfg: &TrainConfig) -> Result<StepRecord> {
    let (loss, mut grads) = batch_gradient(state, batch)?;
    let grad_norm = grads.clip_global_norm(cfg.clip_norm);
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Diverged {
            epoch: state.epoch,
            step: state.step as usize,
            reason: format!("loss {loss}, gradient norm {grad_norm}"),
        });
    }
    state.adam.step(&mut state.model.params, &grads, state.lr);
    state.step += 1;
    Ok(StepRecord {
        epoch: state.epoch,
        step: state.step,
        loss,
        lr: state.lr,
        grad_norm,
    })
}

/// Order in which epoch `epoch` visits `n` examples.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
    idx
}

/// One shuffled pass over `examples`; advances the epoch counter.
pub fn train_epoch(state: &mut TrainState, examples: &[MixtureExample], cfg: &TrainConfig) -> Result<EpochSummary> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("train_epoch"));
    }
    let order = epoch_order(cfg.seed, state.epoch, examples.len());
    let mut steps = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&MixtureExample> = chunk.iter().map(|&i| &examples[i]).collect();
        steps.push(train_step(state, &batch, cfg)?);
    }
    let mean_loss = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len() as f64;
    let summary = EpochSummary {
        epoch: state.epoch,
        mean_loss,
        steps,
    };
    state.epoch += 1;
    Ok(summary)
}

/// Appends step records to a CSV log, writing the header when the file is new.
pub fn append_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if fresh {
        writeln!(w, "epoch,step,loss,lr,grad_norm").map_err(io)?;
    }
    for r in records {
        writeln!(w, "{},{},{},{},{}", r.epoch, r.step, r.loss, r.lr, r.grad_norm).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Where a training run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.dir.join("eval.csv")
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochSummary>,
    /// `(epoch, report)` for every evaluation that ran.
    pub evaluations: Vec<(usize, EvalReport)>,
}

/// Trains until `cfg.epochs` epochs have completed in total, evaluating on
/// `eval` every `cfg.eval_interval` epochs. With `paths`, appends the step log
/// and writes `last.ckpt` after every epoch and `best.ckpt` whenever the eval
/// ΔSISDR improves. A resumed state continues from its epoch counter.
pub fn train(
    state: &mut TrainState,
    train_set: &Manifest,
    eval: &[MixtureExample],
    cfg: &TrainConfig,
    paths: Option<&RunPaths>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(p) = paths {
        std::fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
    }
    let fixed = if cfg.dynamic_mixing {
        None
    } else {
        Some(train_set.realize_all()?)
    };
    let mut outcome = TrainOutcome {
        epochs: Vec::new(),
        evaluations: Vec::new(),
    };
    while state.epoch < cfg.epochs {
        let remixed;
        let examples = match &fixed {
            Some(ex) => ex,
            None => {
                remixed = dynamic_remix(train_set, state.epoch as u64).realize_all()?;
                &remixed
            }
        };
        let summary = train_epoch(state, examples, cfg)?;
        if let Some(p) = paths {
            append_log(&p.log(), &summary.steps)?;
        }
        if !eval.is_empty() && state.epoch.is_multiple_of(cfg.eval_interval) {
            let report = evaluate(&state.model, eval)?;
            let improved = state.record_eval(report.mean_delta, cfg.patience);
            if let Some(p) = paths {
                if improved {
                    save_checkpoint(state, &p.best())?;
                }
                report.write_csv(&p.eval_report())?;
            }
            outcome.evaluations.push((state.epoch, report));
        }
        if let Some(p) = paths {
            save_checkpoint(state, &p.last())?;
            if !p.best().exists() {
                save_checkpoint(state, &p.best())?;
            }
        }
        outcome.epochs.push(summary);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtcn::DtcnConfig;
    use crate::mixsim::{simulate_manifest, SimConfig};

    fn tiny() -> DtcnConfig {
        DtcnConfig {
            n: 16,
            b: 8,
            h: 16,
            x: 2,
            r: 1,
            ..DtcnConfig::toy()
        }
    }

    fn data(count: usize) -> Manifest {
        let cfg = SimConfig {
            count,
            length: 800,
            t60_min: 0.05,
            t60_max: 0.1,
            ..SimConfig::default()
        };
        simulate_manifest(&cfg, 5).unwrap()
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let examples = data(2).realize_all().unwrap();
        let batch: Vec<&MixtureExample> = examples.iter().collect();
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(&tiny(), 1, cfg.learning_rate).unwrap();
        let mut losses = Vec::new();
        for _ in 0..6 {
            losses.push(train_step(&mut state, &batch, &cfg).unwrap().loss);
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn clipping_bounds_the_update_norm() {
        let examples = data(2).realize_all().unwrap();
        let batch: Vec<&MixtureExample> = examples.iter().collect();
        let state = TrainState::new(&tiny(), 1, 1e-3).unwrap();
        let (_, mut g) = batch_gradient(&state, &batch).unwrap();
        let before = g.global_norm();
        let bound = before / 3.0;
        g.clip_global_norm(bound);
        assert!(g.global_norm() <= bound + 1e-9);
    }

    #[test]
    fn shuffles_depend_on_seed_and_epoch() {
        assert_eq!(epoch_order(1, 2, 10), epoch_order(1, 2, 10));
        assert_ne!(epoch_order(1, 2, 10), epoch_order(1, 3, 10));
        let mut o = epoch_order(4, 0, 10);
        o.sort_unstable();
        assert_eq!(o, (0..10).collect::<Vec<_>>());
    }
}
