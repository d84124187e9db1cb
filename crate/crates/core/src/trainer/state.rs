use std::path::Path;

use crate::dtcn::{Checkpoint, DtcnConfig, SeparatorModel};
use crate::error::{Error, Result};
use crate::numcore::{Grads, ParamStore, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Bias-corrected Adam update.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads.slots())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Model, optimizer moments and schedule counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: SeparatorModel,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub lr: f64,
    /// Best evaluation ΔSISDR so far (dB).
    pub best_delta: f64,
    /// Evaluations since the last improvement.
    pub stall: usize,
}

impl TrainState {
    pub fn new(cfg: &DtcnConfig, seed: u64, lr: f64) -> Result<Self> {
        Ok(Self::from_model(SeparatorModel::build(cfg, seed)?, lr))
    }

    pub fn from_model(model: SeparatorModel, lr: f64) -> Self {
        let adam = Adam::new(&model.params);
        Self {
            model,
            adam,
            epoch: 0,
            step: 0,
            lr,
            best_delta: f64::NEG_INFINITY,
            stall: 0,
        }
    }

    /// Records an evaluation result; halves the learning rate after `patience`
    /// evaluations without improvement. Returns whether this is a new best.
    pub fn record_eval(&mut self, delta: f64, patience: usize) -> bool {
        if delta > self.best_delta {
            self.best_delta = delta;
            self.stall = 0;
            true
        } else {
            self.stall += 1;
            if self.stall >= patience {
                self.lr *= 0.5;
                self.stall = 0;
            }
            false
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint(self.step);
        ckpt.metadata.extend([
            ("epoch".to_string(), self.epoch.to_string()),
            ("lr".to_string(), self.lr.to_string()),
            ("best_delta".to_string(), self.best_delta.to_string()),
            ("stall".to_string(), self.stall.to_string()),
            ("adam_t".to_string(), self.adam.t.to_string()),
        ]);
        for (i, (name, _)) in self.model.params.iter().enumerate() {
            ckpt.tensors.push((format!("adam.m.{name}"), self.adam.m[i].clone()));
        }
        for (i, (name, _)) in self.model.params.iter().enumerate() {
            ckpt.tensors.push((format!("adam.v.{name}"), self.adam.v[i].clone()));
        }
        ckpt
    }

    /// Restores a state; a checkpoint holding only model weights starts with
    /// fresh optimizer moments.
    pub fn from_checkpoint(ckpt: &Checkpoint, default_lr: f64) -> Result<Self> {
        let model = SeparatorModel::from_checkpoint(ckpt)?;
        let mut state = Self::from_model(model, default_lr);
        state.step = ckpt.step;
        let meta = |k: &str| ckpt.meta(k);
        let parse_err = |k: &str| Error::Corrupt {
            path: "<checkpoint>".into(),
            reason: format!("bad metadata value for {k}"),
        };
        macro_rules! read {
            ($key:literal, $field:expr) => {
                if let Some(v) = meta($key) {
                    $field = v.parse().map_err(|_| parse_err($key))?;
                }
            };
        }
        read!("epoch", state.epoch);
        read!("lr", state.lr);
        read!("best_delta", state.best_delta);
        read!("stall", state.stall);
        read!("adam_t", state.adam.t);
        let names: Vec<String> = state.model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            if let Some(m) = ckpt.tensor(&format!("adam.m.{name}")) {
                check_shape(m, &state.adam.m[i], name)?;
                state.adam.m[i] = m.clone();
            }
            if let Some(v) = ckpt.tensor(&format!("adam.v.{name}")) {
                check_shape(v, &state.adam.v[i], name)?;
                state.adam.v[i] = v.clone();
            }
        }
        Ok(state)
    }
}

fn check_shape(got: &Tensor, want: &Tensor, name: &str) -> Result<()> {
    if got.shape() != want.shape() {
        return Err(Error::dim(
            "load_checkpoint",
            format!("{name}: {:?}", want.shape()),
            format!("{:?}", got.shape()),
        ));
    }
    Ok(())
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    state.to_checkpoint().save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    TrainState::from_checkpoint(
        &Checkpoint::load(path)?,
        crate::trainer::TrainConfig::default().learning_rate,
    )
}
