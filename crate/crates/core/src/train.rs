//! Training loop: Adam over the trainable parameters with per-epoch
//! exponential learning-rate decay, seeded shuffling, per-epoch loss
//! records and a frozen-weight hash check. Batches share one graph so
//! gradients accumulate across batch members in a single backward pass.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::seed_stream;
use crate::synth::Sample;
use crate::tensor::Tensor;

/// Adam with bias correction; state is keyed by parameter name so it
/// survives graph rebuilds.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over `(name, gradient)` pairs at the given learning rate.
    pub fn step(&mut self, model: &mut Model, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            for ((mv, vv), gv) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(grad.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            }
            let param = model.store.get_mut(name)?;
            if param.shape() != grad.shape() {
                return Err(Error::Shape(format!(
                    "gradient for '{name}' has shape {:?}, parameter is {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            for ((pv, mv), vv) in param
                .data_mut()
                .iter_mut()
                .zip(m.data())
                .zip(v.data())
            {
                let mhat = mv / b1c;
                let vhat = vv / b2c;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

impl EpochRecord {
    /// One JSON-lines entry, e.g. `{"epoch":1,"loss":0.5,"lr":0.0001}`.
    pub fn jsonl(&self) -> String {
        format!(
            "{{\"epoch\":{},\"loss\":{},\"lr\":{}}}",
            self.epoch, self.loss, self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub trainable_params: usize,
    pub frozen_hash: u64,
}

impl TrainReport {
    pub fn first_epoch_loss(&self) -> f64 {
        self.records.first().map(|r| r.loss).unwrap_or(f64::NAN)
    }

    pub fn best_epoch_loss(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.loss)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Train the model's trainable parameters on the given samples.
///
/// `exclude_domain` enforces protocol hygiene: any sample tagged with that
/// domain aborts the run before a single step. The frozen-weight hash is
/// verified after the final epoch.
pub fn train(
    model: &mut Model,
    samples: &[Sample],
    cfg: &RunConfig,
    exclude_domain: Option<&str>,
    mut log_sink: Option<&mut dyn std::io::Write>,
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::Config("train: empty training set".into()));
    }
    if let Some(excluded) = exclude_domain {
        for (i, s) in samples.iter().enumerate() {
            if s.domain == excluded {
                return Err(Error::Protocol(format!(
                    "held-out domain '{excluded}' appears in the training set (sample {i})"
                )));
            }
        }
    }
    let frozen_before = model.frozen_hash();
    let trainable_params = model.trainable_parameter_count();
    let targets: Vec<Tensor> = samples
        .iter()
        .map(|s| model.target_from_instances(&s.instances))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        let mut rng = seed_stream(cfg.seed, &format!("shuffle:{epoch}"));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let bound = model.bind(&mut g)?;
            let mut total = None;
            for &i in batch {
                let s = &samples[i];
                let loss =
                    model.forward_loss(&mut g, &bound, &s.image, &s.points, &targets[i])?;
                total = Some(match total {
                    None => loss,
                    Some(t) => g.add(t, loss)?,
                });
            }
            let total = total.expect("non-empty batch");
            let batch_loss = g.mul_scalar(total, 1.0 / batch.len() as f64);
            let loss_value = g.value(batch_loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} batch {batch_idx} (samples {batch:?}): loss {loss_value}"
                )));
            }
            epoch_loss += loss_value * batch.len() as f64;
            let mut grads = g.backward(batch_loss)?;
            let mut updates = Vec::with_capacity(bound.trainable.len());
            for (name, node) in &bound.trainable {
                if let Some(grad) = grads.take(*node) {
                    updates.push((name.clone(), grad));
                }
            }
            adam.step(model, &updates, lr)?;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: epoch_loss / samples.len() as f64,
            lr,
        };
        if let Some(sink) = log_sink.as_deref_mut() {
            writeln!(sink, "{}", record.jsonl())?;
        }
        records.push(record);
    }
    let frozen_after = model.frozen_hash();
    if frozen_after != frozen_before {
        return Err(Error::Protocol(
            "frozen encoder weights changed during training".into(),
        ));
    }
    Ok(TrainReport {
        records,
        trainable_params,
        frozen_hash: frozen_after,
    })
}

/// Abort check used by the loop; split out so the error path is testable.
pub fn ensure_finite_loss(epoch: usize, batch: usize, value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "epoch {epoch} batch {batch}: loss {value}"
        )));
    }
    Ok(value)
}
