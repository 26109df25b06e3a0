//! Adam and a seeded mini-batch training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Adam without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = |p: &ParamStore| p.ids().map(|id| Tensor::zeros(p.get(id).shape().to_vec())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update from the gradients accumulated in `params`.
    ///
    /// A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match the parameter store".into()));
        }
        for id in params.ids() {
            if !params.grad(id).is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {}", params.name(id))));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.values_and_grads_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pk, gk), mk), vk) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let mh = *mk / bc1;
                let vh = *vk / bc2;
                *pk -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so that their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let total: f64 = params
        .ids()
        .map(|id| params.grad(id).data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        params.scale_grads(s);
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Stop as soon as one step's loss falls below this value.
    #[serde(default)]
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch: 100,
            epochs: 30,
            seed: 0,
            grad_clip: None,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.batch == 0 {
            return Err(Error::Param("lr must be >= 0 and batch size positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Param("grad clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Loss history of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// One entry per optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean step loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Failure during [`train`]; the network keeps the last parameters that
/// produced a finite loss and gradient.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub report: TrainReport,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training stopped after {} steps: {}", self.report.step_losses.len(), self.error)
    }
}

impl std::error::Error for TrainFailure {}

/// Mini-batch Adam over `n_examples` items.
///
/// `loss` builds the scalar loss of one batch (given example indices) on the
/// tape; the rng is the run's single seeded stream, also used for shuffling.
/// `on_step(step, loss)` runs after every update.
pub fn train<L, S>(
    net: &mut Network,
    n_examples: usize,
    cfg: &TrainConfig,
    mut loss: L,
    mut on_step: S,
) -> std::result::Result<TrainReport, TrainFailure>
where
    L: FnMut(&mut Tape, &Network, &[usize], &mut ChaCha8Rng) -> Result<Var>,
    S: FnMut(usize, f64),
{
    let mut report = TrainReport::default();
    let fail = |error: Error, report: &TrainReport| TrainFailure {
        error,
        report: report.clone(),
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, &report));
    }
    if n_examples == 0 {
        return Err(fail(Error::Param("training set is empty".into()), &report));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&net.params, cfg.lr);
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut last_good = None;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for batch in order.chunks(cfg.batch) {
            // Parameters that produced the previous finite loss and gradient.
            let good = net.params.clone();
            let step = (|| {
                let mut tape = Tape::new();
                let l = loss(&mut tape, net, batch, &mut rng)?;
                let value = l.value().item()?;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("loss became {value}")));
                }
                let grads = tape.backward(&l)?;
                if grads.params().any(|(_, g)| !g.is_finite()) {
                    return Err(Error::Numeric("gradient is not finite".into()));
                }
                net.params.zero_grad();
                grads.accumulate_into(&mut net.params);
                if let Some(c) = cfg.grad_clip {
                    clip_grad_norm(&mut net.params, c);
                }
                opt.step(&mut net.params)?;
                Ok(value)
            })();
            let value = match step {
                Ok(v) => v,
                Err(e) => {
                    net.params = last_good.take().unwrap_or(good);
                    return Err(fail(e, &report));
                }
            };
            last_good = Some(good);
            report.step_losses.push(value);
            on_step(report.step_losses.len(), value);
            total += value;
            count += 1;
            if cfg.target_loss.is_some_and(|t| value < t) {
                report.epoch_losses.push(total / count as f64);
                return Ok(report);
            }
        }
        report.epoch_losses.push(total / count as f64);
    }
    Ok(report)
}

/// Write `step,loss` rows (steps counted from 1).
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{},{}", i + 1, l)?;
    }
    f.flush()?;
    Ok(())
}
