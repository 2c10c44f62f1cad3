use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BnMode, CpieModel, TrainConfig};
use crate::error::{Error, Result};
use crate::fixtures::item_seed;
use crate::image::ImagePlane;
use crate::pairgen::{generate_pair, AugmentConfig, MaskMode, RawSample, SamplePair};
use crate::tensor::Graph;

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl Adam {
    pub fn new(model: &CpieModel) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn update(&mut self, model: &mut CpieModel, grads: &[Vec<f32>], lr: f32, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(self.t.min(i32::MAX as u64) as i32);
        for (k, p) in model.params_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = grads[k][i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f32,
    pub loss: f32,
}

impl StepLog {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{:e}\t{:.6}", self.step, self.epoch, self.lr, self.loss)
    }
}

pub struct Trainer {
    pub model: CpieModel,
    pub adam: Adam,
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: CpieModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model);
        Ok(Self {
            model,
            adam,
            config,
            step: 0,
        })
    }

    pub fn resume(model: CpieModel, adam: Adam, config: TrainConfig, step: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            adam,
            config,
            step,
        })
    }

    pub fn steps_per_epoch(&self, n_raw: usize) -> usize {
        if self.config.steps_per_epoch > 0 {
            self.config.steps_per_epoch
        } else {
            n_raw.div_ceil(self.config.batch_size).max(1)
        }
    }

    /// Loss and mean gradient over the batch; running statistics are folded
    /// in per pair.
    pub fn gradients(&mut self, batch: &[SamplePair]) -> Result<(f32, Vec<Vec<f32>>)> {
        let mut grads: Vec<Vec<f32>> = self.model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        let mut total = 0.0f32;
        let scale = 1.0 / batch.len() as f32;
        let weights = self.model.weights::<f32>();
        for pair in batch {
            let mut g = Graph::<f32>::new();
            let mut b = self.model.bind(&mut g, &weights, BnMode::Train)?;
            let loss = b.pair_loss(&mut g, pair)?;
            let value = g.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step: self.step, value });
            }
            g.backward(loss)?;
            for (acc, &id) in grads.iter_mut().zip(b.param_ids()) {
                if let Some(gr) = g.grad(id) {
                    acc.iter_mut().zip(gr).for_each(|(a, &x)| *a += scale * x);
                }
            }
            let stats = std::mem::take(&mut b.stats);
            drop(b);
            self.model.update_running(&stats);
            total += value * scale;
        }
        Ok((total, grads))
    }

    /// One optimizer step on a batch of pairs at the given learning rate.
    pub fn train_step(&mut self, batch: &[SamplePair], lr: f32) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (loss, grads) = self.gradients(batch)?;
        self.adam.update(&mut self.model, &grads, lr, &self.config);
        self.step += 1;
        Ok(loss)
    }

    /// Optimizer steps in the full schedule.
    pub fn total_steps(&self, n_raw: usize) -> u64 {
        self.steps_per_epoch(n_raw) as u64 * self.config.epochs as u64
    }

    /// Trains with pairs generated online from the raw samples until the
    /// configured number of epochs is complete. Resumed trainers continue
    /// from their step count, so the decay schedule carries over.
    pub fn run(&mut self, raws: &[RawSample], pool: &[ImagePlane], augment: &AugmentConfig, log: impl FnMut(&StepLog)) -> Result<()> {
        let total = self.total_steps(raws.len());
        self.run_until(raws, pool, augment, total, log)
    }

    /// Like [`Trainer::run`] but stops once `until` steps are complete.
    pub fn run_until(
        &mut self,
        raws: &[RawSample],
        pool: &[ImagePlane],
        augment: &AugmentConfig,
        until: u64,
        mut log: impl FnMut(&StepLog),
    ) -> Result<()> {
        if raws.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let spe = self.steps_per_epoch(raws.len()) as u64;
        while self.step < until {
            let epoch = (self.step / spe) as usize;
            let lr = self.config.lr_at_epoch(epoch);
            let batch = self.batch_for_step(raws, pool, augment, self.step)?;
            let loss = self.train_step(&batch, lr)?;
            log(&StepLog {
                step: self.step,
                epoch,
                lr,
                loss,
            });
        }
        Ok(())
    }

    /// Deterministic batch for a global step: raw samples are visited in a
    /// per-epoch shuffled order, each pair with its own seed.
    pub fn batch_for_step(
        &self,
        raws: &[RawSample],
        pool: &[ImagePlane],
        augment: &AugmentConfig,
        step: u64,
    ) -> Result<Vec<SamplePair>> {
        let bs = self.config.batch_size;
        let per_epoch = raws.len();
        let mut out = Vec::with_capacity(bs);
        for j in 0..bs as u64 {
            let slot = step * bs as u64 + j;
            let (cycle, pos) = (slot / per_epoch as u64, (slot % per_epoch as u64) as usize);
            let mut order: Vec<usize> = (0..per_epoch).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed ^ cycle.wrapping_mul(0x2545_F491)));
            let raw = &raws[order[pos]];
            let seed = item_seed(self.config.seed, 7, slot);
            out.push(generate_pair(raw, pool, augment, MaskMode::Train, seed)?.0);
        }
        Ok(out)
    }
}
