use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ddpm::{draw_training_example, NoiseSchedule};
use crate::error::{Error, Result};
use crate::ldt::{Ldt, SequenceCondition};

/// A clean token sequence `(T, N, C·P³)` and its conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub tokens: Vec<f64>,
    pub cond: SequenceCondition,
}

/// Adam on the L1 noise-prediction loss. All randomness (batch choice, τ,
/// ε) comes from one seeded generator, so a run is reproducible.
pub struct Trainer {
    model: Ldt,
    opt: AdamW,
    sched: NoiseSchedule,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: Ldt, sched: NoiseSchedule, lr: f64, seed: u64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config(format!("learning rate must be > 0, got {lr}")));
        }
        let params = ParamsAdamW { lr, weight_decay: 0.0, ..ParamsAdamW::default() };
        let opt = AdamW::new(model.params().vars().to_vec(), params)?;
        Ok(Trainer { model, opt, sched, rng: ChaCha8Rng::seed_from_u64(seed), step: 0 })
    }

    pub fn model(&self) -> &Ldt {
        &self.model
    }

    pub fn into_model(self) -> Ldt {
        self.model
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// Indices of the next mini-batch: without replacement when the set is
    /// large enough, otherwise every example once.
    pub fn next_batch(&mut self, n_examples: usize, batch: usize) -> Vec<usize> {
        if batch >= n_examples {
            return (0..n_examples).collect();
        }
        sample_indices(&mut self.rng, n_examples, batch).into_vec()
    }

    /// Loss on a batch for the given draw, as a graph node.
    fn batch_loss(&mut self, batch: &[&TrainingExample]) -> Result<Tensor> {
        let first = batch.first().ok_or_else(|| Error::invalid("empty training batch"))?;
        if batch.iter().any(|e| e.tokens.len() != first.tokens.len()) {
            return Err(Error::invalid("training examples in a batch must have equal length"));
        }
        let z0: Vec<f64> = batch.iter().flat_map(|e| e.tokens.iter().copied()).collect();
        let draw = draw_training_example(&z0, batch.len(), &self.sched, &mut self.rng)?;
        let conds: Vec<&SequenceCondition> = batch.iter().map(|e| &e.cond).collect();
        let eps_hat = self.model.forward_host(&draw.z_tau, &draw.taus, &conds)?;
        let eps = self.model.tensor(draw.eps, eps_hat.dims())?;
        Ok((eps - eps_hat)?.abs()?.mean_all()?)
    }

    /// One optimizer update; returns the batch loss before the update.
    pub fn train_step(&mut self, batch: &[&TrainingExample]) -> Result<f64> {
        let loss = self.batch_loss(batch)?;
        self.opt.backward_step(&loss)?;
        self.step += 1;
        Ok(loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    }

    /// Loss on a batch without updating parameters.
    pub fn eval_loss(&mut self, batch: &[&TrainingExample]) -> Result<f64> {
        let loss = self.batch_loss(batch)?;
        Ok(loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    }
}
