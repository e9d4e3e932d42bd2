use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DecoderKind, TrainConfig};
use super::eval::evaluate;
use super::model::{loss, Model, Stage};
use super::optim::{clip_grad_norm, Adam};
use crate::data::{batch_tensor, encode_labels, Charset, Sample};
use crate::error::{Error, Result};
use crate::nn::Ctx;

/// Random stream offset for per-epoch shuffles.
const SHUFFLE_STREAM: u64 = 1 << 32;

/// Mean losses over one epoch plus validation accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub stage: Stage,
    pub l_e: f64,
    pub l_r: f64,
    pub l_f: f64,
    pub total: f64,
    pub val_word_acc: f64,
}

impl EpochStats {
    /// `epoch <k> L_e <v> L_r <v> L_f <v> total <v> val_word_acc <v>`, with
    /// values printed in shortest round-trip form. Absent terms print 0.
    pub fn log_line(&self) -> String {
        format!(
            "epoch {} L_e {} L_r {} L_f {} total {} val_word_acc {}",
            self.epoch, self.l_e, self.l_r, self.l_f, self.total, self.val_word_acc
        )
    }
}

/// Labels of every sample, `N` per sample.
pub fn encode_all(samples: &[Sample], charset: &Charset, max_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len() * max_len);
    for s in samples {
        out.extend(encode_labels(&s.word, charset, max_len)?);
    }
    Ok(out)
}

/// Model, optimizer state and history of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: Adam::new(config.lr),
            model,
            config,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.adam.steps()
    }

    /// One pass over `train` in a seed-determined order. Returns the mean of
    /// each loss term over batches.
    pub fn train_epoch(&mut self, stage: Stage, train: &[Sample], labels: &[usize]) -> Result<[f64; 4]> {
        let n = self.model.config.max_len;
        if labels.len() != train.len() * n {
            return Err(Error::Contract("label buffer does not match training samples".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(SHUFFLE_STREAM + self.epoch as u64);
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let images: Vec<_> = chunk.iter().map(|&i| &train[i].image).collect();
            let batch_labels: Vec<usize> = chunk
                .iter()
                .flat_map(|&i| labels[i * n..(i + 1) * n].iter().copied())
                .collect();
            let x = batch_tensor::<f32>(&images)?;

            let mut cx = Ctx::new(&self.model.params, true);
            let xv = cx.constant(x);
            let terms = loss(
                &mut cx,
                &self.model.config,
                xv,
                &batch_labels,
                stage,
                &self.config.weights,
            )?;
            let value = |v: Option<_>| v.map_or(0.0, |v| cx.g.value(v).item() as f64);
            let step = [
                value(terms.l_e),
                value(terms.l_r),
                value(terms.l_f),
                value(Some(terms.total)),
            ];
            if step.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite loss {step:?} at epoch {} step {}",
                    self.epoch + 1,
                    self.step() + 1
                )));
            }
            cx.g.backward(terms.total)?;
            let mut grads = cx.grads();
            drop(cx);
            if self.config.clip_norm > 0.0 {
                clip_grad_norm(&mut grads, self.config.clip_norm);
            }
            self.adam.update(&mut self.model.params, &grads);
            for (s, v) in sums.iter_mut().zip(step) {
                *s += v;
            }
            batches += 1;
        }
        Ok(sums.map(|s| s / batches.max(1) as f64))
    }

    /// Trains one epoch, validates, and records the result.
    pub fn run_epoch(
        &mut self,
        stage: Stage,
        train: &[Sample],
        labels: &[usize],
        val: &[Sample],
        charset: &Charset,
    ) -> Result<EpochStats> {
        let [l_e, l_r, l_f, total] = self.train_epoch(stage, train, labels)?;
        self.epoch += 1;
        // Warm-up trains only the visual classifier, so that is what gets
        // validated.
        let decoder = self.model.config.decoder;
        if stage == Stage::Warmup {
            self.model.config.decoder = DecoderKind::SrnNoGsrm;
        }
        let val_word_acc = if val.is_empty() {
            Ok(0.0)
        } else {
            evaluate(&self.model, val, charset, self.config.batch_size).map(|m| m.word_accuracy)
        };
        self.model.config.decoder = decoder;
        let val_word_acc = val_word_acc?;
        let stats = EpochStats {
            epoch: self.epoch,
            stage,
            l_e,
            l_r,
            l_f,
            total,
            val_word_acc,
        };
        self.history.push(stats);
        Ok(stats)
    }

    /// Warm-up epochs followed by joint epochs. `on_epoch` sees each
    /// finished epoch.
    pub fn fit(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        charset: &Charset,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<()> {
        let labels = encode_all(train, charset, self.model.config.max_len)?;
        // Decoders without a reasoning module have a single objective, so
        // the warm-up epochs simply train it.
        let warmup = if self.model.config.decoder.has_gsrm() {
            self.config.warmup_epochs
        } else {
            0
        };
        let total_epochs = self.config.warmup_epochs + self.config.joint_epochs;
        while self.epoch < total_epochs {
            let stage = if self.epoch < warmup {
                Stage::Warmup
            } else {
                Stage::Joint
            };
            let stats = self.run_epoch(stage, train, &labels, val, charset)?;
            on_epoch(&stats);
        }
        Ok(())
    }

    pub fn log(&self) -> String {
        self.history.iter().map(|s| s.log_line() + "\n").collect()
    }
}
