//! AdamW with a cosine schedule, the epoch loop, and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, Dataset, Preprocess};
use crate::error::{Error, Result};
use crate::model::RalModel;
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to `ParamKind::Weight`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            min_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Learning rate for `epoch` of `epochs`: `lr` at the first epoch, `min_lr`
/// at the last, half-cosine in between.
pub fn cosine_lr(cfg: &AdamConfig, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return cfg.lr;
    }
    let p = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new<S: Float>(config: AdamConfig, store: &ParamStore<S>) -> Self {
        let zeros: Vec<Vec<f32>> = store
            .iter()
            .map(|p| if p.kind.trainable() { vec![0.0; p.tensor.len()] } else { Vec::new() })
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients accumulated in `store`, which are then
    /// cleared.
    pub fn update<S: Float>(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract(
                "adamw",
                format!("optimizer tracks {} parameters, store has {}", self.m.len(), store.len()),
            ));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.kind.trainable() {
                continue;
            }
            let Some(g) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            let decay = if p.kind.decays() { lr * c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64();
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mut x = w.as_f64() * (1.0 - decay);
                x -= lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                *w = S::of(x);
            }
            p.tensor.zero_grad();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Applied per clip when batches are drawn; `None` feeds clips as stored.
    pub preprocess: Option<Preprocess>,
    /// Random temporal window length in training; evaluation sees full clips.
    pub temporal_crop: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig::default(),
            preprocess: None,
            temporal_crop: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("train_config", "epochs and batch_size must be positive"));
        }
        if !(self.adam.lr > 0.0 && self.adam.min_lr >= 0.0 && self.adam.weight_decay >= 0.0) {
            return Err(Error::contract("train_config", format!("bad optimizer settings {:?}", self.adam)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a, b] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Draws a batch, applying preprocessing and temporal cropping as
/// configured. All randomness comes from `rng`.
fn draw_batch(
    ds: &Dataset,
    idx: &[usize],
    pre: Option<&Preprocess>,
    temporal_crop: Option<usize>,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    if pre.is_none() && (temporal_crop.is_none() || !train) {
        return ds.batch(idx);
    }
    let mut frames = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &ds.samples[i];
        let mut f = match pre {
            Some(p) => preprocess(&s.frames, p, train, rng)?,
            None => s.frames.clone(),
        };
        if let (true, Some(len)) = (train, temporal_crop) {
            let t = f.shape()[0];
            if len < t {
                let start = rng.random_range(0..=t - len);
                let hw = f.len() / t;
                let data = f.data()[start * hw..(start + len) * hw].to_vec();
                let shape = vec![len, f.shape()[1], f.shape()[2]];
                f = Tensor::new(shape, data)?;
            }
        }
        frames.push(f);
        labels.push(s.label);
    }
    let shape = frames[0].shape().to_vec();
    let mut data = Vec::with_capacity(frames.len() * frames[0].len());
    for f in &frames {
        data.extend_from_slice(f.data());
    }
    let mut full = vec![frames.len(), 1];
    full.extend(shape);
    Ok((Tensor::new(full, data)?, labels))
}

/// A model, its optimizer, and how far training has got.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: RalModel<f32>,
    pub opt: AdamW,
    pub config: TrainConfig,
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

impl Trainer {
    pub fn new(model: RalModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(config.adam.clone(), &model.store);
        Ok(Self {
            model,
            opt,
            config,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(&self.config.adam, self.epoch, self.config.epochs)
    }

    /// One pass over `train` in a shuffled order that depends only on the
    /// seed and the epoch index.
    pub fn train_epoch(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(Error::contract("train_epoch", "empty training set"));
        }
        let epoch = self.epoch;
        let lr = self.lr();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, idx) in order.chunks(self.config.batch_size).enumerate() {
            let (x, labels) = draw_batch(
                train,
                idx,
                self.config.preprocess.as_ref(),
                self.config.temporal_crop,
                true,
                &mut rng,
            )?;
            let (loss, preds) = self
                .model
                .loss_and_backward(&x, &labels, mix(self.config.seed, epoch as u64, step as u64))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "cross_entropy" });
            }
            self.opt.update(&mut self.model.store, lr)?;
            loss_sum += loss * idx.len() as f64;
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let val_acc = match val {
            Some(v) => Some(evaluate(&self.model, v, self.config.batch_size, self.config.preprocess.as_ref())?),
            None => None,
        };
        let stats = EpochStats {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
            lr,
        };
        self.epoch += 1;
        self.history.push(stats.clone());
        Ok(stats)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        mut on_epoch: impl FnMut(&Trainer, &EpochStats) -> Result<()>,
    ) -> Result<()> {
        while !self.done() {
            let stats = self.train_epoch(train, val)?;
            on_epoch(self, &stats)?;
        }
        Ok(())
    }
}

/// Fraction of clips whose argmax logit matches the label. Batches are
/// evaluated in parallel on copies of the model; eval-mode forward treats
/// clips independently, so the result does not depend on the sharding.
pub fn evaluate(model: &RalModel<f32>, ds: &Dataset, batch_size: usize, pre: Option<&Preprocess>) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::contract("evaluate", "empty dataset"));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let counts = idx
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (x, labels) = draw_batch(ds, chunk, pre, None, false, &mut rng)?;
            let preds = model.clone().predict(&x)?;
            Ok(preds.iter().zip(&labels).filter(|(p, l)| p == l).count())
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(counts.iter().sum::<usize>() as f64 / ds.len() as f64)
}

/// Accuracy of fixed predictions; the evaluation rule without a model.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || preds.len() != labels.len() {
        return Err(Error::contract(
            "accuracy",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthSpec};
    use crate::model::{argmax_rows, RalConfig};
    use crate::params::ParamKind;

    #[test]
    fn schedule_endpoints() {
        let c = AdamConfig::default();
        assert_eq!(cosine_lr(&c, 0, 30), 3e-4);
        assert!((cosine_lr(&c, 29, 30) - 1e-6).abs() < 1e-18);
        let mid = cosine_lr(&c, 15, 31);
        assert!((mid - (1e-6 + 3e-4) / 2.0).abs() < 1e-15);
        for e in 1..30 {
            assert!(cosine_lr(&c, e, 30) < cosine_lr(&c, e - 1, 30));
        }
    }

    #[test]
    fn decay_skips_norms_and_biases() {
        let mut store = ParamStore::<f32>::new();
        let kinds = [ParamKind::Weight, ParamKind::Bias, ParamKind::Norm, ParamKind::Buffer];
        for (i, k) in kinds.iter().enumerate() {
            store.add(format!("p{i}"), Tensor::full(vec![1], 1.0), *k).unwrap();
        }
        for p in store.iter_mut() {
            if p.kind.trainable() {
                p.tensor.accumulate_grad(&[0.0]);
            }
        }
        let cfg = AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.update(&mut store, 0.1).unwrap();
        let vals: Vec<f32> = store.iter().map(|p| p.tensor.data()[0]).collect();
        assert_eq!(vals, vec![0.95, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::full(vec![2], 0.0), ParamKind::Bias).unwrap();
        store.iter_mut().next().unwrap().tensor.accumulate_grad(&[2.0, -0.5]);
        let mut opt = AdamW::new(AdamConfig::default(), &store);
        opt.update(&mut store, 1e-2).unwrap();
        let w = store.iter().next().unwrap().tensor.data().to_vec();
        assert!((w[0] + 1e-2).abs() < 1e-7 && (w[1] - 1e-2).abs() < 1e-7, "{w:?}");
    }

    #[test]
    fn constant_predictor_scores_one_over_k() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        assert_eq!(accuracy(&vec![2; 40], &labels).unwrap(), 0.25);
        let logits = Tensor::new(
            vec![40, 4],
            labels.iter().flat_map(|&l| (0..4).map(move |c| if c == l { 5.0 } else { 0.0 })).collect(),
        )
        .unwrap();
        assert_eq!(accuracy(&argmax_rows(&logits), &labels).unwrap(), 1.0);
    }

    #[test]
    fn empty_dataset_rejected() {
        let model = RalModel::<f32>::new(&RalConfig::desk(4), 0).unwrap();
        let ds = Dataset::new(Vec::new(), 4).unwrap();
        assert!(matches!(evaluate(&model, &ds, 8, None), Err(Error::Contract { .. })));
    }

    #[test]
    fn two_hundred_steps_beat_chance() {
        let spec = SynthSpec {
            frames: 4,
            height: 16,
            width: 16,
            ..SynthSpec::default()
        };
        let ds = Dataset::new(generate(&spec, 64).unwrap(), 4).unwrap();
        let mut cfg = RalConfig::desk(4);
        cfg.stage_channels = vec![8];
        cfg.acvi_after_stage = vec![true];
        let model = RalModel::new(&cfg, 1).unwrap();
        let mut t = Trainer::new(
            model,
            TrainConfig {
                epochs: 50,
                batch_size: 16,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            last = t.train_epoch(&ds, None).unwrap().loss;
        }
        assert_eq!(t.opt.step, 200);
        assert!(last < (4f64).ln(), "{last}");
    }
}
