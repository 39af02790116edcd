//! The full network: 3-D front end, shared two-view encoder with optional
//! shrinkage and cross-view attention, multi-scale temporal decoder and
//! classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acvi::{cross_view_interact, AcviParams};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Linear};
use crate::params::{ParamStore, Session};
use crate::rao::hidden_width;
use crate::tensor::{Float, Tensor};
use crate::views::{reassemble_var, split_var, SharedEncoder, ViewPair};

/// How the two pooled view embeddings become one per-frame vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMerge {
    #[default]
    Average,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RalConfig {
    pub num_classes: usize,
    pub frontend_channels: usize,
    pub frontend_kernel: [usize; 3],
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// One entry per stage.
    pub acvi_after_stage: Vec<bool>,
    pub tcn_kernels: Vec<usize>,
    /// Output channels of each parallel temporal branch.
    pub tcn_branch_channels: usize,
    pub tcn_layers: usize,
    pub dropout: f64,
    pub rao_reduction: usize,
    pub acvi_shared_layer_norm: bool,
    pub view_merge: ViewMerge,
    pub enable_dlsv: bool,
    pub enable_rao: bool,
    pub enable_acvi: bool,
}

impl Default for RalConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            frontend_channels: 16,
            frontend_kernel: [5, 7, 7],
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            acvi_after_stage: vec![true; 3],
            tcn_kernels: vec![3, 5, 7],
            tcn_branch_channels: 16,
            tcn_layers: 2,
            dropout: 0.2,
            rao_reduction: 4,
            acvi_shared_layer_norm: false,
            view_merge: ViewMerge::Average,
            enable_dlsv: true,
            enable_rao: true,
            enable_acvi: true,
        }
    }
}

impl RalConfig {
    /// Small network used by the synthetic experiments.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            num_classes,
            frontend_channels: 8,
            stage_channels: vec![8, 16],
            acvi_after_stage: vec![true; 2],
            tcn_branch_channels: 8,
            ..Self::default()
        }
    }

    pub fn with_switches(mut self, dlsv: bool, rao: bool, acvi: bool) -> Self {
        self.enable_dlsv = dlsv;
        self.enable_rao = rao;
        self.enable_acvi = acvi;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::contract("config", detail));
        if self.num_classes < 2 {
            return bad(format!("num_classes = {} (need at least 2)", self.num_classes));
        }
        if self.stage_channels.is_empty() {
            return bad("at least one encoder stage is required".into());
        }
        if self.acvi_after_stage.len() != self.stage_channels.len() {
            return bad(format!(
                "acvi_after_stage has {} entries for {} stages",
                self.acvi_after_stage.len(),
                self.stage_channels.len()
            ));
        }
        if self.tcn_kernels.is_empty() || self.tcn_kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("temporal kernels {:?} must be odd and non-empty", self.tcn_kernels));
        }
        let zero = [
            ("frontend_channels", self.frontend_channels),
            ("blocks_per_stage", self.blocks_per_stage),
            ("tcn_branch_channels", self.tcn_branch_channels),
            ("tcn_layers", self.tcn_layers),
            ("rao_reduction", self.rao_reduction),
        ];
        if let Some((name, _)) = zero.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.stage_channels.contains(&0) || self.frontend_kernel.contains(&0) {
            return bad("channel and kernel extents must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn min_frames(&self) -> usize {
        self.tcn_kernels.iter().copied().min().unwrap_or(1)
    }
}

#[derive(Clone, Debug)]
pub struct Frontend {
    pub conv: Conv,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct TemporalBranch {
    pub conv: Conv,
    pub bn: BatchNorm,
}

/// Stacked layers of parallel odd-width 1-D convolutions whose outputs are
/// concatenated along channels.
#[derive(Clone, Debug)]
pub struct TemporalDecoder {
    pub layers: Vec<Vec<TemporalBranch>>,
    pub out_channels: usize,
}

impl TemporalDecoder {
    pub fn forward<S: Float>(&self, sess: &mut Session<'_, S>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            let mut outs = Vec::with_capacity(layer.len());
            for b in layer {
                let h = b.conv.forward(sess, x)?;
                let h = b.bn.forward(sess, h)?;
                outs.push(sess.tape.relu(h)?);
            }
            x = sess.tape.concat(&outs, 1)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct RalNet {
    pub config: RalConfig,
    pub frontend: Frontend,
    pub encoder: SharedEncoder,
    /// Indexed by stage; `None` where no interaction follows the stage.
    pub acvi: Vec<Option<AcviParams>>,
    pub decoder: TemporalDecoder,
    pub head: Linear,
}

impl RalNet {
    pub fn new<S: Float>(config: &RalConfig, store: &mut ParamStore<S>, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let c0 = config.frontend_channels;
        let k = config.frontend_kernel;
        let frontend = Frontend {
            conv: Conv::new(
                store,
                "frontend.conv",
                1,
                c0,
                &k,
                &[1, 2, 2],
                &[k[0] / 2, k[1] / 2, k[2] / 2],
                rng,
            )?,
            bn: BatchNorm::new(store, "frontend.bn", c0)?,
        };
        let rao = config.enable_rao.then_some(config.rao_reduction);
        let encoder = SharedEncoder::new(
            store,
            "encoder",
            c0,
            &config.stage_channels,
            config.blocks_per_stage,
            rao,
            rng,
        )?;
        let acvi = config
            .stage_channels
            .iter()
            .zip(&config.acvi_after_stage)
            .enumerate()
            .map(|(i, (&c, &on))| {
                let sub_seed: u64 = rng.random();
                (config.enable_acvi && on)
                    .then(|| {
                        let mut sub = ChaCha8Rng::seed_from_u64(sub_seed);
                        AcviParams::new(store, &format!("acvi{i}"), c, config.acvi_shared_layer_norm, &mut sub)
                    })
                    .transpose()
            })
            .collect::<Result<_>>()?;

        let mut c_in = Self::embedding_width(config);
        let mut layers = Vec::with_capacity(config.tcn_layers);
        for l in 0..config.tcn_layers {
            let branches = config
                .tcn_kernels
                .iter()
                .map(|&k| {
                    let name = format!("decoder.layer{l}.k{k}");
                    Ok(TemporalBranch {
                        conv: Conv::new(
                            store,
                            &format!("{name}.conv"),
                            c_in,
                            config.tcn_branch_channels,
                            &[k],
                            &[1],
                            &[k / 2],
                            rng,
                        )?,
                        bn: BatchNorm::new(store, &format!("{name}.bn"), config.tcn_branch_channels)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(branches);
            c_in = config.tcn_branch_channels * config.tcn_kernels.len();
        }
        let decoder = TemporalDecoder {
            layers,
            out_channels: c_in,
        };
        let head = Linear::new(store, "head", c_in, config.num_classes, rng)?;
        Ok(Self {
            config: config.clone(),
            frontend,
            encoder,
            acvi,
            decoder,
            head,
        })
    }

    /// Width of the per-frame embedding fed to the temporal decoder.
    pub fn embedding_width(config: &RalConfig) -> usize {
        let c = *config.stage_channels.last().expect("validated");
        match (config.enable_dlsv, config.view_merge) {
            (true, ViewMerge::Concat) => 2 * c,
            _ => c,
        }
    }

    /// Logits `[B, K]` for clips `[B, 1, T, H, W]`.
    pub fn forward<S: Float>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let shape = sess.tape.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != 1 {
            return Err(Error::dim("forward", format!("need [B, 1, T, H, W], got {shape:?}")));
        }
        let (b, t) = (shape[0], shape[2]);
        if t < cfg.min_frames() {
            return Err(Error::dim(
                "forward",
                format!("{t} frames is fewer than the smallest temporal kernel {}", cfg.min_frames()),
            ));
        }

        let h = self.frontend.conv.forward(sess, x)?;
        let h = self.frontend.bn.forward(sess, h)?;
        let h = sess.tape.relu(h)?;
        let h = sess.tape.permute(h, &[0, 2, 1, 3, 4])?;
        let s = sess.tape.shape(h).to_vec();
        let h = sess.tape.reshape(h, vec![b * t, s[2], s[3], s[4]])?;
        let h = sess.tape.max_pool2d(h, 2, 2)?;

        let pooled = if cfg.enable_dlsv {
            let mut pair = split_var(&mut sess.tape, h)?;
            for (stage, acvi) in self.encoder.stages.iter().zip(&self.acvi) {
                pair = stage.forward_pair(sess, pair)?;
                if let Some(p) = acvi {
                    let (l, r) = cross_view_interact(sess, pair.left, pair.right, p)?;
                    pair.left = l;
                    pair.right = r;
                }
            }
            let gl = sess.tape.global_avg_pool(pair.left)?;
            let gr = sess.tape.global_avg_pool(pair.right)?;
            match cfg.view_merge {
                ViewMerge::Average => {
                    let sum = sess.tape.add(gl, gr)?;
                    sess.tape.scale(sum, 0.5)?
                }
                ViewMerge::Concat => sess.tape.concat(&[gl, gr], 1)?,
            }
        } else {
            let mut h = h;
            for (stage, acvi) in self.encoder.stages.iter().zip(&self.acvi) {
                h = stage.forward(sess, h)?;
                if let Some(p) = acvi {
                    // Without the view split the halves are only formed
                    // around the interaction and joined again afterwards.
                    let pair = split_var(&mut sess.tape, h)?;
                    let (l, r) = cross_view_interact(sess, pair.left, pair.right, p)?;
                    h = reassemble_var(
                        &mut sess.tape,
                        &ViewPair {
                            left: l,
                            right: r,
                            ..pair
                        },
                    )?;
                }
            }
            sess.tape.global_avg_pool(h)?
        };

        let e = Self::embedding_width(cfg);
        let seq = sess.tape.reshape(pooled, vec![b, t, e])?;
        let seq = sess.tape.permute(seq, &[0, 2, 1])?;
        let feats = self.decoder.forward(sess, seq)?;
        let clip = sess.tape.mean_axis(feats, 2)?;
        let clip = sess.dropout(clip, cfg.dropout)?;
        self.head.forward(sess, clip)
    }
}

/// Network structure plus its parameter values.
#[derive(Clone, Debug)]
pub struct RalModel<S: Float = f32> {
    pub net: RalNet,
    pub store: ParamStore<S>,
}

impl<S: Float> RalModel<S> {
    pub fn new(config: &RalConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = RalNet::new(config, &mut store, seed)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &RalConfig {
        &self.net.config
    }

    /// Runs a forward pass and hands back the live session for backward.
    pub fn forward(&mut self, x: &Tensor<S>, train: bool, seed: u64) -> Result<(Session<'_, S>, Var)> {
        let mut sess = Session::new(&mut self.store, train, seed);
        let xv = sess.tape.constant(x.clone());
        let logits = self.net.forward(&mut sess, xv)?;
        Ok((sess, logits))
    }

    /// Evaluation-mode logits.
    pub fn logits(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (sess, y) = self.forward(x, false, 0)?;
        Ok(sess.tape.value(y).clone())
    }

    pub fn predict(&mut self, x: &Tensor<S>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Training-mode loss; gradients are added into the store. Returns the
    /// loss and the batch predictions.
    pub fn loss_and_backward(&mut self, x: &Tensor<S>, labels: &[usize], seed: u64) -> Result<(f64, Vec<usize>)> {
        let (mut sess, logits) = self.forward(x, true, seed)?;
        let preds = argmax_rows(sess.tape.value(logits));
        let loss = sess.tape.cross_entropy_logits(logits, labels)?;
        let value = sess.tape.data(loss)[0].as_f64();
        sess.backward(loss)?;
        Ok((value, preds))
    }

    pub fn cast<T: Float>(&self) -> RalModel<T> {
        RalModel {
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<S: Float>(logits: &Tensor<S>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Trainable scalars added by one threshold subnet on `channels` channels.
pub fn rao_param_count(channels: usize, reduction: usize) -> usize {
    let h = hidden_width(channels, reduction);
    2 * channels * h + h + channels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::randn;

    fn tiny(dlsv: bool, rao: bool, acvi: bool) -> RalConfig {
        RalConfig {
            num_classes: 3,
            frontend_channels: 4,
            stage_channels: vec![4, 8],
            acvi_after_stage: vec![true, true],
            tcn_branch_channels: 4,
            ..RalConfig::default()
        }
        .with_switches(dlsv, rao, acvi)
    }

    fn clip(b: usize, t: usize, hw: usize, seed: u64) -> Tensor<f64> {
        randn(&[b, 1, t, hw, hw], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn logits_have_batch_by_class_shape() {
        let cfg = RalConfig {
            num_classes: 10,
            ..tiny(true, true, true)
        };
        let mut m = RalModel::<f64>::new(&cfg, 0).unwrap();
        let y = m.logits(&clip(2, 8, 32, 1)).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
        assert!(y.is_finite());
    }

    #[test]
    fn too_few_frames_is_dimension_error() {
        let mut m = RalModel::<f64>::new(&tiny(true, true, true), 0).unwrap();
        let err = m.logits(&clip(1, 2, 16, 1)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny(true, true, true);
        cfg.acvi_after_stage.pop();
        assert!(RalModel::<f32>::new(&cfg, 0).is_err());
        let cfg = RalConfig {
            tcn_kernels: vec![4],
            ..tiny(false, false, false)
        };
        assert!(RalModel::<f32>::new(&cfg, 0).is_err());
    }

    #[test]
    fn parameter_bookkeeping() {
        let count = |d, r, a| RalModel::<f32>::new(&tiny(d, r, a), 0).unwrap().trainable_count();
        let base = count(false, false, false);
        assert_eq!(count(true, false, false), base);
        let rao: usize = [4usize, 8].iter().map(|&c| rao_param_count(c, 4)).sum();
        assert_eq!(count(false, true, false), base + rao);
        let acvi: usize = [4usize, 8].iter().map(|&c| AcviParams::expected_count(c, false)).sum();
        assert_eq!(count(false, false, true), base + acvi);
        assert_eq!(count(true, true, true), base + rao + acvi);
    }

    #[test]
    fn switches_do_not_change_shared_initial_weights() {
        let full = RalModel::<f32>::new(&tiny(true, true, true), 9).unwrap();
        let base = RalModel::<f32>::new(&tiny(false, false, false), 9).unwrap();
        for p in base.store.iter() {
            assert_eq!(full.store.by_name(&p.name).unwrap().tensor.data(), p.tensor.data(), "{}", p.name);
        }
    }

    #[test]
    fn concat_merge_widens_decoder_input() {
        let cfg = RalConfig {
            view_merge: ViewMerge::Concat,
            ..tiny(true, false, false)
        };
        let mut m = RalModel::<f64>::new(&cfg, 0).unwrap();
        assert_eq!(m.logits(&clip(2, 4, 16, 2)).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn acvi_without_split_starts_as_identity() {
        let x = clip(2, 4, 16, 3);
        let mut plain = RalModel::<f64>::new(&tiny(false, false, false), 5).unwrap();
        let mut with = RalModel::<f64>::new(&tiny(false, false, true), 5).unwrap();
        assert_eq!(plain.logits(&x).unwrap(), with.logits(&x).unwrap());
    }

    #[test]
    fn argmax_prefers_first_of_ties() {
        let t = Tensor::<f32>::from_f64(vec![2, 3], &[1.0, 3.0, 3.0, 0.0, -1.0, -2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
